//! Adam and the two training phases: fit a teacher on labels, then fit a
//! student on labels plus the frozen teacher's softened outputs.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, AugmentPolicy, DatasetSplit, Sample};
use crate::distill::{distillation_loss_on, DistillConfig, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::metrics::{confusion_named, metrics, Averaging, ConfusionMatrix, MetricsReport};
use crate::models::ModelGraph;
use crate::tensor::{Element, Mode, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Element = f32> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl<S: Element> AdamState<S> {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let zeros: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<S: Element>(params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], state: &mut AdamState<S>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    let c1 = S::of(1.0 - beta1.powf(state.t as f64));
    let c2 = S::of(1.0 - beta2.powf(state.t as f64));
    let (b1, b2) = (S::of(beta1), S::of(beta2));
    let (one_b1, one_b2) = (S::of(1.0 - beta1), S::of(1.0 - beta2));
    let (lr, eps) = (S::of(lr), S::of(eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Floating-point width used for the training arithmetic. Checkpoints are
/// always stored as f32.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}; expected f32 or f64"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub precision: Precision,
    pub shuffle: bool,
    /// On-the-fly augmentation of training batches.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            lr: 0.001,
            precision: Precision::F32,
            shuffle: true,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Per-epoch losses plus the epoch whose weights were kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation accuracy; ties go to the
    /// lower validation loss, then the earlier epoch.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

/// Class predictions with their softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// `[N, num_classes]`.
    pub probs: Tensor<f32>,
}

const EVAL_BATCH: usize = 64;

fn check_compatible<S: Element>(model: &ModelGraph<S>, data: &DatasetSplit) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if model.num_classes() != data.num_classes() {
        return Err(Error::contract(format!(
            "model {} has {} classes, dataset has {}",
            model.name(),
            model.num_classes(),
            data.num_classes()
        )));
    }
    if let Some(shape) = data.image_shape() {
        if shape != model.input_shape() {
            return Err(Error::contract(format!(
                "model {} expects {:?} inputs, dataset images are {shape:?}",
                model.name(),
                model.input_shape()
            )));
        }
    }
    Ok(())
}

/// Inference over `samples` in fixed-size batches; ties go to the lowest class.
pub fn predict(model: &ModelGraph<f32>, samples: &[Sample]) -> Result<Predictions> {
    predict_generic(model, samples)
}

fn predict_generic<S: Element>(model: &ModelGraph<S>, samples: &[Sample]) -> Result<Predictions> {
    let k = model.num_classes();
    let mut labels = Vec::with_capacity(samples.len());
    let mut probs = Vec::with_capacity(samples.len() * k);
    for (x, _) in batches(samples, EVAL_BATCH, 0, false, None)? {
        let logits = model.logits(&x.cast())?;
        let p = crate::distill::soften(&logits, 1.0)?;
        labels.extend(p.argmax_rows());
        probs.extend(p.data().iter().map(|v| v.as_f64() as f32));
    }
    Ok(Predictions {
        labels,
        probs: Tensor::new(vec![samples.len(), k], probs)?,
    })
}

/// Confusion matrix and scores of `model` on `samples`.
pub fn evaluate_metrics(
    model: &ModelGraph<f32>,
    samples: &[Sample],
    class_names: &[String],
    averaging: Averaging,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let pred = predict(model, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cm = confusion_named(&truth, &pred.labels, class_names.to_vec())?;
    let report = metrics(&cm, averaging)?;
    Ok((cm, report))
}

/// Mean clamped cross-entropy and accuracy on `samples`.
fn evaluate<S: Element>(model: &ModelGraph<S>, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let pred = predict_generic(model, samples)?;
    let k = model.num_classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let p = pred.probs.data()[i * k + s.label] as f64;
        loss -= p.max(PROB_FLOOR).ln();
        correct += (pred.labels[i] == s.label) as usize;
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn fit<S: Element>(
    student: &mut ModelGraph<S>,
    teacher: Option<&ModelGraph<S>>,
    data: &DatasetSplit,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(adam, student.params().iter().map(|p| &p.value));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, f64, Vec<Tensor<S>>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let it = batches(
            &data.train,
            cfg.batch_size,
            cfg.seed.wrapping_add(epoch as u64),
            cfg.shuffle,
            cfg.augment.as_ref(),
        )?;
        for (x, labels) in it {
            let x: Tensor<S> = x.cast();
            let teacher_logits = match teacher {
                Some(t) if dcfg.alpha != 1.0 => Some(t.logits(&x)?),
                _ => None,
            };
            let mut tape = Tape::new();
            let input = tape.leaf(x);
            let pass = student.forward(&mut tape, input, Mode::Train, &mut dropout_rng)?;
            let loss = distillation_loss_on(&mut tape, teacher_logits.as_ref(), pass.logits, &labels, dcfg)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += value * labels.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor<S>> = pass.params.iter().map(|&v| grads.take(v)).collect();
            let mut params: Vec<&mut Tensor<S>> = student.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adam_step(&mut params, &g, &mut state)?;
        }
        let (val_loss, val_acc) = evaluate(student, &data.val)?;
        let train_loss = loss_sum / data.train.len() as f64;
        log::info!("{} epoch {epoch}: train_loss {train_loss:.4} val_loss {val_loss:.4} val_acc {val_acc:.4}", student.name());
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        let better = best
            .as_ref()
            .is_none_or(|&(acc, loss, _)| val_acc > acc || (val_acc == acc && val_loss < loss));
        if !data.val.is_empty() && better {
            best = Some((val_acc, val_loss, student.params().iter().map(|p| p.value.clone()).collect()));
            history.best_epoch = epoch;
        }
    }
    match best {
        Some((_, _, params)) => student.set_params(params)?,
        None => history.best_epoch = cfg.epochs,
    }
    Ok(history)
}

fn with_precision(
    model: &mut ModelGraph<f32>,
    teacher: Option<&ModelGraph<f32>>,
    data: &DatasetSplit,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    match cfg.precision {
        Precision::F32 => fit(model, teacher, data, dcfg, cfg),
        Precision::F64 => {
            let mut wide: ModelGraph<f64> = model.cast();
            let teacher: Option<ModelGraph<f64>> = teacher.map(|t| t.cast());
            let history = fit(&mut wide, teacher.as_ref(), data, dcfg, cfg)?;
            *model = wide.cast();
            Ok(history)
        }
    }
}

/// Minibatch Adam on the clamped cross-entropy of the labels. The returned
/// model carries the weights of the best validation epoch.
pub fn train_teacher(mut model: ModelGraph<f32>, data: &DatasetSplit, cfg: &TrainConfig) -> Result<(ModelGraph<f32>, TrainHistory)> {
    cfg.validate()?;
    check_compatible(&model, data)?;
    let hard_only = DistillConfig {
        alpha: 1.0,
        ..DistillConfig::default()
    };
    let history = with_precision(&mut model, None, data, &hard_only, cfg)?;
    Ok((model, history))
}

/// Train `student` against labels and the softened outputs of the frozen
/// `teacher`. The teacher runs in inference mode and is never updated.
pub fn distill_student(
    teacher: &ModelGraph<f32>,
    mut student: ModelGraph<f32>,
    data: &DatasetSplit,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<(ModelGraph<f32>, TrainHistory)> {
    cfg.validate()?;
    dcfg.validate()?;
    check_compatible(&student, data)?;
    check_compatible(teacher, data)?;
    let history = with_precision(&mut student, Some(teacher), data, dcfg, cfg)?;
    Ok((student, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_dcsnet;

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = Tensor::<f64>::new(vec![2], vec![0.5, -1.0]).unwrap();
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let before = p.clone();
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut state).unwrap();
        }
        assert_eq!(p, before);
        let mut q = Tensor::<f64>::scalar(0.0);
        let mut s = AdamState::new(AdamConfig::default(), [&q]);
        s.m[0] = Tensor::scalar(1.0);
        s.v[0] = Tensor::scalar(1.0);
        adam_step(&mut [&mut q], &[Tensor::scalar(0.0)], &mut s).unwrap();
        assert!((s.m[0].item() - 0.9).abs() < 1e-15);
        assert!((s.v[0].item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut [&mut p], &[Tensor::scalar(-3.0)], &mut state).unwrap();
            step = p.item() - prev;
            prev = p.item();
        }
        assert!(step > 0.0);
        assert!((step - 0.001).abs() < 1e-6, "{step}");
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let r = adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut state);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    fn tiny_split(n: usize) -> DatasetSplit {
        let spec = crate::data::SynthSpec {
            per_class: n,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let d = crate::data::synth_generate(&spec).unwrap();
        DatasetSplit {
            train: d.samples.clone(),
            val: d.samples[..3].to_vec(),
            test: vec![],
            class_names: d.class_names,
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let model = build_dcsnet::<f32>([3, 16, 16], 3, 0).unwrap();
        let mut data = tiny_split(2);
        data.train.clear();
        assert!(matches!(train_teacher(model.clone(), &data, &TrainConfig::default()), Err(Error::Contract(_))));
        let model4 = build_dcsnet::<f32>([3, 16, 16], 4, 0).unwrap();
        assert!(train_teacher(model4, &tiny_split(2), &TrainConfig::default()).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let model = build_dcsnet::<f32>([3, 16, 16], 3, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let (_, h) = train_teacher(model, &tiny_split(3), &cfg).unwrap();
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,val_acc");
        assert_eq!(lines.len(), 3);
        assert!((1..=2).contains(&h.best_epoch));
    }
}
