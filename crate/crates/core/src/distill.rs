//! Temperature-softened probabilities and the distillation losses.
//!
//! The student minimises `alpha * hard + (1 - alpha) * soft`, where the
//! hard term is categorical cross-entropy of the student's ordinary softmax
//! against the labels and the soft term compares teacher and student
//! distributions after dividing both sets of logits by a temperature `T`.
//!
//! Each loss exists in two forms: a pure function over tensors and a
//! `*_on` variant that records onto a [`Tape`] for training. The pure forms
//! run the tape forms on a scratch tape, so both share one implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// How the soft term compares teacher and student distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftVariant {
    /// `sum p_t (ln p_t - ln p_s)`.
    KlDivergence,
    /// `-sum p_t ln p_s`; differs from KL by the teacher entropy.
    CrossEntropy,
}

impl std::str::FromStr for SoftVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl_divergence" | "kl" => Ok(Self::KlDivergence),
            "cross_entropy" | "ce" => Ok(Self::CrossEntropy),
            other => Err(Error::Config(format!("unknown soft-loss variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the hard (label) loss.
    pub alpha: f64,
    pub soft_variant: SoftVariant,
    /// Multiply the soft term by `T^2`.
    pub t_squared_scaling: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            alpha: 0.3,
            soft_variant: SoftVariant::KlDivergence,
            t_squared_scaling: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        check_alpha(self.alpha)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::contract(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Record `softmax(logits / T)`.
pub fn soften_on<S: Element>(tape: &mut Tape<S>, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = if temperature == 1.0 {
        logits
    } else {
        tape.scale(logits, S::of(1.0 / temperature))
    };
    tape.softmax(scaled)
}

/// Row-wise `softmax(logits / T)`.
pub fn soften<S: Element>(logits: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let p = soften_on(&mut tape, z, temperature)?;
    Ok(tape.value(p).clone())
}

/// Record the soft loss between fixed teacher logits and student logits.
pub fn soft_loss_on<S: Element>(
    tape: &mut Tape<S>,
    teacher_logits: &Tensor<S>,
    student_logits: Var,
    cfg: &DistillConfig,
) -> Result<Var> {
    check_temperature(cfg.temperature)?;
    if teacher_logits.shape() != tape.shape(student_logits) {
        return Err(Error::dim(format!(
            "soft loss: teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            tape.shape(student_logits)
        )));
    }
    let target = soften(teacher_logits, cfg.temperature)?;
    let student = soften_on(tape, student_logits, cfg.temperature)?;
    let floor = S::of(PROB_FLOOR);
    let loss = match cfg.soft_variant {
        SoftVariant::KlDivergence => tape.kl_divergence(student, target, floor)?,
        SoftVariant::CrossEntropy => tape.soft_cross_entropy(student, target, floor)?,
    };
    Ok(if cfg.t_squared_scaling {
        tape.scale(loss, S::of(cfg.temperature * cfg.temperature))
    } else {
        loss
    })
}

/// Batch-mean soft loss.
pub fn soft_loss<S: Element>(teacher_logits: &Tensor<S>, student_logits: &Tensor<S>, cfg: &DistillConfig) -> Result<S> {
    let mut tape = Tape::new();
    let z = tape.leaf(student_logits.clone());
    let l = soft_loss_on(&mut tape, teacher_logits, z, cfg)?;
    Ok(tape.value(l).item())
}

/// Record categorical cross-entropy of already-normalised probabilities.
pub fn hard_loss_on<S: Element>(tape: &mut Tape<S>, student_probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll_clamped(student_probs, labels, S::of(PROB_FLOOR))
}

/// Batch mean of `-ln(max(p[label], 1e-12))`.
pub fn hard_loss<S: Element>(student_probs: &Tensor<S>, labels: &[usize]) -> Result<S> {
    if student_probs.rank() == 2 {
        let tol = 1e-4;
        for i in 0..student_probs.shape()[0] {
            let s: f64 = student_probs.row(i).iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::contract(format!("row {i} of student probabilities sums to {s}")));
            }
        }
    }
    let mut tape = Tape::new();
    let p = tape.leaf(student_probs.clone());
    let l = hard_loss_on(&mut tape, p, labels)?;
    Ok(tape.value(l).item())
}

/// `alpha * hard + (1 - alpha) * soft`.
pub fn total_loss<S: Element>(hard: S, soft: S, alpha: f64) -> Result<S> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(hard);
    }
    if alpha == 0.0 {
        return Ok(soft);
    }
    Ok(S::of(alpha) * hard + S::of(1.0 - alpha) * soft)
}

pub fn total_loss_on<S: Element>(tape: &mut Tape<S>, hard: Var, soft: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(hard);
    }
    if alpha == 0.0 {
        return Ok(soft);
    }
    let h = tape.scale(hard, S::of(alpha));
    let s = tape.scale(soft, S::of(1.0 - alpha));
    tape.add(h, s)
}

/// Full distillation objective for one batch recorded on `tape`. At
/// `alpha = 1` the soft term is never built.
pub fn distillation_loss_on<S: Element>(
    tape: &mut Tape<S>,
    teacher_logits: Option<&Tensor<S>>,
    student_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let probs = tape.softmax(student_logits)?;
    let hard = hard_loss_on(tape, probs, labels)?;
    if cfg.alpha == 1.0 {
        return Ok(hard);
    }
    let teacher = teacher_logits.ok_or_else(|| Error::contract("soft loss needs teacher logits"))?;
    let soft = soft_loss_on(tape, teacher, student_logits, cfg)?;
    total_loss_on(tape, hard, soft, cfg.alpha)
}

/// Value and student-logit gradient of the distillation objective.
pub fn distillation_loss_and_grad<S: Element>(
    teacher_logits: &Tensor<S>,
    student_logits: &Tensor<S>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(S, Tensor<S>)> {
    let mut tape = Tape::new();
    let z = tape.leaf(student_logits.clone());
    let loss = distillation_loss_on(&mut tape, Some(teacher_logits), z, labels, cfg)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.get(z)))
}

/// Value and student-logit gradient of the soft term alone.
pub fn soft_loss_and_grad<S: Element>(
    teacher_logits: &Tensor<S>,
    student_logits: &Tensor<S>,
    cfg: &DistillConfig,
) -> Result<(S, Tensor<S>)> {
    let mut tape = Tape::new();
    let z = tape.leaf(student_logits.clone());
    let loss = soft_loss_on(&mut tape, teacher_logits, z, cfg)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.get(z)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn soften_examples() {
        let p = soften(&t(&[1, 3], &[0.0, 0.0, 0.0]), 7.0).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let z = t(&[1, 3], &[2.0, 1.0, 0.0]);
        let p = soften(&z, 2.0).unwrap();
        let norm = 1f64.exp() + 0.5f64.exp() + 1.0;
        let oracle = [1f64.exp() / norm, 0.5f64.exp() / norm, 1.0 / norm];
        for (a, b) in p.data().iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.data()[0] - 0.50648).abs() < 1e-5);
        assert!((p.data()[1] - 0.30720).abs() < 1e-5);
        assert!((p.data()[2] - 0.18632).abs() < 1e-5);
    }

    #[test]
    fn soften_rejects_bad_temperature() {
        let z = t(&[1, 2], &[0.0, 1.0]);
        assert!(matches!(soften(&z, 0.0), Err(Error::Contract(_))));
        assert!(matches!(soften(&z, -1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let z = t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, -5.0]);
        let cfg = DistillConfig::default();
        assert!(soft_loss(&z, &z, &cfg).unwrap().abs() < 1e-7);
    }

    #[test]
    fn kl_of_point_mass_against_uniform_is_ln2() {
        // At T = 1 logits (1000, 0) give teacher probabilities [1, 0].
        let teacher = t(&[1, 2], &[1000.0, 0.0]);
        let student = t(&[1, 2], &[0.0, 0.0]);
        let cfg = DistillConfig {
            temperature: 1.0,
            ..Default::default()
        };
        let kl = soft_loss(&teacher, &student, &cfg).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12, "{kl}");
    }

    #[test]
    fn t_squared_scaling_multiplies() {
        let teacher = t(&[1, 3], &[1.0, 2.0, 0.5]);
        let student = t(&[1, 3], &[0.0, 0.1, 0.3]);
        let mut cfg = DistillConfig {
            temperature: 3.0,
            ..Default::default()
        };
        let base = soft_loss(&teacher, &student, &cfg).unwrap();
        cfg.t_squared_scaling = true;
        let scaled = soft_loss(&teacher, &student, &cfg).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-14);
    }

    #[test]
    fn soft_loss_shape_mismatch() {
        let a = t(&[1, 3], &[0.0; 3]);
        let b = t(&[1, 2], &[0.0; 2]);
        assert!(matches!(
            soft_loss(&a, &b, &DistillConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn hard_loss_examples() {
        let p = t(&[1, 3], &[0.0, 1.0, 0.0]);
        assert_eq!(hard_loss(&p, &[1]).unwrap(), 0.0);
        let u = t(&[2, 3], &[1.0 / 3.0; 6]);
        assert!((hard_loss(&u, &[0, 2]).unwrap() - 3f64.ln()).abs() < 1e-12);
        let tiny = t(&[1, 2], &[1e-20, 1.0 - 1e-20]);
        let l = hard_loss(&tiny, &[0]).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(matches!(hard_loss(&u, &[0, 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_endpoints() {
        assert_eq!(total_loss(1.25f64, 7.5, 1.0).unwrap(), 1.25);
        assert_eq!(total_loss(1.25f64, 7.5, 0.0).unwrap(), 7.5);
        assert!((total_loss(1.0f64, 2.0, 0.3).unwrap() - 1.7).abs() < 1e-15);
        assert!(total_loss(1.0f64, 2.0, 1.5).is_err());
        assert!(total_loss(1.0f64, 2.0, -0.1).is_err());
    }
}
