use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Controls which coordinates [`grad_check`] perturbs.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Upper bound on checked coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    /// Seed for choosing coordinates when `max_coords` is set.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: Some(64),
            seed: 0,
        }
    }
}

/// Largest relative discrepancy between reverse-mode gradients of `f` and
/// central differences, over the sampled coordinates of every input.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<S, F>(f: F, inputs: &[Tensor<S>], opts: &GradCheckOptions) -> Result<f64>
where
    S: Element,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::contract("grad_check eps must be > 0"));
    }
    let eval = |xs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        let y = v.item().as_f64();
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite function value during grad_check".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + S::of(opts.eps);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - S::of(opts.eps);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // Use the actually representable step so f32 inputs stay honest.
            let h = (orig + S::of(opts.eps)).as_f64() - (orig - S::of(opts.eps)).as_f64();
            let numeric = (plus - minus) / h;
            let a = analytic[i].data()[j].as_f64();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric("non-finite gradient during grad_check".into()));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f64>::from_fn(&[7], |i| (i as f64).sin());
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[x], &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::<f64>::ones(&[2]);
        let opts = GradCheckOptions {
            eps: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], &opts).is_err());
    }
}
