//! Central finite-difference gradient verification.
//!
//! Works on named `f64` parameter maps. The function under test returns the
//! scalar loss and, when asked, the analytic gradients; finite differences
//! perturb up to `MAX_COORDS` coordinates per parameter (a fixed seeded
//! subsample for larger tensors).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor<f64>>;

/// Coordinates sampled per parameter tensor.
pub const MAX_COORDS: usize = 64;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub h: f64,
    /// Max relative error per parameter name.
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tol
    }

    pub fn failures(&self) -> Vec<(&str, f64)> {
        self.per_param
            .iter()
            .filter(|(_, &e)| e > self.tol)
            .map(|(n, &e)| (n.as_str(), e))
            .collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.per_param {
            let status = if *err <= self.tol { "ok" } else { "FAIL" };
            writeln!(f, "  {status:<4} {name:<32} max_rel_err = {err:.3e}")?;
        }
        Ok(())
    }
}

/// Verify analytic gradients of `f` against central differences at step `h`.
///
/// `f(params, true)` must return `(loss, Some(grads))` with one gradient per
/// parameter; `f(params, false)` may skip the backward pass. Relative error
/// per coordinate is |ga - gfd| / max(|ga|, |gfd|, 1e-8).
pub fn grad_check<F>(
    f: &F,
    params: &ParamMap,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamMap, bool) -> Result<(f64, Option<ParamMap>)>,
{
    let (base_loss, grads) = f(params, true)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFinite("grad_check base loss".into()));
    }
    let grads = grads.ok_or_else(|| Error::MissingGrad("(analytic gradients not returned)".into()))?;

    let mut per_param = BTreeMap::new();
    for (name, tensor) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        let numel = tensor.numel();
        let coords: Vec<usize> = if numel <= MAX_COORDS {
            (0..numel).collect()
        } else {
            let mut rng = rng_for(seed, &[0x6fd0, name.len() as u64, numel as u64]);
            let mut set = BTreeSet::new();
            while set.len() < MAX_COORDS {
                set.insert(rng.gen_range(0..numel));
            }
            set.into_iter().collect()
        };

        let mut max_rel = 0.0f64;
        for &c in &coords {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[c] += h;
            let (loss_plus, _) = f(&plus, false)?;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[c] -= h;
            let (loss_minus, _) = f(&minus, false)?;
            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: perturbing '{name}'[{c}] by ±{h}"
                )));
            }
            let fd = (loss_plus - loss_minus) / (2.0 * h);
            let ga = analytic.data()[c];
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        per_param.insert(name.clone(), max_rel);
    }
    Ok(GradCheckReport { tol, h, per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    fn quadratic(params: &ParamMap, need_grads: bool) -> Result<(f64, Option<ParamMap>)> {
        // f = sum(x^2)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(params["x"].clone(), true);
        let sq = tape.mul(x, x)?;
        let loss = tape.sum_all(sq);
        let value = tape.value(loss).item();
        if !need_grads {
            return Ok((value, None));
        }
        let mut grads = tape.backward(loss)?;
        let mut out = ParamMap::new();
        out.insert("x".into(), grads.take(x).unwrap());
        Ok((value, Some(out)))
    }

    #[test]
    fn exact_quadratic_passes_tightly() {
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let report = grad_check(&quadratic, &params, 1e-5, 1e-10, 0).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = |p: &ParamMap, need: bool| -> Result<(f64, Option<ParamMap>)> {
            if need {
                let mut g = ParamMap::new();
                g.insert("x".into(), Tensor::zeros(p["x"].shape()));
                Ok((7.5, Some(g)))
            } else {
                Ok((7.5, None))
            }
        };
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        let report = grad_check(&f, &params, 1e-5, 1e-12, 0).unwrap();
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn sign_flipped_gradient_is_caught() {
        let flipped = |p: &ParamMap, need: bool| -> Result<(f64, Option<ParamMap>)> {
            let (loss, grads) = quadratic(p, need)?;
            let grads = grads.map(|mut g| {
                for v in g.get_mut("x").unwrap().data_mut() {
                    *v = -*v;
                }
                g
            });
            Ok((loss, grads))
        };
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let report = grad_check(&flipped, &params, 1e-5, 1e-4, 0).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().len(), 1);
        assert_eq!(report.failures()[0].0, "x");
    }

    #[test]
    fn subsampling_large_tensors_is_deterministic() {
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::full(&[200], 0.5));
        let r1 = grad_check(&quadratic, &params, 1e-5, 1e-8, 7).unwrap();
        let r2 = grad_check(&quadratic, &params, 1e-5, 1e-8, 7).unwrap();
        assert_eq!(r1.per_param["x"], r2.per_param["x"]);
        assert!(r1.passed());
    }
}
