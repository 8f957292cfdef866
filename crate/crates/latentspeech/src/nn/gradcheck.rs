//! Finite-difference validation of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{LsError, Result};
use crate::nn::params::ParamStore;

/// Compare analytic gradients against central differences.
///
/// `f` evaluates a scalar loss from the store and also returns the analytic
/// gradients for the named parameters. Returns the max relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all checked
/// elements.
pub fn grad_check<F>(f: F, store: &ParamStore, names: &[String], eps: f32) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f32, BTreeMap<String, Vec<f32>>)>,
{
    let (_, analytic) = f(store)?;
    let mut worst = 0.0f64;
    for name in names {
        let base = store
            .get(name)
            .ok_or_else(|| LsError::Config(format!("grad_check: unknown parameter {name}")))?
            .clone();
        let ga = analytic
            .get(name)
            .ok_or_else(|| LsError::Config(format!("grad_check: no gradient for {name}")))?;
        for i in 0..base.numel() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data[i] = base.data[i] + eps;
            let (lp, _) = f(&plus)?;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data[i] = base.data[i] - eps;
            let (lm, _) = f(&minus)?;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(LsError::Numeric(
                    "non-finite loss during finite differences".into(),
                ));
            }
            let numeric = (lp as f64 - lm as f64) / (2.0 * eps as f64);
            let a = ga[i] as f64;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use crate::nn::tensor::Tensor;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x^2) at x=[1,2]; analytic grad [2,4]
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let f = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(s.get("x").unwrap().clone());
            let xx = tape.mul(x, x);
            let m = tape.mean_all(xx);
            let loss = tape.scale(m, 2.0); // mean * n = sum for n=2
            let grads = tape.backward(loss)?;
            let mut out = BTreeMap::new();
            out.insert("x".to_string(), grads.get(x).unwrap().to_vec());
            Ok((tape.scalar_value(loss), out))
        };
        let (loss, grads) = f(&store).unwrap();
        assert!((loss - 5.0).abs() < 1e-6);
        assert!((grads["x"][0] - 2.0).abs() < 1e-5);
        assert!((grads["x"][1] - 4.0).abs() < 1e-5);
        let err = grad_check(f, &store, &["x".to_string()], 1e-3).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(0.7));
        let f = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(s.get("x").unwrap().clone());
            let zero = tape.scale(x, 0.0);
            let grads = tape.backward(zero)?;
            let mut out = BTreeMap::new();
            out.insert("x".to_string(), grads.get(x).unwrap().to_vec());
            Ok((tape.scalar_value(zero), out))
        };
        let err = grad_check(f, &store, &["x".to_string()], 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }
}
