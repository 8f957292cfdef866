use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LsError, Result};
use crate::nn::tensor::Tensor;

/// Named parameter map with Adam optimizer state.
///
/// Parameter paths are dot-separated (`ae.encoder.0.w`); moment buffers
/// mirror parameter shapes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moment1: BTreeMap<String, Vec<f32>>,
    moment2: BTreeMap<String, Vec<f32>>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, path: &str, t: Tensor) {
        assert!(
            !self.params.contains_key(path),
            "duplicate parameter path {path}"
        );
        self.moment1.insert(path.to_string(), vec![0.0; t.numel()]);
        self.moment2.insert(path.to_string(), vec![0.0; t.numel()]);
        self.params.insert(path.to_string(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names with a given dot-path prefix.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Merge another store's parameters (moments reset for merged entries).
    pub fn absorb(&mut self, other: ParamStore) {
        for (k, v) in other.params {
            self.insert(&k, v);
        }
    }

    /// One bias-corrected Adam update over the supplied gradients.
    ///
    /// Only parameters whose path appears in `grads` move; every gradient key
    /// must name an existing parameter.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    ) -> Result<()> {
        for key in grads.keys() {
            if !self.params.contains_key(key) {
                return Err(LsError::Config(format!(
                    "gradient for unknown parameter {key}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (beta1 as f64).powf(t);
        let bc2 = 1.0 - (beta2 as f64).powf(t);
        for (key, g) in grads {
            let p = self.params.get_mut(key).unwrap();
            if g.len() != p.numel() {
                return Err(LsError::Dimension(format!(
                    "gradient length mismatch for {key}"
                )));
            }
            let m = self.moment1.get_mut(key).unwrap();
            let v = self.moment2.get_mut(key).unwrap();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                p.data[i] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
            p.assert_finite(key)?;
        }
        Ok(())
    }
}

/// Kaiming-style uniform init with bound sqrt(1/fan_in).
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        store.adam_step(&grads, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("w").unwrap().data, vec![1.5, -0.5]);
        assert_eq!(store.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // t=1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps) ~ lr * sign(g)
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        store.adam_step(&grads, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let w = store.get("w").unwrap().data[0];
        assert!((w + 0.1).abs() < 1e-6, "got {w}");
    }

    #[test]
    fn two_identical_gradients_match_hand_trace() {
        let (lr, b1, b2, eps) = (0.1f32, 0.9f32, 0.999f32, 1e-8f32);
        let g = 2.0f32;
        // hand trace in f64
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut w = 0.0f64;
        for t in 1..=2u32 {
            m = b1 as f64 * m + (1.0 - b1 as f64) * g as f64;
            v = b2 as f64 * v + (1.0 - b2 as f64) * (g as f64) * (g as f64);
            let mhat = m / (1.0 - (b1 as f64).powi(t as i32));
            let vhat = v / (1.0 - (b2 as f64).powi(t as i32));
            w -= lr as f64 * mhat / (vhat.sqrt() + eps as f64);
        }
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![g]);
        store.adam_step(&grads, lr, b1, b2, eps).unwrap();
        store.adam_step(&grads, lr, b1, b2, eps).unwrap();
        let got = store.get("w").unwrap().data[0];
        assert!((got as f64 - w).abs() < 1e-5, "got {got}, want {w}");
    }

    #[test]
    fn missing_parameter_for_gradient_is_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("nope".to_string(), vec![1.0]);
        assert!(store.adam_step(&grads, 0.1, 0.9, 0.999, 1e-8).is_err());
    }
}
