//! Named parameter storage shared across per-example graphs.
//!
//! Parameters keep their own gradient accumulators plus Adam moment buffers.
//! Insertion order is preserved (and reproduced by checkpoints), so update
//! order — and therefore every downstream float — is stable across runs.

use indexmap::IndexMap;

use super::{Result, RngStream, TensorError};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Marks hidden-to-hidden weight matrices, the targets of transient
    /// training noise.
    pub recurrent: bool,
}

/// How a freshly defined parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
    /// Gate-stacked LSTM bias: zeros with the forget block set to +1.
    LstmBias,
}

/// Snapshot taken by [`ParameterStore::perturb_weights`]; restoring it puts
/// the exact pre-noise bytes back.
pub struct WeightNoise {
    originals: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Default)]
pub struct ParameterStore {
    params: IndexMap<String, Parameter>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn define(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Result<()> {
        self.define_with(name, rows, cols, init, rng, false)
    }

    pub fn define_recurrent(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Result<()> {
        self.define_with(name, rows, cols, init, rng, true)
    }

    fn define_with(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut RngStream,
        recurrent: bool,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let n = rows * cols;
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Glorot => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| rng.uniform_in(-limit, limit)).collect()
            }
            Init::LstmBias => {
                // gate layout across columns: [input, forget, cell, output]
                let h = cols / 4;
                let mut b = vec![0.0; n];
                for x in b.iter_mut().take(2 * h).skip(h) {
                    *x = 1.0;
                }
                b
            }
        };
        self.params.insert(
            name.to_string(),
            Parameter {
                rows,
                cols,
                values,
                grad: vec![0.0; n],
                m: vec![0.0; n],
                v: vec![0.0; n],
                recurrent,
            },
        );
        Ok(())
    }

    pub fn insert_raw(&mut self, name: &str, p: Parameter) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.params.insert(name.to_string(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Parameter names in definition order.
    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        for (g, &x) in p.grad.iter_mut().zip(grad) {
            *g += x;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grads_are_finite(&self) -> bool {
        self.params
            .values()
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    /// One Adam update over every parameter. Accumulated gradients are
    /// multiplied by `grad_scale` (use `1/batch_size` for mean loss) and
    /// cleared afterwards.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in self.params.values_mut() {
            for i in 0..p.values.len() {
                let g = p.grad[i] * grad_scale;
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = 0.0;
            }
        }
    }

    /// Add independent N(0, sigma^2) increments to every recurrent weight,
    /// returning a snapshot that [`ParameterStore::restore_weights`] uses to
    /// undo the perturbation exactly.
    pub fn perturb_weights(&mut self, sigma: f64, rng: &mut RngStream) -> Result<WeightNoise> {
        if sigma < 0.0 {
            return Err(TensorError::NegativeSigma(sigma));
        }
        let mut originals = Vec::new();
        if sigma == 0.0 {
            return Ok(WeightNoise { originals });
        }
        for (name, p) in self.params.iter_mut() {
            if p.recurrent {
                originals.push((name.clone(), p.values.clone()));
                for x in p.values.iter_mut() {
                    *x += sigma * rng.normal();
                }
            }
        }
        Ok(WeightNoise { originals })
    }

    pub fn restore_weights(&mut self, noise: WeightNoise) {
        for (name, values) in noise.originals {
            if let Some(p) = self.params.get_mut(&name) {
                p.values = values;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(0);
        s.define(name, 1, values.len(), Init::Zeros, &mut rng)
            .unwrap();
        s.get_mut(name).unwrap().values = values;
        s
    }

    #[test]
    fn duplicate_definition_is_rejected() {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(0);
        s.define("w", 2, 2, Init::Glorot, &mut rng).unwrap();
        assert!(s.define("w", 2, 2, Init::Glorot, &mut rng).is_err());
    }

    #[test]
    fn glorot_respects_limit_and_varies() {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(1);
        s.define("w", 30, 20, Init::Glorot, &mut rng).unwrap();
        let limit = (6.0 / 50.0f64).sqrt();
        let p = s.get("w").unwrap();
        assert!(p.values.iter().all(|x| x.abs() <= limit));
        let distinct: std::collections::HashSet<u64> =
            p.values.iter().map(|x| x.to_bits()).collect();
        assert!(distinct.len() > 500);
    }

    #[test]
    fn lstm_bias_sets_forget_block_to_one() {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(1);
        s.define("b", 1, 8, Init::LstmBias, &mut rng).unwrap();
        assert_eq!(
            s.get("b").unwrap().values,
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn adam_first_step_moves_by_roughly_lr_times_sign() {
        let mut s = store_with("w", vec![0.5, -0.25]);
        s.get_mut("w").unwrap().grad = vec![3.0, -7.0];
        s.adam_step(0.001, 0.9, 0.999, 1e-8, 1.0);
        let p = s.get("w").unwrap();
        // after bias correction the first update is lr * g/(|g| + eps')
        assert!((p.values[0] - (0.5 - 0.001)).abs() < 1e-6, "{}", p.values[0]);
        assert!((p.values[1] - (-0.25 + 0.001)).abs() < 1e-6, "{}", p.values[1]);
        assert_eq!(p.grad, vec![0.0, 0.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn adam_with_zero_gradient_leaves_values_and_bumps_step() {
        let mut s = store_with("w", vec![0.5, -0.25]);
        s.adam_step(0.001, 0.9, 0.999, 1e-8, 1.0);
        assert_eq!(s.get("w").unwrap().values, vec![0.5, -0.25]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn grad_scale_divides_accumulated_gradients() {
        let mut a = store_with("w", vec![1.0]);
        a.get_mut("w").unwrap().grad = vec![8.0];
        a.adam_step(0.01, 0.9, 0.999, 1e-8, 0.125);
        let mut b = store_with("w", vec![1.0]);
        b.get_mut("w").unwrap().grad = vec![1.0];
        b.adam_step(0.01, 0.9, 0.999, 1e-8, 1.0);
        assert_eq!(
            a.get("w").unwrap().values[0].to_bits(),
            b.get("w").unwrap().values[0].to_bits()
        );
    }

    #[test]
    fn perturb_targets_only_recurrent_and_restores_exactly() {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(2);
        s.define("plain", 2, 2, Init::Glorot, &mut rng).unwrap();
        s.define_recurrent("wh", 2, 2, Init::Glorot, &mut rng)
            .unwrap();
        let plain_before = s.get("plain").unwrap().values.clone();
        let wh_before = s.get("wh").unwrap().values.clone();

        let noise = s.perturb_weights(0.1, &mut rng).unwrap();
        assert_eq!(s.get("plain").unwrap().values, plain_before);
        assert_ne!(s.get("wh").unwrap().values, wh_before);

        s.restore_weights(noise);
        let wh_after = s.get("wh").unwrap().values.clone();
        for (a, b) in wh_after.iter().zip(&wh_before) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_sigma_perturbs_nothing() {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(2);
        s.define_recurrent("wh", 4, 4, Init::Glorot, &mut rng)
            .unwrap();
        let before = s.get("wh").unwrap().values.clone();
        let noise = s.perturb_weights(0.0, &mut rng).unwrap();
        assert_eq!(s.get("wh").unwrap().values, before);
        s.restore_weights(noise);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(2);
        assert!(s.perturb_weights(-0.5, &mut rng).is_err());
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let mut s = ParameterStore::new();
        let mut rng = RngStream::new(3);
        let n = 100 * 100;
        s.define_recurrent("wh", 100, 100, Init::Zeros, &mut rng)
            .unwrap();
        let sigma = 0.05;
        let _noise = s.perturb_weights(sigma, &mut rng).unwrap();
        let vals = &s.get("wh").unwrap().values;
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 = vals.iter().map(|x| x * x).sum::<f64>() / n as f64 - mean * mean;
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        let var_tol = 3.0 * sigma * sigma * (2.0 / n as f64).sqrt();
        assert!((var - sigma * sigma).abs() < var_tol, "var {var}");
    }
}
