use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Parameters are optimised with one of two learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Main,
    Embedder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub group: ParamGroup,
    pub requires_grad: bool,
    /// Adam first and second moments and step count.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, group: ParamGroup) -> Result<ParamId, TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let n = value.len();
        let (idx, _) = self.params.insert_full(
            name.to_string(),
            Param { value, grad: vec![0.0; n], group, requires_grad: true, m: vec![0.0; n], v: vec![0.0; n], t: 0 },
        );
        Ok(ParamId(idx))
    }

    /// Registers a tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<ParamId, TensorError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).expect("valid id").0
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if p.requires_grad {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Clears Adam moments and step counters.
    pub fn reset_optimizer(&mut self) {
        for p in self.params.values_mut() {
            p.m.iter_mut().for_each(|x| *x = 0.0);
            p.v.iter_mut().for_each(|x| *x = 0.0);
            p.t = 0;
        }
    }

    /// Multiplies every accumulated gradient by `s` (e.g. to average over a batch).
    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Sets `requires_grad` on every parameter in `group`.
    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.values_mut().filter(|p| p.group == group) {
            p.requires_grad = trainable;
        }
    }

    /// Copies values (not optimiser state) of every parameter with the same
    /// name and shape from `other`. Returns the number copied.
    pub fn load_values_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if let Some(q) = other.params.get(name) {
                if q.value.shape() == p.value.shape() {
                    p.value = q.value.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate for [`ParamGroup::Embedder`]; defaults to `lr`.
    pub embedder_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, embedder_lr: None, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let lrs = [Some(self.lr), self.embedder_lr];
        if lrs.iter().flatten().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {:?}", lrs)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TensorError::Config("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.lr,
            ParamGroup::Embedder => self.embedder_lr.unwrap_or(self.lr),
        }
    }
}

/// One Adam update over every trainable parameter using its accumulated
/// gradient. `lr_scale` multiplies both learning rates (schedules). Gradients
/// are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, lr_scale: f64) -> Result<(), TensorError> {
    cfg.validate()?;
    for p in store.params.values_mut() {
        if !p.requires_grad {
            continue;
        }
        p.t += 1;
        let lr = cfg.lr_for(p.group) * lr_scale;
        let c1 = 1.0 - cfg.beta1.powi(p.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(p.t as i32);
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let g = p.grad[i];
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = p.m[i] / c1;
            let vhat = p.v[i] / c2;
            data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    store.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.add_uniform("w", &[3, 4], 3, ParamGroup::Main, &mut rng).unwrap();
        let before = s.clone();
        for _ in 0..5 {
            adam_step(&mut s, &AdamConfig::default(), 1.0).unwrap();
        }
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(vec![1.0, -2.0, 0.5]), ParamGroup::Main).unwrap();
        s.accumulate_grad(id, &[0.3, -4.0, 0.0]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut s, &cfg, 1.0).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps')
        let v = s.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
        assert!(s.get(id).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_reference_recurrence() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(2.0), ParamGroup::Main).unwrap();
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = 2.0 * x;
            s.accumulate_grad(id, &[2.0 * s.value(id).item()]);
            adam_step(&mut s, &cfg, 1.0).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((s.value(id).item() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn group_learning_rates_and_validation() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(0.0), ParamGroup::Main).unwrap();
        let b = s.add("b", Tensor::scalar(0.0), ParamGroup::Embedder).unwrap();
        s.accumulate_grad(a, &[1.0]);
        s.accumulate_grad(b, &[1.0]);
        let cfg = AdamConfig { lr: 0.1, embedder_lr: Some(0.01), ..AdamConfig::default() };
        adam_step(&mut s, &cfg, 1.0).unwrap();
        assert!((s.value(a).item() + 0.1).abs() < 1e-6);
        assert!((s.value(b).item() + 0.01).abs() < 1e-6);
        assert!(adam_step(&mut s, &AdamConfig { lr: 0.0, ..cfg }, 1.0).is_err());
        assert!(adam_step(&mut s, &AdamConfig { lr: -1.0, ..cfg }, 1.0).is_err());
        assert!(s.add("a", Tensor::scalar(0.0), ParamGroup::Main).is_err());
    }
}
