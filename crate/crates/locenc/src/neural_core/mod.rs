//! Minimal differentiable-computation substrate.
//!
//! Parameter storage with paired gradient buffers, dense layers and
//! embedding tables with hand-derived backward rules, a bias-corrected Adam
//! step, and finite-difference gradient verification. Everything is 64-bit.

mod checkpoint;
mod dense;
mod embedding;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use dense::{sigmoid, Activation, BlockDiagDense, Dense, Dropout};
pub use embedding::EmbeddingTable;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// (rows, cols) of a 2-D tensor. Panics on other ranks; callers validate.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Row `r` of a 2-D tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let (_, cols) = self.dims2();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// C = A·B for A [m,k], B [k,n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = Aᵀ·B for A [m,k], B [m,n] → [k,n]. Used for weight gradients.
pub fn matmul_ta(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (m2, n) = b.dims2();
    assert_eq!(m, m2, "matmul_ta outer dims {} vs {}", m, m2);
    let mut out = Tensor::zeros(&[k, n]);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A·Bᵀ for A [m,k], B [n,k] → [m,n]. Used for input gradients.
pub fn matmul_tb(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (n, k2) = b.dims2();
    assert_eq!(k, k2, "matmul_tb inner dims {} vs {}", k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// Each row divided by max(‖row‖, 1e-12); rows below the floor are unchanged.
pub fn l2_normalize_rows(t: &Tensor) -> Tensor {
    let (rows, cols) = t.dims2();
    let mut out = t.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// How a parameter is (re)initialized by [`ParameterStore::init_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Uniform(±√(6/(fan_in+fan_out))).
    GlorotUniform { fan_in: usize, fan_out: usize },
    /// Normal(0, std).
    Normal { std: f64 },
    Zero,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Tensor,
    grad: Tensor,
    moment1: Tensor,
    moment2: Tensor,
    init: InitKind,
}

/// Named, shaped, trainable arrays with paired gradient buffers and Adam
/// moments. Iteration order is the name order, so every whole-store
/// operation is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, ParamEntry>,
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: InitKind) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("parameter '{name}' already registered")));
        }
        self.params.insert(
            name.to_string(),
            ParamEntry {
                value: Tensor::zeros(shape),
                grad: Tensor::zeros(shape),
                moment1: Tensor::zeros(shape),
                moment2: Tensor::zeros(shape),
                init,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_coords(&self) -> usize {
        self.params.values().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'")).grad
    }

    /// Accumulate `delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let entry = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter '{name}'")))?;
        if entry.grad.shape() != delta.shape() {
            return Err(Error::Invalid(format!(
                "gradient shape {:?} does not match parameter '{}' shape {:?}",
                delta.shape(),
                name,
                entry.grad.shape()
            )));
        }
        for (g, d) in entry.grad.data.iter_mut().zip(delta.data.iter()) {
            *g += d;
        }
        Ok(())
    }

    /// Set every gradient buffer to exactly 0.
    pub fn zero_grads(&mut self) {
        for entry in self.params.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    /// Initialize all values from their declared schemes; resets gradients
    /// and moments. Each parameter gets its own purpose-keyed stream, so the
    /// result does not depend on registration order.
    pub fn init_params(&mut self, seed: u64) {
        for (name, entry) in self.params.iter_mut() {
            let mut rng = seeded_rng(seed, name);
            match entry.init {
                InitKind::GlorotUniform { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in entry.value.data.iter_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                InitKind::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("valid normal std");
                    for v in entry.value.data.iter_mut() {
                        *v = dist.sample(&mut rng);
                    }
                }
                InitKind::Zero => entry.value.fill(0.0),
            }
            entry.grad.fill(0.0);
            entry.moment1.fill(0.0);
            entry.moment2.fill(0.0);
        }
    }

    /// Standard bias-corrected Adam update on every parameter; gradients are
    /// left untouched. `t` is the 1-based step count.
    pub fn adam_step(&mut self, cfg: &AdamParams, t: u64) -> Result<()> {
        if t < 1 {
            return Err(Error::Invalid("adam step count must be >= 1".into()));
        }
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for entry in self.params.values_mut() {
            for i in 0..entry.value.data.len() {
                let g = entry.grad.data[i];
                let m = cfg.beta1 * entry.moment1.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * entry.moment2.data[i] + (1.0 - cfg.beta2) * g * g;
                entry.moment1.data[i] = m;
                entry.moment2.data[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                entry.value.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Add Uniform(±scale) noise to every value. Gradient checks call this
    /// after init so no pre-activation sits exactly on a ReLU kink, where
    /// central differences are invalid.
    pub fn perturb_values(&mut self, scale: f64, seed: u64) {
        for (name, entry) in self.params.iter_mut() {
            let mut rng = seeded_rng(seed, &format!("perturb.{name}"));
            for v in entry.value.data.iter_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    /// Replace parameter values from `(name, tensor)` pairs. The names must
    /// cover the registered set exactly and shapes must match.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, tensor) in values {
            let entry = self
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has unknown parameter '{name}'")))?;
            if entry.value.shape() != tensor.shape() {
                return Err(Error::Invalid(format!(
                    "checkpoint shape {:?} for '{}' does not match registered {:?}",
                    tensor.shape(),
                    name,
                    entry.value.shape()
                )));
            }
            entry.value = tensor;
            seen.insert(name);
        }
        for name in self.params.keys() {
            if !seen.contains(name) {
                return Err(Error::Invalid(format!("checkpoint missing parameter '{name}'")));
            }
        }
        Ok(())
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().map(|(k, e)| (k, &e.value))
    }
}

/// Result of a finite-difference gradient verification.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare the analytic gradients currently stored in `store` against
/// central finite differences of `loss` on a random subset of at least
/// `min_coords` coordinates (all of them when the store is smaller).
///
/// `loss` must be a pure forward evaluation at the store's current values.
/// The relative error uses max(1, |analytic|, |numeric|) as denominator.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    mut loss: F,
    min_coords: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&ParameterStore) -> f64,
{
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, entry) in store.params.iter() {
        for i in 0..entry.value.len() {
            coords.push((name.clone(), i));
        }
    }
    let total = coords.len();
    let picked: Vec<(String, usize)> = if total <= min_coords {
        coords
    } else {
        let mut rng = seeded_rng(seed, "grad-check");
        rand::seq::index::sample(&mut rng, total, min_coords)
            .into_iter()
            .map(|i| coords[i].clone())
            .collect()
    };

    let mut max_rel = 0.0f64;
    for (name, idx) in &picked {
        let w0 = store.params[name].value.data[*idx];
        let h = 1e-5 * w0.abs().max(1.0);
        store.params.get_mut(name).unwrap().value.data[*idx] = w0 + h;
        let plus = loss(store);
        store.params.get_mut(name).unwrap().value.data[*idx] = w0 - h;
        let minus = loss(store);
        store.params.get_mut(name).unwrap().value.data[*idx] = w0;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = store.params[name].grad.data[*idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: picked.len(),
    }
}
