//! Dense layers, activations, and dropout with hand-derived backward rules.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{matmul, matmul_ta, matmul_tb, InitKind, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Pointwise activation of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// d act / d pre evaluated at pre-activation `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct DenseCache {
    input: Tensor,
    pre: Tensor,
}

/// Fully connected layer `act(x·W + b)` whose parameters live in a
/// [`ParameterStore`] under `<name>.w` / `<name>.b`.
pub struct Dense {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    cache: Option<DenseCache>,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            name: name.into(),
            in_dim,
            out_dim,
            activation,
            cache: None,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        store.register(
            &self.weight_name(),
            &[self.in_dim, self.out_dim],
            InitKind::GlorotUniform {
                fan_in: self.in_dim,
                fan_out: self.out_dim,
            },
        )?;
        store.register(&self.bias_name(), &[self.out_dim], InitKind::Zero)
    }

    /// `act(input·W + b)` for input [B, in]; caches what backward needs.
    pub fn forward(&mut self, store: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        let (batch, in_dim) = input.dims2();
        if in_dim != self.in_dim {
            return Err(Error::Invalid(format!(
                "dense '{}' expects input dim {}, got {}",
                self.name, self.in_dim, in_dim
            )));
        }
        let w = store.value(&self.weight_name());
        let b = store.value(&self.bias_name());
        let mut pre = matmul(input, w);
        for r in 0..batch {
            let row = pre.row_mut(r);
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
        let mut out = pre.clone();
        out.data_mut().iter_mut().for_each(|v| *v = self.activation.apply(*v));
        self.cache = Some(DenseCache {
            input: input.clone(),
            pre,
        });
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns dL/dinput.
    pub fn backward(&mut self, store: &mut ParameterStore, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Invalid(format!("dense '{}': backward without forward", self.name)))?;
        let (batch, out_dim) = upstream.dims2();
        if out_dim != self.out_dim || batch != cache.pre.shape()[0] {
            return Err(Error::Invalid(format!(
                "dense '{}' upstream shape {:?} does not match forward (batch {}, out {})",
                self.name,
                upstream.shape(),
                cache.pre.shape()[0],
                self.out_dim
            )));
        }
        let mut dpre = upstream.clone();
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= self.activation.derivative(p);
        }
        let dw = matmul_ta(&cache.input, &dpre);
        let mut db = Tensor::zeros(&[self.out_dim]);
        for r in 0..batch {
            for (acc, &v) in db.data_mut().iter_mut().zip(dpre.row(r)) {
                *acc += v;
            }
        }
        store.accumulate_grad(&self.weight_name(), &dw)?;
        store.accumulate_grad(&self.bias_name(), &db)?;
        let w = store.value(&self.weight_name());
        Ok(matmul_tb(&dpre, w))
    }
}

/// Linear layer whose weight is structurally block-diagonal: `blocks`
/// independent [block_in, block_out] maps applied to contiguous input
/// chunks. Off-block entries do not exist, so they are never updated.
pub struct BlockDiagDense {
    name: String,
    pub blocks: usize,
    pub block_in: usize,
    pub block_out: usize,
    pub activation: Activation,
    cache: Option<DenseCache>,
}

impl BlockDiagDense {
    pub fn new(
        name: impl Into<String>,
        blocks: usize,
        block_in: usize,
        block_out: usize,
        activation: Activation,
    ) -> Self {
        BlockDiagDense {
            name: name.into(),
            blocks,
            block_in,
            block_out,
            activation,
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.blocks * self.block_in
    }

    pub fn out_dim(&self) -> usize {
        self.blocks * self.block_out
    }

    pub fn weight_name(&self) -> String {
        format!("{}.wblocks", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        store.register(
            &self.weight_name(),
            &[self.blocks, self.block_in, self.block_out],
            InitKind::GlorotUniform {
                fan_in: self.block_in,
                fan_out: self.block_out,
            },
        )?;
        store.register(&self.bias_name(), &[self.out_dim()], InitKind::Zero)
    }

    /// Materialize the equivalent full [in, out] matrix (zeros off-block).
    pub fn dense_matrix(&self, store: &ParameterStore) -> Tensor {
        let w = store.value(&self.weight_name());
        let mut full = Tensor::zeros(&[self.in_dim(), self.out_dim()]);
        for s in 0..self.blocks {
            for i in 0..self.block_in {
                for o in 0..self.block_out {
                    let v = w.data()[(s * self.block_in + i) * self.block_out + o];
                    let row = s * self.block_in + i;
                    let col = s * self.block_out + o;
                    full.data_mut()[row * self.out_dim() + col] = v;
                }
            }
        }
        full
    }

    pub fn forward(&mut self, store: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        let (batch, in_dim) = input.dims2();
        if in_dim != self.in_dim() {
            return Err(Error::Invalid(format!(
                "block-diag '{}' expects input dim {}, got {}",
                self.name,
                self.in_dim(),
                in_dim
            )));
        }
        let w = store.value(&self.weight_name());
        let b = store.value(&self.bias_name());
        let out_dim = self.out_dim();
        let mut pre = Tensor::zeros(&[batch, out_dim]);
        for r in 0..batch {
            let in_row = input.row(r);
            let out_row = pre.row_mut(r);
            for s in 0..self.blocks {
                let in_chunk = &in_row[s * self.block_in..(s + 1) * self.block_in];
                let out_chunk = &mut out_row[s * self.block_out..(s + 1) * self.block_out];
                for (i, &x) in in_chunk.iter().enumerate() {
                    let wrow = &w.data()[(s * self.block_in + i) * self.block_out..][..self.block_out];
                    for (o, &wv) in out_chunk.iter_mut().zip(wrow) {
                        *o += x * wv;
                    }
                }
            }
            for (o, &bias) in out_row.iter_mut().zip(b.data()) {
                *o += bias;
            }
        }
        let mut out = pre.clone();
        out.data_mut().iter_mut().for_each(|v| *v = self.activation.apply(*v));
        self.cache = Some(DenseCache {
            input: input.clone(),
            pre,
        });
        Ok(out)
    }

    pub fn backward(&mut self, store: &mut ParameterStore, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::Invalid(format!("block-diag '{}': backward without forward", self.name))
        })?;
        let (batch, out_dim) = upstream.dims2();
        if out_dim != self.out_dim() {
            return Err(Error::Invalid(format!(
                "block-diag '{}' upstream dim {} does not match {}",
                self.name,
                out_dim,
                self.out_dim()
            )));
        }
        let mut dpre = upstream.clone();
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= self.activation.derivative(p);
        }
        let w = store.value(&self.weight_name()).clone();
        let mut dw = Tensor::zeros(&[self.blocks, self.block_in, self.block_out]);
        let mut db = Tensor::zeros(&[self.out_dim()]);
        let mut dinput = Tensor::zeros(&[batch, self.in_dim()]);
        for r in 0..batch {
            let in_row = cache.input.row(r);
            let dpre_row = dpre.row(r);
            for (acc, &v) in db.data_mut().iter_mut().zip(dpre_row) {
                *acc += v;
            }
            for s in 0..self.blocks {
                let in_chunk = &in_row[s * self.block_in..(s + 1) * self.block_in];
                let dpre_chunk = &dpre_row[s * self.block_out..(s + 1) * self.block_out];
                for i in 0..self.block_in {
                    let wrow = &w.data()[(s * self.block_in + i) * self.block_out..][..self.block_out];
                    let dwrow =
                        &mut dw.data_mut()[(s * self.block_in + i) * self.block_out..][..self.block_out];
                    let x = in_chunk[i];
                    let mut dx = 0.0;
                    for o in 0..self.block_out {
                        dwrow[o] += x * dpre_chunk[o];
                        dx += wrow[o] * dpre_chunk[o];
                    }
                    dinput.data_mut()[r * self.in_dim() + s * self.block_in + i] = dx;
                }
            }
        }
        store.accumulate_grad(&self.weight_name(), &dw)?;
        store.accumulate_grad(&self.bias_name(), &db)?;
        Ok(dinput)
    }
}

/// Inverted dropout: scales kept units by 1/(1-rate) during training and is
/// the identity at inference (no rng supplied).
pub struct Dropout {
    pub rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout { rate, mask: None }
    }

    pub fn forward(&mut self, input: &Tensor, rng: Option<&mut ChaCha12Rng>) -> Tensor {
        match rng {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let mask: Vec<f64> = (0..input.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut out = input.clone();
                for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                self.mask = Some(mask);
                out
            }
            _ => {
                self.mask = None;
                input.clone()
            }
        }
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Tensor {
        match self.mask.take() {
            Some(mask) => {
                let mut out = upstream.clone();
                for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                out
            }
            None => upstream.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_core::grad_check;

    fn identity_dense(store: &mut ParameterStore, dim: usize) -> Dense {
        let layer = Dense::new("id", dim, dim, Activation::Identity);
        layer.register(store).unwrap();
        let w = store.value_mut(&layer.weight_name());
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        layer
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut store = ParameterStore::new();
        let mut layer = identity_dense(&mut store, 3);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.0, 5.0, -6.0]).unwrap();
        let y = layer.forward(&store, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn relu_clamps_negative() {
        let mut store = ParameterStore::new();
        let layer = Dense::new("r", 2, 2, Activation::Relu);
        layer.register(&mut store).unwrap();
        let w = store.value_mut(&layer.weight_name());
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let mut layer = layer;
        let y = layer
            .forward(&store, &Tensor::from_vec(&[1, 2], vec![-1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut store = ParameterStore::new();
        let mut layer = Dense::new("d", 2, 2, Activation::Identity);
        layer.register(&mut store).unwrap();
        let up = Tensor::zeros(&[1, 2]);
        assert!(layer.backward(&mut store, &up).is_err());
    }

    #[test]
    fn zero_upstream_leaves_grads_unchanged() {
        let mut store = ParameterStore::new();
        let mut layer = Dense::new("d", 3, 2, Activation::Relu);
        layer.register(&mut store).unwrap();
        store.init_params(5);
        let x = Tensor::from_vec(&[2, 3], vec![0.3; 6]).unwrap();
        layer.forward(&store, &x).unwrap();
        layer.backward(&mut store, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.grad(&layer.weight_name()).data().iter().all(|&g| g == 0.0));
        assert!(store.grad(&layer.bias_name()).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identity_layer_input_grad_equals_upstream() {
        let mut store = ParameterStore::new();
        let mut layer = identity_dense(&mut store, 3);
        let x = Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        layer.forward(&store, &x).unwrap();
        let up = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let dx = layer.backward(&mut store, &up).unwrap();
        assert_eq!(dx.data(), up.data());
    }

    /// Finite-difference oracle over a random 4x8 layer feeding a fixed
    /// linear readout so the loss is scalar.
    #[test]
    fn dense_gradients_match_finite_differences() {
        for act in [
            Activation::Identity,
            Activation::Relu,
            Activation::LeakyRelu(0.2),
            Activation::Sigmoid,
        ] {
            let mut store = ParameterStore::new();
            let mut layer = Dense::new("fd", 4, 8, act);
            layer.register(&mut store).unwrap();
            store.init_params(17);
            let x = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64) * 0.17 - 1.0).collect())
                .unwrap();
            // loss = sum of outputs, so upstream gradient is all ones
            let y = layer.forward(&store, &x).unwrap();
            let _ = y;
            layer
                .backward(&mut store, &Tensor::from_vec(&[3, 8], vec![1.0; 24]).unwrap())
                .unwrap();
            let xc = x.clone();
            let report = grad_check(
                &mut store,
                move |s| {
                    let mut probe = Dense::new("fd", 4, 8, act);
                    probe.forward(s, &xc).unwrap().data().iter().sum()
                },
                64,
                3,
            );
            assert!(
                report.max_rel_err < 1e-6,
                "{act:?} rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn block_diag_matches_equivalent_dense_and_keeps_zeros() {
        let mut store = ParameterStore::new();
        let mut layer = BlockDiagDense::new("bd", 3, 2, 2, Activation::Identity);
        layer.register(&mut store).unwrap();
        store.init_params(23);
        let x = Tensor::from_vec(&[2, 6], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y = layer.forward(&store, &x).unwrap();

        // Same result through the materialized full matrix.
        let full = layer.dense_matrix(&store);
        let want = matmul(&x, &full);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Off-block entries of the materialized matrix are exactly zero.
        for s in 0..3 {
            for i in 0..2 {
                for col in 0..6 {
                    if col / 2 != s {
                        assert_eq!(full.data()[(s * 2 + i) * 6 + col], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn block_diag_gradients_match_finite_differences() {
        let mut store = ParameterStore::new();
        let mut layer = BlockDiagDense::new("bd", 4, 3, 2, Activation::Relu);
        layer.register(&mut store).unwrap();
        store.init_params(31);
        let x = Tensor::from_vec(&[2, 12], (0..24).map(|i| (i as f64) * 0.13 - 1.5).collect())
            .unwrap();
        layer.forward(&store, &x).unwrap();
        layer
            .backward(&mut store, &Tensor::from_vec(&[2, 8], vec![1.0; 16]).unwrap())
            .unwrap();
        let xc = x.clone();
        let report = grad_check(
            &mut store,
            move |s| {
                let mut probe = BlockDiagDense::new("bd", 4, 3, 2, Activation::Relu);
                probe.forward(s, &xc).unwrap().data().iter().sum()
            },
            64,
            5,
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn dropout_inference_is_identity_and_train_masks() {
        let mut d = Dropout::new(0.5);
        let x = Tensor::from_vec(&[1, 8], vec![1.0; 8]).unwrap();
        let y = d.forward(&x, None);
        assert_eq!(y.data(), x.data());

        let mut rng = crate::rng::seeded_rng(1, "dropout-test");
        let y = d.forward(&x, Some(&mut rng));
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        // backward applies the same mask
        let up = Tensor::from_vec(&[1, 8], vec![1.0; 8]).unwrap();
        let dx = d.backward(&up);
        for (o, i) in dx.data().iter().zip(y.data()) {
            assert_eq!(*o == 0.0, *i == 0.0);
        }
    }
}
