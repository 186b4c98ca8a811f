//! Decoders that reconstruct a point's feature embedding.
//!
//! The location decoder is a single dense map from the location embedding.
//! The spatial context decoder attends over the n neighbors twice: an init
//! layer scores [neighbor-feature; displacement] pairs to form a first
//! guess, then the main layer scores [guess; neighbor-feature; displacement]
//! and pools neighbor features under those weights.

use crate::error::{Error, Result};
use crate::neural_core::{Activation, Dense, InitKind, ParameterStore, Tensor};

/// One feed-forward layer from location embedding to feature embedding.
pub struct LocationDecoder {
    dense: Dense,
}

impl LocationDecoder {
    pub fn new(d_x: usize, d_v: usize) -> Self {
        LocationDecoder {
            dense: Dense::new("dec_s", d_x, d_v, Activation::Identity),
        }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        self.dense.register(store)
    }

    pub fn forward(&mut self, store: &ParameterStore, loc_emb: &Tensor) -> Result<Tensor> {
        self.dense.forward(store, loc_emb)
    }

    pub fn backward(&mut self, store: &mut ParameterStore, upstream: &Tensor) -> Result<Tensor> {
        self.dense.backward(store, upstream)
    }
}

/// Per-example cache of one context-decoder forward pass.
pub struct ContextCache {
    feats: Tensor,
    disps: Tensor,
    pre_init: Vec<f64>,
    /// Init-layer attention, [n][K], each column summing to 1.
    pub alpha_init: Vec<f64>,
    u_init: Vec<f64>,
    e_init: Vec<f64>,
    pre_main: Vec<f64>,
    /// Main-layer attention, [n][K], each column summing to 1.
    pub alpha_main: Vec<f64>,
    u_main: Vec<f64>,
}

impl ContextCache {
    pub fn num_neighbors(&self) -> usize {
        self.feats.shape()[0]
    }
}

/// Multi-head score-vector attention over a neighborhood. With
/// `use_displacement` off, the displacement block is removed from both score
/// vectors and the decoder sees co-location patterns only.
pub struct ContextDecoder {
    name: String,
    pub heads: usize,
    pub d_v: usize,
    pub d_x: usize,
    pub use_displacement: bool,
    pub output_activation: Activation,
    pub leaky_slope: f64,
}

impl ContextDecoder {
    pub fn new(d_v: usize, d_x: usize, heads: usize, output_activation: Activation) -> Self {
        ContextDecoder {
            name: "dec_c".into(),
            heads,
            d_v,
            d_x,
            use_displacement: true,
            output_activation,
            leaky_slope: 0.2,
        }
    }

    /// Variant that ignores spatial relationships entirely.
    pub fn without_displacement(mut self) -> Self {
        self.use_displacement = false;
        self
    }

    fn init_score_len(&self) -> usize {
        self.d_v + if self.use_displacement { self.d_x } else { 0 }
    }

    fn main_score_len(&self) -> usize {
        2 * self.d_v + if self.use_displacement { self.d_x } else { 0 }
    }

    pub fn init_param_name(&self) -> String {
        format!("{}.a_init", self.name)
    }

    pub fn main_param_name(&self) -> String {
        format!("{}.a_main", self.name)
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        store.register(
            &self.init_param_name(),
            &[self.heads, self.init_score_len()],
            InitKind::GlorotUniform {
                fan_in: self.init_score_len(),
                fan_out: 1,
            },
        )?;
        store.register(
            &self.main_param_name(),
            &[self.heads, self.main_score_len()],
            InitKind::GlorotUniform {
                fan_in: self.main_score_len(),
                fan_out: 1,
            },
        )
    }

    fn leaky(&self, x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            self.leaky_slope * x
        }
    }

    fn leaky_derivative(&self, x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else {
            self.leaky_slope
        }
    }

    /// Score every neighbor with vector `a`, for one head. The score input
    /// is [prefix?; feat_j; disp_j].
    fn scores(&self, a: &[f64], prefix: Option<&[f64]>, feats: &Tensor, disps: &Tensor) -> Vec<f64> {
        let n = feats.shape()[0];
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let mut acc = 0.0;
            let mut offset = 0;
            if let Some(p) = prefix {
                for (av, pv) in a[..p.len()].iter().zip(p) {
                    acc += av * pv;
                }
                offset = p.len();
            }
            for (av, fv) in a[offset..offset + self.d_v].iter().zip(feats.row(j)) {
                acc += av * fv;
            }
            if self.use_displacement {
                for (av, dv) in a[offset + self.d_v..].iter().zip(disps.row(j)) {
                    acc += av * dv;
                }
            }
            out.push(acc);
        }
        out
    }

    /// Forward pass over one neighborhood: `feats` [n, d_v], `disps`
    /// [n, d_x]. Returns the predicted feature embedding and the cache.
    pub fn forward(
        &self,
        store: &ParameterStore,
        feats: &Tensor,
        disps: &Tensor,
    ) -> Result<(Vec<f64>, ContextCache)> {
        let (n, fv) = feats.dims2();
        if n == 0 {
            return Err(Error::Invalid("context decoder needs at least one neighbor".into()));
        }
        if fv != self.d_v {
            return Err(Error::Invalid(format!(
                "context decoder expects feature dim {}, got {fv}",
                self.d_v
            )));
        }
        if self.use_displacement {
            let (dn, dx) = disps.dims2();
            if dn != n || dx != self.d_x {
                return Err(Error::Invalid(format!(
                    "context decoder expects displacement shape [{n}, {}], got {:?}",
                    self.d_x,
                    disps.shape()
                )));
            }
        }
        let k = self.heads;
        let a_init = store.value(&self.init_param_name()).clone();
        let a_main = store.value(&self.main_param_name()).clone();

        // init layer
        let mut pre_init = vec![0.0; n * k];
        let mut alpha_init = vec![0.0; n * k];
        let mut u_init = vec![0.0; self.d_v];
        for h in 0..k {
            let raw = self.scores(a_init.row(h), None, feats, disps);
            for j in 0..n {
                pre_init[j * k + h] = raw[j];
            }
            let act: Vec<f64> = raw.iter().map(|&s| self.leaky(s)).collect();
            let alpha = softmax(&act);
            for j in 0..n {
                alpha_init[j * k + h] = alpha[j];
                for (acc, &f) in u_init.iter_mut().zip(feats.row(j)) {
                    *acc += alpha[j] * f / k as f64;
                }
            }
        }
        let e_init: Vec<f64> = u_init.iter().map(|&u| self.output_activation.apply(u)).collect();

        // main layer
        let mut pre_main = vec![0.0; n * k];
        let mut alpha_main = vec![0.0; n * k];
        let mut u_main = vec![0.0; self.d_v];
        for h in 0..k {
            let raw = self.scores(a_main.row(h), Some(&e_init), feats, disps);
            for j in 0..n {
                pre_main[j * k + h] = raw[j];
            }
            let act: Vec<f64> = raw.iter().map(|&s| self.leaky(s)).collect();
            let alpha = softmax(&act);
            for j in 0..n {
                alpha_main[j * k + h] = alpha[j];
                for (acc, &f) in u_main.iter_mut().zip(feats.row(j)) {
                    *acc += alpha[j] * f / k as f64;
                }
            }
        }
        let out: Vec<f64> = u_main.iter().map(|&u| self.output_activation.apply(u)).collect();

        Ok((
            out,
            ContextCache {
                feats: feats.clone(),
                disps: disps.clone(),
                pre_init,
                alpha_init,
                u_init,
                e_init,
                pre_main,
                alpha_main,
                u_main,
            },
        ))
    }

    /// The initial guess alone; exposed for inspection and tests.
    pub fn init_embedding(&self, store: &ParameterStore, feats: &Tensor, disps: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(store, feats, disps)?.1.e_init)
    }

    /// Backward through both attention layers. Accumulates score-vector
    /// gradients into the store and returns (d feats [n, d_v], d disps
    /// [n, d_x]).
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &ContextCache,
        upstream: &[f64],
    ) -> Result<(Tensor, Tensor)> {
        if upstream.len() != self.d_v {
            return Err(Error::Invalid(format!(
                "context decoder upstream must have dim {}, got {}",
                self.d_v,
                upstream.len()
            )));
        }
        let n = cache.num_neighbors();
        let k = self.heads;
        let a_init = store.value(&self.init_param_name()).clone();
        let a_main = store.value(&self.main_param_name()).clone();

        let mut d_feats = Tensor::zeros(&[n, self.d_v]);
        let mut d_disps = Tensor::zeros(&[n, self.d_x]);
        let mut d_a_init = Tensor::zeros(&[k, self.init_score_len()]);
        let mut d_a_main = Tensor::zeros(&[k, self.main_score_len()]);
        let mut d_e_init = vec![0.0; self.d_v];

        // du = upstream * g'(u_main)
        let du: Vec<f64> = upstream
            .iter()
            .zip(cache.u_main.iter())
            .map(|(&g, &u)| g * self.output_activation.derivative(u))
            .collect();

        // main layer
        for h in 0..k {
            let inv_k = 1.0 / k as f64;
            // d alpha and pooled-feature path
            let mut d_alpha = vec![0.0; n];
            for j in 0..n {
                let alpha = cache.alpha_main[j * k + h];
                let mut dot = 0.0;
                for (dv, &f) in du.iter().zip(cache.feats.row(j)) {
                    dot += dv * f;
                }
                d_alpha[j] = inv_k * dot;
                for (acc, &dv) in d_feats.row_mut(j).iter_mut().zip(du.iter()) {
                    *acc += inv_k * alpha * dv;
                }
            }
            // softmax backward
            let weighted: f64 = (0..n).map(|j| cache.alpha_main[j * k + h] * d_alpha[j]).sum();
            for j in 0..n {
                let alpha = cache.alpha_main[j * k + h];
                let ds = alpha * (d_alpha[j] - weighted);
                let dpre = ds * self.leaky_derivative(cache.pre_main[j * k + h]);
                if dpre == 0.0 {
                    continue;
                }
                // d a_main[h] += dpre * [e_init; F_j; D_j]
                let arow = a_main.row(h);
                let darow = d_a_main.row_mut(h);
                for i in 0..self.d_v {
                    darow[i] += dpre * cache.e_init[i];
                    d_e_init[i] += dpre * arow[i];
                }
                for i in 0..self.d_v {
                    darow[self.d_v + i] += dpre * cache.feats.row(j)[i];
                    d_feats.row_mut(j)[i] += dpre * arow[self.d_v + i];
                }
                if self.use_displacement {
                    for i in 0..self.d_x {
                        darow[2 * self.d_v + i] += dpre * cache.disps.row(j)[i];
                        d_disps.row_mut(j)[i] += dpre * arow[2 * self.d_v + i];
                    }
                }
            }
        }

        // through g at the init embedding
        let du_init: Vec<f64> = d_e_init
            .iter()
            .zip(cache.u_init.iter())
            .map(|(&g, &u)| g * self.output_activation.derivative(u))
            .collect();

        // init layer
        for h in 0..k {
            let inv_k = 1.0 / k as f64;
            let mut d_alpha = vec![0.0; n];
            for j in 0..n {
                let alpha = cache.alpha_init[j * k + h];
                let mut dot = 0.0;
                for (dv, &f) in du_init.iter().zip(cache.feats.row(j)) {
                    dot += dv * f;
                }
                d_alpha[j] = inv_k * dot;
                for (acc, &dv) in d_feats.row_mut(j).iter_mut().zip(du_init.iter()) {
                    *acc += inv_k * alpha * dv;
                }
            }
            let weighted: f64 = (0..n).map(|j| cache.alpha_init[j * k + h] * d_alpha[j]).sum();
            for j in 0..n {
                let alpha = cache.alpha_init[j * k + h];
                let ds = alpha * (d_alpha[j] - weighted);
                let dpre = ds * self.leaky_derivative(cache.pre_init[j * k + h]);
                if dpre == 0.0 {
                    continue;
                }
                let arow = a_init.row(h);
                let darow = d_a_init.row_mut(h);
                for i in 0..self.d_v {
                    darow[i] += dpre * cache.feats.row(j)[i];
                    d_feats.row_mut(j)[i] += dpre * arow[i];
                }
                if self.use_displacement {
                    for i in 0..self.d_x {
                        darow[self.d_v + i] += dpre * cache.disps.row(j)[i];
                        d_disps.row_mut(j)[i] += dpre * arow[self.d_v + i];
                    }
                }
            }
        }

        store.accumulate_grad(&self.init_param_name(), &d_a_init)?;
        store.accumulate_grad(&self.main_param_name(), &d_a_main)?;
        Ok((d_feats, d_disps))
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
