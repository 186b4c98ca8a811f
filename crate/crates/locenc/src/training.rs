//! Unsupervised training: negative-sampling loss over predicted vs true
//! feature embeddings, mini-batch Adam, per-step type-matrix
//! renormalization, and model selection by validation NLL.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{ContextDecoder, LocationDecoder};
use crate::encoder_assembly::EncoderModel;
use crate::error::{Error, Result};
use crate::feature_encoder::FeatureEncoder;
use crate::neural_core::{sigmoid, AdamParams, ParameterStore, Tensor};
use crate::poi_data::{Dataset, NeighborIndex, SplitAssignment};
use crate::rng::seeded_rng;

/// Which prediction problem the model solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Predict a point's feature embedding from its absolute position.
    Loc,
    /// Predict it from the features and displacements of its n nearest
    /// neighbors.
    Cont,
}

/// Numeric training knobs; dims and architecture live in the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives per example in the training loss.
    pub train_negatives: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            train_negatives: 10,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Precomputed neighborhoods for every point of a dataset. Neighbors are
/// drawn from the full dataset minus the center: held-out centers never
/// train as centers but still serve as context.
pub struct ContextSet {
    pub n: usize,
    by_index: Vec<crate::poi_data::ContextNeighborhood>,
}

impl ContextSet {
    pub fn build(ds: &Dataset, n: usize) -> Result<Self> {
        let index = NeighborIndex::new(ds);
        let by_index = ds
            .points()
            .iter()
            .map(|p| index.query(p.id, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ContextSet { n, by_index })
    }

    pub fn of_index(&self, idx: usize) -> &crate::poi_data::ContextNeighborhood {
        &self.by_index[idx]
    }
}

/// Task-specific architecture around the shared feature encoder.
pub enum ModelArch {
    Loc {
        encoder: EncoderModel,
        decoder: LocationDecoder,
    },
    Cont {
        displacement_encoder: EncoderModel,
        decoder: ContextDecoder,
        context_size: usize,
    },
}

/// A complete trainable model: feature encoder plus task architecture.
pub struct TaskModel {
    pub feat: FeatureEncoder,
    pub arch: ModelArch,
}

impl TaskModel {
    pub fn task(&self) -> Task {
        match self.arch {
            ModelArch::Loc { .. } => Task::Loc,
            ModelArch::Cont { .. } => Task::Cont,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feat.dim()
    }

    pub fn context_size(&self) -> Option<usize> {
        match &self.arch {
            ModelArch::Loc { .. } => None,
            ModelArch::Cont { context_size, .. } => Some(*context_size),
        }
    }

    pub fn set_train_mode(&mut self, on: bool) {
        match &mut self.arch {
            ModelArch::Loc { encoder, .. } => encoder.train_mode = on,
            ModelArch::Cont { displacement_encoder, .. } => displacement_encoder.train_mode = on,
        }
    }

    /// Predicted feature embeddings for dataset point indices (inference:
    /// no dropout, no gradient caches consumed afterwards).
    pub fn predict(
        &mut self,
        store: &ParameterStore,
        ds: &Dataset,
        indices: &[usize],
        contexts: Option<&ContextSet>,
    ) -> Result<Tensor> {
        match &mut self.arch {
            ModelArch::Loc { encoder, decoder } => {
                let xs: Vec<[f64; 2]> = indices.iter().map(|&i| ds.points()[i].loc).collect();
                let h = encoder.encode(store, &xs, None)?;
                decoder.forward(store, &h)
            }
            ModelArch::Cont { displacement_encoder, decoder, context_size } => {
                let contexts = contexts.ok_or_else(|| {
                    Error::Invalid("context-model prediction needs a ContextSet".into())
                })?;
                if contexts.n != *context_size {
                    return Err(Error::Invalid(format!(
                        "context set has n={}, model expects {}",
                        contexts.n, context_size
                    )));
                }
                let n = *context_size;
                let mut all_disps: Vec<[f64; 2]> = Vec::with_capacity(indices.len() * n);
                let mut neighbor_sets: Vec<&[usize]> = Vec::with_capacity(indices.len() * n);
                for &i in indices {
                    let ctx = contexts.of_index(i);
                    for (nid, d) in ctx.neighbor_ids.iter().zip(&ctx.displacements) {
                        let nidx = ds.index_of(*nid).expect("neighbor id valid");
                        neighbor_sets.push(&ds.points()[nidx].type_ids);
                        all_disps.push(*d);
                    }
                }
                let d_all = displacement_encoder.encode(store, &all_disps, None)?;
                let f_all = self.feat.lookup_batch(store, &neighbor_sets)?;
                let mut out = Tensor::zeros(&[indices.len(), self.feat.dim()]);
                for (b, _) in indices.iter().enumerate() {
                    let feats = slice_rows(&f_all, b * n, n);
                    let disps = slice_rows(&d_all, b * n, n);
                    let (pred, _) = decoder.forward(store, &feats, &disps)?;
                    out.row_mut(b).copy_from_slice(&pred);
                }
                Ok(out)
            }
        }
    }
}

fn slice_rows(t: &Tensor, start: usize, count: usize) -> Tensor {
    let (_, cols) = t.dims2();
    let mut out = Tensor::zeros(&[count, cols]);
    for r in 0..count {
        out.row_mut(r).copy_from_slice(t.row(start + r));
    }
    out
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// −log softmax of ⟨candidate, predicted⟩ over all candidates, at the true
/// row. Used for NLL reporting.
pub fn full_softmax_loss(predicted: &[f64], candidates: &Tensor, true_index: usize) -> Result<f64> {
    let (rows, cols) = candidates.dims2();
    if rows == 0 {
        return Err(Error::Invalid("softmax needs at least one candidate".into()));
    }
    if true_index >= rows {
        return Err(Error::Invalid(format!(
            "true index {true_index} out of range for {rows} candidates"
        )));
    }
    if cols != predicted.len() {
        return Err(Error::Invalid(format!(
            "predicted dim {} does not match candidate dim {cols}",
            predicted.len()
        )));
    }
    let scores: Vec<f64> = (0..rows)
        .map(|r| candidates.row(r).iter().zip(predicted).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[true_index])
}

/// Uniform sample of `count` distinct point ids, never including `true_id`.
pub fn sample_negatives(
    ds: &Dataset,
    true_id: u64,
    count: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<u64>> {
    let true_idx = ds
        .index_of(true_id)
        .ok_or_else(|| Error::Invalid(format!("unknown point id {true_id}")))?;
    let indices = sample_negative_indices(ds.len(), true_idx, count, rng)?;
    Ok(indices.into_iter().map(|i| ds.points()[i].id).collect())
}

/// Index-space version: sample from {0..len} \ {true_idx} without
/// replacement.
pub(crate) fn sample_negative_indices(
    len: usize,
    true_idx: usize,
    count: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    if count >= len {
        return Err(Error::Invalid(format!(
            "cannot sample {count} negatives from {len} points"
        )));
    }
    let picked = rand::seq::index::sample(rng, len - 1, count);
    Ok(picked
        .into_iter()
        .map(|i| if i >= true_idx { i + 1 } else { i })
        .collect())
}

/// Negative-sampling loss
/// −[ln σ(⟨e_true, e'⟩) + (1/m)·Σ ln σ(−⟨e_neg, e'⟩)].
pub fn neg_sampling_loss(true_emb: &[f64], predicted: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Invalid("negative-sampling loss needs at least one negative".into()));
    }
    let pos: f64 = true_emb.iter().zip(predicted).map(|(a, b)| a * b).sum();
    let mut loss = softplus(-pos);
    let inv = 1.0 / negatives.len() as f64;
    for neg in negatives {
        let s: f64 = neg.iter().zip(predicted).map(|(a, b)| a * b).sum();
        loss += inv * softplus(s);
    }
    Ok(loss)
}

/// One epoch record: mean training loss and validation NLL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
}

/// Training result: the best-by-validation-NLL parameter snapshot plus the
/// full loss history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub best_store: ParameterStore,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub history: Vec<EpochRecord>,
}

/// Mean full-softmax NLL of `indices` against all dataset points as
/// candidates.
pub fn mean_full_softmax_nll(
    model: &mut TaskModel,
    store: &ParameterStore,
    ds: &Dataset,
    indices: &[usize],
    contexts: Option<&ContextSet>,
) -> Result<f64> {
    let sets: Vec<&[usize]> = ds.points().iter().map(|p| &p.type_ids[..]).collect();
    let candidates = model.feat.lookup_batch(store, &sets)?;
    let preds = model.predict(store, ds, indices, contexts)?;
    let mut total = 0.0;
    for (b, &idx) in indices.iter().enumerate() {
        total += full_softmax_loss(preds.row(b), &candidates, idx)?;
    }
    Ok(total / indices.len().max(1) as f64)
}

struct LossGrads {
    loss_sum: f64,
    d_pred: Tensor,
    d_true: Tensor,
    d_negs: Tensor,
}

/// Negative-sampling loss and gradients over a batch. `preds` is [B, d],
/// `trues` [B, d], `negs` [B·m, d] with example b's negatives in rows
/// b·m..(b+1)·m. Gradients carry the 1/B batch-mean factor.
fn batch_loss_grads(preds: &Tensor, trues: &Tensor, negs: &Tensor, m: usize) -> LossGrads {
    let (batch, dim) = preds.dims2();
    let inv_b = 1.0 / batch as f64;
    let inv_m = 1.0 / m as f64;
    let mut loss_sum = 0.0;
    let mut d_pred = Tensor::zeros(&[batch, dim]);
    let mut d_true = Tensor::zeros(&[batch, dim]);
    let mut d_negs = Tensor::zeros(&[batch * m, dim]);
    for b in 0..batch {
        let pred = preds.row(b);
        let truth = trues.row(b);
        let pos: f64 = truth.iter().zip(pred).map(|(a, c)| a * c).sum();
        loss_sum += softplus(-pos);
        let coef_pos = sigmoid(pos) - 1.0;
        for i in 0..dim {
            d_pred.row_mut(b)[i] += coef_pos * truth[i] * inv_b;
            d_true.row_mut(b)[i] += coef_pos * pred[i] * inv_b;
        }
        for o in 0..m {
            let neg = negs.row(b * m + o);
            let s: f64 = neg.iter().zip(pred).map(|(a, c)| a * c).sum();
            loss_sum += inv_m * softplus(s);
            let coef = sigmoid(s) * inv_m;
            for i in 0..dim {
                d_pred.row_mut(b)[i] += coef * neg[i] * inv_b;
                d_negs.row_mut(b * m + o)[i] += coef * pred[i] * inv_b;
            }
        }
    }
    LossGrads {
        loss_sum,
        d_pred,
        d_true,
        d_negs,
    }
}

/// Train on the split's train ids, tracking validation NLL per epoch and
/// returning the best checkpoint. Deterministic for a fixed config seed.
pub fn train(
    ds: &Dataset,
    split: &SplitAssignment,
    model: &mut TaskModel,
    store: &mut ParameterStore,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.epochs < 1 || cfg.batch_size < 1 {
        return Err(Error::Config("training needs at least one epoch and batch size 1".into()));
    }
    if cfg.train_negatives < 1 {
        return Err(Error::Config("training needs at least one negative per example".into()));
    }
    if cfg.train_negatives >= ds.len() {
        return Err(Error::Config(format!(
            "{} training negatives but only {} points",
            cfg.train_negatives,
            ds.len()
        )));
    }
    let to_indices = |ids: &[u64]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                ds.index_of(*id)
                    .ok_or_else(|| Error::Invalid(format!("split references unknown id {id}")))
            })
            .collect()
    };
    let mut train_indices = to_indices(&split.train)?;
    let val_indices = to_indices(&split.val)?;
    if train_indices.is_empty() || val_indices.is_empty() {
        return Err(Error::Invalid("train and validation splits must be non-empty".into()));
    }

    let contexts = match model.context_size() {
        Some(n) => Some(ContextSet::build(ds, n)?),
        None => None,
    };

    let adam = AdamParams {
        lr: cfg.learning_rate,
        ..AdamParams::default()
    };
    let mut shuffle_rng = seeded_rng(cfg.seed, "train.shuffle");
    let mut neg_rng = seeded_rng(cfg.seed, "train.negatives");
    let mut dropout_rng = seeded_rng(cfg.seed, "train.dropout");

    let m = cfg.train_negatives;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        train_indices.shuffle(&mut shuffle_rng);
        model.set_train_mode(true);
        let mut epoch_loss = 0.0;

        for (batch_no, batch) in train_indices.chunks(cfg.batch_size).enumerate() {
            store.zero_grads();
            let loss_sum = match &mut model.arch {
                ModelArch::Loc { encoder, decoder } => loc_batch(
                    ds,
                    batch,
                    encoder,
                    decoder,
                    &mut model.feat,
                    store,
                    m,
                    &mut neg_rng,
                    &mut dropout_rng,
                )?,
                ModelArch::Cont { displacement_encoder, decoder, context_size } => cont_batch(
                    ds,
                    batch,
                    displacement_encoder,
                    decoder,
                    &mut model.feat,
                    contexts.as_ref().expect("context set built for cont"),
                    *context_size,
                    store,
                    m,
                    &mut neg_rng,
                    &mut dropout_rng,
                )?,
            };
            if !loss_sum.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_loss += loss_sum;
            step += 1;
            store.adam_step(&adam, step)?;
            model.feat.apply_normalization(store);
        }

        model.set_train_mode(false);
        let val_nll = mean_full_softmax_nll(model, store, ds, &val_indices, contexts.as_ref())?;
        let train_loss = epoch_loss / train_indices.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_nll,
        });
        let better = match &best {
            None => true,
            Some((best_nll, _, _)) => val_nll < *best_nll,
        };
        if better {
            best = Some((val_nll, epoch, store.clone()));
        }
    }

    let (best_val_nll, best_epoch, best_store) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_store,
        best_epoch,
        best_val_nll,
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn loc_batch(
    ds: &Dataset,
    batch: &[usize],
    encoder: &mut EncoderModel,
    decoder: &mut LocationDecoder,
    feat: &mut FeatureEncoder,
    store: &mut ParameterStore,
    m: usize,
    neg_rng: &mut ChaCha12Rng,
    dropout_rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let b = batch.len();
    let xs: Vec<[f64; 2]> = batch.iter().map(|&i| ds.points()[i].loc).collect();
    let mut sets: Vec<&[usize]> = Vec::with_capacity(b * (1 + m));
    for &i in batch {
        sets.push(&ds.points()[i].type_ids);
    }
    for &i in batch {
        for neg in sample_negative_indices(ds.len(), i, m, neg_rng)? {
            sets.push(&ds.points()[neg].type_ids);
        }
    }
    let feats_all = feat.encode_batch(store, &sets)?;
    let trues = slice_rows(&feats_all, 0, b);
    let negs = slice_rows(&feats_all, b, b * m);

    let h = encoder.encode(store, &xs, Some(dropout_rng))?;
    let preds = decoder.forward(store, &h)?;

    let grads = batch_loss_grads(&preds, &trues, &negs, m);

    let dh = decoder.backward(store, &grads.d_pred)?;
    encoder.backward(store, &dh)?;
    let mut d_feats = Tensor::zeros(feats_all.shape());
    for r in 0..b {
        d_feats.row_mut(r).copy_from_slice(grads.d_true.row(r));
    }
    for r in 0..b * m {
        d_feats.row_mut(b + r).copy_from_slice(grads.d_negs.row(r));
    }
    feat.backward(store, &d_feats)?;
    Ok(grads.loss_sum)
}

#[allow(clippy::too_many_arguments)]
fn cont_batch(
    ds: &Dataset,
    batch: &[usize],
    disp_encoder: &mut EncoderModel,
    decoder: &ContextDecoder,
    feat: &mut FeatureEncoder,
    contexts: &ContextSet,
    n: usize,
    store: &mut ParameterStore,
    m: usize,
    neg_rng: &mut ChaCha12Rng,
    dropout_rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let b = batch.len();
    let mut all_disps: Vec<[f64; 2]> = Vec::with_capacity(b * n);
    let mut sets: Vec<&[usize]> = Vec::with_capacity(b * (n + 1 + m));
    for &i in batch {
        let ctx = contexts.of_index(i);
        for (nid, d) in ctx.neighbor_ids.iter().zip(&ctx.displacements) {
            let nidx = ds.index_of(*nid).expect("neighbor id valid");
            sets.push(&ds.points()[nidx].type_ids);
            all_disps.push(*d);
        }
    }
    for &i in batch {
        sets.push(&ds.points()[i].type_ids);
    }
    for &i in batch {
        for neg in sample_negative_indices(ds.len(), i, m, neg_rng)? {
            sets.push(&ds.points()[neg].type_ids);
        }
    }
    let feats_all = feat.encode_batch(store, &sets)?;
    let d_all = disp_encoder.encode(store, &all_disps, Some(dropout_rng))?;

    let trues = slice_rows(&feats_all, b * n, b);
    let negs = slice_rows(&feats_all, b * n + b, b * m);
    let mut preds = Tensor::zeros(&[b, feat.dim()]);
    let mut caches = Vec::with_capacity(b);
    for bi in 0..b {
        let nf = slice_rows(&feats_all, bi * n, n);
        let nd = slice_rows(&d_all, bi * n, n);
        let (out, cache) = decoder.forward(store, &nf, &nd)?;
        preds.row_mut(bi).copy_from_slice(&out);
        caches.push(cache);
    }

    let grads = batch_loss_grads(&preds, &trues, &negs, m);

    let mut d_feats = Tensor::zeros(feats_all.shape());
    let mut d_disps = Tensor::zeros(d_all.shape());
    for (bi, cache) in caches.iter().enumerate() {
        let (df, dd) = decoder.backward(store, cache, grads.d_pred.row(bi))?;
        for j in 0..n {
            for (acc, &g) in d_feats.row_mut(bi * n + j).iter_mut().zip(df.row(j)) {
                *acc += g;
            }
            for (acc, &g) in d_disps.row_mut(bi * n + j).iter_mut().zip(dd.row(j)) {
                *acc += g;
            }
        }
    }
    for r in 0..b {
        d_feats.row_mut(b * n + r).copy_from_slice(grads.d_true.row(r));
    }
    for r in 0..b * m {
        d_feats.row_mut(b * n + b + r).copy_from_slice(grads.d_negs.row(r));
    }
    feat.backward(store, &d_feats)?;
    disp_encoder.backward(store, &d_disps)?;
    Ok(grads.loss_sum)
}
