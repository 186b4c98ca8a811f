//! Point feature encoder: a point's feature embedding is the mean of its
//! type embeddings, with the type matrix kept row-normalized during
//! training.

use crate::error::{Error, Result};
use crate::neural_core::{l2_normalize_rows, EmbeddingTable, ParameterStore, Tensor};

/// Mean-of-type-embeddings encoder over a shared type table.
pub struct FeatureEncoder {
    table: EmbeddingTable,
    cache: Option<Vec<Vec<usize>>>,
}

impl FeatureEncoder {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        FeatureEncoder {
            table: EmbeddingTable::new("feat.types", vocab_size, dim),
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows
    }

    pub fn table_name(&self) -> &str {
        self.table.param_name()
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        self.table.register(store)
    }

    /// Mean of the type rows for each set; rows are cached for backward.
    pub fn encode_batch(&mut self, store: &ParameterStore, type_sets: &[&[usize]]) -> Result<Tensor> {
        let out = self.lookup_batch(store, type_sets)?;
        self.cache = Some(type_sets.iter().map(|s| s.to_vec()).collect());
        Ok(out)
    }

    /// Mean of the type rows without caching; for inference.
    pub fn lookup_batch(&self, store: &ParameterStore, type_sets: &[&[usize]]) -> Result<Tensor> {
        let table = store.value(self.table.param_name());
        let mut out = Tensor::zeros(&[type_sets.len(), self.table.dim]);
        for (r, set) in type_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Invalid("cannot encode an empty type set".into()));
            }
            let row = out.row_mut(r);
            for &t in set.iter() {
                if t >= self.table.rows {
                    return Err(Error::Invalid(format!(
                        "type id {t} out of range ({} types)",
                        self.table.rows
                    )));
                }
                for (acc, &v) in row.iter_mut().zip(table.row(t)) {
                    *acc += v;
                }
            }
            let inv = 1.0 / set.len() as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(out)
    }

    /// Single-point convenience wrapper around [`Self::lookup_batch`].
    pub fn encode_one(&self, store: &ParameterStore, type_ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.lookup_batch(store, &[type_ids])?.row(0).to_vec())
    }

    /// Distribute grad/H of each row into that row's type embeddings.
    pub fn backward(&mut self, store: &mut ParameterStore, upstream: &Tensor) -> Result<()> {
        let sets = self
            .cache
            .take()
            .ok_or_else(|| Error::Invalid("feature encoder: backward without forward".into()))?;
        let (batch, dim) = upstream.dims2();
        if batch != sets.len() || dim != self.table.dim {
            return Err(Error::Invalid(format!(
                "feature encoder upstream shape {:?} does not match {} sets of dim {}",
                upstream.shape(),
                sets.len(),
                self.table.dim
            )));
        }
        let mut delta = Tensor::zeros(&[self.table.rows, self.table.dim]);
        for (r, set) in sets.iter().enumerate() {
            let inv = 1.0 / set.len() as f64;
            for &t in set {
                for (acc, &g) in delta.row_mut(t).iter_mut().zip(upstream.row(r)) {
                    *acc += g * inv;
                }
            }
        }
        store.accumulate_grad(self.table.param_name(), &delta)
    }

    /// Project the type matrix back onto unit-norm rows; applied after each
    /// optimizer step.
    pub fn apply_normalization(&self, store: &mut ParameterStore) {
        let normalized = l2_normalize_rows(store.value(self.table.param_name()));
        *store.value_mut(self.table.param_name()) = normalized;
    }
}
