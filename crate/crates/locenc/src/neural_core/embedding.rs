//! Embedding tables with gather forward and scatter-add backward.

use super::{InitKind, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Row-indexed embedding table stored as `<name>` in the parameter store.
pub struct EmbeddingTable {
    name: String,
    pub rows: usize,
    pub dim: usize,
    cache: Option<Vec<usize>>,
}

impl EmbeddingTable {
    pub fn new(name: impl Into<String>, rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            name: name.into(),
            rows,
            dim,
            cache: None,
        }
    }

    pub fn param_name(&self) -> &str {
        &self.name
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        store.register(
            &self.name,
            &[self.rows, self.dim],
            InitKind::Normal {
                std: 1.0 / (self.dim as f64).sqrt(),
            },
        )
    }

    /// Gather the rows for `ids` into a [B, dim] tensor.
    pub fn forward(&mut self, store: &ParameterStore, ids: &[usize]) -> Result<Tensor> {
        let gathered = self.lookup(store, ids)?;
        self.cache = Some(ids.to_vec());
        Ok(gathered)
    }

    /// Gather without caching; for inference paths.
    pub fn lookup(&self, store: &ParameterStore, ids: &[usize]) -> Result<Tensor> {
        let table = store.value(&self.name);
        let mut out = Tensor::zeros(&[ids.len(), self.dim]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.rows {
                return Err(Error::Invalid(format!(
                    "embedding '{}': id {} out of range ({} rows)",
                    self.name, id, self.rows
                )));
            }
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        Ok(out)
    }

    /// Scatter-add upstream gradients into the table rows; repeated ids
    /// accumulate.
    pub fn backward(&mut self, store: &mut ParameterStore, upstream: &Tensor) -> Result<()> {
        let ids = self
            .cache
            .take()
            .ok_or_else(|| Error::Invalid(format!("embedding '{}': backward without forward", self.name)))?;
        let (batch, dim) = upstream.dims2();
        if batch != ids.len() || dim != self.dim {
            return Err(Error::Invalid(format!(
                "embedding '{}': upstream shape {:?} does not match {} ids of dim {}",
                self.name,
                upstream.shape(),
                ids.len(),
                self.dim
            )));
        }
        let mut delta = Tensor::zeros(&[self.rows, self.dim]);
        for (r, &id) in ids.iter().enumerate() {
            for (acc, &g) in delta.row_mut(id).iter_mut().zip(upstream.row(r)) {
                *acc += g;
            }
        }
        store.accumulate_grad(&self.name, &delta)
    }
}
