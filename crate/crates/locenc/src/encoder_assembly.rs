//! Composition of a raw featurizer with its trainable head into one
//! location (or displacement) encoder.
//!
//! Heads: a feed-forward stack of ReLU layers, a structurally
//! block-diagonal linear map (one block per scale), a plain embedding table
//! for the cell-id featurizers, or the wrap residual stack (initial dense
//! plus h residual blocks with dropout inside).

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural_core::{
    Activation, BlockDiagDense, Dense, Dropout, EmbeddingTable, ParameterStore, Tensor,
};
use crate::space_encoders::{RawFeatureKind, RawOutput, RawWidth};

/// Trainable head placed on top of the raw featurization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum HeadSpec {
    /// `hidden_layers` ReLU layers of `hidden_units`, then a linear map to
    /// the output dim.
    Ffn { hidden_layers: usize, hidden_units: usize },
    /// Single linear map constrained block-diagonal with one block per
    /// scale; requires the output dim to be divisible by the scale count.
    BlockDiag,
    /// Cell-id lookup straight into the embedding table.
    Table,
    /// Initial dense to the output dim, then `blocks` residual blocks with
    /// `units` hidden neurons and dropout between the two layers.
    Residual { blocks: usize, units: usize, dropout: f64 },
}

/// Everything needed to rebuild an encoder bit-for-bit: the frozen raw
/// featurizer (anchors and boxes resolved), the head, and the output dim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: RawFeatureKind,
    pub head: HeadSpec,
    pub output_dim: usize,
}

struct ResidualBlock {
    fc1: Dense,
    dropout: Dropout,
    fc2: Dense,
    input: Option<Tensor>,
}

impl ResidualBlock {
    fn forward(
        &mut self,
        store: &ParameterStore,
        input: &Tensor,
        rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Result<Tensor> {
        let h = self.fc1.forward(store, input)?;
        let h = self.dropout.forward(&h, rng.as_deref_mut());
        let y = self.fc2.forward(store, &h)?;
        let mut out = input.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(y.data()) {
            *o += v;
        }
        self.input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, store: &mut ParameterStore, upstream: &Tensor) -> Result<Tensor> {
        self.input.take().ok_or_else(|| {
            Error::Invalid("residual block: backward without forward".into())
        })?;
        let dh = self.fc2.backward(store, upstream)?;
        let dh = self.dropout.backward(&dh);
        let dx_branch = self.fc1.backward(store, &dh)?;
        let mut dx = upstream.clone();
        for (o, &v) in dx.data_mut().iter_mut().zip(dx_branch.data()) {
            *o += v;
        }
        Ok(dx)
    }
}

enum Head {
    Ffn(Vec<Dense>),
    BlockDiag(BlockDiagDense),
    Table(EmbeddingTable),
    Residual { initial: Dense, blocks: Vec<ResidualBlock> },
}

/// A raw featurizer plus its trainable head; parameters are namespaced in
/// the store. Dropout (wrap head only) is active only in training mode.
pub struct EncoderModel {
    pub spec: EncoderSpec,
    head: Head,
    pub train_mode: bool,
}

impl EncoderModel {
    /// Build and register parameters under `namespace`.
    pub fn build(spec: EncoderSpec, namespace: &str, store: &mut ParameterStore) -> Result<Self> {
        spec.kind.validate()?;
        if spec.output_dim == 0 {
            return Err(Error::Config("encoder output dim must be positive".into()));
        }
        let head = match (&spec.head, spec.kind.width()) {
            (HeadSpec::Ffn { hidden_layers, hidden_units }, RawWidth::Features(raw)) => {
                if *hidden_layers < 1 {
                    return Err(Error::Config("ffn head needs at least one hidden layer".into()));
                }
                if *hidden_units < 1 {
                    return Err(Error::Config("ffn head needs positive hidden width".into()));
                }
                let mut layers = Vec::new();
                let mut in_dim = raw;
                for i in 0..*hidden_layers {
                    layers.push(Dense::new(
                        format!("{namespace}.ffn{i}"),
                        in_dim,
                        *hidden_units,
                        Activation::Relu,
                    ));
                    in_dim = *hidden_units;
                }
                layers.push(Dense::new(
                    format!("{namespace}.out"),
                    in_dim,
                    spec.output_dim,
                    Activation::Identity,
                ));
                for l in &layers {
                    l.register(store)?;
                }
                Head::Ffn(layers)
            }
            (HeadSpec::BlockDiag, RawWidth::Features(raw)) => {
                let scales = match &spec.kind {
                    RawFeatureKind::Theory { scales } => scales.num_scales,
                    other => {
                        return Err(Error::Config(format!(
                            "block-diagonal head requires the theory featurizer, got {other:?}"
                        )))
                    }
                };
                if spec.output_dim % scales != 0 {
                    return Err(Error::Config(format!(
                        "block-diagonal head needs output dim divisible by {scales} scales, got {}",
                        spec.output_dim
                    )));
                }
                let layer = BlockDiagDense::new(
                    format!("{namespace}.blockdiag"),
                    scales,
                    raw / scales,
                    spec.output_dim / scales,
                    Activation::Identity,
                );
                layer.register(store)?;
                Head::BlockDiag(layer)
            }
            (HeadSpec::Table, RawWidth::Cells(cells)) => {
                let table = EmbeddingTable::new(format!("{namespace}.table"), cells, spec.output_dim);
                table.register(store)?;
                Head::Table(table)
            }
            (HeadSpec::Residual { blocks, units, dropout }, RawWidth::Features(raw)) => {
                if !(0.0..1.0).contains(dropout) {
                    return Err(Error::Config("residual dropout must be in [0, 1)".into()));
                }
                let initial =
                    Dense::new(format!("{namespace}.res.init"), raw, spec.output_dim, Activation::Relu);
                initial.register(store)?;
                let mut res_blocks = Vec::new();
                for b in 0..*blocks {
                    let fc1 = Dense::new(
                        format!("{namespace}.res.b{b}.fc1"),
                        spec.output_dim,
                        *units,
                        Activation::Relu,
                    );
                    let fc2 = Dense::new(
                        format!("{namespace}.res.b{b}.fc2"),
                        *units,
                        spec.output_dim,
                        Activation::Identity,
                    );
                    fc1.register(store)?;
                    fc2.register(store)?;
                    res_blocks.push(ResidualBlock {
                        fc1,
                        dropout: Dropout::new(*dropout),
                        fc2,
                        input: None,
                    });
                }
                Head::Residual { initial, blocks: res_blocks }
            }
            (HeadSpec::Table, RawWidth::Features(_)) => {
                return Err(Error::Config(
                    "table head only applies to cell-id featurizers (tile, polar_tile)".into(),
                ))
            }
            (head, RawWidth::Cells(_)) => {
                return Err(Error::Config(format!(
                    "featurizer {:?} produces cell ids and needs the table head, got {head:?}",
                    spec.kind
                )))
            }
        };
        Ok(EncoderModel {
            spec,
            head,
            train_mode: false,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Encode a batch of locations (or displacements) to [B, output_dim].
    /// `dropout_rng` is consulted only in training mode.
    pub fn encode(
        &mut self,
        store: &ParameterStore,
        xs: &[[f64; 2]],
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Tensor> {
        if !self.train_mode {
            dropout_rng = None;
        }
        match &mut self.head {
            Head::Table(table) => {
                let ids: Vec<usize> = xs
                    .iter()
                    .map(|&x| match self.spec.kind.featurize(x) {
                        Ok(RawOutput::Cell(id)) => Ok(id),
                        Ok(RawOutput::Features(_)) => {
                            Err(Error::Invalid("table head fed dense features".into()))
                        }
                        Err(e) => Err(e),
                    })
                    .collect::<Result<_>>()?;
                table.forward(store, &ids)
            }
            head => {
                let raw_dim = match self.spec.kind.width() {
                    RawWidth::Features(d) => d,
                    RawWidth::Cells(_) => unreachable!("cell featurizers use the table head"),
                };
                let mut raw = Tensor::zeros(&[xs.len(), raw_dim]);
                for (r, &x) in xs.iter().enumerate() {
                    match self.spec.kind.featurize(x)? {
                        RawOutput::Features(f) => raw.row_mut(r).copy_from_slice(&f),
                        RawOutput::Cell(_) => unreachable!(),
                    }
                }
                match head {
                    Head::Ffn(layers) => {
                        let mut h = raw;
                        for layer in layers.iter_mut() {
                            h = layer.forward(store, &h)?;
                        }
                        Ok(h)
                    }
                    Head::BlockDiag(layer) => layer.forward(store, &raw),
                    Head::Residual { initial, blocks } => {
                        let mut h = initial.forward(store, &raw)?;
                        for block in blocks.iter_mut() {
                            h = block.forward(store, &h, &mut dropout_rng)?;
                        }
                        Ok(h)
                    }
                    Head::Table(_) => unreachable!(),
                }
            }
        }
    }

    /// Backpropagate [B, output_dim] into the head parameters. The raw
    /// featurization is fixed, so nothing flows further.
    pub fn backward(&mut self, store: &mut ParameterStore, upstream: &Tensor) -> Result<()> {
        match &mut self.head {
            Head::Table(table) => table.backward(store, upstream),
            Head::Ffn(layers) => {
                let mut grad = upstream.clone();
                for layer in layers.iter_mut().rev() {
                    grad = layer.backward(store, &grad)?;
                }
                Ok(())
            }
            Head::BlockDiag(layer) => {
                layer.backward(store, upstream)?;
                Ok(())
            }
            Head::Residual { initial, blocks } => {
                let mut grad = upstream.clone();
                for block in blocks.iter_mut().rev() {
                    grad = block.backward(store, &grad)?;
                }
                initial.backward(store, &grad)?;
                Ok(())
            }
        }
    }

    /// The block-diagonal head's materialized full matrix, when present.
    pub fn block_diag_matrix(&self, store: &ParameterStore) -> Option<Tensor> {
        match &self.head {
            Head::BlockDiag(layer) => Some(layer.dense_matrix(store)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_core::{grad_check, AdamParams};
    use crate::poi_data::BoundingBox;
    use crate::space_encoders::ScaleSpec;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn study_box() -> BoundingBox {
        BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 40_000.0, max_y: 40_000.0 }
    }

    fn ffn_head() -> HeadSpec {
        HeadSpec::Ffn { hidden_layers: 1, hidden_units: 512 }
    }

    #[test]
    fn theory_head_shapes_match_appendix_defaults() {
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Theory {
                scales: ScaleSpec::new(50.0, 40_000.0, 64).unwrap(),
            },
            head: ffn_head(),
            output_dim: 64,
        };
        EncoderModel::build(spec, "enc", &mut store).unwrap();
        assert_eq!(store.value("enc.ffn0.w").shape(), &[384, 512]);
        assert_eq!(store.value("enc.out.w").shape(), &[512, 64]);
    }

    #[test]
    fn grid_raw_width_is_4s() {
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Grid {
                scales: ScaleSpec::new(50.0, 40_000.0, 64).unwrap(),
            },
            head: ffn_head(),
            output_dim: 64,
        };
        EncoderModel::build(spec, "enc", &mut store).unwrap();
        assert_eq!(store.value("enc.ffn0.w").shape(), &[256, 512]);
    }

    #[test]
    fn tile_table_row_count_from_ceil_division() {
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Tile { cell_size: 500.0, area: study_box() },
            head: HeadSpec::Table,
            output_dim: 64,
        };
        EncoderModel::build(spec, "enc", &mut store).unwrap();
        assert_eq!(store.value("enc.table").shape(), &[6400, 64]);
    }

    #[test]
    fn mismatched_head_and_featurizer_rejected() {
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Tile { cell_size: 500.0, area: study_box() },
            head: ffn_head(),
            output_dim: 64,
        };
        assert!(EncoderModel::build(spec, "enc", &mut store).is_err());
        let spec = EncoderSpec {
            kind: RawFeatureKind::Polar,
            head: HeadSpec::Table,
            output_dim: 64,
        };
        assert!(EncoderModel::build(spec, "enc2", &mut store).is_err());
    }

    #[test]
    fn tile_same_cell_identical_embeddings() {
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Tile { cell_size: 500.0, area: study_box() },
            head: HeadSpec::Table,
            output_dim: 16,
        };
        let mut enc = EncoderModel::build(spec, "enc", &mut store).unwrap();
        store.init_params(3);
        let out = enc
            .encode(&store, &[[100.0, 100.0], [499.0, 1.0], [600.0, 100.0]], None)
            .unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_ne!(out.row(0), out.row(2));
    }

    #[test]
    fn theory_distinct_points_differ() {
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Theory {
                scales: ScaleSpec::new(50.0, 40_000.0, 16).unwrap(),
            },
            head: HeadSpec::Ffn { hidden_layers: 1, hidden_units: 32 },
            output_dim: 16,
        };
        let mut enc = EncoderModel::build(spec, "enc", &mut store).unwrap();
        store.init_params(5);
        let mut rng = seeded_rng(6, "distinct");
        for _ in 0..20 {
            let a = [rng.random_range(0.0..40_000.0), rng.random_range(0.0..40_000.0)];
            let b = [rng.random_range(0.0..40_000.0), rng.random_range(0.0..40_000.0)];
            if a == b {
                continue;
            }
            let out = enc.encode(&store, &[a, b], None).unwrap();
            assert_ne!(out.row(0), out.row(1));
        }
    }

    #[test]
    fn wrap_with_no_blocks_reduces_to_initial_dense() {
        let mut store = ParameterStore::new();
        let norm_box = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 100.0, max_y: 100.0 };
        let spec = EncoderSpec {
            kind: RawFeatureKind::Wrap { norm_box },
            head: HeadSpec::Residual { blocks: 0, units: 8, dropout: 0.5 },
            output_dim: 8,
        };
        let mut enc = EncoderModel::build(spec, "enc", &mut store).unwrap();
        store.init_params(9);
        let x = [37.0, 81.0];
        let got = enc.encode(&store, &[x], None).unwrap();

        // structural reduction oracle: wrap features through the initial
        // dense layer evaluated by hand
        let raw = crate::space_encoders::wrap_features(x, &norm_box).unwrap();
        let w = store.value("enc.res.init.w");
        let b = store.value("enc.res.init.b");
        for o in 0..8 {
            let mut acc = b.data()[o];
            for (i, &r) in raw.iter().enumerate() {
                acc += r * w.data()[i * 8 + o];
            }
            let want = acc.max(0.0);
            assert!((got.row(0)[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_is_deterministic_with_dropout_configured() {
        let mut store = ParameterStore::new();
        let norm_box = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 10.0, max_y: 10.0 };
        let spec = EncoderSpec {
            kind: RawFeatureKind::Wrap { norm_box },
            head: HeadSpec::Residual { blocks: 2, units: 16, dropout: 0.5 },
            output_dim: 8,
        };
        let mut enc = EncoderModel::build(spec, "enc", &mut store).unwrap();
        store.init_params(11);
        let xs = [[1.0, 2.0], [9.0, 3.0]];
        let a = enc.encode(&store, &xs, None).unwrap();
        let b = enc.encode(&store, &xs, None).unwrap();
        assert_eq!(a.data(), b.data());

        // training mode with an rng actually drops units
        enc.train_mode = true;
        let mut rng = seeded_rng(12, "drop");
        let c = enc.encode(&store, &xs, Some(&mut rng)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn block_diag_zeros_survive_training_steps() {
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Theory {
                scales: ScaleSpec::new(10.0, 1000.0, 4).unwrap(),
            },
            head: HeadSpec::BlockDiag,
            output_dim: 8,
        };
        let mut enc = EncoderModel::build(spec, "enc", &mut store).unwrap();
        store.init_params(13);
        let mut rng = seeded_rng(14, "bd-train");
        for t in 1..=5 {
            store.zero_grads();
            let xs: Vec<[f64; 2]> = (0..4)
                .map(|_| [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)])
                .collect();
            let out = enc.encode(&store, &xs, None).unwrap();
            let up = Tensor::from_vec(out.shape(), vec![1.0; out.len()]).unwrap();
            enc.backward(&mut store, &up).unwrap();
            store.adam_step(&AdamParams::default(), t).unwrap();
        }
        let full = enc.block_diag_matrix(&store).unwrap();
        for row in 0..full.shape()[0] {
            for col in 0..full.shape()[1] {
                let in_block = row / 6 == col / 2;
                if !in_block {
                    assert_eq!(full.data()[row * full.shape()[1] + col], 0.0);
                }
            }
        }
    }

    /// End-to-end gradient check for a representative subset of kinds; the
    /// acceptance suite covers the full catalog.
    #[test]
    fn assembled_encoder_gradients_match_finite_differences() {
        let norm_box = BoundingBox { min_x: -100.0, min_y: -100.0, max_x: 100.0, max_y: 100.0 };
        let cases = vec![
            (
                EncoderSpec {
                    kind: RawFeatureKind::Theory { scales: ScaleSpec::new(5.0, 100.0, 3).unwrap() },
                    head: HeadSpec::Ffn { hidden_layers: 1, hidden_units: 8 },
                    output_dim: 6,
                },
                "theory",
            ),
            (
                EncoderSpec {
                    kind: RawFeatureKind::Wrap { norm_box },
                    head: HeadSpec::Residual { blocks: 2, units: 8, dropout: 0.5 },
                    output_dim: 6,
                },
                "wrap",
            ),
            (
                EncoderSpec {
                    kind: RawFeatureKind::Tile { cell_size: 50.0, area: norm_box },
                    head: HeadSpec::Table,
                    output_dim: 6,
                },
                "tile",
            ),
        ];
        let mut rng = seeded_rng(18, "enc-grad");
        for (spec, label) in cases {
            let mut store = ParameterStore::new();
            let mut enc = EncoderModel::build(spec.clone(), "enc", &mut store).unwrap();
            store.init_params(16);
            store.perturb_values(0.05, 19);
            let xs: Vec<[f64; 2]> = (0..5)
                .map(|_| [rng.random_range(-90.0..90.0), rng.random_range(-90.0..90.0)])
                .collect();
            let out = enc.encode(&store, &xs, None).unwrap();
            let up = Tensor::from_vec(out.shape(), vec![1.0; out.len()]).unwrap();
            enc.backward(&mut store, &up).unwrap();
            let xs_c = xs.clone();
            let report = grad_check(
                &mut store,
                move |s| {
                    let mut probe = EncoderModel::build(spec.clone(), "enc", &mut ParameterStore::new())
                        .unwrap();
                    // probe registers into a scratch store; evaluate against `s`
                    probe.encode(s, &xs_c, None).unwrap().data().iter().sum()
                },
                96,
                17,
            );
            assert!(report.max_rel_err < 1e-6, "{label}: rel err {}", report.max_rel_err);
        }
    }
}
