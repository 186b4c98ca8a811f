//! Run configuration and the five pipeline commands: generate, train,
//! eval, analyze, viz.
//!
//! Configs are JSON with unknown keys rejected at every level. All
//! randomness derives from one root seed, and every command writes a
//! resolved-config echo next to its outputs so runs are reproducible from
//! the output directory alone.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    embedding_cluster_map, export_curve, export_grid, renormalized_curve, response_map, ripley_k,
    GridFormat, GroupThresholds,
};
use crate::decoders::{ContextDecoder, LocationDecoder};
use crate::encoder_assembly::{EncoderModel, EncoderSpec, HeadSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_model, random_baseline_report, report_csv, report_text, EvalSettings,
};
use crate::feature_encoder::FeatureEncoder;
use crate::neural_core::{
    load_checkpoint, save_checkpoint, Activation, ParameterStore, Tensor,
};
use crate::poi_data::{
    generate_synthetic, load_poi_csv, split_dataset, write_poi_csv, BoundingBox, Dataset,
    ProcessComponent, SplitAssignment,
};
use crate::rng::seeded_rng;
use crate::space_encoders::{RawFeatureKind, ScaleSpec};
use crate::training::{train, ContextSet, ModelArch, Task, TaskModel, TrainConfig};

// ---------------------------------------------------------------------------
// Configuration schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub viz: VizConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_task() -> Task {
    Task::Loc
}

/// Exactly one of `csv` (a POI file path) or `synthetic`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// (min_x, min_y, max_x, max_y) in meters.
    pub bbox: [f64; 4],
    pub components: Vec<ProcessComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKindName {
    Theory,
    Theorydiag,
    Grid,
    Hexa,
    Direct,
    Wrap,
    Tile,
    Rbf,
    ScaledRbf,
    Polar,
    PolarTile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_kind")]
    pub kind: EncoderKindName,
    /// Minimum wavelength; defaults to 50 m (loc) or 10 m (cont).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_min: Option<f64>,
    /// Maximum wavelength; defaults to 40 km (loc) or 10 km (cont).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max: Option<f64>,
    #[serde(default = "default_scales")]
    pub scales: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rbf_anchors: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rbf_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rbf_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polar_bins: Option<usize>,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_units")]
    pub hidden_units: usize,
    #[serde(default = "default_residual_blocks")]
    pub residual_blocks: usize,
    #[serde(default = "default_residual_units")]
    pub residual_units: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Location-embedding dimension d^(x).
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    /// Extent of the displacement domain for the cont task (norm boxes,
    /// anchor disc, polar r_max).
    #[serde(default = "default_context_radius")]
    pub context_radius: f64,
}

fn default_kind() -> EncoderKindName {
    EncoderKindName::Theory
}
fn default_scales() -> usize {
    64
}
fn default_hidden_layers() -> usize {
    1
}
fn default_hidden_units() -> usize {
    512
}
fn default_residual_blocks() -> usize {
    3
}
fn default_residual_units() -> usize {
    512
}
fn default_dropout() -> f64 {
    0.5
}
fn default_output_dim() -> usize {
    64
}
fn default_context_radius() -> f64 {
    10_000.0
}

impl Default for EncoderConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all encoder fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivationName {
    Sigmoid,
    Tanh,
    Identity,
}

impl OutputActivationName {
    pub fn to_activation(self) -> Activation {
        match self {
            OutputActivationName::Sigmoid => Activation::Sigmoid,
            OutputActivationName::Tanh => Activation::Tanh,
            OutputActivationName::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature-embedding dimension d^(v).
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Context size n for the cont task.
    #[serde(default = "default_context_size")]
    pub context_size: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    #[serde(default = "default_output_activation")]
    pub output_activation: OutputActivationName,
    /// With this off the context decoder ignores displacements entirely
    /// (the co-location-only baseline).
    #[serde(default = "default_true")]
    pub spatial_attention: bool,
}

fn default_feature_dim() -> usize {
    64
}
fn default_context_size() -> usize {
    10
}
fn default_heads() -> usize {
    4
}
fn default_output_activation() -> OutputActivationName {
    OutputActivationName::Sigmoid
}
fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all model fields have defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_train_negatives")]
    pub train_negatives: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_split")]
    pub split_ratios: (f64, f64, f64),
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    32
}
fn default_train_negatives() -> usize {
    10
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_split() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

impl Default for TrainingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all training fields have defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_eval_negatives")]
    pub negatives: usize,
    #[serde(default = "default_hit_k")]
    pub hit_k: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_eval_negatives() -> usize {
    100
}
fn default_hit_k() -> usize {
    5
}
fn default_repeats() -> usize {
    10
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all evaluation fields have defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_radius_max")]
    pub radius_max: f64,
    #[serde(default = "default_radius_step")]
    pub radius_step: f64,
    #[serde(default = "default_r_clustered")]
    pub clustered_radius: f64,
    #[serde(default = "default_r_even")]
    pub even_radius: f64,
    #[serde(default = "default_threshold_y")]
    pub threshold: f64,
    #[serde(default = "default_reference_area")]
    pub reference_area: f64,
}

fn default_radius_max() -> f64 {
    1500.0
}
fn default_radius_step() -> f64 {
    10.0
}
fn default_r_clustered() -> f64 {
    100.0
}
fn default_r_even() -> f64 {
    200.0
}
fn default_threshold_y() -> f64 {
    3.0
}
fn default_reference_area() -> f64 {
    crate::analysis::DEFAULT_REFERENCE_AREA
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all analysis fields have defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizConfig {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// How many leading output neurons to map.
    #[serde(default = "default_neurons")]
    pub neurons: usize,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
}

fn default_resolution() -> usize {
    48
}
fn default_neurons() -> usize {
    8
}
fn default_clusters() -> usize {
    8
}

impl Default for VizConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all viz fields have defaults")
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset & model assembly

/// Load or generate the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.dataset.csv, &cfg.dataset.synthetic) {
        (Some(path), None) => load_poi_csv(path),
        (None, Some(synth)) => {
            let [min_x, min_y, max_x, max_y] = synth.bbox;
            let bbox = BoundingBox { min_x, min_y, max_x, max_y };
            generate_synthetic(&synth.components, bbox, cfg.seed)
        }
        _ => Err(Error::Config(
            "dataset needs exactly one of `csv` or `synthetic`".into(),
        )),
    }
}

fn require<T: Copy>(value: Option<T>, kind: &str, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("encoder kind `{kind}` requires field `{field}`")))
}

/// Resolve the encoder config against a task and dataset: defaults filled,
/// anchors sampled and frozen, boxes pinned.
pub fn resolve_encoder_spec(
    cfg: &RunConfig,
    ds: &Dataset,
    train_ids: &[u64],
) -> Result<EncoderSpec> {
    let enc = &cfg.encoder;
    let task = cfg.task;
    let (lambda_min_default, lambda_max_default) = match task {
        Task::Loc => (50.0, 40_000.0),
        Task::Cont => (10.0, 10_000.0),
    };
    let scales = || -> Result<ScaleSpec> {
        ScaleSpec::new(
            enc.lambda_min.unwrap_or(lambda_min_default),
            enc.lambda_max.unwrap_or(lambda_max_default),
            enc.scales,
        )
    };
    let r = enc.context_radius;
    let domain_box = match task {
        Task::Loc => *ds.bbox(),
        Task::Cont => BoundingBox {
            min_x: -r,
            min_y: -r,
            max_x: r,
            max_y: r,
        },
    };
    let sample_anchors = |count: usize| -> Result<Vec<[f64; 2]>> {
        let mut rng = seeded_rng(cfg.seed, "rbf.anchors");
        match task {
            Task::Loc => {
                // frozen sample from the training locations
                if count > train_ids.len() {
                    return Err(Error::Config(format!(
                        "{count} anchors requested but only {} training points",
                        train_ids.len()
                    )));
                }
                let picked = rand::seq::index::sample(&mut rng, train_ids.len(), count);
                Ok(picked
                    .into_iter()
                    .map(|i| ds.by_id(train_ids[i]).expect("split id valid").loc)
                    .collect())
            }
            Task::Cont => {
                // frozen uniform sample from the context disc
                Ok((0..count)
                    .map(|_| {
                        let rad = r * rng.random::<f64>().sqrt();
                        let angle = rng.random_range(0.0..std::f64::consts::TAU);
                        [rad * angle.cos(), rad * angle.sin()]
                    })
                    .collect())
            }
        }
    };

    let ffn = HeadSpec::Ffn {
        hidden_layers: enc.hidden_layers,
        hidden_units: enc.hidden_units,
    };
    let (kind, head) = match enc.kind {
        EncoderKindName::Theory => (RawFeatureKind::Theory { scales: scales()? }, ffn),
        EncoderKindName::Theorydiag => {
            (RawFeatureKind::Theory { scales: scales()? }, HeadSpec::BlockDiag)
        }
        EncoderKindName::Grid => (RawFeatureKind::Grid { scales: scales()? }, ffn),
        EncoderKindName::Hexa => (RawFeatureKind::Hexa { scales: scales()? }, ffn),
        EncoderKindName::Direct => (RawFeatureKind::Direct { norm_box: domain_box }, ffn),
        EncoderKindName::Wrap => (
            RawFeatureKind::Wrap { norm_box: domain_box },
            HeadSpec::Residual {
                blocks: enc.residual_blocks,
                units: enc.residual_units,
                dropout: enc.dropout,
            },
        ),
        EncoderKindName::Tile => (
            RawFeatureKind::Tile {
                cell_size: require(enc.cell_size, "tile", "cell_size")?,
                area: domain_box,
            },
            HeadSpec::Table,
        ),
        EncoderKindName::Rbf => (
            RawFeatureKind::Rbf {
                anchors: sample_anchors(enc.rbf_anchors.unwrap_or(200))?,
                sigma: require(enc.rbf_sigma, "rbf", "rbf_sigma")?,
            },
            ffn,
        ),
        EncoderKindName::ScaledRbf => (
            RawFeatureKind::ScaledRbf {
                anchors: sample_anchors(enc.rbf_anchors.unwrap_or(200))?,
                sigma: require(enc.rbf_sigma, "scaled_rbf", "rbf_sigma")?,
                beta: require(enc.rbf_beta, "scaled_rbf", "rbf_beta")?,
            },
            ffn,
        ),
        EncoderKindName::Polar => (RawFeatureKind::Polar, ffn),
        EncoderKindName::PolarTile => (
            RawFeatureKind::PolarTile {
                bins: require(enc.polar_bins, "polar_tile", "polar_bins")?,
                r_max: r,
            },
            HeadSpec::Table,
        ),
    };
    Ok(EncoderSpec {
        kind,
        head,
        output_dim: enc.output_dim,
    })
}

/// Everything an eval or viz run needs, serialized into the checkpoint so
/// the original config file is not required afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub task: Task,
    pub encoder: EncoderSpec,
    pub feature_dim: usize,
    pub vocab: Vec<String>,
    pub context_size: usize,
    pub attention_heads: usize,
    pub output_activation: OutputActivationName,
    pub spatial_attention: bool,
    /// Natural domain for response/cluster maps: the study area (loc) or
    /// the displacement box (cont).
    pub viz_bbox: BoundingBox,
}

fn encoder_namespace(task: Task) -> &'static str {
    match task {
        Task::Loc => "enc",
        Task::Cont => "disp",
    }
}

/// Build the model described by a header; parameters are registered but not
/// initialized.
pub fn build_model(header: &CheckpointHeader, store: &mut ParameterStore) -> Result<TaskModel> {
    let encoder = EncoderModel::build(
        header.encoder.clone(),
        encoder_namespace(header.task),
        store,
    )?;
    let feat = FeatureEncoder::new(header.vocab.len(), header.feature_dim);
    feat.register(store)?;
    let arch = match header.task {
        Task::Loc => {
            let decoder = LocationDecoder::new(header.encoder.output_dim, header.feature_dim);
            decoder.register(store)?;
            ModelArch::Loc { encoder, decoder }
        }
        Task::Cont => {
            let mut decoder = ContextDecoder::new(
                header.feature_dim,
                header.encoder.output_dim,
                header.attention_heads,
                header.output_activation.to_activation(),
            );
            if !header.spatial_attention {
                decoder = decoder.without_displacement();
            }
            decoder.register(store)?;
            ModelArch::Cont {
                displacement_encoder: encoder,
                decoder,
                context_size: header.context_size,
            }
        }
    };
    Ok(TaskModel { feat, arch })
}

/// Header for a fresh training run.
pub fn make_header(cfg: &RunConfig, ds: &Dataset, split: &SplitAssignment) -> Result<CheckpointHeader> {
    let encoder = resolve_encoder_spec(cfg, ds, &split.train)?;
    let viz_bbox = match cfg.task {
        Task::Loc => *ds.bbox(),
        Task::Cont => {
            let r = cfg.encoder.context_radius;
            BoundingBox { min_x: -r, min_y: -r, max_x: r, max_y: r }
        }
    };
    if cfg.task == Task::Cont && cfg.model.context_size >= ds.len() {
        return Err(Error::Config(format!(
            "context size {} needs a dataset larger than itself ({} points)",
            cfg.model.context_size,
            ds.len()
        )));
    }
    Ok(CheckpointHeader {
        task: cfg.task,
        encoder,
        feature_dim: cfg.model.feature_dim,
        vocab: ds.vocab().names().to_vec(),
        context_size: cfg.model.context_size,
        attention_heads: cfg.model.attention_heads,
        output_activation: cfg.model.output_activation,
        spatial_attention: cfg.model.spatial_attention,
        viz_bbox,
    })
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content)?;
    Ok(())
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let text = serde_json::to_string_pretty(cfg)?;
    write_string(&cfg.out_dir.join("resolved_config.json"), &(text + "\n"))
}

// ---------------------------------------------------------------------------
// Commands

/// Generate a synthetic dataset and write it as POI CSV plus a metadata
/// sidecar.
pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    if cfg.dataset.synthetic.is_none() {
        return Err(Error::Config("generate requires a `synthetic` dataset section".into()));
    }
    let ds = load_dataset(cfg)?;
    echo_config(cfg)?;
    write_poi_csv(&ds, cfg.out_dir.join("dataset.csv"))?;

    let mut per_type = std::collections::BTreeMap::new();
    for p in ds.points() {
        for &t in &p.type_ids {
            *per_type.entry(ds.vocab().name(t).unwrap().to_string()).or_insert(0u64) += 1;
        }
    }
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "bbox": ds.bbox(),
        "points": ds.len(),
        "types": per_type,
    });
    write_string(
        &cfg.out_dir.join("generation_metadata.json"),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    println!("generated {} points into {}", ds.len(), cfg.out_dir.display());
    Ok(())
}

/// Train the configured model; writes checkpoint.txt and run_metadata.json.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let split = split_dataset(&ds, cfg.training.split_ratios, cfg.seed)?;
    let header = make_header(cfg, &ds, &split)?;
    let mut store = ParameterStore::new();
    let mut model = build_model(&header, &mut store)?;
    store.init_params(cfg.seed);
    model.feat.apply_normalization(&mut store);

    let train_cfg = TrainConfig {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        train_negatives: cfg.training.train_negatives,
        learning_rate: cfg.training.learning_rate,
        seed: cfg.seed,
    };
    let outcome = train(&ds, &split, &mut model, &mut store, &train_cfg)?;

    echo_config(cfg)?;
    let ckpt_path = cfg.out_dir.join("checkpoint.txt");
    let file = fs::File::create(&ckpt_path)?;
    let mut w = BufWriter::new(file);
    save_checkpoint(&mut w, &serde_json::to_string(&header)?, &outcome.best_store)?;
    drop(w);

    let meta = serde_json::json!({
        "config": cfg,
        "best_epoch": outcome.best_epoch,
        "best_val_nll": outcome.best_val_nll,
        "history": outcome.history,
        "type_normalization": "after_every_optimizer_step",
        "split_sizes": [split.train.len(), split.val.len(), split.test.len()],
    });
    write_string(
        &cfg.out_dir.join("run_metadata.json"),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    println!(
        "trained {} epochs; best val NLL {:.4} at epoch {}; checkpoint at {}",
        outcome.history.len(),
        outcome.best_val_nll,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

/// Load a checkpoint written by [`cmd_train`].
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let (header_json, values) = load_checkpoint(&mut r)?;
    let header: CheckpointHeader = serde_json::from_str(&header_json)
        .map_err(|e| Error::Config(format!("bad checkpoint header: {e}")))?;
    Ok((header, values))
}

/// Evaluate a checkpoint (or the random baseline) on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, baseline_random: bool) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let split = split_dataset(&ds, cfg.training.split_ratios, cfg.seed)?;
    let settings = EvalSettings {
        negatives: cfg.evaluation.negatives,
        hit_k: cfg.evaluation.hit_k,
        repeats: cfg.evaluation.repeats,
        seed: cfg.seed,
    };

    let (label, report) = if baseline_random {
        ("random".to_string(), random_baseline_report(split.test.len(), &settings)?)
    } else {
        let path = checkpoint.ok_or_else(|| {
            Error::Config("eval needs --checkpoint unless --baseline random is given".into())
        })?;
        let (header, values) = read_checkpoint(path)?;
        if header.vocab != ds.vocab().names() {
            return Err(Error::Invalid(
                "checkpoint vocabulary does not match the dataset".into(),
            ));
        }
        let mut store = ParameterStore::new();
        let mut model = build_model(&header, &mut store)?;
        store.load_values(values)?;
        let contexts = match header.task {
            Task::Cont => Some(ContextSet::build(&ds, header.context_size)?),
            Task::Loc => None,
        };
        let label = format!("{:?}", cfg.encoder.kind).to_lowercase();
        (
            label,
            evaluate_model(&mut model, &store, &ds, &split.test, contexts.as_ref(), &settings)?,
        )
    };

    echo_config(cfg)?;
    write_string(&cfg.out_dir.join("report.txt"), &report_text(&label, &report))?;
    write_string(&cfg.out_dir.join("report.csv"), &report_csv(&label, &report))?;
    println!(
        "{label}: mrr {:.4} ({:.4}), hit@{} {:.4} ({:.4})",
        report.mrr.0, report.mrr.1, report.k, report.hit_at_k.0, report.hit_at_k.1
    );
    Ok(())
}

/// Ripley curves and distribution grouping for every type with at least
/// two points.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let a = &cfg.analysis;
    if a.radius_step <= 0.0 || a.radius_max <= 0.0 {
        return Err(Error::Config("analysis radii must be positive".into()));
    }
    let mut radii = Vec::new();
    let mut r = 0.0;
    while r <= a.radius_max + 1e-9 {
        radii.push(r);
        r += a.radius_step;
    }
    echo_config(cfg)?;

    // Types with fewer than 2 points cannot carry a curve; skip them.
    let mut counts = vec![0usize; ds.vocab().len()];
    for p in ds.points() {
        for &t in &p.type_ids {
            counts[t] += 1;
        }
    }
    let eligible: Vec<usize> = (0..ds.vocab().len()).filter(|&t| counts[t] >= 2).collect();
    let skipped: Vec<usize> = (0..ds.vocab().len()).filter(|&t| counts[t] < 2).collect();
    if !skipped.is_empty() {
        eprintln!(
            "skipping {} type(s) with fewer than 2 points: {:?}",
            skipped.len(),
            skipped.iter().map(|&t| ds.vocab().name(t).unwrap()).collect::<Vec<_>>()
        );
    }
    if eligible.is_empty() {
        return Err(Error::Invalid("no type has at least 2 points".into()));
    }

    let thresholds = GroupThresholds {
        r_clustered: a.clustered_radius,
        r_even: a.even_radius,
        y: a.threshold,
        reference_area: a.reference_area,
    };
    let mut groups_csv = String::from("type_id,type_name,points,threshold_radius,group\n");
    for &t in &eligible {
        let curve = ripley_k(&ds, t, &radii)?;
        let renorm = renormalized_curve(&curve, thresholds.reference_area);
        export_curve(&curve.radii, &curve.k_values, cfg.out_dir.join(format!("ripley_k_type{t}.csv")))?;
        export_curve(
            &renorm.radii,
            &renorm.values,
            cfg.out_dir.join(format!("renormalized_type{t}.csv")),
        )?;
        let radius = crate::analysis::radius_at_threshold(&renorm.radii, &renorm.values, thresholds.y);
        let group = match radius {
            Some(r) if r <= thresholds.r_clustered => "clustered",
            Some(r) if r < thresholds.r_even => "middle",
            _ => "even",
        };
        let radius_field = radius.map(|r| format!("{r:.3}")).unwrap_or_else(|| "-".into());
        groups_csv.push_str(&format!(
            "{t},{},{},{radius_field},{group}\n",
            ds.vocab().name(t).unwrap(),
            counts[t]
        ));
    }
    write_string(&cfg.out_dir.join("groups.csv"), &groups_csv)?;
    println!(
        "analyzed {} type(s); curves and groups.csv in {}",
        eligible.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

/// Response maps for the first neurons plus an embedding cluster map.
pub fn cmd_viz(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (header, values) = read_checkpoint(checkpoint)?;
    let mut store = ParameterStore::new();
    let model = build_model(&header, &mut store)?;
    store.load_values(values)?;
    let mut encoder = match model.arch {
        ModelArch::Loc { encoder, .. } => encoder,
        ModelArch::Cont { displacement_encoder, .. } => displacement_encoder,
    };

    echo_config(cfg)?;
    let res = cfg.viz.resolution;
    let neurons: Vec<usize> = (0..cfg.viz.neurons.min(encoder.output_dim())).collect();
    let grids = response_map(&mut encoder, &store, &neurons, &header.viz_bbox, (res, res))?;
    for (n, grid) in neurons.iter().zip(&grids) {
        export_grid(grid, cfg.out_dir.join(format!("response_neuron_{n}.csv")), GridFormat::Csv)?;
        export_grid(grid, cfg.out_dir.join(format!("response_neuron_{n}.pgm")), GridFormat::Pgm)?;
    }
    let label_grid =
        embedding_cluster_map(&mut encoder, &store, &header.viz_bbox, (res, res), cfg.viz.clusters)?;
    let value_grid = label_grid.to_value_grid();
    export_grid(&value_grid, cfg.out_dir.join("cluster_map.csv"), GridFormat::Csv)?;
    export_grid(&value_grid, cfg.out_dir.join("cluster_map.pgm"), GridFormat::Pgm)?;
    println!(
        "wrote {} response map(s) and a {}-cluster map to {}",
        neurons.len(),
        cfg.viz.clusters,
        cfg.out_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config_json() -> &'static str {
        r#"{
            "dataset": {"synthetic": {
                "bbox": [0, 0, 1000, 1000],
                "components": [
                    {"process": {"poisson": {"intensity": 2e-4}}, "type_name": "a"},
                    {"process": {"poisson": {"intensity": 2e-4}}, "type_name": "b"}
                ]
            }},
            "encoder": {"kind": "theory", "scales": 4, "hidden_units": 16, "output_dim": 8},
            "model": {"feature_dim": 8}
        }"#
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str(minimal_config_json()).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.task, Task::Loc);
        assert_eq!(cfg.training.epochs, 100);
        assert_eq!(cfg.evaluation.negatives, 100);
        assert_eq!(cfg.model.context_size, 10);
        assert_eq!(cfg.viz.neurons, 8);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        let bad_top = r#"{"dataset": {"csv": "x.csv"}, "bogus": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(bad_top).is_err());
        let bad_nested = r#"{"dataset": {"csv": "x.csv"}, "training": {"epochs": 5, "nope": 2}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad_nested).is_err());
        let bad_process = r#"{"dataset": {"synthetic": {"bbox": [0,0,1,1], "components":
            [{"process": {"poisson": {"intensity": 1.0, "shape": 2}}, "type_name": "a"}]}}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad_process).is_err());
    }

    #[test]
    fn missing_kind_specific_field_is_named() {
        let mut cfg: RunConfig = serde_json::from_str(minimal_config_json()).unwrap();
        cfg.encoder.kind = EncoderKindName::Rbf;
        let ds = load_dataset(&cfg).unwrap();
        let split = split_dataset(&ds, (0.8, 0.1, 0.1), 0).unwrap();
        let err = resolve_encoder_spec(&cfg, &ds, &split.train).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("rbf_sigma"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn lambda_defaults_depend_on_task() {
        let mut cfg: RunConfig = serde_json::from_str(minimal_config_json()).unwrap();
        let ds = load_dataset(&cfg).unwrap();
        let split = split_dataset(&ds, (0.8, 0.1, 0.1), 0).unwrap();
        let spec = resolve_encoder_spec(&cfg, &ds, &split.train).unwrap();
        match spec.kind {
            RawFeatureKind::Theory { scales } => {
                assert_eq!(scales.lambda_min, 50.0);
                assert_eq!(scales.lambda_max, 40_000.0);
            }
            other => panic!("{other:?}"),
        }
        cfg.task = Task::Cont;
        let spec = resolve_encoder_spec(&cfg, &ds, &split.train).unwrap();
        match spec.kind {
            RawFeatureKind::Theory { scales } => {
                assert_eq!(scales.lambda_min, 10.0);
                assert_eq!(scales.lambda_max, 10_000.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anchors_are_frozen_per_seed() {
        let mut cfg: RunConfig = serde_json::from_str(minimal_config_json()).unwrap();
        cfg.encoder.kind = EncoderKindName::Rbf;
        cfg.encoder.rbf_sigma = Some(100.0);
        cfg.encoder.rbf_anchors = Some(10);
        let ds = load_dataset(&cfg).unwrap();
        let split = split_dataset(&ds, (0.8, 0.1, 0.1), 0).unwrap();
        let a = resolve_encoder_spec(&cfg, &ds, &split.train).unwrap();
        let b = resolve_encoder_spec(&cfg, &ds, &split.train).unwrap();
        match (&a.kind, &b.kind) {
            (RawFeatureKind::Rbf { anchors: x, .. }, RawFeatureKind::Rbf { anchors: y, .. }) => {
                assert_eq!(x, y);
                assert_eq!(x.len(), 10);
            }
            other => panic!("{other:?}"),
        }
    }
}
