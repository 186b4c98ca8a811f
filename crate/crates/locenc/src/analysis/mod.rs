//! Spatial statistics and model introspection: Ripley's K per type,
//! density-renormalized curves with threshold-radius grouping, neuron
//! response maps over a lattice, and embedding cluster maps.

mod cluster;

pub use cluster::cluster_labels;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder_assembly::EncoderModel;
use crate::error::{Error, Result};
use crate::neural_core::ParameterStore;
use crate::poi_data::{BoundingBox, Dataset};

/// Empirical Ripley's K of one type: for each radius, the area-normalized
/// count of ordered same-type pairs within that distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RipleyCurve {
    pub radii: Vec<f64>,
    pub k_values: Vec<f64>,
    pub type_id: usize,
    /// Points of this type per square meter.
    pub intensity: f64,
}

/// K̂(r) = (A / (m(m−1))) · #{ordered same-type pairs with d ≤ r}, without
/// edge correction.
pub fn ripley_k(ds: &Dataset, type_id: usize, radii: &[f64]) -> Result<RipleyCurve> {
    if radii.is_empty() {
        return Err(Error::Invalid("ripley_k needs at least one radius".into()));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) || radii[0] < 0.0 {
        return Err(Error::Invalid("radii must be non-negative and strictly ascending".into()));
    }
    let locs: Vec<[f64; 2]> = ds
        .points()
        .iter()
        .filter(|p| p.type_ids.contains(&type_id))
        .map(|p| p.loc)
        .collect();
    let m = locs.len();
    if m < 2 {
        return Err(Error::Invalid(format!(
            "type {type_id} has {m} points; Ripley's K needs at least 2"
        )));
    }
    let area = ds.bbox().area();
    if area <= 0.0 {
        return Err(Error::Invalid("study area has zero extent".into()));
    }

    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let dx = locs[i][0] - locs[j][0];
            let dy = locs[i][1] - locs[j][1];
            dists.push((dx * dx + dy * dy).sqrt());
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let norm = area / (m * (m - 1)) as f64;
    let k_values = radii
        .iter()
        .map(|&r| {
            let within = dists.partition_point(|&d| d <= r);
            // unordered pairs counted once, ordered pairs twice
            2.0 * within as f64 * norm
        })
        .collect();
    Ok(RipleyCurve {
        radii: radii.to_vec(),
        k_values,
        type_id,
        intensity: m as f64 / area,
    })
}

/// Ripley curve renormalized to same-type counts expected in a reference
/// area (1 km² by default): C̃(r) = λ·K̂(r)/(λ·A_ref) = K̂(r)/A_ref.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenormalizedCurve {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub type_id: usize,
}

pub const DEFAULT_REFERENCE_AREA: f64 = 1e6;

pub fn renormalized_curve(curve: &RipleyCurve, reference_area: f64) -> RenormalizedCurve {
    RenormalizedCurve {
        radii: curve.radii.clone(),
        values: curve.k_values.iter().map(|k| k / reference_area).collect(),
        type_id: curve.type_id,
    }
}

/// Smallest radius where the curve reaches `y`, linearly interpolated
/// between the bracketing samples; `None` when never reached.
pub fn radius_at_threshold(radii: &[f64], values: &[f64], y: f64) -> Option<f64> {
    debug_assert_eq!(radii.len(), values.len());
    for i in 0..values.len() {
        if values[i] >= y {
            if i == 0 {
                return Some(radii[0]);
            }
            let (r0, r1) = (radii[i - 1], radii[i]);
            let (v0, v1) = (values[i - 1], values[i]);
            if v1 == v0 {
                return Some(r1);
            }
            return Some(r0 + (y - v0) / (v1 - v0) * (r1 - r0));
        }
    }
    None
}

/// Distribution pattern of a type, by its threshold radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionGroup {
    Clustered,
    Middle,
    Even,
}

/// Grouping parameters: radii cuts, threshold height, reference area.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub r_clustered: f64,
    pub r_even: f64,
    pub y: f64,
    pub reference_area: f64,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        GroupThresholds {
            r_clustered: 100.0,
            r_even: 200.0,
            y: 3.0,
            reference_area: DEFAULT_REFERENCE_AREA,
        }
    }
}

/// Per-type grouping result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeGroup {
    pub type_id: usize,
    pub threshold_radius: Option<f64>,
    pub group: DistributionGroup,
}

/// Classify every type by where its renormalized curve reaches y: at or
/// below `r_clustered` → Clustered; beyond `r_even` or never → Even;
/// in between → Middle.
pub fn classify_groups(
    ds: &Dataset,
    radii: &[f64],
    thresholds: &GroupThresholds,
) -> Result<BTreeMap<usize, TypeGroup>> {
    let mut out = BTreeMap::new();
    for type_id in 0..ds.vocab().len() {
        let curve = ripley_k(ds, type_id, radii)?;
        let renorm = renormalized_curve(&curve, thresholds.reference_area);
        let r = radius_at_threshold(&renorm.radii, &renorm.values, thresholds.y);
        let group = match r {
            Some(r) if r <= thresholds.r_clustered => DistributionGroup::Clustered,
            Some(r) if r < thresholds.r_even => DistributionGroup::Middle,
            _ => DistributionGroup::Even,
        };
        out.insert(
            type_id,
            TypeGroup {
                type_id,
                threshold_radius: r,
                group,
            },
        );
    }
    Ok(out)
}

/// Values on a W×H lattice over a bounding box; row 0 is the max-y edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseGrid {
    pub width: usize,
    pub height: usize,
    pub bbox: BoundingBox,
    pub values: Vec<f64>,
}

/// Lattice points in grid order (row 0 = max-y edge, columns left to
/// right), endpoints included.
pub fn lattice_points(bbox: &BoundingBox, width: usize, height: usize) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(width * height);
    for row in 0..height {
        let fy = (height - 1 - row) as f64 / (height - 1) as f64;
        let y = bbox.min_y + fy * bbox.height();
        for col in 0..width {
            let fx = col as f64 / (width - 1) as f64;
            pts.push([bbox.min_x + fx * bbox.width(), y]);
        }
    }
    pts
}

fn check_resolution(width: usize, height: usize) -> Result<()> {
    if width < 2 || height < 2 {
        return Err(Error::Invalid("lattice resolution must be at least 2x2".into()));
    }
    if width * height > 65536 {
        return Err(Error::Invalid(format!(
            "lattice of {}x{} exceeds the 65536-point cap",
            width, height
        )));
    }
    Ok(())
}

/// Firing pattern of selected output neurons: the encoder evaluated over a
/// regular lattice, one grid per neuron.
pub fn response_map(
    encoder: &mut EncoderModel,
    store: &ParameterStore,
    neurons: &[usize],
    bbox: &BoundingBox,
    resolution: (usize, usize),
) -> Result<Vec<ResponseGrid>> {
    let (width, height) = resolution;
    check_resolution(width, height)?;
    for &n in neurons {
        if n >= encoder.output_dim() {
            return Err(Error::Invalid(format!(
                "neuron index {n} out of range for output dim {}",
                encoder.output_dim()
            )));
        }
    }
    let pts = lattice_points(bbox, width, height);
    let emb = encoder.encode(store, &pts, None)?;
    if !emb.all_finite() {
        return Err(Error::Invalid("encoder produced non-finite activations".into()));
    }
    Ok(neurons
        .iter()
        .map(|&n| ResponseGrid {
            width,
            height,
            bbox: *bbox,
            values: (0..pts.len()).map(|p| emb.row(p)[n]).collect(),
        })
        .collect())
}

/// Cluster labels of lattice embeddings, cosine average linkage.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub bbox: BoundingBox,
    pub labels: Vec<usize>,
    pub clusters: usize,
}

impl LabelGrid {
    /// Labels as real values, for the grid exporters.
    pub fn to_value_grid(&self) -> ResponseGrid {
        ResponseGrid {
            width: self.width,
            height: self.height,
            bbox: self.bbox,
            values: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }
}

pub fn embedding_cluster_map(
    encoder: &mut EncoderModel,
    store: &ParameterStore,
    bbox: &BoundingBox,
    resolution: (usize, usize),
    k: usize,
) -> Result<LabelGrid> {
    let (width, height) = resolution;
    check_resolution(width, height)?;
    if k < 2 {
        return Err(Error::Invalid("cluster map needs k >= 2".into()));
    }
    let pts = lattice_points(bbox, width, height);
    let emb = encoder.encode(store, &pts, None)?;
    let labels = cluster_labels(&emb, k)?;
    Ok(LabelGrid {
        width,
        height,
        bbox: *bbox,
        labels,
        clusters: k,
    })
}

/// Grid export formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridFormat {
    Csv,
    Pgm,
}

/// Write a grid: CSV as H rows of W decimals, or binary 8-bit PGM min-max
/// normalized (constant grids map to 128). Row 0 is the max-y edge.
pub fn export_grid(grid: &ResponseGrid, path: impl AsRef<Path>, format: GridFormat) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    match format {
        GridFormat::Csv => {
            for row in 0..grid.height {
                let cells: Vec<String> = (0..grid.width)
                    .map(|col| format!("{}", grid.values[row * grid.width + col]))
                    .collect();
                writeln!(w, "{}", cells.join(","))?;
            }
        }
        GridFormat::Pgm => {
            writeln!(w, "P5")?;
            writeln!(w, "{} {}", grid.width, grid.height)?;
            writeln!(w, "255")?;
            w.write_all(&grid_to_bytes(grid))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Min-max normalized 8-bit values; constant grids become all-128.
pub fn grid_to_bytes(grid: &ResponseGrid) -> Vec<u8> {
    let min = grid.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![128; grid.values.len()];
    }
    grid.values
        .iter()
        .map(|&v| (((v - min) / (max - min)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Two-column CSV (radius, value) used for both raw and renormalized
/// Ripley curves.
pub fn export_curve(radii: &[f64], values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "r,value")?;
    for (r, v) in radii.iter().zip(values) {
        writeln!(w, "{r},{v}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_assembly::{EncoderSpec, HeadSpec};
    use crate::poi_data::{
        generate_synthetic, toy_dataset, HardcoreSpec, MaternClusterSpec, PointProcess,
        PoissonSpec, ProcessComponent, PointFeature, TypeVocabulary,
    };
    use crate::space_encoders::{RawFeatureKind, ScaleSpec};
    use approx::assert_abs_diff_eq;

    fn radii_to(max: f64, step: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut r = 0.0;
        while r <= max + 1e-9 {
            out.push(r);
            r += step;
        }
        out
    }

    #[test]
    fn two_point_curve_matches_hand_count() {
        // two points 0.5 apart in a unit-area box: both ordered pairs fall
        // inside r=1, so K = A * 2/(2*1) = A = 1
        let vocab = TypeVocabulary::from_names(&["a"]);
        let points = vec![
            PointFeature { id: 0, loc: [0.25, 0.5], type_ids: vec![0] },
            PointFeature { id: 1, loc: [0.75, 0.5], type_ids: vec![0] },
        ];
        let bbox = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 1.0, max_y: 1.0 };
        let ds = Dataset::with_bbox(points, vocab, bbox).unwrap();
        let curve = ripley_k(&ds, 0, &[0.1, 1.0]).unwrap();
        // r below the pair distance -> 0
        assert_eq!(curve.k_values[0], 0.0);
        assert_abs_diff_eq!(curve.k_values[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(curve.intensity, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fewer_than_two_points_errors() {
        let ds = toy_dataset(&[[0.0, 0.0], [1.0, 1.0]], &[&[0], &[1]], 2);
        assert!(ripley_k(&ds, 0, &[1.0]).is_err());
    }

    #[test]
    fn k_non_decreasing_and_translation_invariant() {
        let comp = ProcessComponent {
            process: PointProcess::Poisson(PoissonSpec { intensity: 2e-4 }),
            type_name: "a".into(),
        };
        let bbox = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 1000.0, max_y: 1000.0 };
        let ds = generate_synthetic(&[comp], bbox, 7).unwrap();
        let radii = radii_to(300.0, 20.0);
        let curve = ripley_k(&ds, 0, &radii).unwrap();
        assert_eq!(curve.k_values[0], 0.0);
        for w in curve.k_values.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // shift everything by a constant
        let shifted_pts: Vec<PointFeature> = ds
            .points()
            .iter()
            .map(|p| PointFeature {
                id: p.id,
                loc: [p.loc[0] + 5000.0, p.loc[1] - 3000.0],
                type_ids: p.type_ids.clone(),
            })
            .collect();
        let shifted_bbox = BoundingBox {
            min_x: 5000.0,
            min_y: -3000.0,
            max_x: 6000.0,
            max_y: -2000.0,
        };
        let shifted = Dataset::with_bbox(shifted_pts, ds.vocab().clone(), shifted_bbox).unwrap();
        let curve2 = ripley_k(&shifted, 0, &radii).unwrap();
        for (a, b) in curve.k_values.iter().zip(&curve2.k_values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn csr_matches_pi_r_squared() {
        // homogeneous Poisson: K(r) = pi r^2; check at r=50 over 20 seeds
        let bbox = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 1000.0, max_y: 1000.0 };
        let comp = ProcessComponent {
            process: PointProcess::Poisson(PoissonSpec { intensity: 1e-3 }),
            type_name: "a".into(),
        };
        let mut total = 0.0;
        for seed in 0..20 {
            let ds = generate_synthetic(&[comp.clone()], bbox, seed).unwrap();
            let curve = ripley_k(&ds, 0, &[50.0]).unwrap();
            total += curve.k_values[0];
        }
        let mean = total / 20.0;
        let want = std::f64::consts::PI * 2500.0;
        assert!(
            (mean - want).abs() / want < 0.2,
            "CSR K(50) mean {mean:.1} vs {want:.1}"
        );
    }

    #[test]
    fn renormalized_curve_and_threshold_radius() {
        // analytic CSR curve reaches 3.0 near sqrt(3e6/pi) ~ 977 m
        let radii = radii_to(1500.0, 10.0);
        let values: Vec<f64> = radii
            .iter()
            .map(|&r| std::f64::consts::PI * r * r / 1e6)
            .collect();
        let r = radius_at_threshold(&radii, &values, 3.0).unwrap();
        assert!((r - 977.2).abs() < 10.0, "crossing at {r}");

        // spec interpolation example
        assert_abs_diff_eq!(
            radius_at_threshold(&[1.0, 2.0], &[1.0, 5.0], 3.0).unwrap(),
            1.5,
            epsilon = 1e-12
        );
        assert_eq!(radius_at_threshold(&[1.0, 2.0], &[1.0, 2.9], 3.0), None);
    }

    #[test]
    fn zero_curve_stays_zero_after_renormalization() {
        let curve = RipleyCurve {
            radii: vec![1.0, 2.0],
            k_values: vec![0.0, 0.0],
            type_id: 0,
            intensity: 1e-4,
        };
        let renorm = renormalized_curve(&curve, 1e6);
        assert_eq!(renorm.values, vec![0.0, 0.0]);
    }

    #[test]
    fn matern_clustered_hardcore_even() {
        let bbox = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 10_000.0, max_y: 10_000.0 };
        let comps = vec![
            ProcessComponent {
                process: PointProcess::MaternCluster(MaternClusterSpec {
                    parent_intensity: 2.5e-7,
                    radius: 30.0,
                    mean_offspring: 60.0,
                }),
                type_name: "clustered".into(),
            },
            ProcessComponent {
                process: PointProcess::Hardcore(HardcoreSpec {
                    intensity: 2e-5,
                    min_distance: 400.0,
                }),
                type_name: "even".into(),
            },
        ];
        let ds = generate_synthetic(&comps, bbox, 123).unwrap();
        let radii = radii_to(1200.0, 20.0);
        let groups = classify_groups(&ds, &radii, &GroupThresholds::default()).unwrap();
        assert_eq!(groups[&0].group, DistributionGroup::Clustered, "{:?}", groups[&0]);
        assert_eq!(groups[&1].group, DistributionGroup::Even, "{:?}", groups[&1]);
    }

    fn constant_encoder(store: &mut ParameterStore) -> EncoderModel {
        let spec = EncoderSpec {
            kind: RawFeatureKind::Theory {
                scales: ScaleSpec::new(10.0, 100.0, 2).unwrap(),
            },
            head: HeadSpec::Ffn { hidden_layers: 1, hidden_units: 4 },
            output_dim: 3,
        };
        // leave everything zero: output is the zero bias, constant
        EncoderModel::build(spec, "enc", store).unwrap()
    }

    #[test]
    fn response_map_constant_head_and_dims() {
        let mut store = ParameterStore::new();
        let mut enc = constant_encoder(&mut store);
        let bbox = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 100.0, max_y: 100.0 };
        let grids = response_map(&mut enc, &store, &[0, 2], &bbox, (5, 7)).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!((grids[0].width, grids[0].height), (5, 7));
        assert!(grids[0].values.iter().all(|&v| v == grids[0].values[0]));
        assert!(response_map(&mut enc, &store, &[3], &bbox, (5, 5)).is_err());
        assert!(response_map(&mut enc, &store, &[0], &bbox, (1, 5)).is_err());
    }

    #[test]
    fn response_map_periodic_pattern_via_autocorrelation() {
        // Block-diagonal head with a hand-set weight so output 0 equals the
        // first raw feature cos(x/lambda); the lattice is sized so one
        // 2*pi*lambda period spans exactly 16 pixels.
        let mut store = ParameterStore::new();
        let spec = EncoderSpec {
            kind: RawFeatureKind::Theory {
                scales: ScaleSpec::new(1.0, 1.0, 1).unwrap(),
            },
            head: HeadSpec::BlockDiag,
            output_dim: 1,
        };
        let mut enc = EncoderModel::build(spec, "enc", &mut store).unwrap();
        store.value_mut("enc.blockdiag.wblocks").data_mut()[0] = 1.0;

        use std::f64::consts::PI;
        let bbox = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 8.0 * PI, max_y: 8.0 * PI };
        let grids = response_map(&mut enc, &store, &[0], &bbox, (65, 3)).unwrap();
        let row: Vec<f64> = grids[0].values[..65].to_vec();
        let auto = |lag: usize| -> f64 {
            let n = row.len() - lag;
            let dot: f64 = (0..n).map(|i| row[i] * row[i + lag]).sum();
            let na: f64 = (0..n).map(|i| row[i] * row[i]).sum::<f64>().sqrt();
            let nb: f64 = (0..n).map(|i| row[i + lag] * row[i + lag]).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        // period = 2*pi / (8*pi/64) = 16 pixels
        assert!(auto(16) > 0.999, "autocorrelation at the period: {}", auto(16));
        assert!(auto(8) < 0.5, "half-period autocorrelation: {}", auto(8));
    }

    #[test]
    fn cluster_map_recovers_tile_cells() {
        let mut store = ParameterStore::new();
        let bbox = BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 100.0, max_y: 100.0 };
        let spec = EncoderSpec {
            kind: RawFeatureKind::Tile { cell_size: 50.0, area: bbox },
            head: HeadSpec::Table,
            output_dim: 4,
        };
        let mut enc = EncoderModel::build(spec, "enc", &mut store).unwrap();
        store.init_params(5);
        let map = embedding_cluster_map(&mut enc, &store, &bbox, (8, 8), 4).unwrap();
        // all lattice points in one tile share a label
        let expected_cell = |p: [f64; 2]| crate::space_encoders::tile_index(p, &bbox, 50.0);
        let pts = lattice_points(&bbox, 8, 8);
        let mut cell_to_label = std::collections::HashMap::new();
        for (i, &p) in pts.iter().enumerate() {
            let cell = expected_cell(p);
            let entry = cell_to_label.entry(cell).or_insert(map.labels[i]);
            assert_eq!(*entry, map.labels[i], "lattice point {i} in cell {cell}");
        }
        assert_eq!(cell_to_label.len(), 4);
    }

    #[test]
    fn export_csv_and_pgm_conventions() {
        let grid = ResponseGrid {
            width: 2,
            height: 2,
            bbox: BoundingBox { min_x: 0.0, min_y: 0.0, max_x: 1.0, max_y: 1.0 },
            values: vec![0.0, 1.0, 2.0, 3.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("g.csv");
        export_grid(&grid, &csv_path, GridFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), "0,1\n2,3\n");

        let bytes = grid_to_bytes(&grid);
        assert_eq!(bytes, vec![0, 85, 170, 255]);
        let constant = ResponseGrid { values: vec![7.0; 4], ..grid.clone() };
        assert_eq!(grid_to_bytes(&constant), vec![128; 4]);

        let pgm_path = dir.path().join("g.pgm");
        export_grid(&grid, &pgm_path, GridFormat::Pgm).unwrap();
        let raw = std::fs::read(&pgm_path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&raw[..header.len()], header);
        assert_eq!(&raw[header.len()..], &[0, 85, 170, 255]);
        // non-constant grids span exactly 0..255
        assert_eq!(*bytes.iter().min().unwrap(), 0);
        assert_eq!(*bytes.iter().max().unwrap(), 255);
    }
}
