//! Deterministic raw featurizers: multi-scale sinusoidal encodings along
//! three hexagonal directions, transformer-style per-axis sinusoids, and the
//! baseline family (direct, wrap, tile, RBF, polar variants), plus the
//! complex-valued grid-cell construction used for validating the translation
//! and local-isometry identities.
//!
//! All functions here are pure; trainable heads live in `encoder_assembly`.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poi_data::BoundingBox;
use crate::rng::seeded_rng;

/// Three unit vectors 120° apart; their sum is the zero vector.
pub const HEX_DIRECTIONS: [[f64; 2]; 3] = [
    [1.0, 0.0],
    [-0.5, 0.866_025_403_784_438_6],
    [-0.5, -0.866_025_403_784_438_6],
];

/// Geometric progression of wavelengths shared by the sinusoidal encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub num_scales: usize,
}

impl ScaleSpec {
    pub fn new(lambda_min: f64, lambda_max: f64, num_scales: usize) -> Result<Self> {
        let spec = ScaleSpec {
            lambda_min,
            lambda_max,
            num_scales,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            return Err(Error::Invalid(format!(
                "scale spec requires 0 < lambda_min <= lambda_max, got {} / {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.num_scales < 1 {
            return Err(Error::Invalid("scale spec requires at least one scale".into()));
        }
        Ok(())
    }

    /// Wavelength at scale index `s`; for a single scale this is lambda_min
    /// (the s/(S-1) exponent is taken as 0).
    pub fn divisor(&self, s: usize) -> f64 {
        if self.num_scales == 1 {
            self.lambda_min
        } else {
            let g = self.lambda_max / self.lambda_min;
            self.lambda_min * g.powf(s as f64 / (self.num_scales - 1) as f64)
        }
    }
}

/// Hexagonal multi-scale encoding: per scale, [cos; sin] of the projections
/// onto the three 120°-separated directions. Output length 6S.
pub fn pe_theory(x: [f64; 2], spec: &ScaleSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * spec.num_scales);
    for s in 0..spec.num_scales {
        let div = spec.divisor(s);
        for a in &HEX_DIRECTIONS {
            let phase = (x[0] * a[0] + x[1] * a[1]) / div;
            out.push(phase.cos());
            out.push(phase.sin());
        }
    }
    out
}

/// Per-axis multi-scale encoding: per scale and component, [cos; sin] of
/// x[l]/wavelength. Output length 4S.
pub fn pe_grid(x: [f64; 2], spec: &ScaleSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * spec.num_scales);
    for s in 0..spec.num_scales {
        let div = spec.divisor(s);
        for &c in &x {
            let phase = c / div;
            out.push(phase.cos());
            out.push(phase.sin());
        }
    }
    out
}

/// Like [`pe_grid`] but each (scale, component) contributes the three
/// phase-shifted sines sin(θ), sin(θ+2π/3), sin(θ+4π/3). Output length 6S.
pub fn pe_hexa(x: [f64; 2], spec: &ScaleSpec) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut out = Vec::with_capacity(6 * spec.num_scales);
    for s in 0..spec.num_scales {
        let div = spec.divisor(s);
        for &c in &x {
            let theta = c / div;
            out.push(theta.sin());
            out.push((theta + 2.0 * PI / 3.0).sin());
            out.push((theta + 4.0 * PI / 3.0).sin());
        }
    }
    out
}

/// Affine map of each component into [-1,1] over `bounds`; points outside
/// extrapolate linearly.
pub fn normalize_box(x: [f64; 2], bounds: &BoundingBox) -> Result<[f64; 2]> {
    let wx = bounds.max_x - bounds.min_x;
    let wy = bounds.max_y - bounds.min_y;
    if wx <= 0.0 || wy <= 0.0 {
        return Err(Error::Invalid(format!(
            "degenerate normalization box {bounds:?}"
        )));
    }
    Ok([
        2.0 * (x[0] - bounds.min_x) / wx - 1.0,
        2.0 * (x[1] - bounds.min_y) / wy - 1.0,
    ])
}

/// Coordinate wrap: normalize into [-1,1] then [sin(π·); cos(π·)] per
/// component.
pub fn wrap_features(x: [f64; 2], bounds: &BoundingBox) -> Result<[f64; 4]> {
    use std::f64::consts::PI;
    let n = normalize_box(x, bounds)?;
    Ok([
        (PI * n[0]).sin(),
        (PI * n[0]).cos(),
        (PI * n[1]).sin(),
        (PI * n[1]).cos(),
    ])
}

/// Grid dimensions (cols, rows) when `bounds` is divided into square cells
/// of size `cell_size`.
pub fn tile_grid_dims(bounds: &BoundingBox, cell_size: f64) -> (usize, usize) {
    let cols = ((bounds.max_x - bounds.min_x) / cell_size).ceil().max(1.0) as usize;
    let rows = ((bounds.max_y - bounds.min_y) / cell_size).ceil().max(1.0) as usize;
    (cols, rows)
}

/// Row-major cell id of `x` in the tile grid; coordinates are clamped into
/// the box first so marginally outside points land in boundary cells.
pub fn tile_index(x: [f64; 2], bounds: &BoundingBox, cell_size: f64) -> usize {
    let (cols, rows) = tile_grid_dims(bounds, cell_size);
    let cx = x[0].clamp(bounds.min_x, bounds.max_x);
    let cy = x[1].clamp(bounds.min_y, bounds.max_y);
    let ix = (((cx - bounds.min_x) / cell_size).floor() as usize).min(cols - 1);
    let iy = (((cy - bounds.min_y) / cell_size).floor() as usize).min(rows - 1);
    iy * cols + ix
}

/// Gaussian kernel value against every anchor: exp(-‖p-a_m‖²/(2σ²)).
pub fn rbf_features(p: [f64; 2], anchors: &[[f64; 2]], sigma: f64) -> Vec<f64> {
    anchors
        .iter()
        .map(|a| {
            let dx = p[0] - a[0];
            let dy = p[1] - a[1];
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// RBF with a kernel size that grows with the anchor's distance from the
/// origin: σ_m = σ + β‖a_m‖.
pub fn scaled_rbf_features(dx: [f64; 2], anchors: &[[f64; 2]], sigma: f64, beta: f64) -> Vec<f64> {
    anchors
        .iter()
        .map(|a| {
            let ddx = dx[0] - a[0];
            let ddy = dx[1] - a[1];
            let s = sigma + beta * (a[0] * a[0] + a[1] * a[1]).sqrt();
            (-(ddx * ddx + ddy * ddy) / (2.0 * s * s)).exp()
        })
        .collect()
}

/// Log-radius polar coordinates: r = ln(‖Δx‖+1), θ ∈ (-π, π] with θ = 0 at
/// the origin.
pub fn polar_transform(dx: [f64; 2]) -> (f64, f64) {
    let norm = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
    let r = (norm + 1.0).ln();
    let theta = if dx == [0.0, 0.0] {
        0.0
    } else {
        let t = dx[1].atan2(dx[0]);
        if t == -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            t
        }
    };
    (r, theta)
}

/// θ-major cell id in an F×F grid over (θ ∈ (-π,π], r ∈ [0, ln(r_max+1)]);
/// radii beyond r_max clamp into the top bin.
pub fn polar_tile_index(dx: [f64; 2], r_max: f64, bins: usize) -> usize {
    use std::f64::consts::PI;
    let (r, theta) = polar_transform(dx);
    let r_extent = (r_max + 1.0).ln();
    let theta_bin = ((((theta + PI) / (2.0 * PI)) * bins as f64).floor() as usize).min(bins - 1);
    let r_bin = (((r / r_extent) * bins as f64).floor() as usize).min(bins - 1);
    theta_bin * bins + r_bin
}

/// Width of a raw featurization: a dense vector or a cell-id vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawWidth {
    Features(usize),
    Cells(usize),
}

/// One raw featurization of a raw featurizer.
#[derive(Debug, Clone)]
pub enum RawOutput {
    Features(Vec<f64>),
    Cell(usize),
}

/// Every deterministic featurizer in the catalog, with its frozen
/// parameters (anchors, boxes) so a featurizer rebuilt from a checkpoint is
/// bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawFeatureKind {
    Theory { scales: ScaleSpec },
    Grid { scales: ScaleSpec },
    Hexa { scales: ScaleSpec },
    Direct { norm_box: BoundingBox },
    Wrap { norm_box: BoundingBox },
    Tile { cell_size: f64, area: BoundingBox },
    Rbf { anchors: Vec<[f64; 2]>, sigma: f64 },
    ScaledRbf { anchors: Vec<[f64; 2]>, sigma: f64, beta: f64 },
    Polar,
    PolarTile { bins: usize, r_max: f64 },
}

impl RawFeatureKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            RawFeatureKind::Theory { scales }
            | RawFeatureKind::Grid { scales }
            | RawFeatureKind::Hexa { scales } => scales.validate(),
            RawFeatureKind::Direct { norm_box } | RawFeatureKind::Wrap { norm_box } => {
                if norm_box.max_x <= norm_box.min_x || norm_box.max_y <= norm_box.min_y {
                    Err(Error::Invalid("degenerate normalization box".into()))
                } else {
                    Ok(())
                }
            }
            RawFeatureKind::Tile { cell_size, .. } => {
                if *cell_size > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Invalid("tile cell size must be positive".into()))
                }
            }
            RawFeatureKind::Rbf { anchors, sigma } => {
                if anchors.is_empty() {
                    Err(Error::Invalid("rbf needs at least one anchor".into()))
                } else if *sigma <= 0.0 {
                    Err(Error::Invalid("rbf sigma must be positive".into()))
                } else {
                    Ok(())
                }
            }
            RawFeatureKind::ScaledRbf { anchors, sigma, beta } => {
                if anchors.is_empty() {
                    Err(Error::Invalid("scaled_rbf needs at least one anchor".into()))
                } else if *sigma <= 0.0 {
                    Err(Error::Invalid("scaled_rbf sigma must be positive".into()))
                } else if *beta < 0.0 {
                    Err(Error::Invalid("scaled_rbf beta must be non-negative".into()))
                } else {
                    Ok(())
                }
            }
            RawFeatureKind::Polar => Ok(()),
            RawFeatureKind::PolarTile { bins, r_max } => {
                if *bins < 1 {
                    Err(Error::Invalid("polar_tile needs at least one bin".into()))
                } else if *r_max <= 0.0 {
                    Err(Error::Invalid("polar_tile r_max must be positive".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn width(&self) -> RawWidth {
        match self {
            RawFeatureKind::Theory { scales } | RawFeatureKind::Hexa { scales } => {
                RawWidth::Features(6 * scales.num_scales)
            }
            RawFeatureKind::Grid { scales } => RawWidth::Features(4 * scales.num_scales),
            RawFeatureKind::Direct { .. } => RawWidth::Features(2),
            RawFeatureKind::Wrap { .. } => RawWidth::Features(4),
            RawFeatureKind::Tile { cell_size, area } => {
                let (cols, rows) = tile_grid_dims(area, *cell_size);
                RawWidth::Cells(cols * rows)
            }
            RawFeatureKind::Rbf { anchors, .. } => RawWidth::Features(anchors.len()),
            RawFeatureKind::ScaledRbf { anchors, .. } => RawWidth::Features(anchors.len()),
            RawFeatureKind::Polar => RawWidth::Features(2),
            RawFeatureKind::PolarTile { bins, .. } => RawWidth::Cells(bins * bins),
        }
    }

    pub fn featurize(&self, x: [f64; 2]) -> Result<RawOutput> {
        Ok(match self {
            RawFeatureKind::Theory { scales } => RawOutput::Features(pe_theory(x, scales)),
            RawFeatureKind::Grid { scales } => RawOutput::Features(pe_grid(x, scales)),
            RawFeatureKind::Hexa { scales } => RawOutput::Features(pe_hexa(x, scales)),
            RawFeatureKind::Direct { norm_box } => {
                RawOutput::Features(normalize_box(x, norm_box)?.to_vec())
            }
            RawFeatureKind::Wrap { norm_box } => {
                RawOutput::Features(wrap_features(x, norm_box)?.to_vec())
            }
            RawFeatureKind::Tile { cell_size, area } => {
                RawOutput::Cell(tile_index(x, area, *cell_size))
            }
            RawFeatureKind::Rbf { anchors, sigma } => {
                RawOutput::Features(rbf_features(x, anchors, *sigma))
            }
            RawFeatureKind::ScaledRbf { anchors, sigma, beta } => {
                RawOutput::Features(scaled_rbf_features(x, anchors, *sigma, *beta))
            }
            RawFeatureKind::Polar => {
                let (r, theta) = polar_transform(x);
                RawOutput::Features(vec![r, theta])
            }
            RawFeatureKind::PolarTile { bins, r_max } => {
                RawOutput::Cell(polar_tile_index(x, *r_max, *bins))
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Complex grid-cell construction.

/// Unitary mixing of the three complex phasors; fixes the scale α of the
/// underlying direction vectors (‖a_j‖ = 2√α).
#[derive(Debug, Clone)]
pub struct GridCellBasis {
    pub alpha: f64,
    mixing: [[Complex64; 3]; 3],
}

/// Value of the mixed phasor vector φ(x) at one location.
#[derive(Debug, Clone)]
pub struct GridCellState {
    pub phi: [Complex64; 3],
}

impl GridCellState {
    pub fn squared_norm(&self) -> f64 {
        self.phi.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Complex inner product ⟨self, other⟩ = Σ self_j · conj(other_j).
    pub fn inner(&self, other: &GridCellState) -> Complex64 {
        self.phi
            .iter()
            .zip(other.phi.iter())
            .map(|(a, b)| a * b.conj())
            .sum()
    }
}

fn max_abs_dev_from_identity(m: &[[Complex64; 3]; 3]) -> f64 {
    let mut max = 0.0f64;
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let want = if r == c { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
            max = max.max((v - want).norm());
        }
    }
    max
}

impl GridCellBasis {
    /// Validates α > 0 and that `mixing` is unitary to 1e-8.
    pub fn new(alpha: f64, mixing: [[Complex64; 3]; 3]) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::Invalid("grid-cell alpha must be positive".into()));
        }
        // C*C
        let mut prod = [[Complex64::new(0.0, 0.0); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..3 {
                    acc += mixing[k][r].conj() * mixing[k][c];
                }
                prod[r][c] = acc;
            }
        }
        if max_abs_dev_from_identity(&prod) > 1e-8 {
            return Err(Error::Invalid("grid-cell mixing matrix is not unitary".into()));
        }
        Ok(GridCellBasis { alpha, mixing })
    }

    /// Seeded random unitary via Gram–Schmidt on a complex Gaussian matrix.
    pub fn random(alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, "grid-cell-unitary");
        let normal = StandardNormal;
        let mut cols: Vec<[Complex64; 3]> = (0..3)
            .map(|_| {
                [0, 1, 2].map(|_| {
                    Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng))
                })
            })
            .collect();
        for j in 0..3 {
            for k in 0..j {
                // projection coefficient ⟨v_j, q_k⟩
                let coef: Complex64 = (0..3).map(|i| cols[j][i] * cols[k][i].conj()).sum();
                for i in 0..3 {
                    let adj = coef * cols[k][i];
                    cols[j][i] -= adj;
                }
            }
            let norm: f64 = cols[j].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
        let mut mixing = [[Complex64::new(0.0, 0.0); 3]; 3];
        for (c, col) in cols.iter().enumerate() {
            for r in 0..3 {
                mixing[r][c] = col[r];
            }
        }
        GridCellBasis::new(alpha, mixing)
    }

    fn directions(&self) -> [[f64; 2]; 3] {
        let scale = 2.0 * self.alpha.sqrt();
        HEX_DIRECTIONS.map(|[x, y]| [scale * x, scale * y])
    }

    /// Unmixed phasor vector Ψ(x) with Ψ_j = exp(i⟨a_j, x⟩).
    pub fn psi(&self, x: [f64; 2]) -> [Complex64; 3] {
        self.directions()
            .map(|a| Complex64::from_polar(1.0, a[0] * x[0] + a[1] * x[1]))
    }

    /// φ(x) = C·Ψ(x).
    pub fn phi(&self, x: [f64; 2]) -> GridCellState {
        let psi = self.psi(x);
        let mut phi = [Complex64::new(0.0, 0.0); 3];
        for r in 0..3 {
            for (c, p) in psi.iter().enumerate() {
                phi[r] += self.mixing[r][c] * p;
            }
        }
        GridCellState { phi }
    }

    /// Apply the translation operator M(Δx) = C·diag(Ψ(Δx))·C* to a state.
    pub fn translate(&self, state: &GridCellState, dx: [f64; 2]) -> GridCellState {
        // v = C*·φ
        let mut v = [Complex64::new(0.0, 0.0); 3];
        for c in 0..3 {
            for r in 0..3 {
                v[c] += self.mixing[r][c].conj() * state.phi[r];
            }
        }
        let psi_dx = self.psi(dx);
        for (vi, p) in v.iter_mut().zip(psi_dx.iter()) {
            *vi *= p;
        }
        let mut phi = [Complex64::new(0.0, 0.0); 3];
        for r in 0..3 {
            for (c, vi) in v.iter().enumerate() {
                phi[r] += self.mixing[r][c] * vi;
            }
        }
        GridCellState { phi }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn spec(lmin: f64, lmax: f64, s: usize) -> ScaleSpec {
        ScaleSpec::new(lmin, lmax, s).unwrap()
    }

    #[test]
    fn hex_directions_invariants() {
        for a in &HEX_DIRECTIONS {
            assert_abs_diff_eq!(a[0] * a[0] + a[1] * a[1], 1.0, epsilon = 1e-12);
        }
        for i in 0..3 {
            let j = (i + 1) % 3;
            let dot = HEX_DIRECTIONS[i][0] * HEX_DIRECTIONS[j][0]
                + HEX_DIRECTIONS[i][1] * HEX_DIRECTIONS[j][1];
            assert_abs_diff_eq!(dot, (2.0 * std::f64::consts::PI / 3.0).cos(), epsilon = 1e-12);
        }
        let sum = HEX_DIRECTIONS.iter().fold([0.0, 0.0], |acc, a| [acc[0] + a[0], acc[1] + a[1]]);
        assert_abs_diff_eq!(sum[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sum[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pe_theory_at_origin() {
        let s = spec(50.0, 40_000.0, 4);
        let v = pe_theory([0.0, 0.0], &s);
        assert_eq!(v.len(), 24);
        for chunk in v.chunks(2) {
            assert_eq!(chunk, &[1.0, 0.0]);
        }
    }

    #[test]
    fn pe_theory_single_scale_matches_scalar_evaluation() {
        // Independent evaluation: phases are <x, a_j>/lambda_min.
        let lmin = 7.5;
        let s = spec(lmin, lmin, 1);
        let x = [lmin, 0.0];
        let got = pe_theory(x, &s);
        let mut want = Vec::new();
        for a in &HEX_DIRECTIONS {
            let phase = (x[0] * a[0] + x[1] * a[1]) / lmin;
            want.push(phase.cos());
            want.push(phase.sin());
        }
        // phases are [1, -1/2, -1/2]
        assert_abs_diff_eq!(want[0], 1.0f64.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(want[3], (-0.5f64).sin(), epsilon = 1e-12);
        for (g, w) in got.iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn pe_theory_phases_sum_to_zero() {
        // a1+a2+a3 = 0 so the three projections cancel for any x.
        let mut rng = crate::rng::seeded_rng(5, "phases");
        for _ in 0..50 {
            let x = [rng.random_range(-1e4..1e4), rng.random_range(-1e4..1e4)];
            let total: f64 = HEX_DIRECTIONS.iter().map(|a| x[0] * a[0] + x[1] * a[1]).sum();
            assert_abs_diff_eq!(total, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pe_theory_lattice_translation_invariance() {
        // Dual basis of (a1, a2): b1 = (1, 1/sqrt(3)), b2 = (0, 2/sqrt(3)).
        use std::f64::consts::PI;
        let lmin = 12.0;
        let s = spec(lmin, lmin, 1);
        let b1 = [1.0, 1.0 / 3.0f64.sqrt()];
        let b2 = [0.0, 2.0 / 3.0f64.sqrt()];
        let mut rng = crate::rng::seeded_rng(9, "lattice");
        for _ in 0..50 {
            let x = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
            let k1 = rng.random_range(-5i64..=5) as f64;
            let k2 = rng.random_range(-5i64..=5) as f64;
            let shifted = [
                x[0] + 2.0 * PI * lmin * (k1 * b1[0] + k2 * b2[0]),
                x[1] + 2.0 * PI * lmin * (k1 * b1[1] + k2 * b2[1]),
            ];
            let a = pe_theory(x, &s);
            let b = pe_theory(shifted, &s);
            for (u, v) in a.iter().zip(&b) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn pe_grid_origin_and_quarter_period() {
        let s4 = spec(1.0, 100.0, 3);
        let v = pe_grid([0.0, 0.0], &s4);
        assert_eq!(v.len(), 12);
        for chunk in v.chunks(2) {
            assert_eq!(chunk, &[1.0, 0.0]);
        }
        let s1 = spec(1.0, 1.0, 1);
        let v = pe_grid([std::f64::consts::FRAC_PI_2, 0.0], &s1);
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pe_grid_single_scale_periodicity() {
        use std::f64::consts::PI;
        let lmin = 3.0;
        let s = spec(lmin, lmin, 1);
        let x = [17.3, -4.1];
        let shifted = [x[0] + 2.0 * PI * lmin, x[1]];
        for (a, b) in pe_grid(x, &s).iter().zip(pe_grid(shifted, &s).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn pe_hexa_known_angles() {
        let s = spec(1.0, 1.0, 1);
        // theta = 0 on both components
        let v = pe_hexa([0.0, 0.0], &s);
        let root3_half = 3.0f64.sqrt() / 2.0;
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], root3_half, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], -root3_half, epsilon = 1e-12);
        // theta = pi/2 on the first component
        let v = pe_hexa([std::f64::consts::FRAC_PI_2, 0.0], &s);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn pe_hexa_triplets_sum_to_zero() {
        let s = spec(2.0, 20.0, 3);
        let mut rng = crate::rng::seeded_rng(2, "hexa");
        for _ in 0..20 {
            let x = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            let v = pe_hexa(x, &s);
            for triple in v.chunks(3) {
                assert_abs_diff_eq!(triple.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sinusoidal_outputs_bounded() {
        let s = spec(0.5, 500.0, 8);
        let mut rng = crate::rng::seeded_rng(3, "bounded");
        for _ in 0..100 {
            let x = [rng.random_range(-1e6..1e6), rng.random_range(-1e6..1e6)];
            for v in pe_theory(x, &s).iter().chain(pe_grid(x, &s).iter()).chain(pe_hexa(x, &s).iter()) {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    fn unit_box() -> BoundingBox {
        BoundingBox {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 10.0,
            max_y: 10.0,
        }
    }

    #[test]
    fn normalize_box_center_corners_extrapolation() {
        let b = unit_box();
        assert_eq!(normalize_box([5.0, 5.0], &b).unwrap(), [0.0, 0.0]);
        assert_eq!(normalize_box([0.0, 0.0], &b).unwrap(), [-1.0, -1.0]);
        assert_eq!(normalize_box([10.0, 10.0], &b).unwrap(), [1.0, 1.0]);
        assert_eq!(normalize_box([15.0, 5.0], &b).unwrap(), [2.0, 0.0]);
        let degenerate = BoundingBox {
            min_x: 1.0,
            min_y: 0.0,
            max_x: 1.0,
            max_y: 5.0,
        };
        assert!(normalize_box([1.0, 1.0], &degenerate).is_err());
    }

    #[test]
    fn wrap_features_center_and_corner() {
        let b = unit_box();
        let v = wrap_features([5.0, 5.0], &b).unwrap();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[3], 1.0, epsilon = 1e-12);
        let v = wrap_features([0.0, 0.0], &b).unwrap();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v[1], -1.0, epsilon = 1e-9);
        for comp in v {
            assert!((-1.0..=1.0).contains(&comp));
        }
    }

    #[test]
    fn tile_index_cases() {
        let b = BoundingBox {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 1000.0,
            max_y: 1000.0,
        };
        assert_eq!(tile_grid_dims(&b, 500.0), (2, 2));
        assert_eq!(tile_index([10.0, 10.0], &b, 500.0), 0);
        assert_eq!(tile_index([999.0, 501.0], &b, 500.0), 3);
        assert_eq!(tile_index([-5.0, 0.0], &b, 500.0), tile_index([0.0, 0.0], &b, 500.0));
    }

    #[test]
    fn rbf_scalar_cases() {
        let anchors = vec![[0.0, 0.0], [100.0, 0.0]];
        let v = rbf_features([0.0, 0.0], &anchors, 40.0);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
        // distance sigma -> exp(-1/2)
        let v = rbf_features([40.0, 0.0], &anchors, 40.0);
        assert_abs_diff_eq!(v[0], (-0.5f64).exp(), epsilon = 1e-12);
        for val in &v {
            assert!(*val > 0.0 && *val <= 1.0);
        }
    }

    #[test]
    fn scaled_rbf_reduces_to_rbf_at_beta_zero() {
        let anchors = vec![[3.0, -4.0], [10.0, 20.0], [0.0, 0.0]];
        let p = [1.5, 2.5];
        assert_eq!(
            scaled_rbf_features(p, &anchors, 11.0, 0.0),
            rbf_features(p, &anchors, 11.0)
        );
    }

    #[test]
    fn scaled_rbf_kernel_widens_with_anchor_distance() {
        // anchor 100m out, sigma 40, beta 0.1 -> effective kernel 50
        let anchors = vec![[100.0, 0.0]];
        let v = scaled_rbf_features([150.0, 0.0], &anchors, 40.0, 0.1);
        assert_abs_diff_eq!(v[0], (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn polar_transform_cases() {
        let (r, t) = polar_transform([0.0, 0.0]);
        assert_eq!((r, t), (0.0, 0.0));
        let (r, t) = polar_transform([std::f64::consts::E - 1.0, 0.0]);
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t, 0.0, epsilon = 1e-12);
        let (r, t) = polar_transform([0.0, 1.0]);
        assert_abs_diff_eq!(r, 2.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(t, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn polar_tile_cases() {
        assert_eq!(polar_tile_index([123.0, -9.0], 1000.0, 1), 0);
        // theta = 0 lands in the upper half of (-pi, pi]; small r in bin 0
        assert_eq!(polar_tile_index([1.0, 0.0], 100.0, 2), 2);
        // far beyond r_max clamps into the top radial bin
        let id = polar_tile_index([1e9, 0.0], 100.0, 2);
        assert_eq!(id, 2 + 1);
    }

    #[test]
    fn grid_cell_phi_origin_is_column_sum() {
        let basis = GridCellBasis::random(0.01, 7).unwrap();
        let state = basis.phi([0.0, 0.0]);
        let psi = basis.psi([0.0, 0.0]);
        for p in psi {
            assert_abs_diff_eq!(p.re, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.im, 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(state.squared_norm(), 3.0, epsilon = 1e-10);
    }

    #[test]
    fn grid_cell_rejects_non_unitary() {
        let mut m = [[Complex64::new(0.0, 0.0); 3]; 3];
        m[0][0] = Complex64::new(2.0, 0.0);
        m[1][1] = Complex64::new(1.0, 0.0);
        m[2][2] = Complex64::new(1.0, 0.0);
        assert!(GridCellBasis::new(0.5, m).is_err());
        assert!(GridCellBasis::random(-1.0, 3).is_err());
    }

    #[test]
    fn translation_identity_holds_exactly() {
        let mut rng = crate::rng::seeded_rng(21, "translate");
        for trial in 0..20u64 {
            let basis = GridCellBasis::random(0.3, 100 + trial).unwrap();
            let x = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let dx = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let direct = basis.phi([x[0] + dx[0], x[1] + dx[1]]);
            let moved = basis.translate(&basis.phi(x), dx);
            for (a, b) in direct.phi.iter().zip(moved.phi.iter()) {
                assert!((a - b).norm() < 1e-10);
            }
            // zero displacement is the identity; inverse restores the state
            let same = basis.translate(&basis.phi(x), [0.0, 0.0]);
            for (a, b) in same.phi.iter().zip(basis.phi(x).phi.iter()) {
                assert!((a - b).norm() < 1e-12);
            }
            let back = basis.translate(&moved, [-dx[0], -dx[1]]);
            for (a, b) in back.phi.iter().zip(basis.phi(x).phi.iter()) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn local_isometry_second_order() {
        // Re<phi(x+dx), phi(x)> = 3(1 - alpha*|dx|^2) + O(|dx|^4)
        let alpha = 2.0;
        let mut rng = crate::rng::seeded_rng(33, "isometry");
        for trial in 0..20u64 {
            let basis = GridCellBasis::random(alpha, 500 + trial).unwrap();
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mag = 1e-3 / alpha.sqrt();
            let dx = [mag * angle.cos(), mag * angle.sin()];
            let ip = basis.phi([x[0] + dx[0], x[1] + dx[1]]).inner(&basis.phi(x));
            let want = 3.0 * (1.0 - alpha * mag * mag);
            assert!((ip.re - want).abs() < 1e-6, "re {} want {}", ip.re, want);
        }
    }
}
