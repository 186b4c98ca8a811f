//! Point-feature datasets: ingestion, synthetic generation, splitting, and
//! exact k-nearest-neighbor context queries.

mod csv_io;
mod knn;
mod synthetic;

pub use csv_io::{load_poi_csv, write_poi_csv};
pub use knn::{knn_context, NeighborIndex};
pub use synthetic::{
    generate_synthetic, HardcoreSpec, MaternClusterSpec, PointProcess, PoissonSpec,
    ProcessComponent,
};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Axis-aligned bounds in planar meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        (self.width() * self.width() + self.height() * self.height()).sqrt()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min_x && p[0] <= self.max_x && p[1] >= self.min_y && p[1] <= self.max_y
    }

    /// Tight bounds of a point list; `None` when empty.
    pub fn tight(points: impl Iterator<Item = [f64; 2]>) -> Option<BoundingBox> {
        let mut it = points;
        let first = it.next()?;
        let mut b = BoundingBox {
            min_x: first[0],
            min_y: first[1],
            max_x: first[0],
            max_y: first[1],
        };
        for p in it {
            b.min_x = b.min_x.min(p[0]);
            b.min_y = b.min_y.min(p[1]);
            b.max_x = b.max_x.max(p[0]);
            b.max_y = b.max_y.max(p[1]);
        }
        Some(b)
    }
}

/// One point: id, planar location in meters, and its non-empty set of type
/// ids (insertion-ordered, duplicate-free).
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeature {
    pub id: u64,
    pub loc: [f64; 2],
    pub type_ids: Vec<usize>,
}

impl PointFeature {
    pub fn validate(&self) -> Result<()> {
        if self.type_ids.is_empty() {
            return Err(Error::Invalid(format!("point {} has no types", self.id)));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.type_ids {
            if !seen.insert(*t) {
                return Err(Error::Invalid(format!("point {} repeats type id {t}", self.id)));
            }
        }
        if !self.loc[0].is_finite() || !self.loc[1].is_finite() {
            return Err(Error::Invalid(format!("point {} has non-finite location", self.id)));
        }
        Ok(())
    }
}

/// Bijective mapping between type names and dense integer ids, ordered by
/// first occurrence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TypeVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl TypeVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: &[&str]) -> Self {
        let mut v = Self::new();
        for n in names {
            v.intern(n);
        }
        v
    }

    /// Id of `name`, inserting it at the end on first sight.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Immutable point set with its type vocabulary and study-area bounds.
#[derive(Debug, Clone)]
pub struct Dataset {
    points: Vec<PointFeature>,
    vocab: TypeVocabulary,
    bbox: BoundingBox,
    by_id: HashMap<u64, usize>,
}

impl Dataset {
    /// Build with explicit bounds; every point must fall inside them.
    pub fn with_bbox(points: Vec<PointFeature>, vocab: TypeVocabulary, bbox: BoundingBox) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            p.validate()?;
            if by_id.insert(p.id, i).is_some() {
                return Err(Error::Invalid(format!("duplicate point id {}", p.id)));
            }
            for t in &p.type_ids {
                if *t >= vocab.len() {
                    return Err(Error::Invalid(format!(
                        "point {} references type id {t} outside vocabulary of {}",
                        p.id,
                        vocab.len()
                    )));
                }
            }
            if !bbox.contains(p.loc) {
                return Err(Error::Invalid(format!(
                    "point {} at {:?} lies outside bounds {:?}",
                    p.id, p.loc, bbox
                )));
            }
        }
        Ok(Dataset {
            points,
            vocab,
            bbox,
            by_id,
        })
    }

    /// Build with tight axis-aligned bounds computed from the points.
    pub fn from_points(points: Vec<PointFeature>, vocab: TypeVocabulary) -> Result<Self> {
        let bbox = BoundingBox::tight(points.iter().map(|p| p.loc))
            .ok_or_else(|| Error::Invalid("dataset must contain at least one point".into()))?;
        Self::with_bbox(points, vocab, bbox)
    }

    pub fn points(&self) -> &[PointFeature] {
        &self.points
    }

    pub fn vocab(&self) -> &TypeVocabulary {
        &self.vocab
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn by_id(&self, id: u64) -> Option<&PointFeature> {
        self.index_of(id).map(|i| &self.points[i])
    }
}

/// Disjoint train/val/test id lists covering the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Uniform shuffled split. Validation and test sizes are floor(ratio·N);
/// the remainder goes to train. Deterministic for a fixed seed.
pub fn split_dataset(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let (r_tr, r_va, r_te) = ratios;
    if r_tr <= 0.0 || r_va <= 0.0 || r_te <= 0.0 {
        return Err(Error::Invalid("split ratios must be positive".into()));
    }
    if ((r_tr + r_va + r_te) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios must sum to 1, got {}",
            r_tr + r_va + r_te
        )));
    }
    let n = ds.len();
    if n < 3 {
        return Err(Error::Invalid(format!("cannot split a dataset of {n} points")));
    }
    let n_va = (r_va * n as f64).floor() as usize;
    let n_te = (r_te * n as f64).floor() as usize;
    let n_tr = n - n_va - n_te;

    let mut ids: Vec<u64> = ds.points().iter().map(|p| p.id).collect();
    ids.sort_unstable();
    let mut rng = seeded_rng(seed, "split");
    ids.shuffle(&mut rng);

    Ok(SplitAssignment {
        train: ids[..n_tr].to_vec(),
        val: ids[n_tr..n_tr + n_va].to_vec(),
        test: ids[n_tr + n_va..].to_vec(),
    })
}

/// Exact k-NN context of one point: `n` nearest neighbors by Euclidean
/// distance (ascending, ties by ascending id) and the displacements
/// center − neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextNeighborhood {
    pub center_id: u64,
    pub neighbor_ids: Vec<u64>,
    pub displacements: Vec<[f64; 2]>,
}

#[cfg(test)]
pub(crate) fn toy_dataset(locs: &[[f64; 2]], types: &[&[usize]], num_types: usize) -> Dataset {
    let names: Vec<String> = (0..num_types).map(|i| format!("t{i}")).collect();
    let vocab = TypeVocabulary::from_names(&names.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let points = locs
        .iter()
        .zip(types)
        .enumerate()
        .map(|(i, (loc, ts))| PointFeature {
            id: i as u64,
            loc: *loc,
            type_ids: ts.to_vec(),
        })
        .collect();
    Dataset::from_points(points, vocab).unwrap()
}
