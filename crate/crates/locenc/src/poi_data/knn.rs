//! Exact k-nearest-neighbor queries over a dataset.
//!
//! A uniform grid bucket index (cell size = bbox diagonal / sqrt(|P|))
//! answers queries by expanding rings of cells; datasets under 256 points
//! fall back to brute force. Exactness is the contract either way, with
//! ties broken by ascending point id.

use super::{ContextNeighborhood, Dataset};
use crate::error::{Error, Result};

const BRUTE_FORCE_LIMIT: usize = 256;

struct Grid {
    cell: f64,
    cols: usize,
    rows: usize,
    origin: [f64; 2],
    buckets: Vec<Vec<u32>>,
}

impl Grid {
    fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let cx = (((p[0] - self.origin[0]) / self.cell).floor() as i64).clamp(0, self.cols as i64 - 1);
        let cy = (((p[1] - self.origin[1]) / self.cell).floor() as i64).clamp(0, self.rows as i64 - 1);
        (cx as usize, cy as usize)
    }
}

/// Reusable k-NN index over one dataset.
pub struct NeighborIndex<'a> {
    ds: &'a Dataset,
    grid: Option<Grid>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(ds: &'a Dataset) -> Self {
        let n = ds.len();
        let diag = ds.bbox().diagonal();
        let grid = if n >= BRUTE_FORCE_LIMIT && diag > 0.0 {
            let cell = diag / (n as f64).sqrt();
            let cols = ((ds.bbox().width() / cell).ceil() as usize).max(1);
            let rows = ((ds.bbox().height() / cell).ceil() as usize).max(1);
            let mut grid = Grid {
                cell,
                cols,
                rows,
                origin: [ds.bbox().min_x, ds.bbox().min_y],
                buckets: vec![Vec::new(); cols * rows],
            };
            for (i, p) in ds.points().iter().enumerate() {
                let (cx, cy) = grid.cell_of(p.loc);
                grid.buckets[cy * cols + cx].push(i as u32);
            }
            Some(grid)
        } else {
            None
        };
        NeighborIndex { ds, grid }
    }

    /// The `n` nearest neighbors of `center_id`, excluding the center.
    pub fn query(&self, center_id: u64, n: usize) -> Result<ContextNeighborhood> {
        if n >= self.ds.len() {
            return Err(Error::Invalid(format!(
                "cannot take {n} neighbors from a dataset of {} points",
                self.ds.len()
            )));
        }
        let center_idx = self
            .ds
            .index_of(center_id)
            .ok_or_else(|| Error::Invalid(format!("unknown point id {center_id}")))?;
        let center = self.ds.points()[center_idx].loc;

        // candidates as (squared distance, id, index)
        let mut candidates: Vec<(f64, u64, usize)> = match &self.grid {
            None => self.all_candidates(center, center_idx),
            Some(grid) => self.ring_candidates(grid, center, center_idx, n),
        };
        candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(n);

        let mut neighbor_ids = Vec::with_capacity(n);
        let mut displacements = Vec::with_capacity(n);
        for (_, id, idx) in candidates {
            let nloc = self.ds.points()[idx].loc;
            neighbor_ids.push(id);
            displacements.push([center[0] - nloc[0], center[1] - nloc[1]]);
        }
        Ok(ContextNeighborhood {
            center_id,
            neighbor_ids,
            displacements,
        })
    }

    fn all_candidates(&self, center: [f64; 2], center_idx: usize) -> Vec<(f64, u64, usize)> {
        self.ds
            .points()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != center_idx)
            .map(|(i, p)| (sq_dist(center, p.loc), p.id, i))
            .collect()
    }

    /// Expanding Chebyshev rings of cells; a point in a cell at ring k+1 is
    /// at least k·cell away, so the search stops once the current n-th best
    /// distance is within that bound.
    fn ring_candidates(
        &self,
        grid: &Grid,
        center: [f64; 2],
        center_idx: usize,
        n: usize,
    ) -> Vec<(f64, u64, usize)> {
        let (ccx, ccy) = grid.cell_of(center);
        let max_ring = grid.cols.max(grid.rows);
        let mut candidates: Vec<(f64, u64, usize)> = Vec::new();
        for ring in 0..=max_ring {
            let mut visit = |cx: i64, cy: i64| {
                if cx < 0 || cy < 0 || cx >= grid.cols as i64 || cy >= grid.rows as i64 {
                    return;
                }
                for &pi in &grid.buckets[cy as usize * grid.cols + cx as usize] {
                    let pi = pi as usize;
                    if pi == center_idx {
                        continue;
                    }
                    let p = &self.ds.points()[pi];
                    candidates.push((sq_dist(center, p.loc), p.id, pi));
                }
            };
            let (cx, cy) = (ccx as i64, ccy as i64);
            let k = ring as i64;
            if k == 0 {
                visit(cx, cy);
            } else {
                for dx in -k..=k {
                    visit(cx + dx, cy - k);
                    visit(cx + dx, cy + k);
                }
                for dy in (-k + 1)..=(k - 1) {
                    visit(cx - k, cy + dy);
                    visit(cx + k, cy + dy);
                }
            }
            if candidates.len() >= n {
                let nth = nth_smallest(&candidates, n);
                let bound = ring as f64 * grid.cell;
                if nth <= bound * bound {
                    break;
                }
            }
        }
        candidates
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn nth_smallest(candidates: &[(f64, u64, usize)], n: usize) -> f64 {
    let mut d: Vec<f64> = candidates.iter().map(|c| c.0).collect();
    let idx = n - 1;
    d.select_nth_unstable_by(idx, f64::total_cmp);
    d[idx]
}

/// One-shot context query; builds a throwaway index.
pub fn knn_context(ds: &Dataset, center_id: u64, n: usize) -> Result<ContextNeighborhood> {
    NeighborIndex::new(ds).query(center_id, n)
}
