//! Average-linkage agglomerative clustering under cosine distance.
//!
//! Rows are unit-normalized up front, which makes the average pairwise
//! cosine distance between two clusters a function of their vector sums:
//! d(A,B) = 1 - <S_A, S_B>/(|A||B|). Each active cluster caches its current
//! nearest neighbor; merges pick the globally smallest (distance, i, j)
//! with ties resolved toward the lowest slot pair, matching a brute-force
//! greedy agglomeration exactly.

use crate::error::{Error, Result};
use crate::neural_core::Tensor;

#[derive(Clone)]
struct Cluster {
    sum: Vec<f64>,
    count: usize,
    alive: bool,
    nn_dist: f64,
    nn_slot: usize,
}

fn cluster_distance(a: &Cluster, b: &Cluster) -> f64 {
    let dot: f64 = a.sum.iter().zip(&b.sum).map(|(x, y)| x * y).sum();
    1.0 - dot / (a.count as f64 * b.count as f64)
}

/// Lexicographic order on (distance, lower slot, higher slot).
fn pair_key(d: f64, i: usize, j: usize) -> (f64, usize, usize) {
    if i < j {
        (d, i, j)
    } else {
        (d, j, i)
    }
}

fn key_less(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => (a.1, a.2) < (b.1, b.2),
    }
}

fn rebuild_nn(clusters: &[Cluster], i: usize) -> (f64, usize) {
    let mut best: Option<(f64, usize, usize)> = None;
    for (j, c) in clusters.iter().enumerate() {
        if j == i || !c.alive {
            continue;
        }
        let key = pair_key(cluster_distance(&clusters[i], c), i, j);
        if best.is_none() || key_less(key, best.unwrap()) {
            best = Some(key);
        }
    }
    let (d, a, b) = best.expect("at least two clusters alive");
    (d, if a == i { b } else { a })
}

/// Cluster the rows of `embeddings` [N, D] into `k` groups; labels are
/// assigned by ascending surviving-slot order, so results are
/// deterministic.
pub fn cluster_labels(embeddings: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (n, dim) = embeddings.dims2();
    if n == 0 {
        return Err(Error::Invalid("cannot cluster zero points".into()));
    }
    if k < 1 {
        return Err(Error::Invalid("need at least one cluster".into()));
    }
    let k = k.min(n);

    let mut clusters: Vec<Cluster> = (0..n)
        .map(|r| {
            let row = embeddings.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sum = if norm >= 1e-12 {
                row.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; dim]
            };
            Cluster {
                sum,
                count: 1,
                alive: true,
                nn_dist: f64::INFINITY,
                nn_slot: usize::MAX,
            }
        })
        .collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();

    if k < n {
        for i in 0..n {
            let (d, j) = rebuild_nn(&clusters, i);
            clusters[i].nn_dist = d;
            clusters[i].nn_slot = j;
        }
    }

    let mut alive = n;
    while alive > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, c) in clusters.iter().enumerate() {
            if !c.alive {
                continue;
            }
            let key = pair_key(c.nn_dist, i, c.nn_slot);
            if best.is_none() || key_less(key, best.unwrap()) {
                best = Some(key);
            }
        }
        let (_, i, j) = best.expect("alive > k >= 1 guarantees a pair");

        let (sum_j, count_j) = {
            let cj = &clusters[j];
            (cj.sum.clone(), cj.count)
        };
        clusters[j].alive = false;
        for (s, v) in clusters[i].sum.iter_mut().zip(&sum_j) {
            *s += v;
        }
        clusters[i].count += count_j;
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        alive -= 1;
        if alive == k {
            break;
        }

        for m in 0..n {
            if m == i || !clusters[m].alive {
                continue;
            }
            let d_new = cluster_distance(&clusters[m], &clusters[i]);
            let points_at_merged = clusters[m].nn_slot == i || clusters[m].nn_slot == j;
            if points_at_merged {
                if clusters[m].nn_slot == i && d_new <= clusters[m].nn_dist {
                    clusters[m].nn_dist = d_new;
                } else {
                    let (d, s) = rebuild_nn(&clusters, m);
                    clusters[m].nn_dist = d;
                    clusters[m].nn_slot = s;
                }
            } else if key_less(
                pair_key(d_new, m, i),
                pair_key(clusters[m].nn_dist, m, clusters[m].nn_slot),
            ) {
                clusters[m].nn_dist = d_new;
                clusters[m].nn_slot = i;
            }
        }
        let (d, s) = rebuild_nn(&clusters, i);
        clusters[i].nn_dist = d;
        clusters[i].nn_slot = s;
    }

    let mut labels = vec![0usize; n];
    let mut next = 0;
    for (slot, c) in clusters.iter().enumerate() {
        if c.alive {
            for &p in &members[slot] {
                labels[p] = next;
            }
            next += 1;
        }
    }
    Ok(labels)
}
