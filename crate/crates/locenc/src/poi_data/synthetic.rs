//! Synthetic point-process generators: homogeneous Poisson, Matérn cluster,
//! and hard-core (Poisson with greedy sequential thinning). A mixture of
//! components yields one dataset whose types can combine clustered and even
//! patterns.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Dataset, PointFeature, TypeVocabulary};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonSpec {
    /// Points per square meter.
    pub intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaternClusterSpec {
    /// Parents per square meter.
    pub parent_intensity: f64,
    /// Offspring disc radius in meters.
    pub radius: f64,
    /// Mean offspring per parent (Poisson).
    pub mean_offspring: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardcoreSpec {
    /// Proposal intensity per square meter before thinning.
    pub intensity: f64,
    /// Minimum pairwise distance in meters.
    pub min_distance: f64,
}

/// One named point process.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointProcess {
    Poisson(PoissonSpec),
    MaternCluster(MaternClusterSpec),
    Hardcore(HardcoreSpec),
}

/// A process plus the POI type name its points carry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessComponent {
    pub process: PointProcess,
    pub type_name: String,
}

impl PointProcess {
    fn validate(&self) -> Result<()> {
        match self {
            PointProcess::Poisson(s) => {
                if s.intensity <= 0.0 {
                    return Err(Error::Invalid("poisson intensity must be positive".into()));
                }
            }
            PointProcess::MaternCluster(s) => {
                if s.parent_intensity <= 0.0 {
                    return Err(Error::Invalid("matern parent intensity must be positive".into()));
                }
                if s.radius <= 0.0 {
                    return Err(Error::Invalid("matern radius must be positive".into()));
                }
                if s.mean_offspring <= 0.0 {
                    return Err(Error::Invalid("matern mean offspring must be positive".into()));
                }
            }
            PointProcess::Hardcore(s) => {
                if s.intensity <= 0.0 {
                    return Err(Error::Invalid("hardcore intensity must be positive".into()));
                }
                if s.min_distance <= 0.0 {
                    return Err(Error::Invalid("hardcore minimum distance must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

fn poisson_count(rng: &mut ChaCha12Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let sample: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
    sample as usize
}

fn uniform_in(rng: &mut ChaCha12Rng, bbox: &BoundingBox) -> [f64; 2] {
    [
        rng.random_range(bbox.min_x..=bbox.max_x),
        rng.random_range(bbox.min_y..=bbox.max_y),
    ]
}

fn sample_poisson(rng: &mut ChaCha12Rng, bbox: &BoundingBox, spec: &PoissonSpec) -> Vec<[f64; 2]> {
    let count = poisson_count(rng, spec.intensity * bbox.area());
    (0..count).map(|_| uniform_in(rng, bbox)).collect()
}

/// Returns (parents, offspring); only offspring become dataset points.
/// Offspring falling outside the box are discarded.
fn sample_matern(
    rng: &mut ChaCha12Rng,
    bbox: &BoundingBox,
    spec: &MaternClusterSpec,
) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let parent_count = poisson_count(rng, spec.parent_intensity * bbox.area());
    let parents: Vec<[f64; 2]> = (0..parent_count).map(|_| uniform_in(rng, bbox)).collect();
    let mut offspring = Vec::new();
    for parent in &parents {
        let k = poisson_count(rng, spec.mean_offspring);
        for _ in 0..k {
            let r = spec.radius * rng.random::<f64>().sqrt();
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let p = [parent[0] + r * angle.cos(), parent[1] + r * angle.sin()];
            if bbox.contains(p) {
                offspring.push(p);
            }
        }
    }
    (parents, offspring)
}

/// Poisson proposals thinned greedily in generation order: a proposal is
/// kept only if it is at least `min_distance` from every kept point.
fn sample_hardcore(rng: &mut ChaCha12Rng, bbox: &BoundingBox, spec: &HardcoreSpec) -> Vec<[f64; 2]> {
    let proposals = sample_poisson(
        rng,
        bbox,
        &PoissonSpec {
            intensity: spec.intensity,
        },
    );
    let h2 = spec.min_distance * spec.min_distance;
    let mut kept: Vec<[f64; 2]> = Vec::new();
    'next: for p in proposals {
        for q in &kept {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            if dx * dx + dy * dy < h2 {
                continue 'next;
            }
        }
        kept.push(p);
    }
    kept
}

/// Generate a dataset from a mixture of point processes inside `bbox`.
/// Deterministic for a fixed seed; point ids count up in generation order.
pub fn generate_synthetic(
    components: &[ProcessComponent],
    bbox: BoundingBox,
    seed: u64,
) -> Result<Dataset> {
    if components.is_empty() {
        return Err(Error::Invalid("synthetic spec needs at least one component".into()));
    }
    if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return Err(Error::Invalid("synthetic bbox must have positive extent".into()));
    }
    let mut vocab = TypeVocabulary::new();
    let mut points = Vec::new();
    let mut next_id = 0u64;
    for (i, comp) in components.iter().enumerate() {
        comp.process.validate()?;
        let type_id = vocab.intern(&comp.type_name);
        let mut rng = seeded_rng(seed, &format!("synthetic.{i}"));
        let locs = match &comp.process {
            PointProcess::Poisson(s) => sample_poisson(&mut rng, &bbox, s),
            PointProcess::MaternCluster(s) => sample_matern(&mut rng, &bbox, s).1,
            PointProcess::Hardcore(s) => sample_hardcore(&mut rng, &bbox, s),
        };
        for loc in locs {
            points.push(PointFeature {
                id: next_id,
                loc,
                type_ids: vec![type_id],
            });
            next_id += 1;
        }
    }
    if points.is_empty() {
        return Err(Error::Invalid(
            "synthetic generation produced no points; raise the intensities".into(),
        ));
    }
    Dataset::with_bbox(points, vocab, bbox)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn km_box() -> BoundingBox {
        BoundingBox {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 1000.0,
            max_y: 1000.0,
        }
    }

    #[test]
    fn poisson_count_in_expected_window() {
        // mean 100; Poisson tails put 5 seeded draws inside [60, 140]
        let comp = ProcessComponent {
            process: PointProcess::Poisson(PoissonSpec { intensity: 1e-4 }),
            type_name: "a".into(),
        };
        for seed in 0..5 {
            let ds = generate_synthetic(&[comp.clone()], km_box(), seed).unwrap();
            assert!(
                (60..=140).contains(&ds.len()),
                "seed {seed} gave {} points",
                ds.len()
            );
        }
    }

    #[test]
    fn hardcore_respects_minimum_distance() {
        let comp = ProcessComponent {
            process: PointProcess::Hardcore(HardcoreSpec {
                intensity: 5e-4,
                min_distance: 60.0,
            }),
            type_name: "h".into(),
        };
        let ds = generate_synthetic(&[comp], km_box(), 3).unwrap();
        assert!(ds.len() > 10);
        for (i, a) in ds.points().iter().enumerate() {
            for b in &ds.points()[i + 1..] {
                let dx = a.loc[0] - b.loc[0];
                let dy = a.loc[1] - b.loc[1];
                assert!((dx * dx + dy * dy).sqrt() >= 60.0);
            }
        }
    }

    #[test]
    fn matern_offspring_stay_within_radius_of_a_parent() {
        let mut rng = seeded_rng(5, "matern-test");
        let spec = MaternClusterSpec {
            parent_intensity: 2e-5,
            radius: 30.0,
            mean_offspring: 20.0,
        };
        let (parents, offspring) = sample_matern(&mut rng, &km_box(), &spec);
        assert!(!offspring.is_empty());
        for o in &offspring {
            let within = parents.iter().any(|p| {
                let dx = o[0] - p[0];
                let dy = o[1] - p[1];
                (dx * dx + dy * dy).sqrt() <= 30.0 + 1e-9
            });
            assert!(within);
        }
    }

    #[test]
    fn mixture_builds_one_vocabulary_and_is_deterministic() {
        let comps = vec![
            ProcessComponent {
                process: PointProcess::Poisson(PoissonSpec { intensity: 5e-5 }),
                type_name: "even".into(),
            },
            ProcessComponent {
                process: PointProcess::MaternCluster(MaternClusterSpec {
                    parent_intensity: 1e-5,
                    radius: 25.0,
                    mean_offspring: 10.0,
                }),
                type_name: "clustered".into(),
            },
        ];
        let a = generate_synthetic(&comps, km_box(), 11).unwrap();
        let b = generate_synthetic(&comps, km_box(), 11).unwrap();
        assert_eq!(a.vocab().len(), 2);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points().iter().zip(b.points()) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn non_positive_parameters_error() {
        let bad = [
            PointProcess::Poisson(PoissonSpec { intensity: 0.0 }),
            PointProcess::MaternCluster(MaternClusterSpec {
                parent_intensity: 1e-5,
                radius: -1.0,
                mean_offspring: 5.0,
            }),
            PointProcess::Hardcore(HardcoreSpec {
                intensity: 1e-4,
                min_distance: 0.0,
            }),
        ];
        for process in bad {
            let comp = ProcessComponent {
                process,
                type_name: "x".into(),
            };
            assert!(generate_synthetic(&[comp], km_box(), 0).is_err());
        }
    }
}
