//! Ranking evaluation: cosine rank of the true feature embedding against N
//! sampled negatives, NLL / MRR / HIT@k, and repeated-run statistics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural_core::ParameterStore;
use crate::poi_data::Dataset;
use crate::rng::seeded_rng;
use crate::training::{full_softmax_loss, sample_negative_indices, ContextSet, TaskModel};

/// Evaluation knobs: N negatives, HIT cut-off, repeats, base seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalSettings {
    pub negatives: usize,
    pub hit_k: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            negatives: 100,
            hit_k: 5,
            repeats: 10,
            seed: 0,
        }
    }
}

/// NLL / MRR / HIT@k as (mean, std) over repeated runs. The random baseline
/// has no model, hence no NLL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingReport {
    pub nll: Option<(f64, f64)>,
    pub mrr: (f64, f64),
    pub hit_at_k: (f64, f64),
    pub repeats: usize,
    pub negatives: usize,
    pub k: usize,
    /// Per-repeat (nll, mrr, hit) rows for CSV export.
    pub per_repeat: Vec<(Option<f64>, f64, f64)>,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine undefined for a zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// 1-based rank of the true embedding among true + negatives, sorted by
/// descending cosine similarity to the prediction. Ties rank the true
/// candidate last among equals, so a constant model cannot beat chance.
pub fn rank_candidates(predicted: &[f64], true_emb: &[f64], negatives: &[&[f64]]) -> Result<usize> {
    let true_score = cosine(predicted, true_emb)?;
    let mut rank = 1;
    for neg in negatives {
        if cosine(predicted, neg)? >= true_score {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("mrr of an empty rank list".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks within the top k.
pub fn hit_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("hit@k of an empty rank list".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluate a trained model on `test_ids`: negatives are resampled per
/// repeat with seeds `seed + r`, rank statistics are aggregated over
/// repeats, and the mean full-softmax NLL over the test points is attached.
pub fn evaluate_model(
    model: &mut TaskModel,
    store: &ParameterStore,
    ds: &Dataset,
    test_ids: &[u64],
    contexts: Option<&ContextSet>,
    settings: &EvalSettings,
) -> Result<RankingReport> {
    if settings.negatives >= ds.len() {
        return Err(Error::Invalid(format!(
            "{} negatives but only {} points",
            settings.negatives,
            ds.len()
        )));
    }
    if settings.repeats < 1 {
        return Err(Error::Invalid("evaluation needs at least one repeat".into()));
    }
    let indices: Vec<usize> = test_ids
        .iter()
        .map(|id| {
            ds.index_of(*id)
                .ok_or_else(|| Error::Invalid(format!("unknown test id {id}")))
        })
        .collect::<Result<_>>()?;
    if indices.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }

    model.set_train_mode(false);
    // candidate feature embeddings of every dataset point
    let sets: Vec<&[usize]> = ds.points().iter().map(|p| &p.type_ids[..]).collect();
    let candidates = model.feat.lookup_batch(store, &sets)?;
    let preds = model.predict(store, ds, &indices, contexts)?;
    let nll = {
        let mut total = 0.0;
        for (b, &idx) in indices.iter().enumerate() {
            total += full_softmax_loss(preds.row(b), &candidates, idx)?;
        }
        total / indices.len() as f64
    };

    let mut per_repeat = Vec::with_capacity(settings.repeats);
    let mut mrrs = Vec::with_capacity(settings.repeats);
    let mut hits = Vec::with_capacity(settings.repeats);
    for r in 0..settings.repeats {
        let mut rng = seeded_rng(settings.seed.wrapping_add(r as u64), "eval.negatives");
        let mut ranks = Vec::with_capacity(indices.len());
        for (b, &idx) in indices.iter().enumerate() {
            let negs = sample_negative_indices(ds.len(), idx, settings.negatives, &mut rng)?;
            let neg_rows: Vec<&[f64]> = negs.iter().map(|&i| candidates.row(i)).collect();
            ranks.push(rank_candidates(preds.row(b), candidates.row(idx), &neg_rows)?);
        }
        let m = mrr(&ranks)?;
        let h = hit_at_k(&ranks, settings.hit_k)?;
        per_repeat.push((Some(nll), m, h));
        mrrs.push(m);
        hits.push(h);
    }

    Ok(RankingReport {
        nll: Some((nll, 0.0)),
        mrr: mean_std(&mrrs),
        hit_at_k: mean_std(&hits),
        repeats: settings.repeats,
        negatives: settings.negatives,
        k: settings.hit_k,
        per_repeat,
    })
}

/// Lower-bound baseline: the rank of the true candidate is the position of
/// one marked item in a seeded shuffle of N+1 items.
pub fn random_baseline_report(num_test_points: usize, settings: &EvalSettings) -> Result<RankingReport> {
    if num_test_points == 0 {
        return Err(Error::Invalid("empty test set".into()));
    }
    if settings.repeats < 1 {
        return Err(Error::Invalid("evaluation needs at least one repeat".into()));
    }
    let mut per_repeat = Vec::with_capacity(settings.repeats);
    let mut mrrs = Vec::with_capacity(settings.repeats);
    let mut hits = Vec::with_capacity(settings.repeats);
    for r in 0..settings.repeats {
        let mut rng = seeded_rng(settings.seed.wrapping_add(r as u64), "eval.random-baseline");
        let mut ranks = Vec::with_capacity(num_test_points);
        let mut order: Vec<usize> = (0..=settings.negatives).collect();
        for _ in 0..num_test_points {
            order.shuffle(&mut rng);
            let rank = order.iter().position(|&c| c == 0).expect("item 0 present") + 1;
            ranks.push(rank);
        }
        let m = mrr(&ranks)?;
        let h = hit_at_k(&ranks, settings.hit_k)?;
        per_repeat.push((None, m, h));
        mrrs.push(m);
        hits.push(h);
    }
    Ok(RankingReport {
        nll: None,
        mrr: mean_std(&mrrs),
        hit_at_k: mean_std(&hits),
        repeats: settings.repeats,
        negatives: settings.negatives,
        k: settings.hit_k,
        per_repeat,
    })
}

/// Expected MRR of a uniform-random ranker over n+1 candidates:
/// H_{n+1}/(n+1).
pub fn expected_random_mrr(negatives: usize) -> f64 {
    let total = negatives + 1;
    (1..=total).map(|k| 1.0 / k as f64).sum::<f64>() / total as f64
}

/// Expected HIT@k of a uniform-random ranker: k/(n+1).
pub fn expected_random_hit(negatives: usize, k: usize) -> f64 {
    k as f64 / (negatives + 1) as f64
}

/// Key-value text block of a ranking report.
pub fn report_text(model_label: &str, report: &RankingReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("model = {model_label}\n"));
    s.push_str(&format!("negatives = {}\n", report.negatives));
    s.push_str(&format!("hit_k = {}\n", report.k));
    s.push_str(&format!("repeats = {}\n", report.repeats));
    match report.nll {
        Some((mean, std)) => {
            s.push_str(&format!("nll_mean = {mean}\n"));
            s.push_str(&format!("nll_std = {std}\n"));
        }
        None => {
            s.push_str("nll_mean = -\n");
            s.push_str("nll_std = -\n");
        }
    }
    s.push_str(&format!("mrr_mean = {}\n", report.mrr.0));
    s.push_str(&format!("mrr_std = {}\n", report.mrr.1));
    s.push_str(&format!("hit_at_k_mean = {}\n", report.hit_at_k.0));
    s.push_str(&format!("hit_at_k_std = {}\n", report.hit_at_k.1));
    s
}

/// One CSV row per repeat, for cross-model tables.
pub fn report_csv(model_label: &str, report: &RankingReport) -> String {
    let mut s = String::from("model,repeat,negatives,hit_k,nll,mrr,hit_at_k\n");
    for (r, (nll, m, h)) in report.per_repeat.iter().enumerate() {
        let nll_field = match nll {
            Some(v) => format!("{v}"),
            None => "-".into(),
        };
        s.push_str(&format!(
            "{model_label},{r},{},{},{nll_field},{m},{h}\n",
            report.negatives, report.k
        ));
    }
    s
}
