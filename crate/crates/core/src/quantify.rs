//! Meta-model quantifying: rank candidate meta-models by a fused score that
//! balances confidence on held-out labeled data against feature diversity
//! relative to the other candidates, then keep the top n.

use crate::error::{Error, Result};
use crate::maml::{adapt_to_task, MetaModel};
use crate::pool::{sample_episode, DataPool, EpisodeSpec, Sample};
use crate::rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    /// Balance between confidence (gamma) and diversity (1 - gamma).
    pub gamma: f32,
    /// How many models to keep.
    pub select: usize,
    /// Fraction of M carved out (per class) as the held-out quantify pool.
    pub holdout_fraction: f64,
    /// Episode protocol for the quantify tasks, sampled from the carved
    /// pool; the validation halves are the scored samples.
    pub episode: EpisodeSpec,
    /// Adaptation rate for the per-task classifiers.
    pub inner_lr: f32,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            gamma: 0.5,
            select: 3,
            holdout_fraction: 0.1,
            episode: EpisodeSpec {
                tasks: 5,
                classes_per_task: 3,
                images_per_class: 4,
                update_per_class: 2,
            },
            inner_lr: 0.01,
        }
    }
}

impl FuseConfig {
    pub fn validate(&self, num_models: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.select == 0 || self.select >= num_models {
            return Err(Error::Config(format!(
                "selection needs 1 <= n < m, got n={} with m={}",
                self.select, num_models
            )));
        }
        if !(0.0 < self.holdout_fraction && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout fraction {} outside (0, 1)",
                self.holdout_fraction
            )));
        }
        self.episode.validate()
    }
}

/// What one model produced for one scored sample occurrence.
#[derive(Debug, Clone)]
pub struct ModelEntry {
    /// Softmax probability at the sample's trusted label.
    pub gt_prob: f32,
    pub feature: Vec<f32>,
}

/// Per-sample scoring row with exactly one entry per candidate model.
#[derive(Debug, Clone)]
pub struct QuantifyRecord {
    pub sample_id: String,
    pub entries: Vec<ModelEntry>,
}

/// Fused confidence/diversity score of one model on one sample:
/// gamma * S_P + (1 - gamma) * sum over the other models of
/// (1 - cosine(own feature, their feature)).
pub fn fuse_score(
    gt_prob: f32,
    own_feature: &[f32],
    other_features: &[&[f32]],
    gamma: f32,
) -> Result<f32> {
    let diversity: f64 = other_features
        .iter()
        .map(|other| cosine(own_feature, other).map(|c| 1.0 - c))
        .sum::<Result<f64>>()?;
    Ok(gamma * gt_prob + (1.0 - gamma) * diversity as f32)
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension(
            "cosine",
            format!("{} vs {} elements", a.len(), b.len()),
        ));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += f64::from(x) * f64::from(y);
        na += f64::from(x) * f64::from(x);
        nb += f64::from(y) * f64::from(y);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degeneracy(
            "cosine of a zero-norm feature vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// One model's accumulated scores plus its selection verdict.
#[derive(Debug, Clone)]
pub struct ModelScore {
    pub model_index: usize,
    pub round: usize,
    pub sum_gt_prob: f32,
    pub sum_diversity: f32,
    pub sum_fused: f32,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct QuantifyOutcome {
    /// Scores in model order (not rank order).
    pub scores: Vec<ModelScore>,
    /// Selected model indices, best first.
    pub selected: Vec<usize>,
}

/// Accumulate fused scores from records and keep the top n models.
/// Ties break toward the model from the earlier round.
pub fn select_from_records(
    records: &[QuantifyRecord],
    rounds: &[usize],
    gamma: f32,
    n: usize,
) -> Result<QuantifyOutcome> {
    let m = rounds.len();
    if n == 0 || n >= m {
        return Err(Error::Config(format!(
            "selection needs 1 <= n < m, got n={} with m={}",
            n, m
        )));
    }
    let mut sum_gt = vec![0.0f32; m];
    let mut sum_div = vec![0.0f32; m];
    let mut sum_fused = vec![0.0f32; m];
    for record in records {
        if record.entries.len() != m {
            return Err(Error::Contract(format!(
                "record for {} has {} entries for {} models",
                record.sample_id,
                record.entries.len(),
                m
            )));
        }
        for (t, entry) in record.entries.iter().enumerate() {
            let others: Vec<&[f32]> = record
                .entries
                .iter()
                .enumerate()
                .filter(|&(u, _)| u != t)
                .map(|(_, e)| e.feature.as_slice())
                .collect();
            let fused = fuse_score(entry.gt_prob, &entry.feature, &others, gamma)?;
            sum_gt[t] += entry.gt_prob;
            sum_div[t] += fused - gamma * entry.gt_prob;
            sum_fused[t] += fused;
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        sum_fused[b]
            .partial_cmp(&sum_fused[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(rounds[a].cmp(&rounds[b]))
    });
    let selected: Vec<usize> = order[..n].to_vec();
    let scores = (0..m)
        .map(|t| ModelScore {
            model_index: t,
            round: rounds[t],
            sum_gt_prob: sum_gt[t],
            sum_diversity: sum_div[t],
            sum_fused: sum_fused[t],
            selected: selected.contains(&t),
        })
        .collect();
    Ok(QuantifyOutcome { scores, selected })
}

/// Carve the held-out quantify pool out of M, stratified per class.
fn carve_holdout(pool: &DataPool, fraction: f64, rng: &mut impl rand::Rng) -> Result<DataPool> {
    let by_class = pool.m_by_class();
    if by_class.is_empty() {
        return Err(Error::capacity("quantify holdout needs a non-empty meta split"));
    }
    let mut chosen: Vec<Sample> = Vec::new();
    for (_, members) in by_class {
        let take = ((members.len() as f64 * fraction).round() as usize).max(1);
        let mut shuffled = members;
        shuffled.shuffle(rng);
        for &idx in shuffled.iter().take(take) {
            chosen.push(pool.samples[idx].clone());
        }
    }
    DataPool::new(chosen, pool.num_classes)
}

/// Score the candidate models over the held-out pool and keep the top n.
pub fn quantify(
    models: &[MetaModel],
    pool: &DataPool,
    cfg: &FuseConfig,
    root_seed: u64,
) -> Result<QuantifyOutcome> {
    if models.len() < 2 {
        return Err(Error::Config(format!(
            "quantifying needs at least two candidate models, got {}",
            models.len()
        )));
    }
    cfg.validate(models.len())?;
    let records = collect_quantify_records(models, pool, cfg, root_seed)?;
    let rounds: Vec<usize> = models.iter().map(|m| m.round).collect();
    select_from_records(&records, &rounds, cfg.gamma, cfg.select)
}

/// Build per-sample records: sample quantify tasks from the held-out pool,
/// adapt every model's classifier on each task's update half, then record
/// (probability at trusted label, adapted feature vector) per model for
/// each validation sample.
pub fn collect_quantify_records(
    models: &[MetaModel],
    pool: &DataPool,
    cfg: &FuseConfig,
    root_seed: u64,
) -> Result<Vec<QuantifyRecord>> {
    let mut carve_rng = rng::stream(root_seed, "quantify", &[0]);
    let holdout = carve_holdout(pool, cfg.holdout_fraction, &mut carve_rng)?;
    let mut episode_rng = rng::stream(root_seed, "quantify", &[1]);
    let episode = sample_episode(&holdout, &cfg.episode, &mut episode_rng)?;

    let mut records = Vec::new();
    for task in &episode.tasks {
        let adapted: Vec<_> = models
            .par_iter()
            .map(|model| adapt_to_task(model, &holdout, task, cfg.inner_lr))
            .collect::<Result<Vec<_>>>()?;
        let task_records: Vec<QuantifyRecord> = task
            .val
            .par_iter()
            .map(|&(idx, local)| {
                let sample = &holdout.samples[idx];
                let entries = adapted
                    .iter()
                    .map(|(net, head)| {
                        let feature = net.extract_features(&sample.image)?;
                        let (probs, _) = head.classify(&feature)?;
                        Ok(ModelEntry {
                            gt_prob: probs[local],
                            feature,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(QuantifyRecord {
                    sample_id: sample.id.clone(),
                    entries,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(task_records);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_score_identical_features_have_zero_diversity() {
        let own = [0.5f32, 0.5];
        let others: Vec<&[f32]> = vec![&own, &own];
        let s = fuse_score(0.8, &own, &others, 0.5).unwrap();
        assert!((s - 0.40).abs() < 1e-6);
    }

    #[test]
    fn fuse_score_gamma_one_is_confidence_alone() {
        let own = [1.0f32, 0.0];
        let other = [0.0f32, 1.0];
        let others: Vec<&[f32]> = vec![&other];
        let s = fuse_score(0.63, &own, &others, 1.0).unwrap();
        assert!((s - 0.63).abs() < 1e-6);
    }

    #[test]
    fn fuse_score_orthogonal_and_antiparallel() {
        let own = [1.0f32, 0.0];
        let o1 = [0.0f32, 1.0];
        let o2 = [-1.0f32, 0.0];
        let others: Vec<&[f32]> = vec![&o1, &o2];
        let s = fuse_score(0.6, &own, &others, 0.5).unwrap();
        assert!((s - 1.8).abs() < 1e-6);
    }

    #[test]
    fn zero_norm_feature_is_a_degeneracy_error() {
        let own = [0.0f32, 0.0];
        let other = [1.0f32, 0.0];
        let others: Vec<&[f32]> = vec![&other];
        assert!(matches!(
            fuse_score(0.5, &own, &others, 0.5),
            Err(Error::Degeneracy(_))
        ));
    }

    fn record(id: &str, entries: &[(f32, Vec<f32>)]) -> QuantifyRecord {
        QuantifyRecord {
            sample_id: id.into(),
            entries: entries
                .iter()
                .map(|(p, f)| ModelEntry {
                    gt_prob: *p,
                    feature: f.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn selection_sorts_accumulated_scores_descending() {
        // gamma = 1 so only confidences count; five identical records give
        // sums {2.0, 5.0, 3.0}.
        let f = vec![1.0f32, 0.0];
        let records: Vec<QuantifyRecord> = (0..5)
            .map(|i| {
                record(
                    &format!("s{}", i),
                    &[(0.4, f.clone()), (1.0, f.clone()), (0.6, f.clone())],
                )
            })
            .collect();
        let out = select_from_records(&records, &[0, 1, 2], 1.0, 2).unwrap();
        assert_eq!(out.selected, vec![1, 2]);
        assert!(out.scores[1].selected && out.scores[2].selected);
        assert!(!out.scores[0].selected);
        assert!((out.scores[1].sum_fused - 5.0).abs() < 1e-5);
    }

    #[test]
    fn n_equals_m_minus_one_drops_the_strict_minimum() {
        let f = vec![0.3f32, 0.7];
        let records = vec![record(
            "s0",
            &[(0.9, f.clone()), (0.1, f.clone()), (0.5, f.clone()), (0.6, f)],
        )];
        let out = select_from_records(&records, &[0, 1, 2, 3], 1.0, 3).unwrap();
        assert_eq!(out.selected.len(), 3);
        assert!(!out.selected.contains(&1));
    }

    #[test]
    fn ties_break_toward_the_earlier_round() {
        let f = vec![1.0f32];
        let records = vec![record("s0", &[(0.5, f.clone()), (0.5, f.clone()), (0.2, f)])];
        // Model indices 0 and 1 tie; rounds say 1 came earlier.
        let out = select_from_records(&records, &[7, 3, 9], 1.0, 1).unwrap();
        assert_eq!(out.selected, vec![1]);
    }

    #[test]
    fn invalid_n_is_a_config_error() {
        let f = vec![1.0f32];
        let records = vec![record("s0", &[(0.5, f.clone()), (0.5, f)])];
        assert!(matches!(
            select_from_records(&records, &[0, 1], 0.5, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            select_from_records(&records, &[0, 1], 0.5, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_features_score_below_orthogonal_diversity() {
        // Models: A, duplicate of A, and B orthogonal to both. On every
        // sample the duplicate's diversity term (0 + 1) stays below
        // B's (1 + 1).
        let a = vec![1.0f32, 0.0];
        let b = vec![0.0f32, 1.0];
        let records = vec![record("s0", &[(0.5, a.clone()), (0.5, a), (0.5, b)])];
        let out = select_from_records(&records, &[0, 1, 2], 0.0, 1).unwrap();
        assert!(out.scores[2].sum_diversity > out.scores[1].sum_diversity);
        assert_eq!(out.selected, vec![2]);
    }
}
