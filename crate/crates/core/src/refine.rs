//! Data-pool refinement: score every pooled sample with per-task adapted
//! classifiers, demote meta-labeled samples the classifiers recognize only
//! with low confidence, and promote unlabeled samples that some classifier
//! is highly confident about, labeling them with that classifier's vote.

use crate::error::{Error, Result};
use crate::extractor::argmax;
use crate::maml::{adapt_to_task, meta_train, ArchConfig, MetaModel, TrainConfig};
use crate::pool::{sample_episode, DataPool, EpisodeSpec};
use crate::rng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One task classifier's verdict on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub task_id: usize,
    /// Max softmax probability of the task classifier.
    pub confidence: f32,
    /// Predicted label mapped back into pool class space.
    pub predicted_label: usize,
    /// Probability the classifier assigned to the sample's current meta
    /// label, when the sample has one and the task covers that class.
    pub meta_label_prob: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub entries: Vec<ScoreEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Demotion threshold: a meta sample leaves M when a task classifier
    /// predicts its own label with confidence below this.
    pub demote_below: f32,
    /// Promotion threshold: an unlabeled sample joins M when some task
    /// classifier exceeds this confidence.
    pub promote_above: f32,
    /// Alternative demotion predicate: fire on the probability assigned to
    /// the meta-label class regardless of which class won the argmax.
    pub demote_on_meta_class_prob: bool,
    /// Episode protocol used to build the scoring task classifiers.
    pub episode: EpisodeSpec,
    /// Adaptation rate for the scoring task classifiers.
    pub inner_lr: f32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            demote_below: 0.5,
            promote_above: 0.9,
            demote_on_meta_class_prob: false,
            episode: EpisodeSpec::radiology_protocol(),
            inner_lr: 0.01,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.demote_below > 0.0
            && self.demote_below <= self.promote_above
            && self.promote_above < 1.0)
        {
            return Err(Error::Config(format!(
                "refinement thresholds need 0 < demote_below <= promote_above < 1, got {} and {}",
                self.demote_below, self.promote_above
            )));
        }
        self.episode.validate()
    }
}

/// Score every sample in M and U with every task classifier of one episode.
///
/// Each task classifier is the meta-model adapted on that task's update
/// half with a single inner step; its label space is the task's class list
/// mapped back to pool classes.
pub fn score_pool(
    model: &MetaModel,
    pool: &DataPool,
    cfg: &RefineConfig,
    rng: &mut impl Rng,
) -> Result<Vec<ScoreRecord>> {
    if pool.is_empty() {
        return Err(Error::Contract("cannot score an empty pool".into()));
    }
    let episode = sample_episode(pool, &cfg.episode, rng)?;
    let classifiers: Vec<_> = episode
        .tasks
        .par_iter()
        .map(|task| adapt_to_task(model, pool, task, cfg.inner_lr))
        .collect::<Result<Vec<_>>>()?;

    pool.samples
        .par_iter()
        .map(|sample| {
            let mut entries = Vec::with_capacity(classifiers.len());
            for (task_id, ((net, head), task)) in
                classifiers.iter().zip(&episode.tasks).enumerate()
            {
                let feature = net.extract_features(&sample.image)?;
                let (probs, local) = head.classify(&feature)?;
                let meta_label_prob = sample.meta_label.and_then(|m| {
                    task.classes
                        .iter()
                        .position(|&c| c == m)
                        .map(|loc| probs[loc])
                });
                entries.push(ScoreEntry {
                    task_id,
                    confidence: probs[local],
                    predicted_label: task.pool_class(local),
                    meta_label_prob,
                });
            }
            Ok(ScoreRecord {
                sample_id: sample.id.clone(),
                entries,
            })
        })
        .collect()
}

/// Result of applying the refinement rules once.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub pool: DataPool,
    pub demoted: Vec<String>,
    pub promoted: Vec<String>,
}

/// Apply the demotion/promotion rules. Pure in (pool, records, config):
/// the same inputs always produce the same output pool.
pub fn refine(pool: &DataPool, records: &[ScoreRecord], cfg: &RefineConfig) -> Result<RefineOutcome> {
    cfg.validate()?;
    let mut by_id = std::collections::BTreeMap::new();
    for r in records {
        by_id.insert(r.sample_id.as_str(), r);
    }

    let mut samples = Vec::with_capacity(pool.samples.len());
    let mut demoted = Vec::new();
    let mut promoted = Vec::new();
    for sample in &pool.samples {
        let record = by_id.get(sample.id.as_str()).ok_or_else(|| {
            Error::Contract(format!("no score record for sample {}", sample.id))
        })?;
        if record.entries.is_empty() {
            return Err(Error::Contract(format!(
                "score record for sample {} has no entries",
                sample.id
            )));
        }
        let mut updated = sample.clone();
        match sample.meta_label {
            Some(meta) => {
                let demote = record.entries.iter().any(|e| {
                    if cfg.demote_on_meta_class_prob {
                        e.meta_label_prob
                            .map(|p| p < cfg.demote_below)
                            .unwrap_or(false)
                    } else {
                        e.predicted_label == meta && e.confidence < cfg.demote_below
                    }
                });
                if demote {
                    updated.meta_label = None;
                    demoted.push(sample.id.clone());
                }
            }
            None => {
                if record
                    .entries
                    .iter()
                    .any(|e| e.confidence > cfg.promote_above)
                {
                    let confidences: Vec<f32> =
                        record.entries.iter().map(|e| e.confidence).collect();
                    let best = argmax(&confidences);
                    updated.meta_label = Some(record.entries[best].predicted_label);
                    promoted.push(sample.id.clone());
                }
            }
        }
        samples.push(updated);
    }
    Ok(RefineOutcome {
        pool: DataPool::new(samples, pool.num_classes)?,
        demoted,
        promoted,
    })
}

/// Pool statistics captured after each refinement application.
#[derive(Debug, Clone, Copy)]
pub struct RoundStats {
    pub round: usize,
    pub demoted: usize,
    pub promoted: usize,
    pub m_size: usize,
    pub u_size: usize,
    /// M samples whose current meta label disagrees with the hidden truth.
    pub noisy_in_m: usize,
}

#[derive(Debug)]
pub struct RefinementRun {
    pub models: Vec<MetaModel>,
    pub pool: DataPool,
    pub rounds: Vec<RoundStats>,
}

/// Train `models` meta-models, refining the pool between consecutive
/// trainings (m models means m-1 refinement applications).
pub fn refinement_loop(
    pool: &DataPool,
    models: usize,
    arch: &ArchConfig,
    train_cfg: &TrainConfig,
    refine_cfg: &RefineConfig,
    root_seed: u64,
) -> Result<RefinementRun> {
    if models == 0 {
        return Err(Error::Config("refinement loop needs at least one model".into()));
    }
    refine_cfg.validate()?;
    let initial_total = pool.len();
    let mut pool = pool.clone();
    let mut trained = Vec::with_capacity(models);
    let mut rounds = Vec::new();
    for round in 0..models {
        let model =
            meta_train(&pool, arch, train_cfg, root_seed, round).map_err(|e| e.with_round(round))?;
        if round + 1 < models {
            let mut score_rng = rng::stream(root_seed, "score", &[round as u64]);
            let records =
                score_pool(&model, &pool, refine_cfg, &mut score_rng).map_err(|e| e.with_round(round))?;
            let outcome = refine(&pool, &records, refine_cfg)?;
            pool = outcome.pool;
            debug_assert_eq!(pool.len(), initial_total);
            rounds.push(RoundStats {
                round,
                demoted: outcome.demoted.len(),
                promoted: outcome.promoted.len(),
                m_size: pool.m_len(),
                u_size: pool.u_len(),
                noisy_in_m: pool.mislabeled_in_m(),
            });
        }
        trained.push(model);
    }
    Ok(RefinementRun {
        models: trained,
        pool,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::Sample;
    use crate::tensor::Tensor;

    fn entry(task_id: usize, confidence: f32, predicted: usize) -> ScoreEntry {
        ScoreEntry {
            task_id,
            confidence,
            predicted_label: predicted,
            meta_label_prob: None,
        }
    }

    fn sample(id: &str, meta: Option<usize>, truth: usize) -> Sample {
        Sample {
            id: id.into(),
            image: Tensor::zeros(vec![1, 4, 4]),
            meta_label: meta,
            true_label: truth,
            noisy: false,
        }
    }

    fn cfg() -> RefineConfig {
        RefineConfig::default()
    }

    #[test]
    fn demotion_and_promotion_follow_the_set_formulas() {
        let pool = DataPool::new(
            vec![
                sample("a", Some(1), 1),
                sample("b", Some(0), 0),
                sample("c", None, 2),
            ],
            3,
        )
        .unwrap();
        let records = vec![
            // a: predicted its own label with low confidence -> demoted.
            ScoreRecord {
                sample_id: "a".into(),
                entries: vec![entry(0, 0.3, 1)],
            },
            // b: confidently itself -> stays.
            ScoreRecord {
                sample_id: "b".into(),
                entries: vec![entry(0, 0.8, 0)],
            },
            // c: one entry above the promotion bar -> promoted with label 2.
            ScoreRecord {
                sample_id: "c".into(),
                entries: vec![entry(0, 0.95, 2), entry(1, 0.4, 1)],
            },
        ];
        let out = refine(&pool, &records, &cfg()).unwrap();
        assert_eq!(out.demoted, vec!["a".to_string()]);
        assert_eq!(out.promoted, vec!["c".to_string()]);
        let m: Vec<(&str, usize)> = out
            .pool
            .samples
            .iter()
            .filter_map(|s| s.meta_label.map(|l| (s.id.as_str(), l)))
            .collect();
        assert_eq!(m, vec![("b", 0), ("c", 2)]);
        assert_eq!(out.pool.len(), 3);
    }

    #[test]
    fn no_crossing_means_no_change() {
        let pool = DataPool::new(vec![sample("a", Some(0), 0), sample("u", None, 1)], 2).unwrap();
        let records = vec![
            ScoreRecord {
                sample_id: "a".into(),
                entries: vec![entry(0, 0.7, 0)],
            },
            ScoreRecord {
                sample_id: "u".into(),
                entries: vec![entry(0, 0.7, 1)],
            },
        ];
        let out = refine(&pool, &records, &cfg()).unwrap();
        assert!(out.demoted.is_empty() && out.promoted.is_empty());
        assert_eq!(out.pool.m_len(), 1);
        assert_eq!(out.pool.u_len(), 1);
    }

    #[test]
    fn promotion_takes_the_argmax_confidence_label() {
        let pool = DataPool::new(vec![sample("u", None, 0)], 4).unwrap();
        let records = vec![ScoreRecord {
            sample_id: "u".into(),
            entries: vec![entry(0, 0.91, 3), entry(1, 0.97, 2), entry(2, 0.97, 1)],
        }];
        let out = refine(&pool, &records, &cfg()).unwrap();
        // Ties break to the earlier entry.
        assert_eq!(out.pool.samples[0].meta_label, Some(2));
    }

    #[test]
    fn wrong_prediction_with_low_confidence_does_not_demote() {
        let pool = DataPool::new(vec![sample("a", Some(1), 1)], 3).unwrap();
        let records = vec![ScoreRecord {
            sample_id: "a".into(),
            entries: vec![entry(0, 0.3, 2)],
        }];
        let out = refine(&pool, &records, &cfg()).unwrap();
        assert!(out.demoted.is_empty());
    }

    #[test]
    fn meta_class_prob_predicate_is_available() {
        let pool = DataPool::new(vec![sample("a", Some(1), 1)], 3).unwrap();
        let records = vec![ScoreRecord {
            sample_id: "a".into(),
            entries: vec![ScoreEntry {
                task_id: 0,
                confidence: 0.9,
                predicted_label: 2,
                meta_label_prob: Some(0.05),
            }],
        }];
        let mut alt = cfg();
        alt.demote_on_meta_class_prob = true;
        let out = refine(&pool, &records, &alt).unwrap();
        assert_eq!(out.demoted, vec!["a".to_string()]);
        // The default predicate ignores the same record.
        let out_default = refine(&pool, &records, &cfg()).unwrap();
        assert!(out_default.demoted.is_empty());
    }

    #[test]
    fn threshold_misordering_is_a_config_error() {
        let pool = DataPool::new(vec![sample("a", Some(0), 0)], 2).unwrap();
        let mut bad = cfg();
        bad.demote_below = 0.95;
        bad.promote_above = 0.5;
        let records = vec![ScoreRecord {
            sample_id: "a".into(),
            entries: vec![entry(0, 0.7, 0)],
        }];
        assert!(matches!(
            refine(&pool, &records, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn refine_is_pure() {
        let pool = DataPool::new(vec![sample("a", Some(0), 0), sample("u", None, 1)], 2).unwrap();
        let records = vec![
            ScoreRecord {
                sample_id: "a".into(),
                entries: vec![entry(0, 0.2, 0)],
            },
            ScoreRecord {
                sample_id: "u".into(),
                entries: vec![entry(0, 0.99, 1)],
            },
        ];
        let a = refine(&pool, &records, &cfg()).unwrap();
        let b = refine(&pool, &records, &cfg()).unwrap();
        assert_eq!(a.demoted, b.demoted);
        assert_eq!(a.promoted, b.promoted);
        for (x, y) in a.pool.samples.iter().zip(&b.pool.samples) {
            assert_eq!(x.meta_label, y.meta_label);
        }
    }

    #[test]
    fn missing_record_is_a_contract_error() {
        let pool = DataPool::new(vec![sample("a", Some(0), 0)], 2).unwrap();
        assert!(matches!(
            refine(&pool, &[], &cfg()),
            Err(Error::Contract(_))
        ));
    }
}
