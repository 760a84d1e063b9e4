//! Downstream task head: concatenate the feature vectors of the selected
//! meta-models with a context vector and classify with a linear layer,
//! optionally fine-tuning the trunks end to end.
//!
//! The classifier weight is stored as one block per trunk plus a context
//! block, which is exactly the concatenated-feature linear layer written
//! blockwise.

use crate::error::{Error, Result};
use crate::extractor::{argmax, FeatureNet};
use crate::rng;
use crate::synth::DownstreamSet;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Keep the trunks fixed and train only the classifier. With frozen
    /// trunks the per-image features are cached once, which makes ablation
    /// sweeps cheap.
    pub freeze_trunks: bool,
    pub context_dim: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            epochs: 10,
            lr: 0.05,
            batch_size: 16,
            freeze_trunks: false,
            context_dim: 8,
        }
    }
}

/// n feature trunks feeding one linear classifier over the concatenated
/// feature-and-context vector.
#[derive(Debug, Clone)]
pub struct DownstreamModel {
    pub trunks: Vec<FeatureNet>,
    /// One [num_answers, feature_dim] block per trunk.
    pub feature_blocks: Vec<Tensor>,
    /// [num_answers, context_dim]
    pub context_block: Tensor,
    pub bias: Tensor,
    pub context_dim: usize,
    pub num_answers: usize,
    pub freeze_trunks: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl DownstreamModel {
    pub fn new(
        trunks: Vec<FeatureNet>,
        context_dim: usize,
        num_answers: usize,
        freeze_trunks: bool,
        seed: u64,
    ) -> Result<Self> {
        if trunks.is_empty() {
            return Err(Error::Config("downstream model needs at least one trunk".into()));
        }
        let feature_dim = trunks[0].feature_dim;
        if trunks.iter().any(|t| t.feature_dim != feature_dim) {
            return Err(Error::Contract(
                "all trunks must share one feature width".into(),
            ));
        }
        let fused_width = trunks.len() * feature_dim + context_dim;
        let bound = 1.0 / (fused_width as f32).sqrt();
        let mut init_rng = rng::stream(seed, "downstream-init", &[]);
        let feature_blocks = (0..trunks.len())
            .map(|_| {
                Tensor::rand_uniform(vec![num_answers, feature_dim], bound, &mut init_rng)
                    .with_grad()
            })
            .collect();
        let context_block =
            Tensor::rand_uniform(vec![num_answers, context_dim], bound, &mut init_rng).with_grad();
        Ok(DownstreamModel {
            trunks,
            feature_blocks,
            context_block,
            bias: Tensor::zeros(vec![num_answers]).with_grad(),
            context_dim,
            num_answers,
            freeze_trunks,
        })
    }

    pub fn fused_width(&self) -> usize {
        self.trunks.len() * self.trunks[0].feature_dim
    }

    /// Concatenation of the trunks' feature vectors for one image.
    pub fn fused_feature(&self, image: &Tensor) -> Result<Vec<f32>> {
        let mut fused = Vec::with_capacity(self.fused_width());
        for trunk in &self.trunks {
            fused.extend(trunk.extract_features(image)?);
        }
        Ok(fused)
    }

    pub fn num_params(&self) -> usize {
        self.trunks.iter().map(FeatureNet::num_params).sum::<usize>()
            + self.feature_blocks.iter().map(Tensor::numel).sum::<usize>()
            + self.context_block.numel()
            + self.bias.numel()
    }

    fn check_context(&self, context: &[f32]) -> Result<()> {
        if context.len() != self.context_dim {
            return Err(Error::dimension(
                "downstream_forward",
                format!(
                    "context of {} values vs context_dim {}",
                    context.len(),
                    self.context_dim
                ),
            ));
        }
        Ok(())
    }

    /// Answer distribution for one image and context vector.
    pub fn forward(&self, image: &Tensor, context: &[f32]) -> Result<(Vec<f32>, usize)> {
        self.check_context(context)?;
        let fused = self.fused_feature(image)?;
        let feature_dim = self.trunks[0].feature_dim;
        let mut logits = self.bias.data.clone();
        for (b, block) in self.feature_blocks.iter().enumerate() {
            let f = &fused[b * feature_dim..(b + 1) * feature_dim];
            for (a, l) in logits.iter_mut().enumerate() {
                let row = &block.data[a * feature_dim..(a + 1) * feature_dim];
                *l += row.iter().zip(f).map(|(w, x)| w * x).sum::<f32>();
            }
        }
        for (a, l) in logits.iter_mut().enumerate() {
            let row = &self.context_block.data[a * self.context_dim..(a + 1) * self.context_dim];
            *l += row.iter().zip(context).map(|(w, x)| w * x).sum::<f32>();
        }
        let mut tape = Tape::new();
        let lv = tape.constant(vec![self.num_answers], logits);
        let probs = tape.softmax(lv)?;
        let p = tape.value(probs).to_vec();
        let label = argmax(&p);
        Ok((p, label))
    }

    pub fn one_hot(&self, context: usize) -> Result<Vec<f32>> {
        if context >= self.context_dim {
            return Err(Error::Label {
                label: context,
                num_classes: self.context_dim,
            });
        }
        let mut v = vec![0.0; self.context_dim];
        v[context] = 1.0;
        Ok(v)
    }

    pub fn evaluate(&self, set: &DownstreamSet) -> Result<f64> {
        if set.samples.is_empty() {
            return Err(Error::Contract("evaluating an empty downstream set".into()));
        }
        let hits: usize = set
            .samples
            .par_iter()
            .map(|s| {
                let ctx = self.one_hot(s.context)?;
                let (_, label) = self.forward(&s.image, &ctx)?;
                Ok(usize::from(label == s.answer))
            })
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum();
        Ok(hits as f64 / set.samples.len() as f64)
    }

    /// Cross-entropy fine-tuning over the labeled downstream set. Reports
    /// final train/test accuracy; deterministic for a fixed seed.
    pub fn finetune(
        &mut self,
        train: &DownstreamSet,
        test: &DownstreamSet,
        cfg: &DownstreamConfig,
        seed: u64,
    ) -> Result<FinetuneReport> {
        if train.samples.is_empty() {
            return Err(Error::Contract("finetune needs a non-empty training set".into()));
        }
        for s in train.samples.iter().chain(&test.samples) {
            if s.answer >= self.num_answers {
                return Err(Error::Label {
                    label: s.answer,
                    num_classes: self.num_answers,
                });
            }
        }
        // With frozen trunks the features never change: compute them once.
        let cached: Option<Vec<Vec<f32>>> = if self.freeze_trunks {
            Some(
                train
                    .samples
                    .par_iter()
                    .map(|s| self.fused_feature(&s.image))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };

        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        let mut shuffle_rng = rng::stream(seed, "downstream-batches", &[]);
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for batch in order.chunks(cfg.batch_size.max(1)) {
                self.train_batch(train, batch, cached.as_deref(), cfg.lr)?;
            }
        }
        Ok(FinetuneReport {
            train_accuracy: self.evaluate(train)?,
            test_accuracy: self.evaluate(test)?,
        })
    }

    fn train_batch(
        &mut self,
        train: &DownstreamSet,
        batch: &[usize],
        cached: Option<&[Vec<f32>]>,
        lr: f32,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let block_vars: Vec<Var> = self.feature_blocks.iter().map(|t| tape.input(t)).collect();
        let ctx_var = tape.input(&self.context_block);
        let bias_var = tape.input(&self.bias);
        let trunk_vars: Vec<_> = if cached.is_none() {
            self.trunks.iter().map(|t| t.bind(&mut tape)).collect()
        } else {
            Vec::new()
        };
        let feature_dim = self.trunks[0].feature_dim;

        let mut acc: Option<Var> = None;
        for &idx in batch {
            let sample = &train.samples[idx];
            let mut logits = {
                let ctx = self.one_hot(sample.context)?;
                let ctx = tape.constant(vec![self.context_dim], ctx);
                let col = tape.reshape(ctx, vec![self.context_dim, 1])?;
                let prod = tape.matmul(ctx_var, col)?;
                let flat = tape.reshape(prod, vec![self.num_answers])?;
                tape.add(flat, bias_var)?
            };
            for (b, &block) in block_vars.iter().enumerate() {
                let feature = match cached {
                    Some(features) => {
                        let f = &features[idx][b * feature_dim..(b + 1) * feature_dim];
                        tape.constant(vec![feature_dim], f.to_vec())
                    }
                    None => {
                        let img = tape
                            .constant(sample.image.shape.clone(), sample.image.data.clone());
                        self.trunks[b].forward_with(&mut tape, &trunk_vars[b], img)?
                    }
                };
                let col = tape.reshape(feature, vec![feature_dim, 1])?;
                let prod = tape.matmul(block, col)?;
                let flat = tape.reshape(prod, vec![self.num_answers])?;
                logits = tape.add(logits, flat)?;
            }
            let loss = tape.cross_entropy(logits, sample.answer)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let loss = tape.scale(acc.unwrap(), 1.0 / batch.len() as f32);
        let grads = tape.backward(loss)?;

        let step = |tensor: &mut Tensor, var: Var| {
            if let Some(g) = grads.var(var) {
                let g = tape.value(g);
                for (p, gv) in tensor.data.iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
        };
        for (tensor, &var) in self.feature_blocks.iter_mut().zip(&block_vars) {
            step(tensor, var);
        }
        step(&mut self.context_block, ctx_var);
        step(&mut self.bias, bias_var);
        if cached.is_none() {
            let mut flat_vars = Vec::new();
            for vars in &trunk_vars {
                flat_vars.extend(FeatureNet::flat_vars(vars));
            }
            let mut offset = 0;
            for trunk in self.trunks.iter_mut() {
                for tensor in trunk.params_mut() {
                    let var = flat_vars[offset];
                    if let Some(g) = grads.var(var) {
                        let g = tape.value(g);
                        for (p, gv) in tensor.data.iter_mut().zip(g) {
                            *p -= lr * gv;
                        }
                    }
                    offset += 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::FeatureNet;

    fn trunk(seed: u64) -> FeatureNet {
        let mut r = rng::stream(seed, "init", &[0]);
        FeatureNet::init(32, 1, 8, &mut r).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "data", &[9]);
        let mut img = Tensor::rand_uniform(vec![1, 32, 32], 0.5, &mut r);
        for v in img.data.iter_mut() {
            *v = v.abs();
        }
        img
    }

    #[test]
    fn fused_width_is_n_times_feature_dim() {
        let model = DownstreamModel::new(vec![trunk(1)], 8, 6, true, 0).unwrap();
        assert_eq!(model.fused_width(), 8);
        let model3 =
            DownstreamModel::new(vec![trunk(1), trunk(2), trunk(3)], 8, 6, true, 0).unwrap();
        assert_eq!(model3.fused_width(), 24);
    }

    #[test]
    fn fused_feature_is_exact_blockwise_concatenation() {
        let t1 = trunk(1);
        let t2 = trunk(2);
        let img = image(5);
        let f1 = t1.extract_features(&img).unwrap();
        let f2 = t2.extract_features(&img).unwrap();
        let model = DownstreamModel::new(vec![t1, t2], 8, 6, true, 0).unwrap();
        let fused = model.fused_feature(&img).unwrap();
        assert_eq!(&fused[..8], f1.as_slice());
        assert_eq!(&fused[8..], f2.as_slice());
    }

    #[test]
    fn permuting_trunks_permutes_fused_blocks() {
        let t1 = trunk(1);
        let t2 = trunk(2);
        let img = image(6);
        let ab = DownstreamModel::new(vec![t1.clone(), t2.clone()], 8, 6, true, 0).unwrap();
        let ba = DownstreamModel::new(vec![t2, t1], 8, 6, true, 0).unwrap();
        let fab = ab.fused_feature(&img).unwrap();
        let fba = ba.fused_feature(&img).unwrap();
        assert_eq!(&fab[..8], &fba[8..]);
        assert_eq!(&fab[8..], &fba[..8]);
    }

    #[test]
    fn forward_returns_a_probability_simplex_point() {
        let model = DownstreamModel::new(vec![trunk(4)], 8, 6, true, 3).unwrap();
        let ctx = model.one_hot(2).unwrap();
        let (probs, _) = model.forward(&image(7), &ctx).unwrap();
        assert_eq!(probs.len(), 6);
        assert!(probs.iter().all(|&p| p >= 0.0));
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn wrong_context_width_is_a_dimension_error() {
        let model = DownstreamModel::new(vec![trunk(4)], 8, 6, true, 3).unwrap();
        let err = model.forward(&image(7), &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
