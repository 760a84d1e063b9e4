//! Meta-training: one inner gradient step adapts shared parameters to each
//! sampled task, then the meta-parameters take a step against the summed
//! validation losses of the adapted models.
//!
//! Two outer-gradient modes are provided. `Exact` differentiates through
//! the inner update (the tape records its own backward pass, so the
//! inner-step Jacobian is handled exactly). `FirstOrder` treats that
//! Jacobian as identity and applies the post-adaptation gradient directly
//! to the meta-parameters.

use crate::error::{Error, Result};
use crate::extractor::{ClassifierHead, FeatureNet};
use crate::pool::{sample_episode, DataPool, EpisodeSpec, TaskSet};
use crate::rng;
use crate::tensor::{write_checkpoint, Checkpoint, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Exact,
    FirstOrder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner-loop (task adaptation) learning rate.
    pub inner_lr: f32,
    /// Outer-loop (meta-update) learning rate.
    pub meta_lr: f32,
    pub iterations: usize,
    pub gradient_mode: GradientMode,
    pub episode: EpisodeSpec,
    /// Draw a fresh classifier head at the start of every episode instead
    /// of carrying the meta-updated head across iterations.
    pub head_reinit_per_episode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_lr: 0.01,
            meta_lr: 0.001,
            iterations: 200,
            gradient_mode: GradientMode::FirstOrder,
            episode: EpisodeSpec::radiology_protocol(),
            head_reinit_per_episode: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_lr <= 0.0 || self.meta_lr <= 0.0 {
            return Err(Error::Config(
                "learning rates must be positive".into(),
            ));
        }
        self.episode.validate()
    }
}

/// Network architecture knobs shared by every meta-model in a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub feature_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 84,
            in_channels: 1,
            feature_dim: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationLog {
    pub iteration: usize,
    pub task_losses: Vec<f32>,
    pub meta_loss: f32,
}

/// Trained meta-model: trunk plus head, tagged with the refinement round
/// that produced it.
#[derive(Debug, Clone)]
pub struct MetaModel {
    pub net: FeatureNet,
    pub head: ClassifierHead,
    pub round: usize,
    pub training_log: Vec<IterationLog>,
}

/// A task's two objectives, built from parameter vars on a caller-supplied
/// tape. Keeping these as closures lets the same meta-update drive both
/// the conv models and the tiny analytic models used to pin down the
/// bilevel gradient.
pub struct TaskObjective<'a> {
    pub train: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + 'a>,
    pub val: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + 'a>,
}

/// One inner gradient step on a copy of the parameters; the originals are
/// untouched. Returns the adapted parameters and the pre-step loss.
pub fn inner_adapt(
    params: &[Tensor],
    train_loss: &(dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync),
    alpha: f32,
) -> Result<(Vec<Tensor>, f32)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.input(t)).collect();
    let loss = train_loss(&mut tape, &vars)?;
    let loss_value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    let adapted = params
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            let mut nt = t.clone();
            nt.grad = None;
            if let Some(g) = tape.grad_value(&grads, v) {
                for (p, gv) in nt.data.iter_mut().zip(g) {
                    *p -= alpha * gv;
                }
            }
            nt
        })
        .collect();
    Ok((adapted, loss_value))
}

#[derive(Debug)]
pub struct MetaUpdate {
    pub params: Vec<Tensor>,
    pub task_train_losses: Vec<f32>,
    pub task_val_losses: Vec<f32>,
    /// Sum of the tasks' validation losses, the quantity the outer step
    /// descends.
    pub meta_loss: f32,
}

/// Outer meta-update across an episode's tasks. Task gradients are summed,
/// not averaged, which ties the effective outer step to the task count.
pub fn meta_update(
    params: &[Tensor],
    tasks: &[TaskObjective],
    alpha: f32,
    beta: f32,
    mode: GradientMode,
) -> Result<MetaUpdate> {
    if tasks.is_empty() {
        return Err(Error::Contract("meta_update needs at least one task".into()));
    }
    let per_task: Vec<(Vec<Vec<f32>>, f32, f32)> = tasks
        .par_iter()
        .map(|task| match mode {
            GradientMode::Exact => exact_task_gradient(params, task, alpha),
            GradientMode::FirstOrder => first_order_task_gradient(params, task, alpha),
        })
        .collect::<Result<_>>()?;

    let mut new_params: Vec<Tensor> = params
        .iter()
        .map(|t| {
            let mut nt = t.clone();
            nt.grad = None;
            nt
        })
        .collect();
    let mut train_losses = Vec::with_capacity(tasks.len());
    let mut val_losses = Vec::with_capacity(tasks.len());
    for (grad, l_tr, l_val) in &per_task {
        train_losses.push(*l_tr);
        val_losses.push(*l_val);
        for (p, g) in new_params.iter_mut().zip(grad) {
            for (v, gv) in p.data.iter_mut().zip(g) {
                *v -= beta * gv;
            }
        }
    }
    let meta_loss = val_losses.iter().sum();
    Ok(MetaUpdate {
        params: new_params,
        task_train_losses: train_losses,
        task_val_losses: val_losses,
        meta_loss,
    })
}

/// Differentiate the validation loss through the recorded inner step.
fn exact_task_gradient(
    params: &[Tensor],
    task: &TaskObjective,
    alpha: f32,
) -> Result<(Vec<Vec<f32>>, f32, f32)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.input(t)).collect();
    let l_tr = (task.train)(&mut tape, &vars)?;
    let l_tr_value = tape.value(l_tr)[0];
    let inner = tape.backward(l_tr)?;
    let adapted: Vec<Var> = vars
        .iter()
        .map(|&v| match inner.var(v) {
            Some(g) => {
                let step = tape.scale(g, alpha);
                tape.sub(v, step)
            }
            None => Ok(v),
        })
        .collect::<Result<_>>()?;
    let l_val = (task.val)(&mut tape, &adapted)?;
    let l_val_value = tape.value(l_val)[0];
    let outer = tape.backward(l_val)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| {
            tape.grad_value(&outer, v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok((grads, l_tr_value, l_val_value))
}

/// Evaluate the validation gradient at the adapted parameters and apply it
/// to the meta-parameters unchanged.
fn first_order_task_gradient(
    params: &[Tensor],
    task: &TaskObjective,
    alpha: f32,
) -> Result<(Vec<Vec<f32>>, f32, f32)> {
    let (adapted, l_tr_value) = inner_adapt(params, &task.train, alpha)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = adapted.iter().map(|t| tape.input(t)).collect();
    let l_val = (task.val)(&mut tape, &vars)?;
    let l_val_value = tape.value(l_val)[0];
    let outer = tape.backward(l_val)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| {
            tape.grad_value(&outer, v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok((grads, l_tr_value, l_val_value))
}

// ── Episode plumbing for the conv models ─────────────────────────────

/// Flat parameter order: trunk tensors then head tensors.
pub fn collect_params(net: &FeatureNet, head: &ClassifierHead) -> Vec<Tensor> {
    net.params()
        .into_iter()
        .chain(head.params())
        .map(|t| {
            let mut c = t.clone();
            c.requires_grad = true;
            c.grad = None;
            c
        })
        .collect()
}

/// Write a flat parameter vector back into trunk and head.
pub fn assign_params(net: &mut FeatureNet, head: &mut ClassifierHead, params: &[Tensor]) -> Result<()> {
    let split = FeatureNet::PARAM_COUNT;
    if params.len() != split + ClassifierHead::PARAM_COUNT {
        return Err(Error::Contract(format!(
            "expected {} parameter tensors, got {}",
            split + ClassifierHead::PARAM_COUNT,
            params.len()
        )));
    }
    net.set_params(&params[..split])?;
    head.set_params(&params[split..])
}

/// Mean cross-entropy of a model over task samples, with parameters coming
/// from the supplied vars rather than the stored tensors.
fn batch_loss(
    net: &FeatureNet,
    head: &ClassifierHead,
    pool: &DataPool,
    samples: &[(usize, usize)],
    tape: &mut Tape,
    theta: &[Var],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::Contract("task objective over an empty sample set".into()));
    }
    let net_vars = FeatureNet::vars_from_slice(&theta[..FeatureNet::PARAM_COUNT]);
    let head_vars = ClassifierHead::vars_from_slice(&theta[FeatureNet::PARAM_COUNT..]);
    let mut acc: Option<Var> = None;
    for &(idx, local) in samples {
        let s = &pool.samples[idx];
        let img = tape.constant(s.image.shape.clone(), s.image.data.clone());
        let feature = net.forward_with(tape, &net_vars, img)?;
        let logits = head.forward_with(tape, &head_vars, feature)?;
        let loss = tape.cross_entropy(logits, local)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, loss)?,
            None => loss,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / samples.len() as f32))
}

/// Task objectives for one episode task of the conv model.
pub fn episode_objective<'a>(
    net: &'a FeatureNet,
    head: &'a ClassifierHead,
    pool: &'a DataPool,
    task: &'a TaskSet,
) -> TaskObjective<'a> {
    TaskObjective {
        train: Box::new(move |tape, theta| batch_loss(net, head, pool, &task.train, tape, theta)),
        val: Box::new(move |tape, theta| batch_loss(net, head, pool, &task.val, tape, theta)),
    }
}

/// Adapt a meta-model to one task with a single inner step; used when
/// scoring the pool with per-task classifiers.
pub fn adapt_to_task(
    model: &MetaModel,
    pool: &DataPool,
    task: &TaskSet,
    alpha: f32,
) -> Result<(FeatureNet, ClassifierHead)> {
    let params = collect_params(&model.net, &model.head);
    let objective = episode_objective(&model.net, &model.head, pool, task);
    let (adapted, _) = inner_adapt(&params, &objective.train, alpha)?;
    let mut net = model.net.clone();
    let mut head = model.head.clone();
    assign_params(&mut net, &mut head, &adapted)?;
    Ok((net, head))
}

/// Run the full meta-training loop for one refinement round.
pub fn meta_train(
    pool: &DataPool,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    root_seed: u64,
    round: usize,
) -> Result<MetaModel> {
    cfg.validate()?;
    let mut init_rng = rng::stream(root_seed, "init", &[round as u64]);
    let mut net = FeatureNet::init(arch.image_size, arch.in_channels, arch.feature_dim, &mut init_rng)?;
    let mut head = ClassifierHead::init(arch.feature_dim, cfg.episode.classes_per_task, &mut init_rng);
    let mut training_log = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let mut ep_rng = rng::stream(root_seed, "episodes", &[round as u64, iteration as u64]);
        let episode = sample_episode(pool, &cfg.episode, &mut ep_rng)?;
        if cfg.head_reinit_per_episode {
            let mut head_rng = rng::stream(root_seed, "head", &[round as u64, iteration as u64]);
            head = ClassifierHead::init(arch.feature_dim, cfg.episode.classes_per_task, &mut head_rng);
        }
        let params = collect_params(&net, &head);
        let objectives: Vec<TaskObjective> = episode
            .tasks
            .iter()
            .map(|task| episode_objective(&net, &head, pool, task))
            .collect();
        let update = meta_update(
            &params,
            &objectives,
            cfg.inner_lr,
            cfg.meta_lr,
            cfg.gradient_mode,
        )?;
        drop(objectives);
        assign_params(&mut net, &mut head, &update.params)?;
        training_log.push(IterationLog {
            iteration,
            task_losses: update.task_val_losses,
            meta_loss: update.meta_loss,
        });
    }
    Ok(MetaModel {
        net,
        head,
        round,
        training_log,
    })
}

// ── Checkpoint wiring ────────────────────────────────────────────────

pub fn meta_model_checkpoint(model: &MetaModel, config_hash: &str) -> Checkpoint {
    let mut tensors = Vec::new();
    for (name, t) in FeatureNet::param_names().into_iter().zip(model.net.params()) {
        tensors.push((name, t.clone()));
    }
    for (name, t) in ClassifierHead::param_names().into_iter().zip(model.head.params()) {
        tensors.push((name, t.clone()));
    }
    Checkpoint {
        meta: vec![
            ("config".into(), config_hash.to_string()),
            ("round".into(), model.round.to_string()),
            ("image_size".into(), model.net.image_size.to_string()),
            ("in_channels".into(), model.net.in_channels.to_string()),
            ("feature_dim".into(), model.net.feature_dim.to_string()),
            ("num_classes".into(), model.head.num_classes.to_string()),
        ],
        tensors,
    }
}

pub fn save_meta_model(path: &Path, model: &MetaModel, config_hash: &str) -> Result<()> {
    write_checkpoint(path, &meta_model_checkpoint(model, config_hash))
}

pub fn load_meta_model(path: &Path) -> Result<(MetaModel, String)> {
    let ckpt = crate::tensor::read_checkpoint(path)?;
    let meta_usize = |key: &str| -> Result<usize> {
        ckpt.meta_value(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("checkpoint missing {}", key),
            })
    };
    let image_size = meta_usize("image_size")?;
    let in_channels = meta_usize("in_channels")?;
    let feature_dim = meta_usize("feature_dim")?;
    let num_classes = meta_usize("num_classes")?;
    let round = meta_usize("round")?;
    let config_hash = ckpt.meta_value("config").unwrap_or_default().to_string();

    let mut seed_rng = rng::stream(0, "load", &[]);
    let mut net = FeatureNet::init(image_size, in_channels, feature_dim, &mut seed_rng)?;
    let mut head = ClassifierHead::zeros(feature_dim, num_classes);
    let names: Vec<String> = FeatureNet::param_names()
        .into_iter()
        .chain(ClassifierHead::param_names())
        .collect();
    let mut tensors = Vec::with_capacity(names.len());
    for name in &names {
        let t = ckpt.tensor(name).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("checkpoint missing tensor {}", name),
        })?;
        tensors.push(t.clone().with_grad());
    }
    assign_params(&mut net, &mut head, &tensors)?;
    Ok((
        MetaModel {
            net,
            head,
            round,
            training_log: Vec::new(),
        },
        config_hash,
    ))
}
