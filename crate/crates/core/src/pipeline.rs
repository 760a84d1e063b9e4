//! Stage orchestration over the filesystem. Every stage reads its inputs
//! from the output directory, verifies they carry the current config hash,
//! and writes its own artifacts atomically, so any stage can be re-run
//! from what is on disk and reproduce its outputs bit-identically.

use crate::config::PipelineConfig;
use crate::downstream::DownstreamModel;
use crate::error::{Error, Result};
use crate::fs_util::atomic_write;
use crate::maml::{load_meta_model, meta_train, save_meta_model, MetaModel};
use crate::pool::{load_pool, save_pool, DataPool};
use crate::quantify::{quantify, FuseConfig, QuantifyOutcome};
use crate::refine::{refinement_loop, RefinementRun, RoundStats};
use crate::reports;
use crate::synth::{generate, load_downstream, save_downstream, DownstreamSet};
use std::path::PathBuf;
use std::time::Instant;

/// Artifact layout inside the output directory.
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Paths { out: cfg.out_dir() }
    }

    pub fn pool_dir(&self) -> PathBuf {
        self.out.join("pool")
    }

    pub fn refined_pool_dir(&self) -> PathBuf {
        self.out.join("pool_refined")
    }

    pub fn downstream_dir(&self) -> PathBuf {
        self.out.join("downstream")
    }

    pub fn checkpoint(&self, round: usize) -> PathBuf {
        self.out.join("checkpoints").join(format!("model_r{}.ckpt", round))
    }

    pub fn metrics(&self, round: usize) -> PathBuf {
        self.out.join("metrics").join(format!("train_r{}.tsv", round))
    }

    pub fn refinement_report(&self) -> PathBuf {
        self.out.join("reports").join("refinement.tsv")
    }

    pub fn quantify_report(&self) -> PathBuf {
        self.out.join("reports").join("quantify.tsv")
    }

    pub fn results(&self) -> PathBuf {
        self.out.join("reports").join("results.tsv")
    }

    pub fn ablation_report(&self) -> PathBuf {
        self.out.join("reports").join("ablation.tsv")
    }

    pub fn summary_table(&self) -> PathBuf {
        self.out.join("reports").join("summary.txt")
    }

    pub fn summary_records(&self) -> PathBuf {
        self.out.join("reports").join("summary.tsv")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.out.join("config.resolved.toml")
    }
}

fn check_hash(found: &str, cfg: &PipelineConfig, what: &str) -> Result<()> {
    let expected = cfg.hash();
    if found != expected {
        return Err(Error::Contract(format!(
            "{} was produced by config {} but the current config hashes to {}",
            what, found, expected
        )));
    }
    Ok(())
}

/// Generate the synthetic pool (noise already injected) and the downstream
/// sets, and persist everything.
pub fn stage_gen_data(cfg: &PipelineConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let hash = cfg.hash();
    let (pool, train, test) = generate(&cfg.generator, cfg.pipeline.seed)?;
    save_pool(&paths.pool_dir(), &pool, &hash)?;
    save_downstream(&paths.downstream_dir(), "train", &train, &hash)?;
    save_downstream(&paths.downstream_dir(), "test", &test, &hash)?;
    atomic_write(&paths.resolved_config(), cfg.canonical_toml().as_bytes())?;
    Ok(())
}

fn load_pool_checked(cfg: &PipelineConfig, dir: &PathBuf, what: &str) -> Result<DataPool> {
    let (pool, hash) = load_pool(dir)?;
    check_hash(&hash, cfg, what)?;
    Ok(pool)
}

/// Train the round-0 meta-model only; the refinement loop reproduces the
/// same checkpoint as its first round.
pub fn stage_meta_train(cfg: &PipelineConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let pool = load_pool_checked(cfg, &paths.pool_dir(), "pool manifest")?;
    let model = meta_train(&pool, &cfg.arch, &cfg.train, cfg.pipeline.seed, 0)?;
    save_meta_model(&paths.checkpoint(0), &model, &cfg.hash())?;
    reports::write_train_metrics(&paths.metrics(0), &model, &cfg.hash())?;
    Ok(())
}

/// Run the full train-refine loop, writing one checkpoint per round, the
/// per-round metrics, the refinement report, and the refined pool.
pub fn stage_refine_loop(cfg: &PipelineConfig) -> Result<RefinementRun> {
    let paths = Paths::new(cfg);
    let hash = cfg.hash();
    let pool = load_pool_checked(cfg, &paths.pool_dir(), "pool manifest")?;
    let run = refinement_loop(
        &pool,
        cfg.pipeline.models,
        &cfg.arch,
        &cfg.train,
        &cfg.refine,
        cfg.pipeline.seed,
    )?;
    for model in &run.models {
        save_meta_model(&paths.checkpoint(model.round), model, &hash)?;
        reports::write_train_metrics(&paths.metrics(model.round), model, &hash)?;
    }
    reports::write_refinement_report(&paths.refinement_report(), &run.rounds, &hash)?;
    save_pool(&paths.refined_pool_dir(), &run.pool, &hash)?;
    Ok(run)
}

fn load_models(cfg: &PipelineConfig, paths: &Paths, rounds: impl Iterator<Item = usize>) -> Result<Vec<MetaModel>> {
    rounds
        .map(|round| {
            let (model, hash) = load_meta_model(&paths.checkpoint(round))?;
            check_hash(&hash, cfg, &format!("checkpoint for round {}", round))?;
            Ok(model)
        })
        .collect()
}

/// Rank models by fused score when n < m; with n == m ranking is moot and
/// every model is kept in round order.
pub fn select_models(
    models: &[MetaModel],
    pool: &DataPool,
    fuse: &FuseConfig,
    n: usize,
    seed: u64,
) -> Result<(Vec<usize>, Option<QuantifyOutcome>)> {
    if n > models.len() {
        return Err(Error::Config(format!(
            "cannot select {} of {} models",
            n,
            models.len()
        )));
    }
    if n == models.len() {
        return Ok(((0..models.len()).collect(), None));
    }
    let mut cfg = *fuse;
    cfg.select = n;
    let outcome = quantify(models, pool, &cfg, seed)?;
    Ok((outcome.selected.clone(), Some(outcome)))
}

/// Score the trained checkpoints on the refined pool and record the
/// selection.
pub fn stage_quantify(cfg: &PipelineConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let hash = cfg.hash();
    let models = load_models(cfg, &paths, 0..cfg.pipeline.models)?;
    let pool = load_pool_checked(cfg, &paths.refined_pool_dir(), "refined pool manifest")?;
    let (selected, outcome) =
        select_models(&models, &pool, &cfg.fuse, cfg.pipeline.select, cfg.pipeline.seed)?;
    let scores = match outcome {
        Some(o) => o.scores,
        None => selected
            .iter()
            .map(|&i| crate::quantify::ModelScore {
                model_index: i,
                round: models[i].round,
                sum_gt_prob: 0.0,
                sum_diversity: 0.0,
                sum_fused: 0.0,
                selected: true,
            })
            .collect(),
    };
    reports::write_quantify_report(&paths.quantify_report(), &scores, &hash)?;
    Ok(())
}

/// Build the fusion model from the selected checkpoints and fine-tune it
/// on the downstream sets, appending one results row.
pub fn stage_train_downstream(cfg: &PipelineConfig) -> Result<reports::ResultRow> {
    let paths = Paths::new(cfg);
    let hash = cfg.hash();
    let (selection, report_hash) = reports::read_quantify_selection(&paths.quantify_report())?;
    check_hash(&report_hash, cfg, "quantify report")?;
    let models = load_models(cfg, &paths, selection.into_iter())?;
    let (train, train_hash) = load_downstream(&paths.downstream_dir(), "train")?;
    check_hash(&train_hash, cfg, "downstream train manifest")?;
    let (test, test_hash) = load_downstream(&paths.downstream_dir(), "test")?;
    check_hash(&test_hash, cfg, "downstream test manifest")?;

    let started = Instant::now();
    let report = finetune_selected(cfg, models, &train, &test, cfg.pipeline.seed)?.1;
    let row = reports::ResultRow {
        config_hash: hash,
        m: cfg.pipeline.models,
        n: cfg.pipeline.select,
        seed: cfg.pipeline.seed,
        train_accuracy: report.train_accuracy,
        test_accuracy: report.test_accuracy,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    reports::append_result(&paths.results(), &row)?;
    Ok(row)
}

fn finetune_selected(
    cfg: &PipelineConfig,
    models: Vec<MetaModel>,
    train: &DownstreamSet,
    test: &DownstreamSet,
    seed: u64,
) -> Result<(DownstreamModel, crate::downstream::FinetuneReport)> {
    let trunks = models.into_iter().map(|m| m.net).collect();
    let mut model = DownstreamModel::new(
        trunks,
        cfg.downstream.context_dim,
        train.num_answers,
        cfg.downstream.freeze_trunks,
        seed,
    )?;
    let report = model.finetune(train, test, &cfg.downstream, seed)?;
    Ok((model, report))
}

/// One in-memory pipeline cell: generate, refine-train m models, select n,
/// fine-tune downstream. Used by the ablation sweep.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
    pub param_count: usize,
    pub rounds: Vec<RoundStats>,
}

pub fn run_cell(cfg: &PipelineConfig, m: usize, n: usize, seed: u64) -> Result<CellOutcome> {
    let started = Instant::now();
    let (pool, train, test) = generate(&cfg.generator, seed)?;
    let run = refinement_loop(&pool, m, &cfg.arch, &cfg.train, &cfg.refine, seed)?;
    let (selected, _) = select_models(&run.models, &run.pool, &cfg.fuse, n, seed)?;
    let models: Vec<MetaModel> = selected.iter().map(|&i| run.models[i].clone()).collect();
    let (model, report) = finetune_selected(cfg, models, &train, &test, seed)?;
    Ok(CellOutcome {
        m,
        n,
        seed,
        train_accuracy: report.train_accuracy,
        test_accuracy: report.test_accuracy,
        wall_time_s: started.elapsed().as_secs_f64(),
        param_count: model.num_params(),
        rounds: run.rounds,
    })
}

/// Sweep the configured (m, n) grid over the configured seeds, appending a
/// results row per run and writing the grid-shaped ablation report
/// (m, n, mean accuracy, mean train time, parameter count).
pub fn stage_ablate(cfg: &PipelineConfig) -> Result<Vec<CellOutcome>> {
    let paths = Paths::new(cfg);
    let hash = cfg.hash();
    let mut cells = Vec::new();
    let mut report = crate::fs_util::artifact_header("mmq-ablation", &hash, &[]);
    for &(m, n) in &cfg.ablate.pairs {
        let mut accs = Vec::new();
        let mut times = Vec::new();
        let mut params = 0usize;
        for &seed in &cfg.ablate.seeds {
            let cell = run_cell(cfg, m, n, seed)?;
            reports::append_result(
                &paths.results(),
                &reports::ResultRow {
                    config_hash: hash.clone(),
                    m,
                    n,
                    seed,
                    train_accuracy: cell.train_accuracy,
                    test_accuracy: cell.test_accuracy,
                    wall_time_s: cell.wall_time_s,
                },
            )?;
            accs.push(cell.test_accuracy);
            times.push(cell.wall_time_s);
            params = cell.param_count;
            cells.push(cell);
        }
        let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        let mean_time = times.iter().sum::<f64>() / times.len() as f64;
        report.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", m, n, mean_acc, mean_time, params));
    }
    atomic_write(&paths.ablation_report(), report.as_bytes())?;
    render_report(cfg)?;
    Ok(cells)
}

/// Render the results file into the human summary table and the sorted
/// machine record.
pub fn render_report(cfg: &PipelineConfig) -> Result<String> {
    let paths = Paths::new(cfg);
    let (rows, hash) = reports::read_results(&paths.results())?;
    check_hash(&hash, cfg, "results file")?;
    let (table, machine) = reports::render_results(&rows, &hash)?;
    atomic_write(&paths.summary_table(), table.as_bytes())?;
    atomic_write(&paths.summary_records(), machine.as_bytes())?;
    Ok(table)
}

/// All stages chained: generate, refine-train, quantify, downstream,
/// summary.
pub fn stage_full(cfg: &PipelineConfig) -> Result<String> {
    stage_gen_data(cfg)?;
    stage_refine_loop(cfg)?;
    stage_quantify(cfg)?;
    stage_train_downstream(cfg)?;
    render_report(cfg)
}
