//! Training and evaluation loops: warmup, annealing window, descent,
//! checkpoint selection, multi-seed protocols and sensitivity sweeps.

use std::io::Write;
use std::time::Instant;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{leave_one_out_splits, sample_composite, DomainDataset, DomainRole};
use crate::error::{LabError, Result};
use crate::metrics::{per_domain, GradReport};
use crate::model::{Model, ModelSpec};
use crate::optim::{
    gga_anneal, ggal_direction, AnnealConfig, CandidateStream, GgaLConfig, Optimizer, OptimizerKind,
};
use crate::params::ParamVector;
use crate::seed::{derive_seed, splitmix64};
use crate::telemetry::TelemetryRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Gga,
    GgaL,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Gga => "gga",
            Method::GgaL => "gga-l",
        }
    }
}

/// Checkpoint selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Best accuracy on the held-out part of the source domains.
    TrainingDomain,
    /// Best target accuracy. Diagnostic only.
    Oracle,
    /// Parameters after the final iteration.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Samples drawn from each source domain per iteration.
    pub batch_size: usize,
    pub iterations: usize,
    pub method: Method,
    pub anneal: AnnealConfig,
    pub ggal: GgaLConfig,
    pub seed: u64,
    /// Fraction of each source domain held out for checkpoint selection.
    pub val_fraction: f64,
    pub eval_every: usize,
    pub selection: Selection,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::poly_logistic(2, 4, 2),
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            weight_decay: 1e-4,
            batch_size: 32,
            iterations: 2000,
            method: Method::Erm,
            anneal: AnnealConfig::default(),
            ggal: GgaLConfig::default(),
            seed: 0,
            val_fraction: 0.2,
            eval_every: 100,
            selection: Selection::TrainingDomain,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(LabError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LabError::Config("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.eval_every == 0 {
            return Err(LabError::Config(
                "batch_size, iterations and eval_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(LabError::Config("val_fraction must lie in [0, 1)".into()));
        }
        match self.method {
            Method::Gga => {
                self.anneal.validate()?;
                if self.iterations < self.anneal.end {
                    return Err(LabError::Config(format!(
                        "iterations ({}) must reach the annealing end ({})",
                        self.iterations, self.anneal.end
                    )));
                }
            }
            Method::GgaL => self.ggal.validate()?,
            Method::Erm => {}
        }
        Ok(())
    }
}

/// Similarities around one annealed iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnealLogEntry {
    pub t: usize,
    pub baseline_sim: f64,
    pub final_sim: f64,
    pub accepted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    /// Target accuracy of the selected checkpoint.
    pub target_accuracy: f64,
    /// Accuracy of the selected checkpoint on held-out source samples
    /// (on the training sources when nothing is held out).
    pub source_val_accuracy: f64,
    pub source_train_accuracy: f64,
    pub telemetry: Vec<TelemetryRecord>,
    pub final_theta: ParamVector,
    pub selected_theta: ParamVector,
    pub selected_at: usize,
    pub anneal_log: Vec<AnnealLogEntry>,
}

/// Top-1 accuracy; ties predict the lowest class index.
pub fn evaluate(
    model: &Model,
    theta: &ParamVector,
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(LabError::Domain("empty evaluation set".into()));
    }
    if labels.len() != x.nrows() {
        return Err(LabError::shape(x.nrows(), labels.len()));
    }
    let pred = model.predict(theta, x)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains on the dataset's source domains and evaluates on its target domains.
pub fn train(dataset: &DomainDataset, cfg: &TrainConfig) -> Result<RunResult> {
    train_split(dataset, cfg, 0)
}

/// [`train`] with random streams keyed by `split`.
pub fn train_split(dataset: &DomainDataset, cfg: &TrainConfig, split: usize) -> Result<RunResult> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone())?;
    if dataset.feature_dim() != cfg.model.input_dim {
        return Err(LabError::Config(format!(
            "model input_dim {} does not match dataset width {}",
            cfg.model.input_dim,
            dataset.feature_dim()
        )));
    }
    if dataset.num_classes() > cfg.model.num_classes {
        return Err(LabError::Config(format!(
            "dataset has {} classes, model only {}",
            dataset.num_classes(),
            cfg.model.num_classes
        )));
    }
    let n_sources = dataset.source_indices().len();
    let needed = if cfg.method == Method::Erm { 1 } else { 2 };
    if n_sources < needed {
        return Err(LabError::Config(format!(
            "method {} needs at least {needed} source domains, dataset has {n_sources}",
            cfg.method.name()
        )));
    }
    let (target_x, target_y) = dataset
        .pooled(DomainRole::Target)
        .ok_or_else(|| LabError::Config("dataset has no target domain".into()))?;

    let key = |purpose: &str| derive_seed(cfg.seed, split, purpose);
    let mut holdout_rng = ChaCha8Rng::seed_from_u64(key("holdout"));
    let (train_ds, val) = dataset.split_sources(cfg.val_fraction, &mut holdout_rng)?;
    let (source_x, source_y) = train_ds
        .pooled(DomainRole::Source)
        .expect("source count checked above");
    let (val_x, val_y) = val.unwrap_or_else(|| (source_x.clone(), source_y.clone()));

    let mut theta = model.init_params(key("init"));
    let mut optimizer = Optimizer::new(cfg.optimizer, theta.len());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(key("batches"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(key("noise"));
    let anneal_root = key("anneal");

    let mut telemetry = Vec::with_capacity(cfg.iterations);
    let mut anneal_log = Vec::new();
    let mut best: Option<(f64, ParamVector, usize)> = None;

    for t in 1..=cfg.iterations {
        let started = cfg.record_wall_time.then(Instant::now);
        let composite = sample_composite(&train_ds, cfg.batch_size, &mut batch_rng)?;

        let mut accepted = 0;
        let anchor = if cfg.method == Method::Gga && cfg.anneal.in_window(t) {
            let stream = CandidateStream::new(splitmix64(anneal_root ^ t as u64));
            let out = gga_anneal(
                &model,
                &theta,
                &composite,
                &cfg.anneal,
                cfg.weight_decay,
                stream,
            )?;
            accepted = out.step.accepted_candidates;
            anneal_log.push(AnnealLogEntry {
                t,
                baseline_sim: out.trace.baseline_sim,
                final_sim: out.step.final_sim,
                accepted,
            });
            out.step.theta_next
        } else {
            theta.clone()
        };

        let (losses, grads) = per_domain(&model, &anchor, &composite, cfg.weight_decay)?;
        let (min_sim, mean_sim, direction) = if grads.len() >= 2 {
            let report = GradReport::from_parts(losses.clone(), grads)?;
            let direction = match cfg.method {
                Method::GgaL => ggal_direction(&report, &cfg.ggal, &mut noise_rng).0,
                _ => report.mean_grad(),
            };
            (Some(report.min_sim), Some(report.mean_sim), direction)
        } else {
            (None, None, ParamVector::mean_of(&grads)?)
        };
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;

        theta = optimizer.step(&anchor, &direction, cfg.lr)?;
        if !theta.is_finite() {
            return Err(LabError::Domain(format!(
                "parameters diverged at iteration {t}"
            )));
        }

        telemetry.push(TelemetryRecord {
            t,
            loss,
            domain_losses: losses,
            min_sim,
            mean_sim,
            accepted,
            theta_norm: theta.norm(),
            ms: started.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3),
        });

        if t % cfg.eval_every == 0 || t == cfg.iterations {
            let score = match cfg.selection {
                Selection::TrainingDomain => evaluate(&model, &theta, val_x.view(), &val_y)?,
                Selection::Oracle => evaluate(&model, &theta, target_x.view(), &target_y)?,
                Selection::Last => 0.0,
            };
            // Ties go to the later checkpoint.
            if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
                best = Some((score, theta.clone(), t));
            }
        }
    }

    let (_, selected_theta, selected_at) = best.expect("at least one checkpoint");
    Ok(RunResult {
        target_accuracy: evaluate(&model, &selected_theta, target_x.view(), &target_y)?,
        source_val_accuracy: evaluate(&model, &selected_theta, val_x.view(), &val_y)?,
        source_train_accuracy: evaluate(&model, &selected_theta, source_x.view(), &source_y)?,
        telemetry,
        final_theta: theta,
        selected_theta,
        selected_at,
        anneal_log,
    })
}

/// Mean of the relative input sensitivity of the decision logit to the
/// domain-specific coordinate, `|∂z/∂x_d| / (|∂z/∂x_c| + |∂z/∂x_d|)`, over
/// every sample of the dataset. Samples where both partials vanish are skipped;
/// if all vanish the result is 0.
pub fn domain_reliance(
    model: &Model,
    theta: &ParamVector,
    dataset: &DomainDataset,
    class_coord: usize,
    domain_coord: usize,
) -> Result<f64> {
    let dim = dataset.feature_dim();
    if class_coord >= dim || domain_coord >= dim || class_coord == domain_coord {
        return Err(LabError::Config(format!(
            "reliance coordinates ({class_coord}, {domain_coord}) invalid for width {dim}"
        )));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for d in dataset.domains() {
        for row in d.features.rows() {
            let g = model.logit_input_gradient(theta, &row.to_vec())?;
            let (c, s) = (g[class_coord].abs(), g[domain_coord].abs());
            if c + s > 0.0 {
                total += s / (c + s);
                count += 1;
            }
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// How the dataset's domains are turned into train/test splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Use the source/target roles stored in the dataset.
    Fixed,
    /// Hold out each domain in turn.
    LeaveOneOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub split: usize,
    pub target_domain: String,
    pub method: Method,
    pub seed_count: usize,
    pub mean_acc: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub split: usize,
    pub replicate: usize,
    pub seed: u64,
    pub result: RunResult,
}

#[derive(Clone, Debug)]
pub struct ProtocolSummary {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
}

/// Mean and standard error `s/√n` (sample standard deviation); 0 for one value.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn split_datasets(
    dataset: &DomainDataset,
    mode: SplitMode,
) -> Result<Vec<(String, DomainDataset)>> {
    match mode {
        SplitMode::Fixed => {
            let names: Vec<&str> = dataset
                .target_indices()
                .into_iter()
                .map(|i| dataset.domains()[i].name.as_str())
                .collect();
            if names.is_empty() {
                return Err(LabError::Config("fixed split needs a target domain".into()));
            }
            Ok(vec![(names.join("+"), dataset.clone())])
        }
        SplitMode::LeaveOneOut => leave_one_out_splits(dataset)?
            .into_iter()
            .map(|s| {
                Ok((
                    dataset.domains()[s.target].name.clone(),
                    dataset.with_target(s.target)?,
                ))
            })
            .collect(),
    }
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `n_seeds` replicates per split. Replicate `r` trains with seed
/// `cfg.seed + r`; runs execute on `jobs` threads (0 = all cores) and are
/// collected in (split, replicate) order.
pub fn run_protocol(
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    n_seeds: usize,
    mode: SplitMode,
    jobs: usize,
) -> Result<ProtocolSummary> {
    if n_seeds == 0 {
        return Err(LabError::Config("need at least one seed".into()));
    }
    cfg.validate()?;
    let splits = split_datasets(dataset, mode)?;
    let jobs_list: Vec<(usize, usize)> = (0..splits.len())
        .flat_map(|s| (0..n_seeds).map(move |r| (s, r)))
        .collect();

    let results: Vec<Result<RunRecord>> = in_pool(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(s, r)| {
                let seed = cfg.seed.wrapping_add(r as u64);
                let run_cfg = TrainConfig {
                    seed,
                    ..cfg.clone()
                };
                Ok(RunRecord {
                    split: s,
                    replicate: r,
                    seed,
                    result: train_split(&splits[s].1, &run_cfg, s)?,
                })
            })
            .collect()
    })?;
    let runs: Vec<RunRecord> = results.into_iter().collect::<Result<_>>()?;

    let rows = splits
        .iter()
        .enumerate()
        .map(|(s, (name, _))| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.split == s)
                .map(|r| r.result.target_accuracy)
                .collect();
            let (mean_acc, stderr) = mean_stderr(&accs);
            SummaryRow {
                split: s,
                target_domain: name.clone(),
                method: cfg.method,
                seed_count: accs.len(),
                mean_acc,
                stderr,
            }
        })
        .collect();
    Ok(ProtocolSummary { rows, runs })
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "split,target_domain,method,seed_count,mean_acc,stderr")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.split,
            r.target_domain,
            r.method.name(),
            r.seed_count,
            r.mean_acc,
            r.stderr
        )?;
    }
    Ok(())
}

/// Named annealing windows of 100 iterations for a run of `iterations`
/// steps: `early` = 100-200, `mid` centered on the midpoint, `late` ending
/// 100 steps before the run ends. Also accepts an explicit `start-end`.
pub fn parse_window(text: &str, iterations: usize) -> Result<(usize, usize)> {
    let text = text.trim();
    let window = match text {
        "early" => (100, 200),
        "mid" => (iterations / 2 - 50.min(iterations / 2), iterations / 2 + 50),
        "late" => (
            iterations.saturating_sub(200),
            iterations.saturating_sub(100),
        ),
        _ => {
            let (a, b) = text
                .split_once('-')
                .ok_or_else(|| LabError::Parse(format!("window '{text}' is not start-end")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| LabError::Parse(format!("window '{text}': {e}")))
            };
            (parse(a)?, parse(b)?)
        }
    };
    if window.0 > window.1 || window.1 > iterations {
        return Err(LabError::Config(format!(
            "window {}-{} does not fit in {iterations} iterations",
            window.0, window.1
        )));
    }
    Ok(window)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rho: f64,
    pub window_start: usize,
    pub window_end: usize,
    pub summary: SummaryRow,
}

/// One [`run_protocol`] per (ρ, window) grid point, ρ-major.
pub fn sensitivity_sweep(
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    rho_grid: &[f64],
    window_grid: &[(usize, usize)],
    n_seeds: usize,
    mode: SplitMode,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if rho_grid.is_empty() || window_grid.is_empty() {
        return Err(LabError::Config("sweep grids must be nonempty".into()));
    }
    if cfg.method != Method::Gga {
        return Err(LabError::Config(
            "sensitivity sweeps require method = gga".into(),
        ));
    }
    let mut rows = Vec::new();
    for &rho in rho_grid {
        for &(start, end) in window_grid {
            let mut point = cfg.clone();
            point.anneal.rho = rho;
            point.anneal.start = start;
            point.anneal.end = end;
            let summary = run_protocol(dataset, &point, n_seeds, mode, jobs)?;
            rows.extend(summary.rows.into_iter().map(|s| SweepRow {
                rho,
                window_start: start,
                window_end: end,
                summary: s,
            }));
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "rho,window_start,window_end,split,target_domain,method,seed_count,mean_acc,stderr"
    )?;
    for r in rows {
        let s = &r.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.rho,
            r.window_start,
            r.window_end,
            s.split,
            s.target_domain,
            s.method.name(),
            s.seed_count,
            s.mean_acc,
            s.stderr
        )?;
    }
    Ok(())
}
