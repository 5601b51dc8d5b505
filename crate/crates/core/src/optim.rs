//! Parameter-update engines: SGD, Adam, gradient-guided annealing and its
//! noisy-update variant.
//!
//! Annealing candidates are drawn from a counter-based stream: candidate `a`
//! of a step reads its perturbation from ChaCha8 stream `a` under the step's
//! key, so candidates can be evaluated in any order (or in parallel) and the
//! acceptance scan always sees the same sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CompositeMinibatch;
use crate::error::{LabError, Result};
use crate::metrics::{grad_report, per_domain, GradReport};
use crate::model::Model;
use crate::params::ParamVector;

/// `θ − η·g`
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    grad.check_len(theta.len(), "gradient")?;
    let mut out = theta.clone();
    out.axpy(-lr, grad);
    Ok(out)
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self::with_hyper(dim, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update; advances `state`.
pub fn adam_step(
    state: &mut AdamState,
    theta: &ParamVector,
    grad: &ParamVector,
    lr: f64,
) -> Result<ParamVector> {
    grad.check_len(theta.len(), "gradient")?;
    if state.m.len() != theta.len() {
        return Err(LabError::shape(
            format!("adam state of length {}", theta.len()),
            state.m.len(),
        ));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t);
    let c2 = 1.0 - b2.powi(state.t);
    let mut out = theta.clone();
    for (((p, &g), m), v) in out
        .as_mut_slice()
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Stateful descent rule used by the training loop.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(dim)),
        }
    }

    pub fn step(
        &mut self,
        theta: &ParamVector,
        grad: &ParamVector,
        lr: f64,
    ) -> Result<ParamVector> {
        match self {
            Optimizer::Sgd => sgd_step(theta, grad, lr),
            Optimizer::Adam(state) => adam_step(state, theta, grad, lr),
        }
    }
}

/// Loss condition paired with the similarity increase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptanceMode {
    /// Candidate loss may exceed the incumbent by less than the tolerance.
    Relaxed,
    /// Candidate loss must be strictly lower than the incumbent.
    StrictPareto,
}

impl AcceptanceMode {
    pub fn accepts(
        self,
        cand_sim: f64,
        cand_loss: f64,
        sim: f64,
        loss: f64,
        tolerance: f64,
    ) -> bool {
        cand_sim > sim
            && match self {
                AcceptanceMode::Relaxed => cand_loss - loss < tolerance,
                AcceptanceMode::StrictPareto => cand_loss < loss,
            }
    }
}

fn default_parallel() -> bool {
    false
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    /// Half-width of the uniform perturbation.
    pub rho: f64,
    /// First training iteration (1-based, inclusive) that anneals.
    pub start: usize,
    /// Last training iteration (inclusive) that anneals.
    pub end: usize,
    /// Candidates per annealed iteration.
    pub candidates: usize,
    pub tolerance: f64,
    pub mode: AcceptanceMode,
    /// Evaluate candidates on the rayon pool. Results are identical either way.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            rho: 1e-5,
            start: 100,
            end: 200,
            candidates: 250,
            tolerance: 0.1,
            mode: AcceptanceMode::Relaxed,
            parallel: false,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(LabError::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.start > self.end {
            return Err(LabError::Config(format!(
                "annealing start {} exceeds end {}",
                self.start, self.end
            )));
        }
        if self.candidates == 0 {
            return Err(LabError::Config(
                "annealing needs at least one candidate".into(),
            ));
        }
        if !(self.tolerance >= 0.0) {
            return Err(LabError::Config(format!(
                "loss tolerance must be nonnegative, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }

    pub fn in_window(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GgaLConfig {
    /// Noise intensity.
    pub gamma: f64,
    /// Draw noise from `U(-0.5, 0.5)` instead of `U(0, 1)`.
    #[serde(default)]
    pub centered: bool,
}

impl Default for GgaLConfig {
    fn default() -> Self {
        GgaLConfig {
            gamma: 1e-3,
            centered: false,
        }
    }
}

impl GgaLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(LabError::Config(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// `α = γ·(1 − mean_sim)`
    pub fn alpha(&self, mean_sim: f64) -> f64 {
        self.gamma * (1.0 - mean_sim)
    }
}

/// Result of one optimizer step, with annealing counters.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub theta_next: ParamVector,
    pub accepted_candidates: usize,
    pub candidates_evaluated: usize,
    pub final_sim: f64,
    pub final_loss: f64,
}

/// Keyed source of annealing perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateStream {
    pub key: u64,
}

impl CandidateStream {
    pub fn new(key: u64) -> Self {
        CandidateStream { key }
    }

    /// Generator for candidate `index`: ChaCha8 seeded with the key, on stream `index`.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        rng.set_stream(index as u64);
        rng
    }

    /// Elementwise `U(−ρ, ρ)` perturbation of candidate `index`: one `U[0,1)`
    /// draw `u` per coordinate, mapped to `ρ·(2u − 1)`.
    pub fn perturbation(&self, index: usize, dim: usize, rho: f64) -> ParamVector {
        let mut rng = self.rng_for(index);
        ParamVector::new(
            (0..dim)
                .map(|_| rho * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
        )
    }

    pub fn candidate(&self, theta: &ParamVector, index: usize, rho: f64) -> ParamVector {
        theta + &self.perturbation(index, theta.len(), rho)
    }
}

/// One evaluated annealing candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateRecord {
    pub sim: f64,
    pub loss: f64,
    pub accepted: bool,
}

/// Everything the acceptance scan saw during one annealed iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnealTrace {
    pub stream: CandidateStream,
    pub baseline_sim: f64,
    pub baseline_loss: f64,
    pub candidates: Vec<CandidateRecord>,
}

impl AnnealTrace {
    pub fn accepted_indices(&self) -> Vec<usize> {
        self.candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.accepted)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealOutcome {
    pub step: StepOutcome,
    pub trace: AnnealTrace,
}

/// Best-of-`n_a` search around `theta` for a point with a higher minimum
/// pairwise domain-gradient similarity, subject to the loss condition of
/// `cfg.mode`. Every candidate is `theta + u`, with `theta` fixed for the
/// whole search. Returns the last accepted candidate, or `theta` unchanged.
pub fn gga_anneal(
    model: &Model,
    theta: &ParamVector,
    composite: &CompositeMinibatch,
    cfg: &AnnealConfig,
    weight_decay: f64,
    stream: CandidateStream,
) -> Result<AnnealOutcome> {
    cfg.validate()?;
    let base = grad_report(model, theta, composite, weight_decay)?;
    let evaluate = |a: usize| -> Result<(f64, f64)> {
        let cand = stream.candidate(theta, a, cfg.rho);
        let r = grad_report(model, &cand, composite, weight_decay)?;
        Ok((r.min_sim, r.mean_loss()))
    };
    let scores: Vec<(f64, f64)> = if cfg.parallel {
        (0..cfg.candidates)
            .into_par_iter()
            .map(evaluate)
            .collect::<Result<_>>()?
    } else {
        (0..cfg.candidates).map(evaluate).collect::<Result<_>>()?
    };

    let (mut sim, mut loss) = (base.min_sim, base.mean_loss());
    let mut best: Option<usize> = None;
    let mut candidates = Vec::with_capacity(scores.len());
    for (a, &(cand_sim, cand_loss)) in scores.iter().enumerate() {
        let accepted = cfg
            .mode
            .accepts(cand_sim, cand_loss, sim, loss, cfg.tolerance);
        if accepted {
            sim = cand_sim;
            loss = cand_loss;
            best = Some(a);
        }
        candidates.push(CandidateRecord {
            sim: cand_sim,
            loss: cand_loss,
            accepted,
        });
    }

    let theta_next = match best {
        Some(a) => stream.candidate(theta, a, cfg.rho),
        None => theta.clone(),
    };
    Ok(AnnealOutcome {
        step: StepOutcome {
            theta_next,
            accepted_candidates: candidates.iter().filter(|c| c.accepted).count(),
            candidates_evaluated: candidates.len(),
            final_sim: sim,
            final_loss: loss,
        },
        trace: AnnealTrace {
            stream,
            baseline_sim: base.min_sim,
            baseline_loss: base.mean_loss(),
            candidates,
        },
    })
}

/// Gradient of the composite loss: the unweighted mean of per-domain gradients.
pub fn total_gradient(
    model: &Model,
    theta: &ParamVector,
    composite: &CompositeMinibatch,
    weight_decay: f64,
) -> Result<ParamVector> {
    if composite.num_domains() == 0 {
        return Err(LabError::Domain("empty composite minibatch".into()));
    }
    let (_, grads) = per_domain(model, theta, composite, weight_decay)?;
    ParamVector::mean_of(&grads)
}

/// Noisy descent direction `∇ℒ + α·ξ` with `α = γ(1 − mean_sim)` and `ξ`
/// elementwise uniform. Returns the direction and `α`.
pub fn ggal_direction<R: Rng + ?Sized>(
    report: &GradReport,
    cfg: &GgaLConfig,
    rng: &mut R,
) -> (ParamVector, f64) {
    let alpha = cfg.alpha(report.mean_sim);
    let mut direction = report.mean_grad();
    let offset = if cfg.centered { 0.5 } else { 0.0 };
    let noise: Vec<f64> = (0..direction.len())
        .map(|_| rng.random::<f64>() - offset)
        .collect();
    if alpha != 0.0 {
        direction.axpy(alpha, &ParamVector::new(noise));
    }
    (direction, alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GgaLOutcome {
    pub step: StepOutcome,
    pub alpha: f64,
    pub report: GradReport,
}

/// One noisy SGD step `θ − η(∇ℒ + α·ξ)`.
pub fn gga_l_step<R: Rng + ?Sized>(
    model: &Model,
    theta: &ParamVector,
    composite: &CompositeMinibatch,
    cfg: &GgaLConfig,
    lr: f64,
    weight_decay: f64,
    rng: &mut R,
) -> Result<GgaLOutcome> {
    cfg.validate()?;
    let report = grad_report(model, theta, composite, weight_decay)?;
    let (direction, alpha) = ggal_direction(&report, cfg, rng);
    let theta_next = sgd_step(theta, &direction, lr)?;
    Ok(GgaLOutcome {
        step: StepOutcome {
            theta_next,
            accepted_candidates: 0,
            candidates_evaluated: 0,
            final_sim: report.mean_sim,
            final_loss: report.mean_loss(),
        },
        alpha,
        report,
    })
}
