//! Per-domain gradients and their pairwise cosine similarities.

use crate::data::CompositeMinibatch;
use crate::error::{LabError, Result};
use crate::model::Model;
use crate::params::ParamVector;

/// Norms below this carry no directional information; cosine returns 0.
pub const MIN_GRAD_NORM: f64 = 1e-30;

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_len(b.len(), "gradient")?;
    let (na, nb) = (a.norm(), b.norm());
    if na < MIN_GRAD_NORM || nb < MIN_GRAD_NORM {
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity of one unordered domain pair, `i < j` (positions in the composite).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSimilarity {
    pub i: usize,
    pub j: usize,
    pub sim: f64,
}

/// Gradient statistics of one composite minibatch at one parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Gradient of each sub-batch's loss, in composite order.
    pub domain_grads: Vec<ParamVector>,
    pub per_domain_losses: Vec<f64>,
    pub pairwise_sims: Vec<PairSimilarity>,
    pub min_sim: f64,
    pub mean_sim: f64,
}

impl GradReport {
    /// Builds the report from per-domain losses and gradients.
    pub fn from_parts(losses: Vec<f64>, grads: Vec<ParamVector>) -> Result<Self> {
        if grads.len() < 2 {
            return Err(LabError::Precondition(format!(
                "pairwise gradient similarity needs at least 2 domains, got {}",
                grads.len()
            )));
        }
        let mut pairs = Vec::with_capacity(grads.len() * (grads.len() - 1) / 2);
        for i in 0..grads.len() {
            for j in i + 1..grads.len() {
                pairs.push(PairSimilarity {
                    i,
                    j,
                    sim: cosine(&grads[i], &grads[j])?,
                });
            }
        }
        let min_sim = pairs.iter().map(|p| p.sim).fold(f64::INFINITY, f64::min);
        let mean_sim = pairs.iter().map(|p| p.sim).sum::<f64>() / pairs.len() as f64;
        Ok(GradReport {
            domain_grads: grads,
            per_domain_losses: losses,
            pairwise_sims: pairs,
            min_sim,
            mean_sim,
        })
    }

    pub fn max_sim(&self) -> f64 {
        self.pairwise_sims
            .iter()
            .map(|p| p.sim)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean of the per-domain losses, i.e. the loss of the whole composite.
    pub fn mean_loss(&self) -> f64 {
        self.per_domain_losses.iter().sum::<f64>() / self.per_domain_losses.len() as f64
    }

    /// Mean of the per-domain gradients, i.e. the gradient of the whole composite.
    pub fn mean_grad(&self) -> ParamVector {
        ParamVector::mean_of(&self.domain_grads).expect("report holds at least two gradients")
    }
}

/// Computes every sub-batch's loss and gradient at `theta`, then pairwise similarities.
pub fn grad_report(
    model: &Model,
    theta: &ParamVector,
    composite: &CompositeMinibatch,
    weight_decay: f64,
) -> Result<GradReport> {
    if composite.num_domains() < 2 {
        return Err(LabError::Precondition(format!(
            "gradient report needs at least 2 source domains, got {}",
            composite.num_domains()
        )));
    }
    let (losses, grads) = per_domain(model, theta, composite, weight_decay)?;
    GradReport::from_parts(losses, grads)
}

pub(crate) fn per_domain(
    model: &Model,
    theta: &ParamVector,
    composite: &CompositeMinibatch,
    weight_decay: f64,
) -> Result<(Vec<f64>, Vec<ParamVector>)> {
    let mut losses = Vec::with_capacity(composite.num_domains());
    let mut grads = Vec::with_capacity(composite.num_domains());
    for part in &composite.parts {
        let (l, g) =
            model.loss_and_gradient(theta, part.features.view(), &part.labels, weight_decay)?;
        losses.push(l);
        grads.push(g);
    }
    Ok((losses, grads))
}
