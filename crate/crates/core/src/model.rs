//! Small differentiable classifiers: polynomial logistic regression and dense MLPs.
//!
//! Both families share one parameter layout convention: a flat [`ParamVector`].
//!
//! * Poly-logistic, binary: one weight per monomial, a single sigmoid logit.
//! * Poly-logistic, `K > 2` classes: `K` rows of monomial weights (class-major).
//! * MLP: for each layer, the weight matrix (`out x in`, row-major) followed by
//!   its bias. Hidden layers use the configured activation, the output layer
//!   feeds a softmax.
//!
//! Loss is mean cross-entropy plus `λ·½‖θ‖²`.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    PolyLogistic,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Architecture description. `degree` is used by poly-logistic only,
/// `layer_widths` and `activation` by the MLP only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub degree: usize,
    pub input_dim: usize,
    /// Full layer widths including input and output, e.g. `[2, 8, 2]`.
    pub layer_widths: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    /// Degree-4 binary polynomial logistic regression in the plane.
    fn default() -> Self {
        ModelSpec::poly_logistic(2, 4, 2)
    }
}

impl ModelSpec {
    pub fn poly_logistic(input_dim: usize, degree: usize, num_classes: usize) -> Self {
        ModelSpec {
            family: ModelFamily::PolyLogistic,
            degree,
            input_dim,
            layer_widths: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    /// MLP whose input and class counts are taken from the first and last widths.
    pub fn mlp(layer_widths: Vec<usize>, activation: Activation) -> Self {
        ModelSpec {
            family: ModelFamily::Mlp,
            degree: 1,
            input_dim: layer_widths.first().copied().unwrap_or(0),
            num_classes: layer_widths.last().copied().unwrap_or(0),
            layer_widths,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(LabError::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(LabError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        match self.family {
            ModelFamily::PolyLogistic => {
                if self.degree < 1 {
                    return Err(LabError::Config(
                        "polynomial degree must be at least 1".into(),
                    ));
                }
            }
            ModelFamily::Mlp => {
                let w = &self.layer_widths;
                if w.len() < 2 {
                    return Err(LabError::Config(
                        "mlp needs at least an input and an output width".into(),
                    ));
                }
                if w.contains(&0) {
                    return Err(LabError::Config("mlp layer widths must be positive".into()));
                }
                if w[0] != self.input_dim || w[w.len() - 1] != self.num_classes {
                    return Err(LabError::Config(format!(
                        "mlp widths {:?} must start at input_dim {} and end at num_classes {}",
                        w, self.input_dim, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of monomial features `C(input_dim + degree, degree)`.
    pub fn num_features(&self) -> usize {
        let (n, d) = (self.input_dim, self.degree);
        // Multiplicative binomial, exact at each step.
        (1..=d).fold(1usize, |acc, k| acc * (n + k) / k)
    }

    pub fn num_params(&self) -> usize {
        match self.family {
            ModelFamily::PolyLogistic => self.num_features() * self.num_logits(),
            ModelFamily::Mlp => self
                .layer_widths
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
        }
    }

    /// Binary poly-logistic uses a single logit.
    fn num_logits(&self) -> usize {
        match (self.family, self.num_classes) {
            (ModelFamily::PolyLogistic, 2) => 1,
            _ => self.num_classes,
        }
    }
}

/// Exponent vectors of all monomials of total degree `<= degree`, ordered by
/// total degree, then lexicographically descending. The constant comes first.
pub fn monomial_exponents(input_dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == dim {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            fill(dim, remaining - e, prefix, out);
            prefix.pop();
        }
    }

    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        fill(
            input_dim,
            total,
            &mut Vec::with_capacity(input_dim),
            &mut out,
        );
    }
    out
}

/// A validated model architecture with precomputed feature basis.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    basis: Vec<Vec<u32>>,
    num_params: usize,
}

/// Initializes parameters for `spec`. Poly-logistic starts at zero, MLP weights
/// are drawn uniformly in `±sqrt(6 / (fan_in + fan_out))` with zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    Ok(Model::new(spec.clone())?.init_params(seed))
}

struct MlpTrace {
    pre: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let basis = match spec.family {
            ModelFamily::PolyLogistic => monomial_exponents(spec.input_dim, spec.degree),
            ModelFamily::Mlp => Vec::new(),
        };
        let num_params = spec.num_params();
        Ok(Model {
            spec,
            basis,
            num_params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn basis(&self) -> &[Vec<u32>] {
        &self.basis
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        match self.spec.family {
            ModelFamily::PolyLogistic => ParamVector::zeros(self.num_params),
            ModelFamily::Mlp => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut values = Vec::with_capacity(self.num_params);
                for w in self.spec.layer_widths.windows(2) {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for _ in 0..fan_in * fan_out {
                        values.push(rng.random_range(-limit..limit));
                    }
                    values.extend(std::iter::repeat_n(0.0, fan_out));
                }
                ParamVector::new(values)
            }
        }
    }

    fn features(&self, row: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|exps| {
                exps.iter()
                    .zip(row)
                    .map(|(&e, &x)| x.powi(e as i32))
                    .product()
            })
            .collect()
    }

    fn check_inputs(&self, theta: &ParamVector, x: &ArrayView2<f64>) -> Result<()> {
        theta.check_len(self.num_params, "parameter vector")?;
        if x.ncols() != self.spec.input_dim {
            return Err(LabError::shape(
                format!("{} feature columns", self.spec.input_dim),
                format!("{} columns", x.ncols()),
            ));
        }
        Ok(())
    }

    fn check_labels(&self, x: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        if x.nrows() == 0 {
            return Err(LabError::Domain("empty batch".into()));
        }
        if labels.len() != x.nrows() {
            return Err(LabError::shape(
                format!("{} labels", x.nrows()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(LabError::Domain(format!(
                "label {bad} outside [0, {})",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.spec.layer_widths.len());
        let mut at = 0;
        for w in self.spec.layer_widths.windows(2) {
            offsets.push(at);
            at += w[0] * w[1] + w[1];
        }
        offsets
    }

    fn mlp_forward(&self, theta: &[f64], offsets: &[usize], input: &[f64]) -> MlpTrace {
        let widths = &self.spec.layer_widths;
        let layers = widths.len() - 1;
        let mut pre = Vec::with_capacity(layers);
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &theta[offsets[l]..offsets[l] + n_in * n_out];
            let b = &theta[offsets[l] + n_in * n_out..offsets[l] + n_in * n_out + n_out];
            let a = &acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
                })
                .collect();
            if l + 1 < layers {
                acts.push(z.iter().map(|&v| self.spec.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        MlpTrace { pre, acts }
    }

    /// Backpropagates `d_logits` through one sample's trace. Accumulates
    /// parameter gradients into `grad` when given; returns the input gradient.
    fn mlp_backward(
        &self,
        theta: &[f64],
        offsets: &[usize],
        trace: &MlpTrace,
        d_logits: Vec<f64>,
        mut grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let widths = &self.spec.layer_widths;
        let mut delta = d_logits;
        for l in (0..widths.len() - 1).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let a = &trace.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                let base = offsets[l];
                for o in 0..n_out {
                    for i in 0..n_in {
                        g[base + o * n_in + i] += delta[o] * a[i];
                    }
                    g[base + n_in * n_out + o] += delta[o];
                }
            }
            let w = &theta[offsets[l]..offsets[l] + n_in * n_out];
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                for i in 0..n_in {
                    d_in[i] += w[o * n_in + i] * delta[o];
                }
            }
            if l > 0 {
                for (d, z) in d_in.iter_mut().zip(&trace.pre[l - 1]) {
                    *d *= self.spec.activation.derivative(*z);
                }
            }
            delta = d_in;
        }
        delta
    }

    /// Raw logits for one sample.
    fn logits(&self, theta: &[f64], offsets: &[usize], row: &[f64]) -> Vec<f64> {
        match self.spec.family {
            ModelFamily::PolyLogistic => {
                let phi = self.features(row);
                let f = phi.len();
                (0..self.spec.num_logits())
                    .map(|k| dot(&theta[k * f..(k + 1) * f], &phi))
                    .collect()
            }
            ModelFamily::Mlp => self
                .mlp_forward(theta, offsets, row)
                .pre
                .pop()
                .expect("mlp has an output layer"),
        }
    }

    /// Class probabilities, one row per sample.
    pub fn forward(&self, theta: &ParamVector, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(theta, &x)?;
        let k = self.spec.num_classes;
        let offsets = self.layer_offsets();
        let mut out = Array2::zeros((x.nrows(), k));
        for (n, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let z = self.logits(theta.as_slice(), &offsets, &row);
            let probs = if z.len() == 1 {
                let p = sigmoid(z[0]);
                vec![1.0 - p, p]
            } else {
                softmax(&z)
            };
            for (c, p) in probs.into_iter().enumerate() {
                out[[n, c]] = p;
            }
        }
        Ok(out)
    }

    /// Predicted classes; ties go to the lowest class index.
    pub fn predict(&self, theta: &ParamVector, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.check_inputs(theta, &x)?;
        let offsets = self.layer_offsets();
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let z = self.logits(theta.as_slice(), &offsets, &row.to_vec());
                if z.len() == 1 {
                    usize::from(z[0] > 0.0)
                } else {
                    argmax_first(&z)
                }
            })
            .collect())
    }

    /// Mean cross-entropy plus `λ·½‖θ‖²`.
    pub fn loss(
        &self,
        theta: &ParamVector,
        x: ArrayView2<f64>,
        labels: &[usize],
        weight_decay: f64,
    ) -> Result<f64> {
        Ok(self.evaluate(theta, x, labels, weight_decay, false)?.0)
    }

    /// Exact gradient of [`Model::loss`] with respect to `theta`.
    pub fn gradient(
        &self,
        theta: &ParamVector,
        x: ArrayView2<f64>,
        labels: &[usize],
        weight_decay: f64,
    ) -> Result<ParamVector> {
        Ok(self.loss_and_gradient(theta, x, labels, weight_decay)?.1)
    }

    pub fn loss_and_gradient(
        &self,
        theta: &ParamVector,
        x: ArrayView2<f64>,
        labels: &[usize],
        weight_decay: f64,
    ) -> Result<(f64, ParamVector)> {
        let (loss, grad) = self.evaluate(theta, x, labels, weight_decay, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn evaluate(
        &self,
        theta: &ParamVector,
        x: ArrayView2<f64>,
        labels: &[usize],
        weight_decay: f64,
        want_grad: bool,
    ) -> Result<(f64, Option<ParamVector>)> {
        self.check_inputs(theta, &x)?;
        self.check_labels(&x, labels)?;
        let th = theta.as_slice();
        let offsets = self.layer_offsets();
        let mut total = 0.0;
        let mut grad = want_grad.then(|| vec![0.0; self.num_params]);

        for (row, &y) in x.rows().into_iter().zip(labels) {
            let row = row.to_vec();
            match self.spec.family {
                ModelFamily::PolyLogistic => {
                    let phi = self.features(&row);
                    let f = phi.len();
                    if self.spec.num_logits() == 1 {
                        let z = dot(th, &phi);
                        let target = y as f64;
                        total += softplus(z) - target * z;
                        if let Some(g) = grad.as_mut() {
                            let dz = sigmoid(z) - target;
                            for (gi, p) in g.iter_mut().zip(&phi) {
                                *gi += dz * p;
                            }
                        }
                    } else {
                        let z: Vec<f64> = (0..self.spec.num_classes)
                            .map(|k| dot(&th[k * f..(k + 1) * f], &phi))
                            .collect();
                        total += log_sum_exp(&z) - z[y];
                        if let Some(g) = grad.as_mut() {
                            let mut dz = softmax(&z);
                            dz[y] -= 1.0;
                            for (k, d) in dz.iter().enumerate() {
                                for (gi, p) in g[k * f..(k + 1) * f].iter_mut().zip(&phi) {
                                    *gi += d * p;
                                }
                            }
                        }
                    }
                }
                ModelFamily::Mlp => {
                    let trace = self.mlp_forward(th, &offsets, &row);
                    let z = trace.pre.last().expect("output layer");
                    total += log_sum_exp(z) - z[y];
                    if let Some(g) = grad.as_mut() {
                        let mut dz = softmax(z);
                        dz[y] -= 1.0;
                        self.mlp_backward(th, &offsets, &trace, dz, Some(g));
                    }
                }
            }
        }

        let n = x.nrows() as f64;
        let sq_norm: f64 = th.iter().map(|v| v * v).sum();
        let loss = total / n + 0.5 * weight_decay * sq_norm;
        let grad = grad.map(|mut g| {
            for (gi, t) in g.iter_mut().zip(th) {
                *gi = *gi / n + weight_decay * t;
            }
            ParamVector::new(g)
        });
        Ok((loss, grad))
    }

    /// Central-difference approximation of [`Model::gradient`].
    pub fn fd_gradient(
        &self,
        theta: &ParamVector,
        x: ArrayView2<f64>,
        labels: &[usize],
        weight_decay: f64,
        h: f64,
    ) -> Result<ParamVector> {
        self.check_inputs(theta, &x)?;
        self.check_labels(&x, labels)?;
        let mut err = None;
        let g = central_difference(
            |p| {
                self.loss(&ParamVector::new(p.to_vec()), x, labels, weight_decay)
                    .unwrap_or_else(|e| {
                        err = Some(e);
                        f64::NAN
                    })
            },
            theta.as_slice(),
            h,
        )?;
        match err {
            Some(e) => Err(e),
            None => Ok(g),
        }
    }

    /// Gradient of the decision logit with respect to the input features. The
    /// decision logit is the single sigmoid logit for binary poly-logistic and
    /// `z_1 - z_0` for softmax heads.
    pub fn logit_input_gradient(&self, theta: &ParamVector, row: &[f64]) -> Result<Vec<f64>> {
        theta.check_len(self.num_params, "parameter vector")?;
        if row.len() != self.spec.input_dim {
            return Err(LabError::shape(self.spec.input_dim, row.len()));
        }
        let th = theta.as_slice();
        match self.spec.family {
            ModelFamily::PolyLogistic => {
                let f = self.basis.len();
                let weights: Vec<f64> = if self.spec.num_logits() == 1 {
                    th.to_vec()
                } else {
                    (0..f).map(|m| th[f + m] - th[m]).collect()
                };
                Ok((0..self.spec.input_dim)
                    .map(|i| {
                        self.basis
                            .iter()
                            .zip(&weights)
                            .filter(|(exps, _)| exps[i] > 0)
                            .map(|(exps, w)| {
                                let d: f64 = exps
                                    .iter()
                                    .zip(row)
                                    .enumerate()
                                    .map(|(j, (&e, &xj))| {
                                        if j == i {
                                            e as f64 * xj.powi(e as i32 - 1)
                                        } else {
                                            xj.powi(e as i32)
                                        }
                                    })
                                    .product();
                                w * d
                            })
                            .sum()
                    })
                    .collect())
            }
            ModelFamily::Mlp => {
                let offsets = self.layer_offsets();
                let trace = self.mlp_forward(th, &offsets, row);
                let mut d = vec![0.0; self.spec.num_classes];
                d[0] = -1.0;
                d[1] = 1.0;
                Ok(self.mlp_backward(th, &offsets, &trace, d, None))
            }
        }
    }
}

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` per coordinate.
pub fn central_difference<F>(mut f: F, theta: &[f64], h: f64) -> Result<ParamVector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(LabError::Precondition(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(ParamVector::new(out))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax_first(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}
