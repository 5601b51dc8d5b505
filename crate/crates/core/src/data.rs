//! Synthetic multi-domain datasets, composite minibatch sampling and
//! leave-one-domain-out splits.

use std::fmt;
use std::io::Write;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainRole {
    Source,
    Target,
}

impl fmt::Display for DomainRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainRole::Source => "source",
            DomainRole::Target => "target",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub name: String,
    pub role: DomainRole,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacked features and labels of several domains.
pub type Pooled = (Array2<f64>, Vec<usize>);

/// Labeled samples partitioned into named domains, each tagged source or target.
/// Domain order is fixed at construction and drives every iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domains: Vec<Domain>,
}

impl DomainDataset {
    pub fn new(domains: Vec<Domain>) -> Result<Self> {
        let width = domains
            .first()
            .map(|d| d.features.ncols())
            .ok_or_else(|| LabError::Config("dataset has no domains".into()))?;
        for d in &domains {
            if d.is_empty() {
                return Err(LabError::Domain(format!("domain '{}' is empty", d.name)));
            }
            if d.features.nrows() != d.labels.len() {
                return Err(LabError::shape(
                    format!("{} label rows in '{}'", d.features.nrows(), d.name),
                    d.labels.len(),
                ));
            }
            if d.features.ncols() != width {
                return Err(LabError::shape(
                    format!("feature width {width}"),
                    format!("width {} in '{}'", d.features.ncols(), d.name),
                ));
            }
        }
        Ok(DomainDataset { domains })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn feature_dim(&self) -> usize {
        self.domains[0].features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.domains
            .iter()
            .flat_map(|d| d.labels.iter())
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn total_samples(&self) -> usize {
        self.domains.iter().map(Domain::len).sum()
    }

    /// Indices of source domains, in dataset order.
    pub fn source_indices(&self) -> Vec<usize> {
        self.indices_with(DomainRole::Source)
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.indices_with(DomainRole::Target)
    }

    fn indices_with(&self, role: DomainRole) -> Vec<usize> {
        self.domains
            .iter()
            .enumerate()
            .filter(|(_, d)| d.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    /// Pools every domain with `role` into one feature matrix and label list.
    pub fn pooled(&self, role: DomainRole) -> Option<Pooled> {
        pool(self.domains.iter().filter(|d| d.role == role))
    }

    /// Copy of the dataset with domain `target` as the only target and every
    /// other domain as a source.
    pub fn with_target(&self, target: usize) -> Result<DomainDataset> {
        if target >= self.domains.len() {
            return Err(LabError::Config(format!(
                "target index {target} out of range for {} domains",
                self.domains.len()
            )));
        }
        let mut out = self.clone();
        for (i, d) in out.domains.iter_mut().enumerate() {
            d.role = if i == target {
                DomainRole::Target
            } else {
                DomainRole::Source
            };
        }
        Ok(out)
    }

    /// Holds out `fraction` of every source domain. Returns the remaining
    /// training dataset (targets untouched) and the pooled held-out samples.
    pub fn split_sources<R: Rng + ?Sized>(
        &self,
        fraction: f64,
        rng: &mut R,
    ) -> Result<(DomainDataset, Option<Pooled>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(LabError::Config(format!(
                "validation fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let mut train = Vec::with_capacity(self.domains.len());
        let mut held = Vec::new();
        for d in &self.domains {
            if d.role == DomainRole::Target {
                train.push(d.clone());
                continue;
            }
            let n = d.len();
            let n_val = ((n as f64 * fraction).floor() as usize).min(n - 1);
            let perm = index::sample(rng, n, n).into_vec();
            let (val_idx, train_idx) = perm.split_at(n_val);
            train.push(d.select(train_idx));
            if !val_idx.is_empty() {
                held.push(d.select(val_idx));
            }
        }
        Ok((DomainDataset::new(train)?, pool(held.iter())))
    }

    /// Writes the CSV layout `x1..xn,label,domain,role`, one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (1..=self.feature_dim())
            .map(|i| format!("x{i}"))
            .chain(["label", "domain", "role"].map(String::from))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for d in &self.domains {
            for (row, label) in d.features.rows().into_iter().zip(&d.labels) {
                let mut line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                line.push(label.to_string());
                line.push(d.name.clone());
                line.push(d.role.to_string());
                writeln!(out, "{}", line.join(","))?;
            }
        }
        Ok(())
    }
}

impl Domain {
    fn select(&self, rows: &[usize]) -> Domain {
        Domain {
            name: self.name.clone(),
            role: self.role,
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn pool<'a>(domains: impl Iterator<Item = &'a Domain>) -> Option<(Array2<f64>, Vec<usize>)> {
    let parts: Vec<&Domain> = domains.collect();
    if parts.is_empty() {
        return None;
    }
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|d| d.features.view()).collect();
    let features = concatenate(Axis(0), &views).expect("equal widths checked at construction");
    let labels = parts
        .iter()
        .flat_map(|d| d.labels.iter().copied())
        .collect();
    Some((features, labels))
}

/// Two-feature Gaussian toy: class means per source domain, plus a shifted
/// held-out target domain. Every cell is isotropic with standard deviation `sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianToyConfig {
    /// `source_means[d][y]` is the mean of class `y` in source domain `d`.
    pub source_means: Vec<Vec<Vec<f64>>>,
    /// `target_means[y]` is the mean of class `y` in the target domain.
    pub target_means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub n_per_cell: usize,
    /// Total target samples, split as evenly as possible across classes.
    pub target_count: usize,
}

impl Default for GaussianToyConfig {
    fn default() -> Self {
        GaussianToyConfig {
            source_means: vec![
                vec![vec![-2.5, -2.5], vec![2.5, -2.5]],
                vec![vec![-2.5, 2.5], vec![2.5, 2.5]],
            ],
            target_means: vec![vec![-2.5, -7.5], vec![2.5, -7.5]],
            sigma: 0.5,
            n_per_cell: 200,
            target_count: 400,
        }
    }
}

impl GaussianToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(LabError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.source_means.is_empty() || self.n_per_cell == 0 {
            return Err(LabError::Config("toy dataset needs source cells".into()));
        }
        let classes = self.target_means.len();
        if classes < 2 || self.target_count < classes {
            return Err(LabError::Config(
                "toy target needs at least two classes and one sample per class".into(),
            ));
        }
        let dim = self.target_means[0].len();
        let all_means = self.source_means.iter().flatten().chain(&self.target_means);
        for m in all_means {
            if m.len() != dim || dim == 0 || m.iter().any(|v| !v.is_finite()) {
                return Err(LabError::Config(format!("invalid toy mean {m:?}")));
            }
        }
        if self.source_means.iter().any(|d| d.len() != classes) {
            return Err(LabError::Config(
                "every toy domain must list one mean per class".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian_cell<R: Rng>(rng: &mut R, mean: &[f64], sigma: f64, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, mean.len()));
    for mut row in out.rows_mut() {
        for (v, m) in row.iter_mut().zip(mean) {
            let z: f64 = StandardNormal.sample(rng);
            *v = m + sigma * z;
        }
    }
    out
}

/// Samples the Gaussian toy. Source domains are named `source-1`, `source-2`,
/// ..., the held-out domain `target`. Class `y` in the config maps to label `y`.
pub fn make_gaussian_toy(cfg: &GaussianToyConfig, seed: u64) -> Result<DomainDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = cfg.target_means.len();
    let mut domains = Vec::with_capacity(cfg.source_means.len() + 1);

    let mut build = |name: String, role, means: &[Vec<f64>], counts: &[usize]| {
        let cells: Vec<Array2<f64>> = means
            .iter()
            .zip(counts)
            .map(|(m, &n)| gaussian_cell(&mut rng, m, cfg.sigma, n))
            .collect();
        let views: Vec<_> = cells.iter().map(|c| c.view()).collect();
        let labels = counts
            .iter()
            .enumerate()
            .flat_map(|(y, &n)| std::iter::repeat_n(y, n))
            .collect();
        Domain {
            name,
            role,
            features: concatenate(Axis(0), &views).expect("equal widths"),
            labels,
        }
    };

    for (d, means) in cfg.source_means.iter().enumerate() {
        let counts = vec![cfg.n_per_cell; classes];
        domains.push(build(
            format!("source-{}", d + 1),
            DomainRole::Source,
            means,
            &counts,
        ));
    }
    let counts: Vec<usize> = (0..classes)
        .map(|y| cfg.target_count / classes + usize::from(y < cfg.target_count % classes))
        .collect();
    domains.push(build(
        "target".into(),
        DomainRole::Target,
        &cfg.target_means,
        &counts,
    ));
    DomainDataset::new(domains)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingMode {
    Linear,
    TanhMixed,
}

/// Latent-variable generator: a class latent `z_y ~ N(class_mean, I)`, a
/// domain latent `z_d ~ N(domain_mean, I)` and noise `e ~ N(0, I)` are mixed
/// into observations `x = A z_y + B z_d + C e` (optionally through `tanh`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerativeConfig {
    pub class_priors: Vec<f64>,
    pub domain_priors: Vec<f64>,
    pub class_means: Vec<Vec<f64>>,
    pub domain_means: Vec<Vec<f64>>,
    pub noise_dim: usize,
    pub output_dim: usize,
    pub mixing: MixingMode,
    pub mixing_seed: u64,
    /// Multiplies the domain mixing matrix `B`; zero removes the domain factor.
    pub domain_scale: f64,
    /// Multiplies the noise mixing matrix `C`.
    pub noise_scale: f64,
    /// Draw exactly `n_per_domain` samples per domain instead of sampling
    /// domain ids from `domain_priors`.
    pub stratified: bool,
    /// Indices of domains tagged as targets; the rest are sources.
    pub target_domains: Vec<usize>,
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        GenerativeConfig {
            class_priors: vec![0.5, 0.5],
            domain_priors: vec![1.0 / 3.0; 3],
            class_means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            domain_means: vec![vec![-3.0, 0.0], vec![0.0, 0.0], vec![3.0, 0.0]],
            noise_dim: 2,
            output_dim: 4,
            mixing: MixingMode::Linear,
            mixing_seed: 0,
            domain_scale: 1.0,
            noise_scale: 0.5,
            stratified: true,
            target_domains: vec![2],
        }
    }
}

impl GenerativeConfig {
    pub fn num_classes(&self) -> usize {
        self.class_priors.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_priors("class", &self.class_priors)?;
        check_priors("domain", &self.domain_priors)?;
        if self.class_means.len() != self.num_classes() {
            return Err(LabError::Config(
                "one class mean per class prior required".into(),
            ));
        }
        if self.domain_means.len() != self.num_domains() {
            return Err(LabError::Config(
                "one domain mean per domain prior required".into(),
            ));
        }
        let consistent = |ms: &[Vec<f64>]| {
            let d = ms[0].len();
            d > 0
                && ms
                    .iter()
                    .all(|m| m.len() == d && m.iter().all(|v| v.is_finite()))
        };
        if !consistent(&self.class_means) || !consistent(&self.domain_means) {
            return Err(LabError::Config(
                "latent means must be finite with equal dims".into(),
            ));
        }
        if self.output_dim == 0 {
            return Err(LabError::Config("output_dim must be positive".into()));
        }
        if let Some(&t) = self
            .target_domains
            .iter()
            .find(|&&t| t >= self.num_domains())
        {
            return Err(LabError::Config(format!("target domain {t} out of range")));
        }
        Ok(())
    }
}

fn check_priors(what: &str, p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(LabError::Config(format!("need at least two {what} priors")));
    }
    if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(LabError::Config(format!(
            "{what} priors must be nonnegative and sum to 1, got {p:?}"
        )));
    }
    Ok(())
}

fn mixing_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let norm = scale / (cols.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        norm * z
    })
}

/// Samples the latent-variable generator. Domains are named `domain-0` ...
/// With `stratified`, each domain gets exactly `n_per_domain` samples;
/// otherwise `n_per_domain * L` domain ids are drawn from the domain priors.
pub fn make_generative(
    cfg: &GenerativeConfig,
    n_per_domain: usize,
    seed: u64,
) -> Result<DomainDataset> {
    cfg.validate()?;
    if n_per_domain == 0 {
        return Err(LabError::Config("n_per_domain must be positive".into()));
    }
    let mut mix_rng = ChaCha8Rng::seed_from_u64(cfg.mixing_seed);
    let (dy, dd) = (cfg.class_means[0].len(), cfg.domain_means[0].len());
    let a = mixing_matrix(&mut mix_rng, cfg.output_dim, dy, 1.0);
    let b = mixing_matrix(&mut mix_rng, cfg.output_dim, dd, cfg.domain_scale);
    let c = mixing_matrix(&mut mix_rng, cfg.output_dim, cfg.noise_dim, cfg.noise_scale);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_dist = WeightedIndex::new(&cfg.class_priors)
        .map_err(|e| LabError::Config(format!("class priors: {e}")))?;
    let n_domains = cfg.num_domains();
    let domain_ids: Vec<usize> = if cfg.stratified {
        (0..n_domains)
            .flat_map(|d| std::iter::repeat_n(d, n_per_domain))
            .collect()
    } else {
        let dist = WeightedIndex::new(&cfg.domain_priors)
            .map_err(|e| LabError::Config(format!("domain priors: {e}")))?;
        (0..n_per_domain * n_domains)
            .map(|_| dist.sample(&mut rng))
            .collect()
    };

    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_domains];
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); n_domains];
    for &d in &domain_ids {
        let y = class_dist.sample(&mut rng);
        let latent = |rng: &mut ChaCha8Rng, mean: &[f64]| -> Vec<f64> {
            mean.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + z
                })
                .collect()
        };
        let zy = latent(&mut rng, &cfg.class_means[y]);
        let zd = latent(&mut rng, &cfg.domain_means[d]);
        let e = latent(&mut rng, &vec![0.0; cfg.noise_dim]);
        let x: Vec<f64> = (0..cfg.output_dim)
            .map(|o| {
                let v = a.row(o).dot(&ndarray::aview1(&zy))
                    + b.row(o).dot(&ndarray::aview1(&zd))
                    + c.row(o).dot(&ndarray::aview1(&e));
                match cfg.mixing {
                    MixingMode::Linear => v,
                    MixingMode::TanhMixed => v.tanh(),
                }
            })
            .collect();
        rows[d].push(x);
        labels[d].push(y);
    }

    let domains = rows
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(d, (r, l))| {
            let flat: Vec<f64> = r.into_iter().flatten().collect();
            let features = Array2::from_shape_vec((l.len(), cfg.output_dim), flat)
                .expect("rows have output_dim entries");
            Domain {
                name: format!("domain-{d}"),
                role: if cfg.target_domains.contains(&d) {
                    DomainRole::Target
                } else {
                    DomainRole::Source
                },
                features,
                labels: l,
            }
        })
        .collect();
    DomainDataset::new(domains)
}

/// One source domain's share of a composite minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBatch {
    /// Index of the domain in its dataset.
    pub domain: usize,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Per-domain sub-batches of equal size `b`, in source-domain order.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeMinibatch {
    pub parts: Vec<SubBatch>,
}

impl CompositeMinibatch {
    pub fn num_domains(&self) -> usize {
        self.parts.len()
    }

    pub fn total_samples(&self) -> usize {
        self.parts.iter().map(|p| p.labels.len()).sum()
    }

    /// All sub-batches stacked in domain order.
    pub fn concatenated(&self) -> (Array2<f64>, Vec<usize>) {
        let views: Vec<_> = self.parts.iter().map(|p| p.features.view()).collect();
        let x = concatenate(Axis(0), &views).expect("equal widths");
        let y = self
            .parts
            .iter()
            .flat_map(|p| p.labels.iter().copied())
            .collect();
        (x, y)
    }
}

/// Draws `b` samples from every source domain: without replacement when the
/// domain holds at least `b` samples, with replacement otherwise.
pub fn sample_composite<R: Rng + ?Sized>(
    dataset: &DomainDataset,
    b: usize,
    rng: &mut R,
) -> Result<CompositeMinibatch> {
    if b == 0 {
        return Err(LabError::Config(
            "per-domain batch size must be positive".into(),
        ));
    }
    let parts = dataset
        .source_indices()
        .into_iter()
        .map(|i| {
            let d = &dataset.domains()[i];
            let n = d.len();
            let rows: Vec<usize> = if n >= b {
                index::sample(rng, n, b).into_vec()
            } else {
                (0..b).map(|_| rng.random_range(0..n)).collect()
            };
            let sel = d.select(&rows);
            SubBatch {
                domain: i,
                features: sel.features,
                labels: sel.labels,
            }
        })
        .collect();
    Ok(CompositeMinibatch { parts })
}

/// One leave-one-domain-out split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub target: usize,
    pub sources: Vec<usize>,
}

/// Split `i` holds out domain `i` and trains on the rest.
pub fn leave_one_out_splits(dataset: &DomainDataset) -> Result<Vec<Split>> {
    let n = dataset.domains().len();
    if n < 2 {
        return Err(LabError::Config(format!(
            "leave-one-domain-out needs at least 2 domains, got {n}"
        )));
    }
    Ok((0..n)
        .map(|target| Split {
            target,
            sources: (0..n).filter(|&i| i != target).collect(),
        })
        .collect())
}
