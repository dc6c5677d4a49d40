//! Gaussian mixtures seeded from codebook-matched vectors and refined by EM.

use std::f64::consts::PI;
use std::io::Write;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::DesignMatrix;
use crate::error::{PppError, Result};
use crate::som::CodebookMatchSet;

/// Responsibility mass below which a component is dropped.
pub const MIN_COMPONENT_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Full,
    Diagonal,
}

impl CovarianceMode {
    /// Diagonal above 50 dimensions, full otherwise.
    pub fn for_dim(dim: usize) -> Self {
        if dim > 50 {
            CovarianceMode::Diagonal
        } else {
            CovarianceMode::Full
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    /// Row-major `d x d` matrix.
    Full(Vec<f64>),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Covariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub components: Vec<GaussianComponent>,
    pub covariance_mode: CovarianceMode,
    pub reg_epsilon: f64,
}

/// Per-row mixture evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureScores {
    pub log_density: Vec<f64>,
    pub density: Vec<f64>,
    /// Density divided by the maximum density over the evaluated rows.
    pub normalized: Vec<f64>,
}

/// Factored component ready for repeated density evaluation.
enum Factor {
    Full(Cholesky<f64, Dyn>),
    Diagonal(Vec<f64>),
}

struct Prepared<'a> {
    mean: &'a [f64],
    factor: Factor,
    /// `-(d/2) ln 2pi - (1/2) ln |Sigma|`
    log_norm: f64,
}

impl Prepared<'_> {
    fn logpdf(&self, x: &[f64]) -> f64 {
        let quad = match &self.factor {
            Factor::Diagonal(var) => x
                .iter()
                .zip(self.mean)
                .zip(var)
                .map(|((a, m), v)| (a - m) * (a - m) / v)
                .sum::<f64>(),
            Factor::Full(chol) => {
                let diff = DVector::from_iterator(x.len(), x.iter().zip(self.mean).map(|(a, m)| a - m));
                let z = chol
                    .l_dirty()
                    .solve_lower_triangular(&diff)
                    .expect("cholesky factor has a positive diagonal");
                z.norm_squared()
            }
        };
        self.log_norm - 0.5 * quad
    }
}

fn prepare(comp: &GaussianComponent, index: usize) -> Result<Prepared<'_>> {
    let d = comp.mean.len();
    let half_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();
    match &comp.covariance {
        Covariance::Diagonal(var) => {
            if var.len() != d {
                return Err(PppError::Dimension {
                    expected: d,
                    actual: var.len(),
                });
            }
            if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(PppError::SingularCovariance { component: index });
            }
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            Ok(Prepared {
                mean: &comp.mean,
                factor: Factor::Diagonal(var.clone()),
                log_norm: -half_log_2pi - 0.5 * log_det,
            })
        }
        Covariance::Full(values) => {
            if values.len() != d * d {
                return Err(PppError::Dimension {
                    expected: d * d,
                    actual: values.len(),
                });
            }
            let m = DMatrix::from_row_slice(d, d, values);
            let chol = Cholesky::new(m).ok_or(PppError::SingularCovariance { component: index })?;
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            if !log_det.is_finite() {
                return Err(PppError::SingularCovariance { component: index });
            }
            Ok(Prepared {
                mean: &comp.mean,
                factor: Factor::Full(chol),
                log_norm: -half_log_2pi - 0.5 * log_det,
            })
        }
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Default ridge: `1e-6` times the mean column variance, floored at `1e-12`.
pub fn default_reg_epsilon(data: &DesignMatrix) -> f64 {
    let vars = data.column_variances();
    let mean = vars.iter().sum::<f64>() / vars.len() as f64;
    (1e-6 * mean).max(1e-12)
}

/// One component per unit with positive prior, centered at the unit's
/// matched row, sharing the data's diagonal covariance plus the ridge.
pub fn init_gmm_from_codebook(
    matches: &CodebookMatchSet,
    data: &DesignMatrix,
    mode: CovarianceMode,
    reg_epsilon: f64,
) -> Result<GaussianMixture> {
    if matches.is_empty() {
        return Err(PppError::DegenerateModel("empty codebook match set".into()));
    }
    let d = data.n_features();
    if let Some(v) = matches.matched_vectors.iter().find(|v| v.len() != d) {
        return Err(PppError::Dimension {
            expected: d,
            actual: v.len(),
        });
    }
    let mass: f64 = matches.priors.iter().filter(|&&p| p > 0.0).sum();
    if mass <= 0.0 {
        return Err(PppError::DegenerateModel("all codebook priors are zero".into()));
    }
    let diag: Vec<f64> = data.column_variances().iter().map(|v| v + reg_epsilon).collect();
    let covariance = match mode {
        CovarianceMode::Diagonal => Covariance::Diagonal(diag),
        CovarianceMode::Full => {
            let mut full = vec![0.0; d * d];
            for (j, v) in diag.iter().enumerate() {
                full[j * d + j] = *v;
            }
            Covariance::Full(full)
        }
    };
    let components = matches
        .priors
        .iter()
        .zip(&matches.matched_vectors)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, v)| GaussianComponent {
            weight: p / mass,
            mean: v.clone(),
            covariance: covariance.clone(),
        })
        .collect();
    Ok(GaussianMixture {
        components,
        covariance_mode: mode,
        reg_epsilon,
    })
}

/// Full log-density `-(d/2) ln 2pi - (1/2) ln|Sigma| - (1/2) (x-mu)' Sigma^-1 (x-mu)`.
pub fn component_logpdf(comp: &GaussianComponent, x: &[f64]) -> Result<f64> {
    if x.len() != comp.mean.len() {
        return Err(PppError::Dimension {
            expected: comp.mean.len(),
            actual: x.len(),
        });
    }
    Ok(prepare(comp, 0)?.logpdf(x))
}

impl GaussianMixture {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    fn prepared(&self) -> Result<Vec<Prepared<'_>>> {
        self.components.iter().enumerate().map(|(k, c)| prepare(c, k)).collect()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(PppError::Dimension {
                expected: self.dim(),
                actual: d,
            });
        }
        Ok(())
    }

    /// `ln sum_k pi_k N(x | mu_k, Sigma_k)` for each row.
    pub fn row_log_densities(&self, data: &DesignMatrix) -> Result<Vec<f64>> {
        self.check_dim(data.n_features())?;
        let prepared = self.prepared()?;
        let log_w: Vec<f64> = self.components.iter().map(|c| c.weight.ln()).collect();
        let mut terms = vec![0.0; prepared.len()];
        Ok(data
            .rows()
            .map(|x| {
                for (t, (p, lw)) in terms.iter_mut().zip(prepared.iter().zip(&log_w)) {
                    *t = lw + p.logpdf(x);
                }
                log_sum_exp(&terms)
            })
            .collect())
    }

    /// Log of the mixture density at a single point.
    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let prepared = self.prepared()?;
        let terms: Vec<f64> = prepared
            .iter()
            .zip(&self.components)
            .map(|(p, c)| c.weight.ln() + p.logpdf(x))
            .collect();
        Ok(log_sum_exp(&terms))
    }
}

/// Mixture density, accumulated in log space with a max shift.
pub fn mixture_pdf(g: &GaussianMixture, x: &[f64]) -> Result<f64> {
    Ok(g.logpdf(x)?.exp())
}

pub fn log_likelihood(g: &GaussianMixture, data: &DesignMatrix) -> Result<f64> {
    Ok(g.row_log_densities(data)?.iter().sum())
}

/// E-step: `r_ik = pi_k N_k(x_i) / sum_j pi_j N_j(x_i)`.
pub fn responsibilities(g: &GaussianMixture, data: &DesignMatrix) -> Result<Vec<Vec<f64>>> {
    Ok(e_step(g, data)?.0)
}

fn e_step(g: &GaussianMixture, data: &DesignMatrix) -> Result<(Vec<Vec<f64>>, f64)> {
    g.check_dim(data.n_features())?;
    let prepared = g.prepared()?;
    let log_w: Vec<f64> = g.components.iter().map(|c| c.weight.ln()).collect();
    let mut ll = 0.0;
    let resp = data
        .rows()
        .map(|x| {
            let mut terms: Vec<f64> = prepared.iter().zip(&log_w).map(|(p, lw)| lw + p.logpdf(x)).collect();
            let lse = log_sum_exp(&terms);
            ll += lse;
            for t in terms.iter_mut() {
                *t = (*t - lse).exp();
            }
            terms
        })
        .collect();
    Ok((resp, ll))
}

/// Result of one EM iteration.
#[derive(Debug, Clone)]
pub struct EmStep {
    pub mixture: GaussianMixture,
    pub log_likelihood: f64,
    /// Indices (in the input mixture) of components dropped for lack of mass.
    pub dropped: Vec<usize>,
}

pub fn em_step(g: &GaussianMixture, data: &DesignMatrix) -> Result<EmStep> {
    let (resp, _) = e_step(g, data)?;
    let n = data.n_instances() as f64;
    let d = data.n_features();
    let eps = g.reg_epsilon;
    let mut components = Vec::with_capacity(g.components.len());
    let mut dropped = Vec::new();
    for k in 0..g.components.len() {
        let mass: f64 = resp.iter().map(|r| r[k]).sum();
        if !(mass >= MIN_COMPONENT_MASS) {
            dropped.push(k);
            continue;
        }
        let mut mean = vec![0.0; d];
        for (r, x) in resp.iter().zip(data.rows()) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += r[k] * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= mass);
        let covariance = match g.covariance_mode {
            CovarianceMode::Diagonal => {
                let mut var = vec![0.0; d];
                for (r, x) in resp.iter().zip(data.rows()) {
                    for ((v, a), m) in var.iter_mut().zip(x).zip(&mean) {
                        *v += r[k] * (a - m) * (a - m);
                    }
                }
                Covariance::Diagonal(var.into_iter().map(|v| v / mass + eps).collect())
            }
            CovarianceMode::Full => {
                let mut cov = vec![0.0; d * d];
                let mut diff = vec![0.0; d];
                for (r, x) in resp.iter().zip(data.rows()) {
                    let w = r[k];
                    if w == 0.0 {
                        continue;
                    }
                    for ((t, a), m) in diff.iter_mut().zip(x).zip(&mean) {
                        *t = a - m;
                    }
                    for a in 0..d {
                        let wa = w * diff[a];
                        for b in a..d {
                            cov[a * d + b] += wa * diff[b];
                        }
                    }
                }
                for a in 0..d {
                    for b in a..d {
                        let v = cov[a * d + b] / mass;
                        cov[a * d + b] = v;
                        cov[b * d + a] = v;
                    }
                    cov[a * d + a] += eps;
                }
                Covariance::Full(cov)
            }
        };
        components.push(GaussianComponent {
            weight: mass / n,
            mean,
            covariance,
        });
    }
    if components.is_empty() {
        return Err(PppError::DegenerateModel("every component lost its responsibility mass".into()));
    }
    if !dropped.is_empty() {
        debug!("EM dropped {} component(s) with negligible mass", dropped.len());
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    components.iter_mut().for_each(|c| c.weight /= total);
    let mixture = GaussianMixture {
        components,
        covariance_mode: g.covariance_mode,
        reg_epsilon: eps,
    };
    let log_likelihood = log_likelihood(&mixture, data)?;
    Ok(EmStep {
        mixture,
        log_likelihood,
        dropped,
    })
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub iterations: usize,
    /// Log-likelihood before the first step followed by one entry per step.
    pub ll_trace: Vec<f64>,
    pub converged: bool,
}

/// Runs [`em_step`] until `|delta ll| < tol * (1 + |ll|)` or `max_iter` steps.
pub fn fit_em(g: &GaussianMixture, data: &DesignMatrix, tol: f64, max_iter: usize) -> Result<EmFit> {
    if !(tol > 0.0) {
        return Err(PppError::Config("EM tolerance must be positive".into()));
    }
    if max_iter == 0 {
        return Err(PppError::Config("EM max_iter must be >= 1".into()));
    }
    let mut ll = log_likelihood(g, data)?;
    let mut trace = vec![ll];
    let mut current = g.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let step = em_step(&current, data)?;
        iterations += 1;
        let delta = step.log_likelihood - ll;
        ll = step.log_likelihood;
        trace.push(ll);
        current = step.mixture;
        if delta.abs() < tol * (1.0 + ll.abs()) {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        mixture: current,
        iterations,
        ll_trace: trace,
        converged,
    })
}

/// Per-row densities and their max-normalized scores.
pub fn mixture_scores(g: &GaussianMixture, data: &DesignMatrix) -> Result<MixtureScores> {
    let log_density = g.row_log_densities(data)?;
    let max = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = log_density
        .iter()
        .map(|&l| if max.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    Ok(MixtureScores {
        density: log_density.iter().map(|l| l.exp()).collect(),
        log_density,
        normalized,
    })
}

#[derive(Serialize)]
struct MixtureDocument<'a> {
    covariance_mode: CovarianceMode,
    reg_epsilon: f64,
    weights: Vec<f64>,
    means: Vec<&'a [f64]>,
    covariances: Vec<Vec<Vec<f64>>>,
}

/// JSON export: weights, means, covariance diagonals (diagonal mode) or full
/// matrices as nested rows (full mode), ridge and mode.
pub fn write_mixture_json<W: Write>(g: &GaussianMixture, out: W) -> Result<()> {
    let d = g.dim();
    let covariances = g
        .components
        .iter()
        .map(|c| match &c.covariance {
            Covariance::Diagonal(v) => vec![v.clone()],
            Covariance::Full(m) => m.chunks(d).map(<[f64]>::to_vec).collect(),
        })
        .collect();
    let doc = MixtureDocument {
        covariance_mode: g.covariance_mode,
        reg_epsilon: g.reg_epsilon,
        weights: g.weights(),
        means: g.components.iter().map(|c| c.mean.as_slice()).collect(),
        covariances,
    };
    serde_json::to_writer_pretty(out, &doc)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RandomSeed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn identity_component(mean: Vec<f64>, mode: CovarianceMode) -> GaussianComponent {
        let d = mean.len();
        let covariance = match mode {
            CovarianceMode::Diagonal => Covariance::Diagonal(vec![1.0; d]),
            CovarianceMode::Full => {
                let mut m = vec![0.0; d * d];
                (0..d).for_each(|j| m[j * d + j] = 1.0);
                Covariance::Full(m)
            }
        };
        GaussianComponent {
            weight: 1.0,
            mean,
            covariance,
        }
    }

    fn random_spd(d: usize, rng: &mut impl Rng) -> Vec<f64> {
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>();
            }
            s[i * d + i] += 0.5;
        }
        s
    }

    fn random_mixture(k: usize, d: usize, seed: u64) -> GaussianMixture {
        let mut rng = RandomSeed(seed).rng();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let components = raw
            .iter()
            .map(|w| GaussianComponent {
                weight: w / total,
                mean: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                covariance: Covariance::Full(random_spd(d, &mut rng)),
            })
            .collect();
        GaussianMixture {
            components,
            covariance_mode: CovarianceMode::Full,
            reg_epsilon: 1e-6,
        }
    }

    fn random_data(n: usize, d: usize, seed: u64) -> DesignMatrix {
        let mut rng = RandomSeed(seed).rng();
        DesignMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    /// Textbook density via an explicit inverse and determinant.
    fn naive_pdf(g: &GaussianMixture, x: &[f64]) -> f64 {
        g.components
            .iter()
            .map(|c| {
                let d = c.mean.len();
                let sigma = match &c.covariance {
                    Covariance::Full(m) => DMatrix::from_row_slice(d, d, m),
                    Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_vec(v.clone())),
                };
                let diff = DVector::from_iterator(d, x.iter().zip(&c.mean).map(|(a, b)| a - b));
                let quad = (diff.transpose() * sigma.clone().try_inverse().unwrap() * &diff)[(0, 0)];
                c.weight * (-0.5 * quad).exp() / ((2.0 * PI).powi(d as i32) * sigma.determinant()).sqrt()
            })
            .sum()
    }

    #[test]
    fn logpdf_examples() {
        for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
            let c = identity_component(vec![0.5, -1.0, 2.0], mode);
            let v = component_logpdf(&c, &[0.5, -1.0, 2.0]).unwrap();
            assert!((v + 1.5 * (2.0 * PI).ln()).abs() < 1e-14);
            let c = identity_component(vec![0.0], mode);
            let v = component_logpdf(&c, &[1.0]).unwrap();
            assert!((v - (-0.5 * (2.0 * PI).ln() - 0.5)).abs() < 1e-14);
            assert!((v + 1.41894).abs() < 1e-5);
        }
        let singular = GaussianComponent {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            covariance: Covariance::Full(vec![1.0, 1.0, 1.0, 1.0]),
        };
        assert!(matches!(component_logpdf(&singular, &[0.0, 0.0]), Err(PppError::SingularCovariance { .. })));
        let singular = GaussianComponent {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            covariance: Covariance::Diagonal(vec![1.0, 0.0]),
        };
        assert!(matches!(component_logpdf(&singular, &[0.0, 0.0]), Err(PppError::SingularCovariance { .. })));
    }

    #[test]
    fn logpdf_gradient_matches_finite_differences() {
        let mut rng = RandomSeed(5).rng();
        for trial in 0..20 {
            let d = 1 + trial % 4;
            let cov = random_spd(d, &mut rng);
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma = DMatrix::from_row_slice(d, d, &cov);
            let diff = DVector::from_iterator(d, x.iter().zip(&mean).map(|(a, b)| a - b));
            let analytic = sigma.try_inverse().unwrap() * diff;
            for j in 0..d {
                let scale = mean[j].abs().max(1.0);
                let h = 1e-6 * scale;
                let eval = |delta: f64| {
                    let mut m = mean.clone();
                    m[j] += delta;
                    let c = GaussianComponent {
                        weight: 1.0,
                        mean: m,
                        covariance: Covariance::Full(cov.clone()),
                    };
                    component_logpdf(&c, &x).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - analytic[j]).abs() / analytic[j].abs().max(1e-3);
                assert!(rel < 1e-5, "trial {trial} coord {j}: fd {fd} analytic {}", analytic[j]);
            }
        }
    }

    #[test]
    fn mixture_pdf_examples() {
        let c = identity_component(vec![1.0, 2.0], CovarianceMode::Full);
        let g = GaussianMixture {
            components: vec![c.clone()],
            covariance_mode: CovarianceMode::Full,
            reg_epsilon: 0.0,
        };
        let x = [0.3, 1.1];
        assert!((mixture_pdf(&g, &x).unwrap() - component_logpdf(&c, &x).unwrap().exp()).abs() < 1e-16);
        let mut half = c.clone();
        half.weight = 0.5;
        let g2 = GaussianMixture {
            components: vec![half.clone(), half],
            ..g.clone()
        };
        assert!((mixture_pdf(&g2, &x).unwrap() - mixture_pdf(&g, &x).unwrap()).abs() < 1e-16);
        assert!(matches!(mixture_pdf(&g, &[1.0]), Err(PppError::Dimension { .. })));
    }

    #[test]
    fn log_likelihood_examples() {
        let g = GaussianMixture {
            components: vec![identity_component(vec![0.0; 3], CovarianceMode::Diagonal)],
            covariance_mode: CovarianceMode::Diagonal,
            reg_epsilon: 0.0,
        };
        let one = DesignMatrix::from_rows(&[vec![0.0; 3]]).unwrap();
        assert!((log_likelihood(&g, &one).unwrap() + 1.5 * (2.0 * PI).ln()).abs() < 1e-14);
        let row = vec![0.4, -0.2, 1.0];
        let single = DesignMatrix::from_rows(&[row.clone()]).unwrap();
        let double = DesignMatrix::from_rows(&[row.clone(), row]).unwrap();
        assert_eq!(
            log_likelihood(&g, &double).unwrap(),
            2.0 * log_likelihood(&g, &single).unwrap()
        );
        let g = random_mixture(3, 2, 4);
        let data = random_data(12, 2, 9);
        let oracle: f64 = data.rows().map(|r| naive_pdf(&g, r).ln()).sum();
        assert!((log_likelihood(&g, &data).unwrap() - oracle).abs() < 1e-10 * oracle.abs());
    }

    #[test]
    fn init_from_codebook_examples() {
        let data = random_data(10, 2, 3);
        let one = CodebookMatchSet {
            matched_instance_ids: vec![4],
            matched_vectors: vec![data.row(4).to_vec()],
            priors: vec![1.0],
        };
        let g = init_gmm_from_codebook(&one, &data, CovarianceMode::Full, 1e-6).unwrap();
        assert_eq!(g.components.len(), 1);
        assert_eq!(g.components[0].weight, 1.0);
        assert_eq!(g.components[0].mean, data.row(4));

        let two = CodebookMatchSet {
            matched_instance_ids: vec![0, 1],
            matched_vectors: vec![data.row(0).to_vec(), data.row(1).to_vec()],
            priors: vec![0.5, 0.5],
        };
        let g = init_gmm_from_codebook(&two, &data, CovarianceMode::Diagonal, 1e-6).unwrap();
        assert_eq!(g.weights(), vec![0.5, 0.5]);
        let vars = data.column_variances();
        match &g.components[0].covariance {
            Covariance::Diagonal(v) => assert_eq!(v, &vec![vars[0] + 1e-6, vars[1] + 1e-6]),
            Covariance::Full(_) => panic!("expected diagonal"),
        }

        let three = CodebookMatchSet {
            matched_instance_ids: vec![0, 1, 2],
            matched_vectors: (0..3).map(|i| data.row(i).to_vec()).collect(),
            priors: vec![0.2, 0.0, 0.6],
        };
        let g = init_gmm_from_codebook(&three, &data, CovarianceMode::Full, 1e-6).unwrap();
        assert_eq!(g.components.len(), 2);
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((g.components[0].weight - 0.25).abs() < 1e-15);

        let none = CodebookMatchSet {
            priors: vec![0.0, 0.0, 0.0],
            ..three
        };
        assert!(matches!(
            init_gmm_from_codebook(&none, &data, CovarianceMode::Full, 1e-6),
            Err(PppError::DegenerateModel(_))
        ));
    }

    #[test]
    fn single_component_step_gives_sample_moments() {
        let data = random_data(25, 3, 8);
        let mut g = random_mixture(1, 3, 2);
        g.reg_epsilon = 1e-6;
        let step = em_step(&g, &data).unwrap();
        let c = &step.mixture.components[0];
        let n = 25.0;
        for j in 0..3 {
            let mean = data.column(j).iter().sum::<f64>() / n;
            assert!((c.mean[j] - mean).abs() < 1e-12);
        }
        let Covariance::Full(cov) = &c.covariance else { panic!() };
        for a in 0..3 {
            for b in 0..3 {
                let (ma, mb) = (c.mean[a], c.mean[b]);
                let s = data.rows().map(|r| (r[a] - ma) * (r[b] - mb)).sum::<f64>() / n
                    + if a == b { 1e-6 } else { 0.0 };
                assert!((cov[a * 3 + b] - s).abs() < 1e-12);
            }
        }
        assert_eq!(step.mixture.components[0].weight, 1.0);
    }

    #[test]
    fn separated_clouds_own_their_points() {
        let mut rng = RandomSeed(31).rng();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let c = if i < 20 { -10.0 } else { 10.0 };
                vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]
            })
            .collect();
        let data = DesignMatrix::from_rows(&rows).unwrap();
        let matches = CodebookMatchSet {
            matched_instance_ids: vec![0, 20],
            matched_vectors: vec![rows[0].clone(), rows[20].clone()],
            priors: vec![0.5, 0.5],
        };
        let g = init_gmm_from_codebook(&matches, &data, CovarianceMode::Full, 1e-6).unwrap();
        let step = em_step(&g, &data).unwrap();
        let resp = responsibilities(&step.mixture, &data).unwrap();
        for (i, r) in resp.iter().enumerate() {
            let own = if i < 20 { 0 } else { 1 };
            // direct oracle: compare the two weighted component densities
            let dens: Vec<f64> = step
                .mixture
                .components
                .iter()
                .map(|c| c.weight * component_logpdf(c, &rows[i]).unwrap().exp())
                .collect();
            assert!((r[own] - dens[own] / (dens[0] + dens[1])).abs() < 1e-9);
            assert!(r[own] >= 0.999);
        }
    }

    #[test]
    fn identical_rows_collapse_to_ridge() {
        let data = DesignMatrix::from_rows(&vec![vec![2.0, -1.0]; 10]).unwrap();
        let g = GaussianMixture {
            components: vec![
                GaussianComponent {
                    weight: 0.5,
                    mean: vec![0.0, 0.0],
                    covariance: Covariance::Diagonal(vec![1.0, 1.0]),
                },
                GaussianComponent {
                    weight: 0.5,
                    mean: vec![3.0, 1.0],
                    covariance: Covariance::Diagonal(vec![1.0, 1.0]),
                },
            ],
            covariance_mode: CovarianceMode::Diagonal,
            reg_epsilon: 1e-6,
        };
        let step = em_step(&g, &data).unwrap();
        for c in &step.mixture.components {
            assert!(c.mean.iter().zip([2.0, -1.0]).all(|(a, b)| (a - b).abs() < 1e-12));
            let Covariance::Diagonal(v) = &c.covariance else { panic!() };
            assert!(v.iter().all(|&x| (x - 1e-6).abs() < 1e-15));
        }
    }

    #[test]
    fn fit_em_examples() {
        let data = random_data(30, 2, 12);
        let g = random_mixture(2, 2, 6);
        let once = fit_em(&g, &data, 1e-6, 1).unwrap();
        assert_eq!(once.iterations, 1);
        assert_eq!(once.mixture, em_step(&g, &data).unwrap().mixture);

        let fitted = fit_em(&g, &data, 1e-9, 500).unwrap();
        assert!(fitted.converged);
        let again = fit_em(&fitted.mixture, &data, 1e-6, 100).unwrap();
        assert_eq!(again.iterations, 1);

        assert!(fit_em(&g, &data, 0.0, 10).is_err());
        assert!(fit_em(&g, &data, 1e-6, 0).is_err());
    }

    #[test]
    fn fit_trace_is_monotone_on_blobs() {
        let mut rng = RandomSeed(3).rng();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let rows: Vec<Vec<f64>> = (0..90)
            .map(|i| {
                let c = [(-4.0, 0.0), (4.0, 0.0), (0.0, 5.0)][i % 3];
                vec![c.0 + noise.sample(&mut rng), c.1 + noise.sample(&mut rng)]
            })
            .collect();
        let data = DesignMatrix::from_rows(&rows).unwrap();
        let matches = CodebookMatchSet {
            matched_instance_ids: vec![0, 1, 2],
            matched_vectors: vec![rows[0].clone(), rows[1].clone(), rows[2].clone()],
            priors: vec![1.0 / 3.0; 3],
        };
        let g = init_gmm_from_codebook(&matches, &data, CovarianceMode::Full, default_reg_epsilon(&data)).unwrap();
        let fit = fit_em(&g, &data, 1e-6, 100).unwrap();
        for w in fit.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.ll_trace);
        }
    }

    #[test]
    fn scores_examples() {
        let g = GaussianMixture {
            components: vec![identity_component(vec![0.0, 0.0], CovarianceMode::Full)],
            covariance_mode: CovarianceMode::Full,
            reg_epsilon: 0.0,
        };
        let one = DesignMatrix::from_rows(&[vec![3.0, 1.0]]).unwrap();
        assert_eq!(mixture_scores(&g, &one).unwrap().normalized, vec![1.0]);
        let two = DesignMatrix::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let s = mixture_scores(&g, &two).unwrap();
        assert!(s.normalized[0] > s.normalized[1]);
        assert_eq!(s.normalized[0], 1.0);

        let g = random_mixture(3, 2, 44);
        let data = random_data(15, 2, 45);
        let s = mixture_scores(&g, &data).unwrap();
        let max = s.density.iter().copied().fold(0.0, f64::max);
        for (n, d) in s.normalized.iter().zip(&s.density) {
            assert!((n - d / max).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_json_layout() {
        let g = GaussianMixture {
            components: vec![identity_component(vec![1.0, 2.0], CovarianceMode::Diagonal)],
            covariance_mode: CovarianceMode::Diagonal,
            reg_epsilon: 0.25,
        };
        let mut buf = Vec::new();
        write_mixture_json(&g, &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["covariance_mode"], "diagonal");
        assert_eq!(v["reg_epsilon"], 0.25);
        assert_eq!(v["weights"], serde_json::json!([1.0]));
        assert_eq!(v["means"], serde_json::json!([[1.0, 2.0]]));
        assert_eq!(v["covariances"], serde_json::json!([[[1.0, 1.0]]]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn log_space_pdf_matches_naive_sum(seed in 0u64..100_000) {
            let g = random_mixture(3, 3, seed);
            let mut rng = RandomSeed(seed ^ 0xfeed).rng();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let naive = naive_pdf(&g, &x);
            prop_assume!(naive > 1e-250);
            let p = mixture_pdf(&g, &x).unwrap();
            prop_assert!((p - naive).abs() <= 1e-10 * naive);
        }

        #[test]
        fn weights_stay_a_probability_vector(seed in 0u64..100_000) {
            let g = random_mixture(4, 2, seed);
            let data = random_data(30, 2, seed + 7);
            let step = em_step(&g, &data).unwrap();
            let w = step.mixture.weights();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(step.log_likelihood >= log_likelihood(&g, &data).unwrap() - 1e-8);
        }
    }
}
