//! Likelihood-based longitudinal mixtures.
//!
//! * GBTM: every cluster is a fixed regression curve `x(t)ᵀβ_g` with
//!   independent Gaussian residuals of variance `σ²_g`.
//! * GMM: additionally a subject-level random effect `u ~ N(0, Σ_g)` enters
//!   through `Z`: a random intercept (`Z = 1`), or one effect per basis
//!   column (`Z = X`) with diagonal or unstructured `Σ_g`.
//!
//! Random effects are integrated out, so cluster `g` has density
//! `N(y; Xβ_g, σ²_g I + Z Σ_g Zᵀ)`. With `Σ_g = L Lᵀ` the determinant and
//! quadratic form are evaluated through the `r×r` matrix
//! `M = σ² I + Lᵀ ZᵀZ L`, which stays valid for singular `Σ_g`.
//!
//! Estimation is (generalized) EM over cluster memberships: π and β have
//! closed-form updates, residual variances are closed-form without random
//! effects, and variance components are otherwise improved by bounded
//! golden-section coordinate search over `(σ², L)` followed by a few damped
//! finite-difference Newton steps; both only accept increases of the expected
//! complete-data log-likelihood. The observed
//! log-likelihood is therefore non-decreasing. Sums run in subject order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PosteriorMatrix};
use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};
use crate::selection::{bic, BicSampleSize};
use crate::stats::{golden_max, newton_max, normalize_log_weights, LN_2PI};

pub const RESIDUAL_VARIANCE_FLOOR: f64 = 1e-6;
pub const MAX_ITER: usize = 500;
pub const REL_TOL: f64 = 1e-8;
/// Cluster responsibility mass below this fraction of N marks a degenerate start.
pub const DEGENERATE_FRACTION: f64 = 1e-3;
const ATTEMPTS_PER_START: u64 = 4;
const GOLDEN_ITERS: usize = 60;
const NEWTON_ITERS: usize = 4;
const MAX_JOINT_NEWTON: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    /// Columns `1, t, ..., t^degree`.
    Polynomial { degree: usize },
    /// Clamped B-spline with equally spaced interior knots over the domain.
    /// Columns are the `interior_knots + degree + 1` basis functions in knot
    /// order.
    Bspline { degree: usize, interior_knots: usize },
}

/// Trajectory basis with the time domain it was built for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub kind: BasisKind,
    pub lower: f64,
    pub upper: f64,
}

impl Basis {
    pub fn polynomial(degree: usize, lower: f64, upper: f64) -> Self {
        Self { kind: BasisKind::Polynomial { degree }, lower, upper }
    }

    pub fn bspline(degree: usize, interior_knots: usize, lower: f64, upper: f64) -> Result<Self> {
        if degree != 3 {
            return Err(Error::Config(format!("only cubic B-splines are supported, got degree {degree}")));
        }
        if upper.is_nan() || lower.is_nan() || upper <= lower {
            return Err(Error::Config(format!("B-spline domain [{lower}, {upper}] is empty")));
        }
        Ok(Self { kind: BasisKind::Bspline { degree, interior_knots }, lower, upper })
    }

    /// Parses `poly:D` or `bspline:3:K` for the given time domain.
    pub fn parse(spec: &str, lower: f64, upper: f64) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("invalid basis spec `{spec}`")));
        match parts.as_slice() {
            ["poly", d] => Ok(Self::polynomial(num(d)?, lower, upper)),
            ["bspline", d, k] => Self::bspline(num(d)?, num(k)?, lower, upper),
            _ => Err(Error::Config(format!("invalid basis spec `{spec}`, expected poly:D or bspline:3:K"))),
        }
    }

    pub fn n_cols(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial { degree } => degree + 1,
            BasisKind::Bspline { degree, interior_knots } => interior_knots + degree + 1,
        }
    }

    fn knots(&self, degree: usize, interior: usize) -> Vec<f64> {
        let mut knots = vec![self.lower; degree + 1];
        let step = (self.upper - self.lower) / (interior + 1) as f64;
        knots.extend((1..=interior).map(|k| self.lower + k as f64 * step));
        knots.extend(std::iter::repeat_n(self.upper, degree + 1));
        knots
    }

    /// Basis row at time `t`.
    pub fn row(&self, t: f64) -> Result<Vec<f64>> {
        if !t.is_finite() {
            return Err(Error::Validation(format!("non-finite time {t}")));
        }
        match self.kind {
            BasisKind::Polynomial { degree } => Ok((0..=degree).map(|k| t.powi(k as i32)).collect()),
            BasisKind::Bspline { degree, interior_knots } => {
                let span = self.upper - self.lower;
                let eps = 1e-12 * span.max(1.0);
                if t < self.lower - eps || t > self.upper + eps {
                    return Err(Error::Validation(format!(
                        "time {t} outside the knot span [{}, {}]",
                        self.lower, self.upper
                    )));
                }
                let t = t.clamp(self.lower, self.upper);
                let knots = self.knots(degree, interior_knots);
                Ok(cox_de_boor(&knots, degree, t))
            }
        }
    }

    pub fn design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.n_cols();
        let mut m = DMatrix::zeros(times.len(), q);
        for (i, &t) in times.iter().enumerate() {
            for (j, v) in self.row(t)?.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

/// All B-spline basis functions of `degree` at `t` by the Cox-de Boor
/// recursion; the right end of the domain belongs to the last interval.
fn cox_de_boor(knots: &[f64], degree: usize, t: f64) -> Vec<f64> {
    let m = knots.len() - 1;
    let last = knots[m];
    let mut n: Vec<f64> = (0..m)
        .map(|i| {
            let inside = knots[i] <= t && t < knots[i + 1];
            let right_end = t == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
            if inside || right_end {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for p in 1..=degree {
        let next: Vec<f64> = (0..m - p)
            .map(|i| {
                let mut v = 0.0;
                let d1 = knots[i + p] - knots[i];
                if d1 > 0.0 {
                    v += (t - knots[i]) / d1 * n[i];
                }
                let d2 = knots[i + p + 1] - knots[i + 1];
                if d2 > 0.0 {
                    v += (knots[i + p + 1] - t) / d2 * n[i + 1];
                }
                v
            })
            .collect();
        n = next;
    }
    n
}

/// Design matrix of `times` under `basis` (one row per time).
pub fn basis_matrix(times: &[f64], basis: &Basis) -> Result<DMatrix<f64>> {
    basis.design(times)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomEffects {
    /// Group-based trajectory model: no within-cluster random effects.
    #[default]
    None,
    Intercept,
    /// One independent random effect per basis column.
    BasisDiagonal,
    /// One random effect per basis column with unstructured covariance.
    BasisFull,
}

impl RandomEffects {
    /// Dimension of the random-effect vector.
    fn dim(self, q: usize) -> usize {
        match self {
            RandomEffects::None => 0,
            RandomEffects::Intercept => 1,
            RandomEffects::BasisDiagonal | RandomEffects::BasisFull => q,
        }
    }

    /// Free covariance parameters per cluster.
    fn count(self, q: usize) -> usize {
        match self {
            RandomEffects::BasisFull => q * (q + 1) / 2,
            other => other.dim(q),
        }
    }
}

/// Lower-triangular `L` with `Σ = L Lᵀ` from packed parameters: `r`
/// standard deviations for diagonal structures, otherwise the lower triangle
/// packed row by row.
fn factor(re: &[f64], r: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(r, r);
    if re.len() == r {
        for a in 0..r {
            l[(a, a)] = re[a];
        }
    } else {
        let mut k = 0;
        for a in 0..r {
            for b in 0..=a {
                l[(a, b)] = re[k];
                k += 1;
            }
        }
    }
    l
}

fn is_diagonal_param(k: usize, len: usize, r: usize) -> bool {
    len == r || (0..r).any(|a| a * (a + 1) / 2 + a == k)
}

/// Whether variance parameters (residual and random-effect) are estimated per
/// cluster or shared by all clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    #[default]
    PerCluster,
    Tied,
    /// Random-effect covariances per cluster, one residual variance for all.
    SharedResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub basis: Basis,
    pub random_effects: RandomEffects,
    pub variance_mode: VarianceMode,
    pub g: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Constrain every random-effect variance to zero.
    #[serde(default)]
    pub fix_random_effects_at_zero: bool,
    pub bic_sample_size: BicSampleSize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl MixtureConfig {
    pub fn new(basis: Basis, random_effects: RandomEffects, g: usize, n_starts: usize, seed: u64) -> Self {
        Self {
            basis,
            random_effects,
            variance_mode: VarianceMode::PerCluster,
            g,
            n_starts,
            seed,
            fix_random_effects_at_zero: false,
            bic_sample_size: BicSampleSize::Observations,
            max_iter: MAX_ITER,
            rel_tol: REL_TOL,
        }
    }

    pub fn n_params(&self) -> usize {
        let g = self.g;
        let q = self.basis.n_cols();
        let (residual, re) = match self.variance_mode {
            VarianceMode::PerCluster => (g, g),
            VarianceMode::Tied => (1, 1),
            VarianceMode::SharedResidual => (1, g),
        };
        let re = if self.fix_random_effects_at_zero { 0 } else { re * self.random_effects.count(q) };
        (g - 1) + g * q + residual + re
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub version: String,
    pub basis: Basis,
    pub random_effects: RandomEffects,
    pub variance_mode: VarianceMode,
    pub g: usize,
    pub proportions: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    pub residual_variances: Vec<f64>,
    /// Per cluster, the diagonal of the random-effect covariance.
    pub random_effect_variances: Vec<Vec<f64>>,
    /// Per cluster, the packed factor of the random-effect covariance:
    /// standard deviations for diagonal structures, otherwise the row-wise
    /// lower triangle of its Cholesky factor.
    pub random_effect_factors: Vec<Vec<f64>>,
    pub loglik: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub n_subjects: usize,
    pub bic_sample_size: BicSampleSize,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate_starts: usize,
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

impl MixtureModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        if model.proportions.len() != model.g || model.coefficients.len() != model.g {
            return Err(Error::Validation("model document has inconsistent cluster count".into()));
        }
        Ok(model)
    }

    fn params(&self, k: usize) -> ClusterParams {
        ClusterParams {
            beta: self.coefficients[k].clone(),
            sigma2: self.residual_variances[k],
            re: self.random_effect_factors.get(k).cloned().unwrap_or_default(),
        }
    }

    /// Random-effect covariance of cluster `k`.
    pub fn random_effect_covariance(&self, k: usize) -> DMatrix<f64> {
        let r = self.random_effects.dim(self.basis.n_cols());
        let l = factor(&self.random_effect_factors[k], r);
        &l * l.transpose()
    }

    /// Log of `π_g f_g(y)` for each cluster.
    pub fn log_joint(&self, times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
        let stats = SubjectStats::new(&self.basis, self.random_effects, times, values)?;
        Ok((0..self.g).map(|k| self.proportions[k].ln() + log_density(&stats, &self.params(k))).collect())
    }
}

/// Sufficient statistics of one subject under a basis.
#[derive(Debug, Clone)]
struct SubjectStats {
    n: f64,
    q: usize,
    r: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    ztz: Vec<f64>,
    ztx: Vec<f64>,
    zty: Vec<f64>,
}

impl SubjectStats {
    fn new(basis: &Basis, re: RandomEffects, times: &[f64], values: &[f64]) -> Result<Self> {
        let q = basis.n_cols();
        let mut xtx = vec![0.0; q * q];
        let mut xty = vec![0.0; q];
        let mut colsum = vec![0.0; q];
        let mut yty = 0.0;
        let mut sumy = 0.0;
        for (&t, &y) in times.iter().zip(values) {
            let x = basis.row(t)?;
            for a in 0..q {
                xty[a] += x[a] * y;
                colsum[a] += x[a];
                for b in 0..q {
                    xtx[a * q + b] += x[a] * x[b];
                }
            }
            yty += y * y;
            sumy += y;
        }
        let n = times.len() as f64;
        let (r, ztz, ztx, zty) = match re {
            RandomEffects::None => (0, vec![], vec![], vec![]),
            RandomEffects::Intercept => (1, vec![n], colsum, vec![sumy]),
            RandomEffects::BasisDiagonal | RandomEffects::BasisFull => (q, xtx.clone(), xtx.clone(), xty.clone()),
        };
        Ok(Self { n, q, r, xtx, xty, yty, ztz, ztx, zty })
    }

    fn ete(&self, beta: &[f64]) -> f64 {
        let q = self.q;
        let mut quad = 0.0;
        for a in 0..q {
            let row: f64 = (0..q).map(|b| self.xtx[a * q + b] * beta[b]).sum();
            quad += beta[a] * row;
        }
        (self.yty - 2.0 * dot(beta, &self.xty) + quad).max(0.0)
    }

    fn zte(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.r).map(|a| self.zty[a] - dot(&self.ztx[a * self.q..(a + 1) * self.q], beta)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct ClusterParams {
    beta: Vec<f64>,
    sigma2: f64,
    re: Vec<f64>,
}

/// `M = σ² I + Lᵀ ZᵀZ L` for one subject.
fn m_matrix(stats: &SubjectStats, sigma2: f64, l: &DMatrix<f64>) -> DMatrix<f64> {
    let r = stats.r;
    let ztz = DMatrix::from_row_slice(r, r, &stats.ztz);
    l.transpose() * ztz * l + DMatrix::identity(r, r) * sigma2
}

/// Marginal log-density of one subject given expanded residual statistics.
fn log_density_from(stats: &SubjectStats, ete: f64, zte: &[f64], sigma2: f64, re: &[f64]) -> f64 {
    let n = stats.n;
    let r = stats.r;
    if r == 0 {
        return -0.5 * (n * LN_2PI + n * sigma2.ln() + ete / sigma2);
    }
    if r == 1 {
        let tau2 = re[0] * re[0];
        let lambda = sigma2 + tau2 * stats.ztz[0];
        let quad = (ete - tau2 * zte[0] * zte[0] / lambda) / sigma2;
        return -0.5 * (n * LN_2PI + (n - 1.0) * sigma2.ln() + lambda.ln() + quad);
    }
    let l = factor(re, r);
    let m = m_matrix(stats, sigma2, &l);
    let Some(chol) = m.cholesky() else {
        return f64::NEG_INFINITY;
    };
    let logdet_m: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let u = l.tr_mul(&DVector::from_column_slice(zte));
    let quad = (ete - u.dot(&chol.solve(&u))) / sigma2;
    -0.5 * (n * LN_2PI + (n - r as f64) * sigma2.ln() + logdet_m + quad)
}

fn log_density(stats: &SubjectStats, p: &ClusterParams) -> f64 {
    log_density_from(stats, stats.ete(&p.beta), &stats.zte(&p.beta), p.sigma2, &p.re)
}

/// Generalized least squares for one cluster: returns β or `None` if the
/// weighted normal equations are singular.
fn gls_beta(stats: &[SubjectStats], weights: &[f64], p: &ClusterParams) -> Option<Vec<f64>> {
    let q = stats[0].q;
    let mut a = DMatrix::<f64>::zeros(q, q);
    let mut b = DVector::<f64>::zeros(q);
    let any_re = p.re.iter().any(|&v| v != 0.0);
    let l = factor(&p.re, stats[0].r);
    for (s, &w) in stats.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for i in 0..q {
            b[i] += w * s.xty[i];
            for j in 0..q {
                a[(i, j)] += w * s.xtx[i * q + j];
            }
        }
        if any_re {
            let r = s.r;
            let m = m_matrix(s, p.sigma2, &l);
            let chol = m.cholesky()?;
            let px = l.tr_mul(&DMatrix::from_row_slice(r, q, &s.ztx));
            let py = l.tr_mul(&DVector::from_column_slice(&s.zty));
            let minv_px = chol.solve(&px);
            let minv_py = chol.solve(&py);
            a -= w * px.transpose() * minv_px;
            b -= w * px.transpose() * minv_py;
        }
    }
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale.is_nan() || scale <= 0.0 {
        return None;
    }
    let chol = a.clone().cholesky()?;
    let beta = chol.solve(&b);
    if beta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // guard against numerically rank-deficient designs
    let min_pivot = chol.l().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_pivot * min_pivot < 1e-13 * scale {
        return None;
    }
    Some(beta.iter().copied().collect())
}

/// Weighted residual terms used by the variance update.
enum VarianceTerms {
    /// No random effects: `(Σ w·eᵀe, Σ w·n)`.
    Residual { wrss: f64, wn: f64 },
    /// Random intercept, grouped by observation count:
    /// `n -> (Σ w, Σ w·eᵀe, Σ w·(Σe)²)`.
    Intercept(BTreeMap<u64, (f64, f64, f64)>),
    /// General diagonal random effects, one entry per subject.
    General(Vec<(f64, usize, f64, Vec<f64>)>),
}

impl VarianceTerms {
    fn build(stats: &[SubjectStats], weights: &[f64], beta: &[f64], re: RandomEffects) -> Self {
        match re {
            RandomEffects::None => {
                let (mut wrss, mut wn) = (0.0, 0.0);
                for (s, &w) in stats.iter().zip(weights) {
                    wrss += w * s.ete(beta);
                    wn += w * s.n;
                }
                Self::Residual { wrss, wn }
            }
            RandomEffects::Intercept => {
                let mut map = BTreeMap::new();
                for (s, &w) in stats.iter().zip(weights) {
                    let e = map.entry(s.n as u64).or_insert((0.0, 0.0, 0.0));
                    let zte = s.zte(beta)[0];
                    e.0 += w;
                    e.1 += w * s.ete(beta);
                    e.2 += w * zte * zte;
                }
                Self::Intercept(map)
            }
            RandomEffects::BasisDiagonal | RandomEffects::BasisFull => Self::General(
                stats
                    .iter()
                    .zip(weights)
                    .enumerate()
                    .filter(|(_, (_, &w))| w > 0.0)
                    .map(|(i, (s, &w))| (w, i, s.ete(beta), s.zte(beta)))
                    .collect(),
            ),
        }
    }

    /// Weighted expected log-likelihood contribution, constants dropped.
    fn objective(&self, stats: &[SubjectStats], sigma2: f64, re: &[f64]) -> f64 {
        match self {
            Self::Residual { wrss, wn } => -0.5 * (wn * sigma2.ln() + wrss / sigma2),
            Self::Intercept(map) => {
                let tau2 = re[0] * re[0];
                map.iter()
                    .map(|(&n, &(w, e, s))| {
                        let n = n as f64;
                        let lambda = sigma2 + n * tau2;
                        -0.5 * (w * ((n - 1.0) * sigma2.ln() + lambda.ln()) + (e - tau2 * s / lambda) / sigma2)
                    })
                    .sum()
            }
            Self::General(terms) => terms
                .iter()
                .map(|(w, i, ete, zte)| {
                    let s = &stats[*i];
                    w * (log_density_from(s, *ete, zte, sigma2, re) + 0.5 * s.n * LN_2PI)
                })
                .sum(),
        }
    }
}

/// Which clusters of a variance update share parameters.
#[derive(Clone, Copy)]
struct Sharing {
    residual: bool,
    random_effects: bool,
}

/// Improves residual variances and random-effect factors of the clusters in
/// `terms` (one entry per cluster), starting from `current`. One
/// golden-section pass over every coordinate is followed by Newton steps;
/// only improvements are accepted, so the summed objective never decreases.
/// Returns `(σ², factor)` per cluster.
fn update_variances(
    terms: &[VarianceTerms],
    stats: &[SubjectStats],
    current: &[ClusterParams],
    sharing: Sharing,
    fix_re: bool,
    data_var: f64,
) -> Vec<(f64, Vec<f64>)> {
    let g = terms.len();
    let si = |k: usize| if sharing.residual { 0 } else { k };
    let ri = |k: usize| if sharing.random_effects { 0 } else { k };
    let n_s = if sharing.residual { 1 } else { g };
    let n_r = if sharing.random_effects { 1 } else { g };

    if terms.iter().all(|t| matches!(t, VarianceTerms::Residual { .. })) {
        let mut acc = vec![(0.0, 0.0); n_s];
        for (k, t) in terms.iter().enumerate() {
            if let VarianceTerms::Residual { wrss, wn } = t {
                acc[si(k)].0 += wrss;
                acc[si(k)].1 += wn;
            }
        }
        return (0..g).map(|k| ((acc[si(k)].0 / acc[si(k)].1).max(RESIDUAL_VARIANCE_FLOOR), vec![])).collect();
    }

    let r = stats.first().map_or(0, |s| s.r);
    let mut s2: Vec<f64> = (0..n_s).map(|j| current[j].sigma2.max(RESIDUAL_VARIANCE_FLOOR)).collect();
    let mut re: Vec<Vec<f64>> = (0..n_r).map(|j| current[j].re.clone()).collect();
    if fix_re {
        re.iter_mut().flatten().for_each(|v| *v = 0.0);
    }
    let c = re[0].len();
    let upper_var = 100.0 * data_var.max(1e-6);
    let cluster = |k: usize, s2: &[f64], re: &[Vec<f64>]| terms[k].objective(stats, s2[si(k)], &re[ri(k)]);

    // golden-section pass; each coordinate only touches the clusters using it
    for j in 0..n_s {
        let users: Vec<usize> = (0..g).filter(|&k| si(k) == j).collect();
        let part = |s2: &[f64]| users.iter().map(|&k| cluster(k, s2, &re)).sum::<f64>();
        let base = part(&s2);
        let lo = RESIDUAL_VARIANCE_FLOOR.ln().max(s2[j].ln() - 12.0);
        let hi = upper_var.max(s2[j] * 4.0).ln();
        let mut trial = s2.clone();
        let (x, fx) = golden_max(
            |x| {
                trial[j] = x.exp();
                part(&trial)
            },
            lo,
            hi,
            GOLDEN_ITERS,
        );
        if fx > base {
            s2[j] = x.exp();
        }
    }
    if !fix_re {
        for j in 0..n_r {
            let users: Vec<usize> = (0..g).filter(|&k| ri(k) == j).collect();
            let part = |re: &[Vec<f64>]| users.iter().map(|&k| cluster(k, &s2, re)).sum::<f64>();
            for e in 0..c {
                let base = part(&re);
                let hi = upper_var.sqrt().max(2.0 * re[j][e].abs());
                let lo = if is_diagonal_param(e, c, r) { 0.0 } else { -hi };
                let mut trial = re.clone();
                let (x, fx) = golden_max(
                    |v| {
                        trial[j][e] = v;
                        part(&trial)
                    },
                    lo,
                    hi,
                    GOLDEN_ITERS,
                );
                if fx > base {
                    re[j][e] = x;
                }
            }
        }
    }

    // Newton steps on (ln σ², factor entries), jointly when small enough,
    // otherwise per random-effect block followed by the residual variances
    let n_re_free = if fix_re { 0 } else { n_r * c };
    let pack = |s2: &[f64], re: &[Vec<f64>]| {
        let mut th: Vec<f64> = s2.iter().map(|v| v.ln()).collect();
        if !fix_re {
            th.extend(re.iter().flatten());
        }
        th
    };
    let unpack = |th: &[f64], re0: &[Vec<f64>]| {
        let s2: Vec<f64> = th[..n_s].iter().map(|v| v.exp()).collect();
        let mut re = re0.to_vec();
        if !fix_re {
            for (j, block) in re.iter_mut().enumerate() {
                block.copy_from_slice(&th[n_s + j * c..n_s + (j + 1) * c]);
            }
        }
        (s2, re)
    };
    let floor = RESIDUAL_VARIANCE_FLOOR.ln();
    if n_s + n_re_free <= MAX_JOINT_NEWTON {
        let start = pack(&s2, &re);
        let f0 = (0..g).map(|k| cluster(k, &s2, &re)).sum::<f64>();
        let objective = |th: &[f64]| {
            if th[..n_s].iter().any(|&v| v < floor) {
                return f64::NEG_INFINITY;
            }
            let (s2, re) = unpack(th, &re);
            (0..g).map(|k| cluster(k, &s2, &re)).sum::<f64>()
        };
        let (th, fx) = newton_max(objective, start, NEWTON_ITERS);
        if fx > f0 {
            (s2, re) = unpack(&th, &re);
        }
    } else {
        if !fix_re {
            for j in 0..n_r {
                let users: Vec<usize> = (0..g).filter(|&k| ri(k) == j).collect();
                let f0 = users.iter().map(|&k| cluster(k, &s2, &re)).sum::<f64>();
                let objective = |th: &[f64]| {
                    let mut trial = re.clone();
                    trial[j].copy_from_slice(th);
                    users.iter().map(|&k| cluster(k, &s2, &trial)).sum::<f64>()
                };
                let (th, fx) = newton_max(objective, re[j].clone(), NEWTON_ITERS);
                if fx > f0 {
                    re[j] = th;
                }
            }
        }
        for j in 0..n_s {
            let users: Vec<usize> = (0..g).filter(|&k| si(k) == j).collect();
            let f0 = users.iter().map(|&k| cluster(k, &s2, &re)).sum::<f64>();
            let objective = |th: &[f64]| {
                if th[0] < floor {
                    return f64::NEG_INFINITY;
                }
                let mut trial = s2.clone();
                trial[j] = th[0].exp();
                users.iter().map(|&k| cluster(k, &trial, &re)).sum::<f64>()
            };
            let (th, fx) = newton_max(objective, vec![s2[j].ln()], NEWTON_ITERS);
            if fx > f0 {
                s2[j] = th[0].exp();
            }
        }
    }
    (0..g).map(|k| (s2[si(k)], canonical_factor(re[ri(k)].clone(), r))).collect()
}

/// Flips signs so that the diagonal of the factor is non-negative; the
/// covariance `L Lᵀ` is unchanged.
fn canonical_factor(mut re: Vec<f64>, r: usize) -> Vec<f64> {
    if re.len() == r {
        re.iter_mut().for_each(|v| *v = v.abs());
        return re;
    }
    for col in 0..r {
        if re[col * (col + 1) / 2 + col] < 0.0 {
            for row in col..r {
                re[row * (row + 1) / 2 + col] *= -1.0;
            }
        }
    }
    re
}

struct Problem<'a> {
    stats: Vec<SubjectStats>,
    config: &'a MixtureConfig,
    data_var: f64,
}

struct State {
    proportions: Vec<f64>,
    params: Vec<ClusterParams>,
}

/// A finished start: state, responsibilities, loglik trace, converged flag.
type Run = (State, Vec<f64>, Vec<f64>, bool);

impl Problem<'_> {
    fn n(&self) -> usize {
        self.stats.len()
    }

    fn e_step(&self, state: &State, resp: &mut [f64]) -> f64 {
        let g = self.config.g;
        let mut loglik = 0.0;
        for (s, row) in self.stats.iter().zip(resp.chunks_exact_mut(g)) {
            for ((r, p), params) in row.iter_mut().zip(&state.proportions).zip(&state.params) {
                *r = p.ln() + log_density(s, params);
            }
            loglik += normalize_log_weights(row);
        }
        loglik
    }

    /// One M-step from responsibilities `resp`; `current` supplies the
    /// variance components at which β is estimated and from which the
    /// variance search starts.
    fn m_step(&self, resp: &[f64], current: &State) -> Option<State> {
        let g = self.config.g;
        let n = self.n();
        let weights: Vec<Vec<f64>> = (0..g).map(|k| resp.iter().skip(k).step_by(g).copied().collect()).collect();
        let mass: Vec<f64> = weights.iter().map(|w| w.iter().sum()).collect();
        if mass.iter().any(|&m| m < DEGENERATE_FRACTION * n as f64) {
            return None;
        }
        let proportions: Vec<f64> = mass.iter().map(|m| m / n as f64).collect();
        let betas: Vec<Vec<f64>> =
            (0..g).map(|k| gls_beta(&self.stats, &weights[k], &current.params[k])).collect::<Option<_>>()?;

        let re_kind = self.config.random_effects;
        let terms: Vec<VarianceTerms> =
            (0..g).map(|k| VarianceTerms::build(&self.stats, &weights[k], &betas[k], re_kind)).collect();
        let fix = self.config.fix_random_effects_at_zero;
        let solo = Sharing { residual: true, random_effects: true };
        let variances = match self.config.variance_mode {
            VarianceMode::PerCluster => terms
                .iter()
                .zip(&current.params)
                .flat_map(|(t, cur)| {
                    update_variances(
                        std::slice::from_ref(t),
                        &self.stats,
                        std::slice::from_ref(cur),
                        solo,
                        fix,
                        self.data_var,
                    )
                })
                .collect(),
            VarianceMode::Tied => update_variances(&terms, &self.stats, &current.params, solo, fix, self.data_var),
            VarianceMode::SharedResidual => update_variances(
                &terms,
                &self.stats,
                &current.params,
                Sharing { residual: true, random_effects: false },
                fix,
                self.data_var,
            ),
        };
        let params =
            betas.into_iter().zip(variances).map(|(beta, (sigma2, re))| ClusterParams { beta, sigma2, re }).collect();
        Some(State { proportions, params })
    }

    fn initial_state(&self, rng: &mut StreamRng) -> Option<(State, Vec<f64>)> {
        let g = self.config.g;
        let n = self.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut resp = vec![0.0; n * g];
        for (pos, &i) in order.iter().enumerate() {
            let k = if pos < g { pos } else { rng.gen_range(0..g) };
            resp[i * g + k] = 1.0;
        }
        let r = self.config.random_effects.count(self.config.basis.n_cols());
        let start =
            ClusterParams { beta: vec![], sigma2: self.data_var.max(RESIDUAL_VARIANCE_FLOOR), re: vec![0.0; r] };
        let current = State { proportions: vec![1.0 / g as f64; g], params: vec![start; g] };
        let state = self.m_step(&resp, &current)?;
        Some((state, resp))
    }

    fn run(&self, rng: &mut StreamRng) -> Option<(State, Vec<f64>, Vec<f64>, bool)> {
        let (mut state, mut resp) = self.initial_state(rng)?;
        let mut trace = Vec::new();
        let mut prev = f64::NEG_INFINITY;
        let mut converged = false;
        for it in 1..=self.config.max_iter {
            let ll = self.e_step(&state, &mut resp);
            if !ll.is_finite() {
                return None;
            }
            trace.push(ll);
            if (ll - prev).abs() < self.config.rel_tol * ll.abs() {
                converged = true;
                break;
            }
            if it == self.config.max_iter {
                break;
            }
            prev = ll;
            state = self.m_step(&resp, &state)?;
        }
        Some((state, resp, trace, converged))
    }
}

/// Fits a GBTM or GMM by multi-start EM and returns the best start by
/// log-likelihood, with clusters sorted by descending fitted level at the
/// midpoint of the basis domain.
pub fn fit_mixture(dataset: &Dataset, config: &MixtureConfig) -> Result<(MixtureModel, PosteriorMatrix)> {
    let g = config.g;
    let q = config.basis.n_cols();
    if g == 0 {
        return Err(Error::Config("G must be at least 1".into()));
    }
    if config.n_starts == 0 {
        return Err(Error::Config("n_starts must be at least 1".into()));
    }
    if dataset.len() < g {
        return Err(Error::Config(format!("G={g} exceeds the {} subjects", dataset.len())));
    }
    let n_obs = dataset.n_observations();
    if n_obs <= g * (q + 1) {
        return Err(Error::Config(format!("{n_obs} observations are too few for G={g} with {q} basis columns")));
    }
    let stats = dataset
        .trajectories()
        .iter()
        .map(|t| SubjectStats::new(&config.basis, config.random_effects, t.times(), t.values()))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = dataset.trajectories().iter().flat_map(|t| t.values().iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let data_var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
    let problem = Problem { stats, config, data_var };

    // per start: the finished run (if any) and the number of collapsed attempts
    let runs: Vec<(Option<Run>, usize)> = (0..config.n_starts)
        .into_par_iter()
        .map(|s| {
            let mut failures = 0;
            for attempt in 0..ATTEMPTS_PER_START {
                let mut rng = substream(config.seed, s as u64 * ATTEMPTS_PER_START + attempt);
                if let Some(run) = problem.run(&mut rng) {
                    return (Some(run), failures);
                }
                failures += 1;
            }
            (None, failures)
        })
        .collect();
    let degenerate_starts = runs.iter().map(|r| r.1).sum();
    let (state, resp, trace, converged) = runs
        .into_iter()
        .filter_map(|r| r.0)
        .reduce(|best, run| if run.2.last() > best.2.last() { run } else { best })
        .ok_or(Error::AllStartsDegenerate { g, starts: config.n_starts })?;

    // canonical order: descending level at the domain midpoint
    let mid = config.basis.row(0.5 * (config.basis.lower + config.basis.upper))?;
    let mut order: Vec<usize> = (0..g).collect();
    let level = |k: usize| dot(&mid, &state.params[k].beta);
    order.sort_by(|&a, &b| level(b).total_cmp(&level(a)).then(a.cmp(&b)));

    let n = dataset.len();
    let mut probs = vec![0.0; n * g];
    for i in 0..n {
        for (new, &old) in order.iter().enumerate() {
            probs[i * g + new] = resp[i * g + old];
        }
    }
    let loglik = *trace.last().expect("at least one E-step");
    let n_params = config.n_params();
    let n_bic = match config.bic_sample_size {
        BicSampleSize::Observations => n_obs,
        BicSampleSize::Subjects => n,
    };
    let model = MixtureModel {
        version: crate::VERSION.to_string(),
        basis: config.basis,
        random_effects: config.random_effects,
        variance_mode: config.variance_mode,
        g,
        proportions: order.iter().map(|&k| state.proportions[k]).collect(),
        coefficients: order.iter().map(|&k| state.params[k].beta.clone()).collect(),
        residual_variances: order.iter().map(|&k| state.params[k].sigma2).collect(),
        random_effect_variances: order
            .iter()
            .map(|&k| {
                let l = factor(&state.params[k].re, config.random_effects.dim(q));
                (&l * l.transpose()).diagonal().iter().copied().collect()
            })
            .collect(),
        random_effect_factors: order.iter().map(|&k| state.params[k].re.clone()).collect(),
        loglik,
        n_params,
        n_obs,
        n_subjects: n,
        bic_sample_size: config.bic_sample_size,
        bic: bic(loglik, n_params, n_bic),
        iterations: trace.len(),
        converged,
        degenerate_starts,
        loglik_trace: trace,
    };
    Ok((model, PosteriorMatrix::new(n, g, probs)?))
}

/// Group-based trajectory model.
pub fn gbtm_fit(
    dataset: &Dataset,
    basis: Basis,
    g: usize,
    n_starts: usize,
    seed: u64,
    variance_mode: VarianceMode,
) -> Result<(MixtureModel, PosteriorMatrix)> {
    let config = MixtureConfig { variance_mode, ..MixtureConfig::new(basis, RandomEffects::None, g, n_starts, seed) };
    fit_mixture(dataset, &config)
}

/// Growth mixture model with random effects integrated out.
pub fn gmm_fit(
    dataset: &Dataset,
    basis: Basis,
    random_effects: RandomEffects,
    g: usize,
    n_starts: usize,
    seed: u64,
    variance_mode: VarianceMode,
) -> Result<(MixtureModel, PosteriorMatrix)> {
    if random_effects == RandomEffects::None {
        return Err(Error::Config("a growth mixture model needs random effects".into()));
    }
    let config = MixtureConfig { variance_mode, ..MixtureConfig::new(basis, random_effects, g, n_starts, seed) };
    fit_mixture(dataset, &config)
}

/// Membership probabilities of a (possibly partial) trajectory. With no
/// observations the prior proportions are returned.
pub fn posterior(model: &MixtureModel, times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if times.len() != values.len() {
        return Err(Error::Validation("times and values differ in length".into()));
    }
    if times.is_empty() {
        return Ok(model.proportions.clone());
    }
    let mut lj = model.log_joint(times, values)?;
    normalize_log_weights(&mut lj);
    Ok(lj)
}

/// Fixed-effect mean curve of every cluster at `times`.
pub fn cluster_means(model: &MixtureModel, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let rows = times.iter().map(|&t| model.basis.row(t)).collect::<Result<Vec<_>>>()?;
    Ok(model.coefficients.iter().map(|beta| rows.iter().map(|x| dot(x, beta)).collect()).collect())
}

/// Population mean `Σ_g π_g x(t)ᵀβ_g`.
pub fn marginal_mean(model: &MixtureModel, times: &[f64]) -> Result<Vec<f64>> {
    let curves = cluster_means(model, times)?;
    Ok((0..times.len()).map(|j| curves.iter().zip(&model.proportions).map(|(c, p)| p * c[j]).sum()).collect())
}
