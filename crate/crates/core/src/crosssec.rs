//! Cross-sectional clustering of trajectories observed on a shared grid:
//! longitudinal k-means (KML) and longitudinal latent profile analysis (LLPA).
//!
//! Both treat the `n` grid values of a subject as one point in `R^n`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AlignedMatrix, Partition, PosteriorMatrix};
use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};
use crate::stats::{normalize_log_weights, LN_2PI};

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-8;
/// Floor on the pooled KML variance used by [`kml_bic`].
pub const KML_VARIANCE_FLOOR: f64 = 1e-12;
pub const LPA_MAX_ITER: usize = 500;
pub const LPA_REL_TOL: f64 = 1e-8;
/// Lower bound on every LLPA standard deviation, in data units.
pub const LPA_SD_FLOOR: f64 = 1e-3;
/// A cluster whose responsibility mass falls below this fraction of N is
/// treated as collapsed.
pub const COLLAPSE_FRACTION: f64 = 1e-3;
const ATTEMPTS_PER_START: u64 = 4;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids.iter().enumerate().fold((0, f64::INFINITY), |best, (g, c)| {
        let d = sq_dist(point, c);
        if d < best.1 {
            (g, d)
        } else {
            best
        }
    })
}

/// k-means++ seeding: first centre uniform, the rest drawn with probability
/// proportional to the squared distance to the nearest chosen centre.
pub(crate) fn kmeans_pp(data: &AlignedMatrix, g: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let n = data.n_rows();
    let mut centroids = vec![data.row(rng.gen_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = data.rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < g {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = data.row(pick).to_vec();
        for (d, r) in d2.iter_mut().zip(data.rows()) {
            *d = d.min(sq_dist(r, &c));
        }
        centroids.push(c);
    }
    centroids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmlResult {
    pub centroids: Vec<Vec<f64>>,
    pub partition: Partition,
    pub wss: f64,
    pub bic_approx: f64,
    pub starts_used: usize,
    /// Within-cluster sum of squares after each Lloyd iteration of the
    /// winning start.
    #[serde(skip)]
    pub wss_trace: Vec<f64>,
}

/// Lloyd iterations from the given centroids.
///
/// Returns final centroids, labels and the WSS trace. An emptied cluster is
/// reseeded at the point farthest from its current centroid.
pub fn lloyd(data: &AlignedMatrix, mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let n = data.n_rows();
    let p = data.n_cols();
    let g = centroids.len();
    let mut labels = vec![0; n];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut dists = vec![0.0; n];
        for (i, row) in data.rows().enumerate() {
            let (l, d) = nearest(row, &centroids);
            labels[i] = l;
            dists[i] = d;
        }
        let mut counts = vec![0usize; g];
        for &l in &labels {
            counts[l] += 1;
        }
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .fold((usize::MAX, -1.0), |best, i| if dists[i] > best.1 { (i, dists[i]) } else { best })
                .0;
            if far == usize::MAX {
                break;
            }
            counts[labels[far]] -= 1;
            labels[far] = empty;
            counts[empty] = 1;
            dists[far] = 0.0;
        }

        let mut next = vec![vec![0.0; p]; g];
        for (row, &l) in data.rows().zip(&labels) {
            for (acc, v) in next[l].iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (k, c) in next.iter_mut().enumerate() {
            if counts[k] == 0 {
                c.clone_from(&centroids[k]);
                continue;
            }
            c.iter_mut().for_each(|v| *v /= counts[k] as f64);
            shift = shift.max(sq_dist(c, &centroids[k]).sqrt());
        }
        centroids = next;
        let wss: f64 = data.rows().zip(&labels).map(|(r, &l)| sq_dist(r, &centroids[l])).sum();
        trace.push(wss);
        if shift < KMEANS_TOL {
            break;
        }
    }
    (centroids, labels, trace)
}

/// Longitudinal k-means: best of `n_starts` Lloyd runs from k-means++ seeds.
pub fn kml_fit(data: &AlignedMatrix, g: usize, n_starts: usize, seed: u64) -> Result<KmlResult> {
    let n = data.n_rows();
    if g == 0 || g > n {
        return Err(Error::Config(format!("KML needs 1 <= G <= N, got G={g}, N={n}")));
    }
    if n_starts == 0 {
        return Err(Error::Config("n_starts must be at least 1".into()));
    }
    let runs: Vec<_> = (0..n_starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = substream(seed, s as u64);
            lloyd(data, kmeans_pp(data, g, &mut rng))
        })
        .collect();
    let (centroids, labels, wss_trace) = runs
        .into_iter()
        .reduce(|best, run| if run.2.last() < best.2.last() { run } else { best })
        .expect("n_starts >= 1");
    let mut result = KmlResult {
        wss: *wss_trace.last().unwrap_or(&0.0),
        centroids,
        partition: Partition::new(labels, g)?,
        bic_approx: 0.0,
        starts_used: n_starts,
        wss_trace,
    };
    result.bic_approx = kml_bic(&result, data);
    Ok(result)
}

/// Log-likelihood, parameter count and sample size of a KML solution under a
/// spherical Gaussian with one pooled variance: `σ² = WSS / (N n)`,
/// `p = G n + 1`, sample size `N n`.
pub fn kml_likelihood(result: &KmlResult, data: &AlignedMatrix) -> (f64, usize, usize) {
    let cells = data.n_rows() * data.n_cols();
    let var = (result.wss / cells as f64).max(KML_VARIANCE_FLOOR);
    let loglik = -0.5 * cells as f64 * (LN_2PI + var.ln()) - 0.5 * result.wss / var;
    (loglik, result.centroids.len() * data.n_cols() + 1, cells)
}

/// BIC of a KML solution, see [`kml_likelihood`].
pub fn kml_bic(result: &KmlResult, data: &AlignedMatrix) -> f64 {
    let (loglik, p, cells) = kml_likelihood(result, data);
    p as f64 * (cells as f64).ln() - 2.0 * loglik
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpaVariance {
    /// One standard deviation per cluster and time point.
    #[default]
    PerTime,
    /// One standard deviation per cluster, shared across time points.
    Tied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpaModel {
    pub proportions: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per cluster: `n` values in per-time mode, one value in tied mode.
    pub sds: Vec<Vec<f64>>,
    pub variance: LpaVariance,
    pub loglik: f64,
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Starts that collapsed and were re-drawn.
    pub degenerate_starts: usize,
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

impl LpaModel {
    fn sd(&self, g: usize, j: usize) -> f64 {
        match self.variance {
            LpaVariance::PerTime => self.sds[g][j],
            LpaVariance::Tied => self.sds[g][0],
        }
    }

    /// Log of `π_g Π_j φ(y_j; μ_gj, σ_gj)` for every cluster.
    pub fn log_joint(&self, row: &[f64]) -> Vec<f64> {
        (0..self.proportions.len())
            .map(|g| {
                let mut acc = self.proportions[g].ln();
                for (j, &y) in row.iter().enumerate() {
                    let sd = self.sd(g, j);
                    let z = (y - self.means[g][j]) / sd;
                    acc -= 0.5 * LN_2PI + sd.ln() + 0.5 * z * z;
                }
                acc
            })
            .collect()
    }
}

fn lpa_n_params(g: usize, n: usize, variance: LpaVariance) -> usize {
    let sd_count = match variance {
        LpaVariance::PerTime => g * n,
        LpaVariance::Tied => g,
    };
    (g - 1) + g * n + sd_count
}

fn lpa_m_step(data: &AlignedMatrix, resp: &[f64], g: usize, variance: LpaVariance) -> Option<LpaModel> {
    let n = data.n_rows();
    let p = data.n_cols();
    let mut mass = vec![0.0; g];
    let mut means = vec![vec![0.0; p]; g];
    for (row, r) in data.rows().zip(resp.chunks_exact(g)) {
        for k in 0..g {
            mass[k] += r[k];
            for (m, y) in means[k].iter_mut().zip(row) {
                *m += r[k] * y;
            }
        }
    }
    if mass.iter().any(|&m| m < COLLAPSE_FRACTION * n as f64) {
        return None;
    }
    for (m, &w) in means.iter_mut().zip(&mass) {
        m.iter_mut().for_each(|v| *v /= w);
    }
    let mut ss = vec![vec![0.0; p]; g];
    for (row, r) in data.rows().zip(resp.chunks_exact(g)) {
        for k in 0..g {
            for j in 0..p {
                let d = row[j] - means[k][j];
                ss[k][j] += r[k] * d * d;
            }
        }
    }
    let sds = ss
        .iter()
        .zip(&mass)
        .map(|(s, &w)| match variance {
            LpaVariance::PerTime => s.iter().map(|v| (v / w).sqrt().max(LPA_SD_FLOOR)).collect(),
            LpaVariance::Tied => vec![(s.iter().sum::<f64>() / (w * p as f64)).sqrt().max(LPA_SD_FLOOR)],
        })
        .collect();
    Some(LpaModel {
        proportions: mass.iter().map(|m| m / n as f64).collect(),
        means,
        sds,
        variance,
        loglik: f64::NEG_INFINITY,
        n_params: lpa_n_params(g, p, variance),
        iterations: 0,
        converged: false,
        degenerate_starts: 0,
        loglik_trace: Vec::new(),
    })
}

fn lpa_e_step(model: &LpaModel, data: &AlignedMatrix, resp: &mut [f64]) -> f64 {
    let g = model.proportions.len();
    let mut loglik = 0.0;
    for (row, r) in data.rows().zip(resp.chunks_exact_mut(g)) {
        r.copy_from_slice(&model.log_joint(row));
        loglik += normalize_log_weights(r);
    }
    loglik
}

fn lpa_run(data: &AlignedMatrix, g: usize, variance: LpaVariance, rng: &mut StreamRng) -> Option<(LpaModel, Vec<f64>)> {
    let centroids = kmeans_pp(data, g, rng);
    let mut resp = vec![0.0; data.n_rows() * g];
    for (row, r) in data.rows().zip(resp.chunks_exact_mut(g)) {
        r[nearest(row, &centroids).0] = 1.0;
    }
    let mut model = lpa_m_step(data, &resp, g, variance)?;
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for it in 1..=LPA_MAX_ITER {
        let ll = lpa_e_step(&model, data, &mut resp);
        trace.push(ll);
        model.iterations = it;
        model.loglik = ll;
        if (ll - prev).abs() < LPA_REL_TOL * ll.abs() {
            model.converged = true;
            break;
        }
        if it == LPA_MAX_ITER {
            break;
        }
        prev = ll;
        model = LpaModel { iterations: it, ..lpa_m_step(data, &resp, g, variance)? };
    }
    model.loglik_trace = trace;
    Some((model, resp))
}

/// A finished start: model and responsibilities.
type LpaRun = (LpaModel, Vec<f64>);

/// Longitudinal latent profile analysis by EM, best of `n_starts` by
/// log-likelihood.
///
/// Each start is seeded from k-means++ centres (hard assignment, one M-step).
/// A start whose cluster mass collapses is re-drawn from a fresh stream up to
/// three times before being abandoned.
pub fn llpa_fit(
    data: &AlignedMatrix,
    g: usize,
    n_starts: usize,
    seed: u64,
    variance: LpaVariance,
) -> Result<(LpaModel, PosteriorMatrix)> {
    let n = data.n_rows();
    if g == 0 || g > n {
        return Err(Error::Config(format!("LLPA needs 1 <= G <= N, got G={g}, N={n}")));
    }
    if n_starts == 0 {
        return Err(Error::Config("n_starts must be at least 1".into()));
    }
    let runs: Vec<(Option<LpaRun>, usize)> = (0..n_starts)
        .into_par_iter()
        .map(|s| {
            let mut failures = 0;
            for attempt in 0..ATTEMPTS_PER_START {
                let mut rng = substream(seed, s as u64 * ATTEMPTS_PER_START + attempt);
                if let Some(run) = lpa_run(data, g, variance, &mut rng) {
                    return (Some(run), failures);
                }
                failures += 1;
            }
            (None, failures)
        })
        .collect();
    let degenerate: usize = runs.iter().map(|r| r.1).sum();
    let (mut model, resp) = runs
        .into_iter()
        .filter_map(|r| r.0)
        .reduce(|best, run| if run.0.loglik > best.0.loglik { run } else { best })
        .ok_or(Error::AllStartsDegenerate { g, starts: n_starts })?;
    model.degenerate_starts = degenerate;
    Ok((model, PosteriorMatrix::new(n, g, resp)?))
}
