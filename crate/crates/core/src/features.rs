//! Individual time-series features and feature-based clustering.
//!
//! Each trajectory is regressed on an orthonormal polynomial basis built by
//! Gram-Schmidt over its own observation times, under the mean inner product
//! `<f, h> = (1/n) Σ_j f(t_j) h(t_j)`. With that inner product the intercept
//! coefficient of a constant trajectory is the constant itself.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition, Trajectory};
use crate::distance::{k_medoids, DistanceMatrix, KMedoidsResult};
use crate::error::{Error, Result};

pub const FEATURE_NAMES: [&str; 6] = ["b_intercept", "b_linear", "b_quad", "resid_sd", "log_attempts", "ac1"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub include_intercept: bool,
    pub include_linear: bool,
    pub include_quadratic: bool,
    pub include_residual_sd: bool,
    pub include_log_attempts: bool,
    pub include_lag1_autocorr: bool,
    /// An observation counts as an attempt when strictly above this value.
    pub attempt_threshold: f64,
}

impl Default for FeatureConfig {
    /// Intercept, linear, quadratic and log attempt count.
    fn default() -> Self {
        Self {
            include_intercept: true,
            include_linear: true,
            include_quadratic: true,
            include_residual_sd: false,
            include_log_attempts: true,
            include_lag1_autocorr: false,
            attempt_threshold: 0.0,
        }
    }
}

impl FeatureConfig {
    /// Parses a comma-separated list of `b0,b1,b2,sd,logN,ac1` (or the full
    /// column names).
    pub fn from_list(list: &str) -> Result<Self> {
        let mut cfg = Self {
            include_intercept: false,
            include_linear: false,
            include_quadratic: false,
            include_residual_sd: false,
            include_log_attempts: false,
            include_lag1_autocorr: false,
            attempt_threshold: 0.0,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "b0" | "b_intercept" => cfg.include_intercept = true,
                "b1" | "b_linear" => cfg.include_linear = true,
                "b2" | "b_quad" => cfg.include_quadratic = true,
                "sd" | "resid_sd" => cfg.include_residual_sd = true,
                "logN" | "log_attempts" => cfg.include_log_attempts = true,
                "ac1" => cfg.include_lag1_autocorr = true,
                other => return Err(Error::Config(format!("unknown feature `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled().iter().any(|&b| b) {
            return Err(Error::Config("at least one feature must be enabled".into()));
        }
        Ok(())
    }

    fn enabled(&self) -> [bool; 6] {
        [
            self.include_intercept,
            self.include_linear,
            self.include_quadratic,
            self.include_residual_sd,
            self.include_log_attempts,
            self.include_lag1_autocorr,
        ]
    }

    pub fn names(&self) -> Vec<String> {
        FEATURE_NAMES.iter().zip(self.enabled()).filter(|(_, on)| *on).map(|(n, _)| n.to_string()).collect()
    }

    /// Degree of the per-subject polynomial fit: the highest enabled
    /// coefficient, or 0 when none is enabled.
    pub fn fit_degree(&self) -> usize {
        if self.include_quadratic {
            2
        } else if self.include_linear {
            1
        } else {
            0
        }
    }
}

/// Features of one trajectory in [`FEATURE_NAMES`] order, restricted to the
/// enabled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Set when the lag-1 autocorrelation was requested but the residuals are
    /// identically zero; the feature is then reported as 0.
    pub degenerate_ac1: bool,
}

/// Orthonormal basis vectors (evaluated at `times`) for degrees `0..=degree`.
fn orthonormal_basis(times: &[f64], degree: usize) -> Option<Vec<Vec<f64>>> {
    let n = times.len() as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
    // centring and scaling t first keeps the raw powers well conditioned
    let tm = times.iter().sum::<f64>() / n;
    let ts = (times.iter().map(|t| (t - tm) * (t - tm)).sum::<f64>() / n).sqrt();
    let scale = if ts > 0.0 { ts } else { 1.0 };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(degree + 1);
    for k in 0..=degree {
        let mut v: Vec<f64> = times.iter().map(|t| ((t - tm) / scale).powi(k as i32)).collect();
        // modified Gram-Schmidt, two passes
        for _ in 0..2 {
            for e in &basis {
                let c = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(x, ei)| *x -= c * ei);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-10 {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Some(basis)
}

/// Least-squares features of one trajectory.
pub fn its_features(trajectory: &Trajectory, config: &FeatureConfig) -> Result<FeatureVector> {
    config.validate()?;
    let id = trajectory.subject_id();
    let y = trajectory.values();
    let n = y.len();
    let q = config.fit_degree() + 1;
    let needs_residuals = config.include_residual_sd || config.include_lag1_autocorr;
    let min_points = if config.include_residual_sd { q + 1 } else { q };
    if n < min_points {
        return Err(Error::Validation(format!("subject {id}: {n} observations, need at least {min_points}")));
    }
    let basis = orthonormal_basis(trajectory.times(), q - 1).ok_or_else(|| {
        Error::Validation(format!("subject {id}: times too few or too concentrated for a degree-{} fit", q - 1))
    })?;
    let nf = n as f64;
    let coefs: Vec<f64> = basis.iter().map(|e| e.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / nf).collect();

    let mut out = Vec::new();
    let mut degenerate_ac1 = false;
    for (k, on) in [config.include_intercept, config.include_linear, config.include_quadratic].into_iter().enumerate() {
        if on {
            out.push(coefs[k]);
        }
    }
    if needs_residuals || config.include_log_attempts {
        let resid: Vec<f64> =
            (0..n).map(|j| y[j] - basis.iter().zip(&coefs).map(|(e, c)| c * e[j]).sum::<f64>()).collect();
        if config.include_residual_sd {
            let rss: f64 = resid.iter().map(|r| r * r).sum();
            out.push((rss / (n - q) as f64).sqrt());
        }
        if config.include_log_attempts {
            let attempts = y.iter().filter(|&&v| v > config.attempt_threshold).count();
            out.push((1.0 + attempts as f64).ln());
        }
        if config.include_lag1_autocorr {
            let m = resid.iter().sum::<f64>() / nf;
            let c0: f64 = resid.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / nf;
            let scale = y.iter().map(|v| v * v).sum::<f64>() / nf;
            if c0 <= 1e-24 * scale.max(1e-300) {
                degenerate_ac1 = true;
                out.push(0.0);
            } else {
                let c1: f64 = resid.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / nf;
                out.push(c1 / c0);
            }
        }
    }
    Ok(FeatureVector { values: out, degenerate_ac1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub subject_ids: Vec<String>,
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub standardized: bool,
    /// Per column: true when the column was constant at standardization.
    pub constant_columns: Vec<bool>,
}

impl FeatureMatrix {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["subject_id".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.subject_ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn extract_features(dataset: &Dataset, config: &FeatureConfig) -> Result<FeatureMatrix> {
    let rows =
        dataset.trajectories().iter().map(|t| its_features(t, config).map(|f| f.values)).collect::<Result<Vec<_>>>()?;
    let names = config.names();
    Ok(FeatureMatrix {
        subject_ids: dataset.subject_ids(),
        constant_columns: vec![false; names.len()],
        names,
        rows,
        standardized: false,
    })
}

/// Column-wise z-scores with the `N - 1` standard deviation. Constant columns
/// become zeros and are flagged.
pub fn standardize(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let n = features.rows.len();
    if n < 2 {
        return Err(Error::Validation("standardization needs at least two rows".into()));
    }
    let p = features.names.len();
    let mut rows = features.rows.clone();
    let mut constant = vec![false; p];
    for j in 0..p {
        let col: Vec<f64> = features.rows.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
        if sd <= 1e-12 * mean.abs().max(1e-300) || sd == 0.0 {
            constant[j] = true;
            rows.iter_mut().for_each(|r| r[j] = 0.0);
        } else {
            rows.iter_mut().for_each(|r| r[j] = (r[j] - mean) / sd);
        }
    }
    Ok(FeatureMatrix {
        subject_ids: features.subject_ids.clone(),
        names: features.names.clone(),
        rows,
        standardized: true,
        constant_columns: constant,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClustering {
    pub result: KMedoidsResult,
    pub distances: DistanceMatrix,
    /// The input had not been standardized.
    pub unstandardized_warning: bool,
}

/// Euclidean distances between feature rows followed by k-medoids.
pub fn feature_cluster(features: &FeatureMatrix, g: usize, n_starts: usize, seed: u64) -> Result<FeatureClustering> {
    let distances = DistanceMatrix::euclidean(&features.rows)?;
    let result = k_medoids(&distances, g, n_starts, seed)?;
    Ok(FeatureClustering { result, distances, unstandardized_warning: !features.standardized })
}

/// Pointwise mean of member trajectories per cluster, as `(time, mean)` pairs
/// sorted by time. Observations are pooled by exact time value.
pub fn cluster_mean_trajectories(dataset: &Dataset, partition: &Partition) -> Result<Vec<Vec<(f64, f64)>>> {
    if partition.len() != dataset.len() {
        return Err(Error::Validation("partition and dataset sizes differ".into()));
    }
    let mut acc: Vec<std::collections::BTreeMap<u64, (f64, f64, usize)>> = vec![Default::default(); partition.g()];
    for (t, &l) in dataset.trajectories().iter().zip(partition.labels()) {
        for (&time, &v) in t.times().iter().zip(t.values()) {
            // order-preserving key for finite f64
            let bits = time.to_bits();
            let key = if time >= 0.0 { bits ^ (1 << 63) } else { !bits };
            let e = acc[l].entry(key).or_insert((time, 0.0, 0));
            e.1 += v;
            e.2 += 1;
        }
    }
    Ok(acc.into_iter().map(|m| m.into_values().map(|(t, s, c)| (t, s / c as f64)).collect()).collect())
}
