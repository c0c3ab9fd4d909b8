//! Model-selection scores and the cluster-count sweep.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosssec::{kml_fit, kml_likelihood, llpa_fit, KmlResult, LpaModel, LpaVariance};
use crate::data::{align, hard_assign, AlignedMatrix, Dataset, Partition, PosteriorMatrix, DEFAULT_ALIGN_TOLERANCE};
use crate::distance::{
    ahc, average_silhouette_width, cut_tree, k_medoids, pairwise_distances, Dendrogram, DistanceMatrix, KMedoidsResult,
    Linkage,
};
use crate::error::{Error, Result};
use crate::features::{cluster_mean_trajectories, extract_features, standardize, FeatureConfig, FeatureMatrix};
use crate::mixture::{cluster_means, fit_mixture, Basis, MixtureConfig, MixtureModel, RandomEffects, VarianceMode};
use crate::rng::mix;

/// Sample size entering the BIC penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BicSampleSize {
    /// Total number of observations.
    #[default]
    Observations,
    /// Number of subjects.
    Subjects,
}

/// `p ln n − 2 logL`.
pub fn bic(loglik: f64, n_params: usize, n: usize) -> f64 {
    n_params as f64 * (n as f64).ln() - 2.0 * loglik
}

/// Mean per-subject entropy of the membership probabilities (`0 ln 0 = 0`).
pub fn posterior_entropy(posterior: &PosteriorMatrix) -> f64 {
    let total: f64 = posterior.rows().flat_map(|r| r.iter()).filter(|&&z| z > 0.0).map(|&z| -z * z.ln()).sum();
    (total / posterior.n() as f64).max(0.0)
}

pub const DEFAULT_ELBOW_THRESHOLD: f64 = 0.05;

/// Smallest G whose improvement over G−1 falls below `theta` times the total
/// improvement from the first to the last G. Scores are lower-is-better and
/// must belong to consecutive cluster counts. `None` means no elbow.
pub fn elbow(scores: &[(usize, f64)], theta: f64) -> Result<Option<usize>> {
    if scores.len() < 3 {
        return Err(Error::Validation(format!("elbow needs at least 3 scores, got {}", scores.len())));
    }
    if scores.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
        return Err(Error::Validation("elbow scores must be for consecutive G".into()));
    }
    let threshold = theta * (scores[0].1 - scores[scores.len() - 1].1);
    Ok(scores.windows(2).find(|w| w[0].1 - w[1].1 < threshold).map(|w| w[1].0))
}

/// A clustering method and its method-specific options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Kml,
    Llpa {
        variance: LpaVariance,
    },
    Ahc {
        linkage: Linkage,
    },
    Kmedoids,
    Features {
        features: FeatureConfig,
    },
    /// `basis` is `poly:D` or `bspline:3:K`; the domain is the data's time range.
    Gbtm {
        basis: String,
        variance: VarianceMode,
    },
    Gmm {
        basis: String,
        random_effects: RandomEffects,
        variance: VarianceMode,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Kml => "kml",
            Method::Llpa { .. } => "llpa",
            Method::Ahc { .. } => "ahc",
            Method::Kmedoids => "kmedoids",
            Method::Features { .. } => "features",
            Method::Gbtm { .. } => "gbtm",
            Method::Gmm { .. } => "gmm",
        }
    }

    fn needs_alignment(&self) -> bool {
        matches!(self, Method::Kml | Method::Llpa { .. } | Method::Ahc { .. } | Method::Kmedoids)
    }
}

/// The fitted object of one method at one G; this is what `fit` writes as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FittedModel {
    Kml(KmlResult),
    Llpa(LpaModel),
    Ahc { dendrogram: Dendrogram, partition: Partition },
    Kmedoids(KMedoidsResult),
    Features { feature_names: Vec<String>, standardized: bool, clustering: KMedoidsResult },
    Mixture(MixtureModel),
}

/// One fit with its scores. Scores are `None` where undefined for the method.
#[derive(Debug, Clone)]
pub struct Fit {
    pub g: usize,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: Option<f64>,
    pub asw: Option<f64>,
    pub entropy: Option<f64>,
    pub partition: Partition,
    pub posterior: Option<PosteriorMatrix>,
    /// Per cluster, `(time, value)` points of the cluster trajectory.
    pub curves: Vec<Vec<(f64, f64)>>,
    pub model: FittedModel,
}

impl Fit {
    pub fn min_cluster_size(&self) -> usize {
        self.partition.cluster_sizes().into_iter().min().unwrap_or(0)
    }

    /// Clusters whose responsibility mass (or size, for hard partitions) is
    /// below `fraction · N`.
    pub fn near_empty(&self, fraction: f64) -> usize {
        let limit = fraction * self.partition.len() as f64;
        match &self.posterior {
            Some(p) => p.cluster_mass().into_iter().filter(|&m| m < limit).count(),
            None => self.partition.cluster_sizes().into_iter().filter(|&s| (s as f64) < limit).count(),
        }
    }
}

/// Shared, lazily built inputs for fitting one method to one dataset at
/// several cluster counts.
pub struct FitContext<'a> {
    dataset: &'a Dataset,
    method: Method,
    bic_n: BicSampleSize,
    aligned: OnceLock<Result<AlignedMatrix>>,
    distances: OnceLock<Result<DistanceMatrix>>,
    features: OnceLock<Result<FeatureMatrix>>,
    dendrogram: OnceLock<Result<Dendrogram>>,
}

fn cached<T>(cell: &OnceLock<Result<T>>, build: impl FnOnce() -> Result<T>) -> Result<&T> {
    cell.get_or_init(build).as_ref().map_err(|e| Error::Validation(e.to_string()))
}

impl<'a> FitContext<'a> {
    pub fn new(dataset: &'a Dataset, method: Method, bic_n: BicSampleSize) -> Self {
        Self {
            dataset,
            method,
            bic_n,
            aligned: OnceLock::new(),
            distances: OnceLock::new(),
            features: OnceLock::new(),
            dendrogram: OnceLock::new(),
        }
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    fn aligned(&self) -> Result<&AlignedMatrix> {
        cached(&self.aligned, || align(self.dataset, DEFAULT_ALIGN_TOLERANCE))
    }

    /// Distances used for silhouettes: between feature rows for the feature
    /// method, otherwise between aligned trajectories.
    fn distances(&self) -> Result<&DistanceMatrix> {
        cached(&self.distances, || match &self.method {
            Method::Features { .. } => DistanceMatrix::euclidean(&self.features()?.rows),
            _ => pairwise_distances(self.aligned()?),
        })
    }

    fn features(&self) -> Result<&FeatureMatrix> {
        cached(&self.features, || {
            let Method::Features { features } = &self.method else {
                return Err(Error::Config("not a feature method".into()));
            };
            standardize(&extract_features(self.dataset, features)?)
        })
    }

    fn dendrogram(&self) -> Result<&Dendrogram> {
        cached(&self.dendrogram, || {
            let Method::Ahc { linkage } = &self.method else {
                return Err(Error::Config("not a hierarchical method".into()));
            };
            Ok(ahc(self.distances()?, *linkage))
        })
    }

    fn bic_sample(&self, n_obs: usize) -> usize {
        match self.bic_n {
            BicSampleSize::Observations => n_obs,
            BicSampleSize::Subjects => self.dataset.len(),
        }
    }

    fn asw(&self, partition: &Partition) -> Option<f64> {
        if partition.g() < 2 {
            return None;
        }
        average_silhouette_width(self.distances().ok()?, partition).ok()
    }

    fn member_means(&self, partition: &Partition) -> Result<Vec<Vec<(f64, f64)>>> {
        cluster_mean_trajectories(self.dataset, partition)
    }

    /// Fits the method with `g` clusters.
    pub fn fit(&self, g: usize, n_starts: usize, seed: u64) -> Result<Fit> {
        if self.method.needs_alignment() {
            self.aligned()?;
        }
        let (lo, hi) = self.dataset.time_range();
        let fit = match &self.method {
            Method::Kml => {
                let data = self.aligned()?;
                let result = kml_fit(data, g, n_starts, seed)?;
                let (loglik, p, cells) = kml_likelihood(&result, data);
                let partition = result.partition.clone();
                Fit {
                    g,
                    loglik: Some(loglik),
                    n_params: Some(p),
                    bic: Some(bic(loglik, p, self.bic_sample(cells))),
                    asw: self.asw(&partition),
                    entropy: None,
                    curves: self.member_means(&partition)?,
                    partition,
                    posterior: None,
                    model: FittedModel::Kml(result),
                }
            }
            Method::Llpa { variance } => {
                let data = self.aligned()?;
                let (model, post) = llpa_fit(data, g, n_starts, seed, *variance)?;
                let partition = hard_assign(&post);
                let grid = data.grid();
                Fit {
                    g,
                    loglik: Some(model.loglik),
                    n_params: Some(model.n_params),
                    bic: Some(bic(model.loglik, model.n_params, self.bic_sample(data.n_rows() * data.n_cols()))),
                    asw: self.asw(&partition),
                    entropy: Some(posterior_entropy(&post)),
                    curves: model.means.iter().map(|m| grid.iter().copied().zip(m.iter().copied()).collect()).collect(),
                    partition,
                    posterior: Some(post),
                    model: FittedModel::Llpa(model),
                }
            }
            Method::Ahc { .. } => {
                let dendrogram = self.dendrogram()?.clone();
                let partition = cut_tree(&dendrogram, g)?;
                Fit {
                    g,
                    loglik: None,
                    n_params: None,
                    bic: None,
                    asw: self.asw(&partition),
                    entropy: None,
                    curves: self.member_means(&partition)?,
                    posterior: None,
                    model: FittedModel::Ahc { dendrogram, partition: partition.clone() },
                    partition,
                }
            }
            Method::Kmedoids => {
                let result = k_medoids(self.distances()?, g, n_starts, seed)?;
                let partition = result.partition.clone();
                Fit {
                    g,
                    loglik: None,
                    n_params: None,
                    bic: None,
                    asw: self.asw(&partition),
                    entropy: None,
                    curves: self.member_means(&partition)?,
                    partition,
                    posterior: None,
                    model: FittedModel::Kmedoids(result),
                }
            }
            Method::Features { .. } => {
                let fm = self.features()?;
                let result = k_medoids(self.distances()?, g, n_starts, seed)?;
                let partition = result.partition.clone();
                Fit {
                    g,
                    loglik: None,
                    n_params: None,
                    bic: None,
                    asw: self.asw(&partition),
                    entropy: None,
                    curves: self.member_means(&partition)?,
                    partition,
                    posterior: None,
                    model: FittedModel::Features {
                        feature_names: fm.names.clone(),
                        standardized: fm.standardized,
                        clustering: result,
                    },
                }
            }
            Method::Gbtm { basis, variance } | Method::Gmm { basis, variance, .. } => {
                let random_effects = match &self.method {
                    Method::Gmm { random_effects, .. } => *random_effects,
                    _ => RandomEffects::None,
                };
                if matches!(self.method, Method::Gmm { .. }) && random_effects == RandomEffects::None {
                    return Err(Error::Config("a growth mixture model needs random effects".into()));
                }
                let basis = Basis::parse(basis, lo, hi)?;
                let config = MixtureConfig {
                    variance_mode: *variance,
                    bic_sample_size: self.bic_n,
                    ..MixtureConfig::new(basis, random_effects, g, n_starts, seed)
                };
                let (model, post) = fit_mixture(self.dataset, &config)?;
                let partition = hard_assign(&post);
                let times = distinct_times(self.dataset);
                let means = cluster_means(&model, &times)?;
                Fit {
                    g,
                    loglik: Some(model.loglik),
                    n_params: Some(model.n_params),
                    bic: Some(model.bic),
                    asw: if self.aligned().is_ok() { self.asw(&partition) } else { None },
                    entropy: Some(posterior_entropy(&post)),
                    curves: means.into_iter().map(|m| times.iter().copied().zip(m).collect()).collect(),
                    partition,
                    posterior: Some(post),
                    model: FittedModel::Mixture(model),
                }
            }
        };
        Ok(fit)
    }
}

fn distinct_times(dataset: &Dataset) -> Vec<f64> {
    let mut times: Vec<f64> = dataset.trajectories().iter().flat_map(|t| t.times().iter().copied()).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "chooser", rename_all = "kebab-case")]
pub enum Chooser {
    BicMin,
    AswMax,
    /// Elbow of the BIC curve.
    Elbow {
        theta: f64,
    },
}

impl std::str::FromStr for Chooser {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bic-min" => Ok(Chooser::BicMin),
            "asw-max" => Ok(Chooser::AswMax),
            "elbow" => Ok(Chooser::Elbow { theta: DEFAULT_ELBOW_THRESHOLD }),
            _ => Err(Error::Config(format!("unknown chooser `{s}` (bic-min, asw-max, elbow)"))),
        }
    }
}

impl Chooser {
    fn name(&self) -> &'static str {
        match self {
            Chooser::BicMin => "bic-min",
            Chooser::AswMax => "asw-max",
            Chooser::Elbow { .. } => "elbow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub g: usize,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: Option<f64>,
    pub asw: Option<f64>,
    pub entropy: Option<f64>,
    pub min_cluster_size: Option<usize>,
    pub near_empty: Option<usize>,
    /// Milliseconds; not part of the reproducible output.
    #[serde(skip)]
    pub wall_ms: f64,
    /// `ok` or the error message of a failed fit.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub g: usize,
    pub cluster: usize,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub rows: Vec<FitRow>,
    pub chooser: Option<Chooser>,
    pub chosen_g: Option<usize>,
    pub curves: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub g_min: usize,
    pub g_max: usize,
    pub n_starts: usize,
    pub seed: u64,
    pub bic_n: BicSampleSize,
    pub near_empty_fraction: f64,
    pub chooser: Option<Chooser>,
}

pub const DEFAULT_NEAR_EMPTY_FRACTION: f64 = 0.01;

/// Seed used for the fit at `g` within a sweep seeded with `seed`.
pub fn sweep_seed(seed: u64, g: usize) -> u64 {
    mix(seed, g as u64)
}

/// Fits every G in `g_min..=g_max` independently. A failed fit becomes a row
/// with a status message; the sweep fails only when every fit fails.
pub fn sweep(dataset: &Dataset, method: &Method, config: &SweepConfig) -> Result<FitReport> {
    if config.g_min < 1 || config.g_max < config.g_min {
        return Err(Error::Config(format!("invalid G range {}..{}", config.g_min, config.g_max)));
    }
    let ctx = FitContext::new(dataset, method.clone(), config.bic_n);
    let results: Vec<(usize, Result<Fit>, f64)> = (config.g_min..=config.g_max)
        .into_par_iter()
        .map(|g| {
            let start = Instant::now();
            let fit = ctx.fit(g, config.n_starts, sweep_seed(config.seed, g));
            (g, fit, start.elapsed().as_secs_f64() * 1e3)
        })
        .collect();
    if results.iter().all(|r| r.1.is_err()) {
        let msg = results.iter().map(|(g, r, _)| format!("G={g}: {}", r.as_ref().err().unwrap())).collect::<Vec<_>>();
        return Err(Error::Config(format!("every fit in the sweep failed: {}", msg.join("; "))));
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (g, fit, wall_ms) in results {
        match fit {
            Ok(fit) => {
                for (k, curve) in fit.curves.iter().enumerate() {
                    curves.extend(curve.iter().map(|&(time, value)| CurvePoint { g, cluster: k + 1, time, value }));
                }
                rows.push(FitRow {
                    g,
                    loglik: fit.loglik,
                    n_params: fit.n_params,
                    bic: fit.bic,
                    asw: fit.asw,
                    entropy: fit.entropy,
                    min_cluster_size: Some(fit.min_cluster_size()),
                    near_empty: Some(fit.near_empty(config.near_empty_fraction)),
                    wall_ms,
                    status: "ok".into(),
                });
            }
            Err(e) => rows.push(FitRow {
                g,
                loglik: None,
                n_params: None,
                bic: None,
                asw: None,
                entropy: None,
                min_cluster_size: None,
                near_empty: None,
                wall_ms,
                status: e.to_string(),
            }),
        }
    }
    let chosen_g = match config.chooser {
        Some(c) => choose(&rows, c)?,
        None => None,
    };
    Ok(FitReport { method: method.clone(), rows, chooser: config.chooser, chosen_g, curves })
}

/// Applies a chooser to report rows. Ties go to the smallest G.
pub fn choose(rows: &[FitRow], chooser: Chooser) -> Result<Option<usize>> {
    let pick = |score: fn(&FitRow) -> Option<f64>, sign: f64| {
        rows.iter()
            .filter_map(|r| score(r).map(|s| (r.g, sign * s)))
            .fold(None, |best: Option<(usize, f64)>, (g, s)| match best {
                Some((_, b)) if b <= s => best,
                _ => Some((g, s)),
            })
            .map(|(g, _)| g)
    };
    let chosen = match chooser {
        Chooser::BicMin => pick(|r| r.bic, 1.0),
        Chooser::AswMax => pick(|r| r.asw, -1.0),
        Chooser::Elbow { theta } => {
            let scores: Vec<(usize, f64)> = rows.iter().filter_map(|r| r.bic.map(|b| (r.g, b))).collect();
            elbow(&scores, theta)?
        }
    };
    if chosen.is_none() && !matches!(chooser, Chooser::Elbow { .. }) {
        return Err(Error::Config(format!("no row has the score needed by chooser {}", chooser.name())));
    }
    Ok(chosen)
}

fn opt<T: std::fmt::Debug>(v: Option<T>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl FitReport {
    /// One CSV line per G. Wall time is written only when `timings` is set,
    /// keeping the default output reproducible.
    pub fn write_csv<W: Write>(&self, sink: W, timings: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec![
            "method",
            "g",
            "loglik",
            "n_params",
            "bic",
            "asw",
            "entropy",
            "min_cluster_size",
            "near_empty",
            "status",
        ];
        if timings {
            header.push("wall_ms");
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.method.name().to_string(),
                r.g.to_string(),
                opt(r.loglik),
                opt(r.n_params),
                opt(r.bic),
                opt(r.asw),
                opt(r.entropy),
                opt(r.min_cluster_size),
                opt(r.near_empty),
                r.status.clone(),
            ];
            if timings {
                rec.push(format!("{:.1}", r.wall_ms));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_curves_csv<W: Write>(&self, sink: W) -> Result<()> {
        write_curves(&self.curves, sink)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Long-format cluster curves: `g,cluster,time,value`.
pub fn write_curves<W: Write>(curves: &[CurvePoint], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for p in curves {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bic_examples() {
        assert!((bic(0.0, 3, 100) - 13.815_510_557_964_274).abs() < 1e-12);
        assert_eq!(bic(-12.5, 0, 40), 25.0);
    }

    #[test]
    fn entropy_examples() {
        let one_hot = PosteriorMatrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(posterior_entropy(&one_hot), 0.0);
        let uniform = PosteriorMatrix::new(2, 4, vec![0.25; 8]).unwrap();
        assert!((posterior_entropy(&uniform) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn elbow_examples() {
        let s = |v: &[f64]| v.iter().enumerate().map(|(i, &x)| (i + 1, x)).collect::<Vec<_>>();
        assert_eq!(elbow(&s(&[100.0, 40.0, 38.0, 37.0]), 0.05).unwrap(), Some(3));
        assert_eq!(elbow(&s(&[50.0, 40.0, 30.0, 20.0, 10.0]), 0.05).unwrap(), None);
        assert!(elbow(&s(&[2.0, 1.0]), 0.05).is_err());
        assert!(elbow(&[(1, 3.0), (3, 2.0), (4, 1.0)], 0.05).is_err());
    }

    fn row(g: usize, bic: Option<f64>, asw: Option<f64>) -> FitRow {
        FitRow {
            g,
            loglik: None,
            n_params: None,
            bic,
            asw,
            entropy: None,
            min_cluster_size: None,
            near_empty: None,
            wall_ms: 0.0,
            status: "ok".into(),
        }
    }

    #[test]
    fn choosers_break_ties_low() {
        let rows = vec![
            row(1, Some(5.0), None),
            row(2, Some(3.0), Some(0.4)),
            row(3, Some(3.0), Some(0.4)),
            row(4, None, Some(0.1)),
        ];
        assert_eq!(choose(&rows, Chooser::BicMin).unwrap(), Some(2));
        assert_eq!(choose(&rows, Chooser::AswMax).unwrap(), Some(2));
        assert!(choose(&[row(2, None, None)], Chooser::BicMin).is_err());
    }

    proptest! {
        #[test]
        fn entropy_matches_definition(raw in prop::collection::vec(0.0f64..1.0, 12..=12), zero in 0usize..12) {
            let mut raw = raw;
            raw[zero] = 0.0;
            let (n, g) = (4, 3);
            let mut probs = Vec::new();
            for r in raw.chunks(g) {
                let s: f64 = r.iter().sum::<f64>().max(1e-300);
                if s <= 1e-300 { probs.extend([1.0, 0.0, 0.0]); } else { probs.extend(r.iter().map(|v| v / s)); }
            }
            let post = PosteriorMatrix::new(n, g, probs.clone()).unwrap();
            let mut oracle = 0.0;
            for i in 0..n {
                for k in 0..g {
                    let z = probs[i * g + k];
                    if z > 0.0 { oracle -= z * z.ln(); }
                }
            }
            oracle /= n as f64;
            let e = posterior_entropy(&post);
            prop_assert!((e - oracle).abs() < 1e-12);
            prop_assert!(e >= 0.0 && e <= (g as f64).ln() + 1e-12);
        }

        #[test]
        fn bic_increases_with_params(ll in -1e5f64..0.0, p in 0usize..100, n in 2usize..100_000) {
            prop_assert!(bic(ll, p + 1, n) > bic(ll, p, n));
        }
    }
}
