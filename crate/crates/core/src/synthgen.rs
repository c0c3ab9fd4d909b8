//! Synthetic CPAP-style adherence data: seven usage groups with quadratic
//! daily-usage curves, subject-level random intercepts and slopes, daily
//! attempt failures and premature dropout, followed by block averaging.
//!
//! # Random stream layout
//!
//! Patient `i` draws exclusively from `rng::substream(seed, i)` in this order:
//! group (one uniform), intercept deviation, slope deviation, residual
//! variance (rejection-sampled above [`RESIDUAL_VARIANCE_FLOOR`]), dropout day
//! (rejection-sampled above day 1, only for groups with dropout), then for each
//! day before dropout one uniform for the attempt and, on attempted days, one
//! standard normal for the residual. Normals use the ziggurat sampler from
//! `rand_distr`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition, TimeUnit, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};

/// Lower bound applied to drawn subject residual variances (hours²).
pub const RESIDUAL_VARIANCE_FLOOR: f64 = 0.25;
/// Physical bounds of daily usage hours.
pub const MAX_HOURS: f64 = 24.0;

/// A normally distributed group coefficient: mean with between-subject SD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub mean: f64,
    pub sd: f64,
}

const fn coef(mean: f64, sd: f64) -> Coefficient {
    Coefficient { mean, sd }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub mean_day: f64,
    pub sd_day: f64,
}

/// Generating parameters of one usage group.
///
/// `beta1` is expressed in hours/day × 10⁻² and `beta2` in hours/day² × 10⁻⁴,
/// the scales used in published tables; [`ClusterSpec::daily_curve`] applies
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub proportion: f64,
    pub beta0: Coefficient,
    pub beta1: Coefficient,
    pub beta2: f64,
    pub sigma2: Coefficient,
    pub p_attempt: f64,
    pub dropout: Option<Dropout>,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("cluster spec {}: {m}", self.name)));
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return err("proportion must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.p_attempt) {
            return err("attempt probability must lie in [0, 1]");
        }
        if self.beta0.sd < 0.0 || self.beta1.sd < 0.0 || self.sigma2.sd < 0.0 {
            return err("standard deviations must be non-negative");
        }
        if self.sigma2.mean <= 0.0 {
            return err("residual variance must be positive");
        }
        if let Some(d) = self.dropout {
            if d.sd_day < 0.0 || !d.mean_day.is_finite() {
                return err("invalid dropout law");
            }
        }
        Ok(())
    }

    /// Group-level expected usage on `day` before clamping, ignoring attempts.
    pub fn daily_curve(&self, day: f64) -> f64 {
        self.beta0.mean + self.beta1.mean * 1e-2 * day + self.beta2 * 1e-4 * day * day
    }
}

/// The seven adherence groups used throughout the case study.
pub fn default_specs() -> Vec<ClusterSpec> {
    let spec = |name: &str, proportion, beta0, beta1, beta2, sigma2, p_attempt, dropout| ClusterSpec {
        name: name.to_string(),
        proportion,
        beta0,
        beta1,
        beta2,
        sigma2,
        p_attempt,
        dropout,
    };
    vec![
        spec("Good users", 0.24, coef(6.6, 0.54), coef(0.0, 0.16), 0.0, coef(2.0, 0.82), 0.97, None),
        spec("Slow improvers", 0.13, coef(4.8, 1.0), coef(1.7, 0.16), -0.30, coef(3.6, 1.3), 0.94, None),
        spec("Slow decliners", 0.14, coef(6.1, 0.63), coef(-1.9, 0.14), 0.30, coef(3.2, 0.85), 0.77, None),
        spec("Variable users", 0.17, coef(4.4, 0.87), coef(0.96, 0.0), -0.30, coef(3.4, 1.2), 0.82, None),
        spec("Occasional attempters", 0.08, coef(3.2, 1.1), coef(-0.30, 0.91), 0.0, coef(3.6, 1.8), 0.29, None),
        spec(
            "Early drop-outs",
            0.13,
            coef(4.0, 1.1),
            coef(-0.14, 1.0),
            -1.0,
            coef(5.0, 2.6),
            0.69,
            Some(Dropout { mean_day: 80.0, sd_day: 30.0 }),
        ),
        spec(
            "Non-users",
            0.11,
            coef(2.5, 0.93),
            coef(-1.5, 1.0),
            -1.0,
            coef(3.0, 1.7),
            0.70,
            Some(Dropout { mean_day: 20.0, sd_day: 10.0 }),
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_days: usize,
    pub block_days: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(seed: u64) -> Self {
        Self { n_patients: 500, n_days: 361, block_days: 14, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.n_days == 0 || self.block_days == 0 {
            return Err(Error::Config("n_patients, n_days and block_days must all be at least 1".into()));
        }
        Ok(())
    }
}

/// Draw from N(mean, sd²) conditioned on being at least `floor`.
///
/// With `sd == 0` the mean is returned unchanged.
fn truncated_normal(rng: &mut StreamRng, mean: f64, sd: f64, floor: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    // Rejection is cheap for every shipped spec (acceptance > 0.9); the cap
    // only guards against pathological user specs.
    for _ in 0..10_000 {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + sd * z;
        if x >= floor {
            return x;
        }
    }
    floor
}

fn simulate_patient(
    rng: &mut StreamRng,
    specs: &[ClusterSpec],
    cumulative: &[f64],
    n_days: usize,
) -> (usize, Vec<f64>) {
    let u: f64 = rng.gen();
    let group = cumulative.iter().position(|&c| u < c).unwrap_or(specs.len() - 1);
    let spec = &specs[group];

    let z0: f64 = rng.sample(StandardNormal);
    let z1: f64 = rng.sample(StandardNormal);
    let b0 = spec.beta0.mean + spec.beta0.sd * z0;
    let b1 = (spec.beta1.mean + spec.beta1.sd * z1) * 1e-2;
    let b2 = spec.beta2 * 1e-4;
    let sigma2 = truncated_normal(rng, spec.sigma2.mean, spec.sigma2.sd, RESIDUAL_VARIANCE_FLOOR.min(spec.sigma2.mean));
    let sigma = sigma2.sqrt();
    let dropout_day = spec.dropout.map(|d| truncated_normal(rng, d.mean_day, d.sd_day, 1.0));

    let values = (1..=n_days)
        .map(|d| {
            let day = d as f64;
            if dropout_day.is_some_and(|stop| day > stop) {
                return 0.0;
            }
            let attempt: f64 = rng.gen();
            if attempt >= spec.p_attempt {
                return 0.0;
            }
            let eps: f64 = rng.sample(StandardNormal);
            (b0 + b1 * day + b2 * day * day + sigma * eps).clamp(0.0, MAX_HOURS)
        })
        .collect();
    (group, values)
}

/// Simulates daily usage for `config.n_patients` patients on days
/// `1..=config.n_days`. Returns the daily dataset (raw-day times) and the
/// generating group of each patient as a partition indexed like `specs`.
pub fn generate(config: &GeneratorConfig, specs: &[ClusterSpec]) -> Result<(Dataset, Partition)> {
    config.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("no cluster specs".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let total: f64 = specs.iter().map(|s| s.proportion).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("cluster proportions sum to {total}, expected 1")));
    }
    let cumulative: Vec<f64> = specs
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.proportion / total;
            Some(*acc)
        })
        .collect();

    let days: Vec<f64> = (1..=config.n_days).map(|d| d as f64).collect();
    let width = config.n_patients.to_string().len();
    let mut trajectories = Vec::with_capacity(config.n_patients);
    let mut labels = Vec::with_capacity(config.n_patients);
    for i in 0..config.n_patients {
        let mut rng = substream(config.seed, i as u64);
        let (group, values) = simulate_patient(&mut rng, specs, &cumulative, config.n_days);
        labels.push(group);
        trajectories.push(Trajectory::new(format!("p{:0width$}", i + 1), days.clone(), values)?);
    }
    Ok((Dataset::new(trajectories, TimeUnit::RawDays)?, Partition::new(labels, specs.len())?))
}

/// Timestamp assigned to each averaged block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockTime {
    /// First day of the block; with 14-day blocks over 361 days the block
    /// times are days 1, 15, ..., 351.
    #[default]
    Start,
    /// Midpoint of the days present in the block.
    Midpoint,
}

/// Averages consecutive `block_days`-day blocks (zeros included) and
/// normalizes the block times so the first block maps to 0 and the last to 1.
///
/// Blocks are anchored at the earliest day in the dataset; a trailing partial
/// block averages the days it has.
pub fn downsample(daily: &Dataset, block_days: usize, block_time: BlockTime) -> Result<Dataset> {
    if block_days == 0 {
        return Err(Error::Config("block_days must be at least 1".into()));
    }
    if daily.is_empty() {
        return Err(Error::Validation("cannot downsample an empty dataset".into()));
    }
    let (first_day, _) = daily.time_range();
    let block = block_days as f64;
    let block_of = |day: f64| ((day - first_day) / block).floor() as usize;

    let mut averaged: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::with_capacity(daily.len());
    let (mut t_lo, mut t_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in daily.trajectories() {
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut j = 0;
        while j < t.len() {
            let k = block_of(t.times()[j]);
            let start = j;
            while j < t.len() && block_of(t.times()[j]) == k {
                j += 1;
            }
            let slice = &t.values()[start..j];
            let mean = slice.iter().sum::<f64>() / slice.len() as f64;
            let time = match block_time {
                BlockTime::Start => first_day + k as f64 * block,
                BlockTime::Midpoint => 0.5 * (t.times()[start] + t.times()[j - 1]),
            };
            t_lo = t_lo.min(time);
            t_hi = t_hi.max(time);
            times.push(time);
            values.push(mean);
        }
        averaged.push((t.subject_id().to_string(), times, values));
    }

    let span = t_hi - t_lo;
    let trajectories = averaged
        .into_iter()
        .map(|(id, times, values)| {
            let times = times.into_iter().map(|x| if span > 0.0 { (x - t_lo) / span } else { 0.0 }).collect();
            Trajectory::new(id, times, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, TimeUnit::Normalized)
}

/// Daily simulation followed by block averaging with the config's block size.
pub fn generate_blocked(config: &GeneratorConfig, specs: &[ClusterSpec]) -> Result<(Dataset, Partition)> {
    let (daily, truth) = generate(config, specs)?;
    Ok((downsample(&daily, config.block_days, BlockTime::Start)?, truth))
}
