//! The `trajcluster` command line.
//!
//! Every run writes a JSON document with the tool version and the fully
//! resolved configuration to stderr. The same document can be fed back
//! through `--config` to repeat the run.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::crosssec::LpaVariance;
use crate::data::{load_trajectories, write_trajectories, Dataset, Partition, PosteriorMatrix};
use crate::distance::Linkage;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::mixture::{posterior, RandomEffects, VarianceMode};
use crate::selection::{
    sweep, write_curves, BicSampleSize, Chooser, CurvePoint, FitContext, FitReport, FittedModel, Method, SweepConfig,
    DEFAULT_NEAR_EMPTY_FRACTION,
};
use crate::synthgen::{default_specs, downsample, generate, BlockTime, GeneratorConfig};

#[derive(Debug, Parser)]
#[command(name = "trajcluster", version, about = "Cluster longitudinal trajectories")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "TRAJCLUSTER_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the seven-group adherence dataset.
    Generate(GenerateArgs),
    /// Fit one method at one cluster count.
    Fit(FitArgs),
    /// Fit one method over a range of cluster counts and report scores.
    Sweep(SweepArgs),
    /// Posterior membership of (possibly partial) trajectories under a saved mixture model.
    Assign(AssignArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectory CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth CSV (subject_id,cluster,cluster_name).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write the daily series instead of block means.
    #[arg(long)]
    daily: bool,
    /// Block time stamp: start or midpoint.
    #[arg(long)]
    block_time: Option<String>,
    /// Replay a recorded configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Method selection shared by `fit` and `sweep`.
#[derive(Debug, Args)]
struct MethodArgs {
    /// kml | llpa | ahc | kmedoids | features | gbtm | gmm
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// AHC linkage: average | single | complete | ward | centroid
    #[arg(long)]
    linkage: Option<String>,
    /// Mixture basis: poly:D or bspline:3:K
    #[arg(long)]
    basis: Option<String>,
    /// GMM random effects: intercept | basis | basis-full
    #[arg(long)]
    re: Option<String>,
    /// free | tied (LLPA, mixtures) or shared (mixtures: one residual variance)
    #[arg(long)]
    variance: Option<String>,
    /// Feature list, e.g. b0,b1,b2,logN
    #[arg(long)]
    features: Option<String>,
    /// BIC sample size: observations | subjects
    #[arg(long)]
    bic_n: Option<String>,
    /// Replay a recorded configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: MethodArgs,
    #[arg(long)]
    k: Option<usize>,
    /// Model JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Assignment CSV (subject_id,cluster[,p1..pG]).
    #[arg(long)]
    assign: Option<PathBuf>,
    /// Cluster curves CSV (g,cluster,time,value).
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: MethodArgs,
    #[arg(long)]
    kmin: Option<usize>,
    #[arg(long)]
    kmax: Option<usize>,
    /// Report CSV, one row per G.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Report as JSON.
    #[arg(long)]
    report_json: Option<PathBuf>,
    /// Cluster curves CSV (g,cluster,time,value).
    #[arg(long)]
    curves: Option<PathBuf>,
    /// bic-min | asw-max | elbow
    #[arg(long)]
    choose: Option<String>,
    /// Responsibility-mass fraction of N below which a cluster counts as near-empty.
    #[arg(long)]
    near_empty: Option<f64>,
    /// Add a wall-time column to the report CSV (not reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct AssignArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n: usize,
    pub days: usize,
    pub block: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub daily: bool,
    pub block_time: BlockTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub method: Method,
    pub k: usize,
    pub starts: usize,
    pub seed: u64,
    pub input: PathBuf,
    pub bic_n: BicSampleSize,
    pub out: Option<PathBuf>,
    pub assign: Option<PathBuf>,
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunConfig {
    pub method: Method,
    pub kmin: usize,
    pub kmax: usize,
    pub starts: usize,
    pub seed: u64,
    pub input: PathBuf,
    pub bic_n: BicSampleSize,
    pub near_empty: f64,
    pub chooser: Option<Chooser>,
    pub report: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub curves: Option<PathBuf>,
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub model: PathBuf,
    pub input: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Resolved {
    Generate(GenerateConfig),
    Fit(FitConfig),
    Sweep(SweepRunConfig),
    Assign(AssignConfig),
}

/// The configuration echo: tool version plus resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Echo {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub resolved: Resolved,
}

/// Saved by `fit`: the configuration that produced the model, its scores and
/// the fitted object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: String,
    pub config: FitConfig,
    pub g: usize,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: Option<f64>,
    pub asw: Option<f64>,
    pub entropy: Option<f64>,
    pub cluster_sizes: Vec<usize>,
    pub model: FittedModel,
}

pub const DEFAULT_STARTS: usize = 20;

/// Runs the CLI and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let resolved = match cli.command {
        Command::Generate(a) => resolve_generate(a)?,
        Command::Fit(a) => resolve_fit(a)?,
        Command::Sweep(a) => resolve_sweep(a)?,
        Command::Assign(a) => resolve_assign(a)?,
    };
    let echo = Echo { tool: "trajcluster".into(), version: crate::VERSION.into(), resolved: resolved.clone() };
    eprintln!("{}", serde_json::to_string_pretty(&echo)?);
    execute(&resolved)
}

fn load_echo(path: &Path) -> Result<Resolved> {
    let text = std::fs::read_to_string(path)?;
    let echo: Echo = serde_json::from_str(&text)?;
    Ok(echo.resolved)
}

fn no_overrides(flags: &[(&str, bool)]) -> Result<()> {
    let given: Vec<&str> = flags.iter().filter(|f| f.1).map(|f| f.0).collect();
    if given.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("--config replays a recorded run and cannot be combined with {}", given.join(", "))))
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing required flag {flag}")))
}

fn resolve_generate(a: GenerateArgs) -> Result<Resolved> {
    if let Some(path) = &a.config {
        no_overrides(&[
            ("--n", a.n.is_some()),
            ("--days", a.days.is_some()),
            ("--block", a.block.is_some()),
            ("--seed", a.seed.is_some()),
            ("--out", a.out.is_some()),
            ("--truth", a.truth.is_some()),
            ("--daily", a.daily),
            ("--block-time", a.block_time.is_some()),
        ])?;
        return match load_echo(path)? {
            r @ Resolved::Generate(_) => Ok(r),
            _ => Err(Error::Config("the configuration is not for `generate`".into())),
        };
    }
    let block_time = match a.block_time.as_deref() {
        None | Some("start") => BlockTime::Start,
        Some("midpoint") => BlockTime::Midpoint,
        Some(other) => return Err(Error::Config(format!("unknown block time `{other}` (start, midpoint)"))),
    };
    let defaults = GeneratorConfig::new(0);
    Ok(Resolved::Generate(GenerateConfig {
        n: a.n.unwrap_or(defaults.n_patients),
        days: a.days.unwrap_or(defaults.n_days),
        block: a.block.unwrap_or(defaults.block_days),
        seed: required(a.seed, "--seed")?,
        out: a.out,
        truth: a.truth,
        daily: a.daily,
        block_time,
    }))
}

fn parse_variance(s: &str) -> Result<VarianceMode> {
    match s {
        "free" => Ok(VarianceMode::PerCluster),
        "tied" => Ok(VarianceMode::Tied),
        "shared" => Ok(VarianceMode::SharedResidual),
        other => Err(Error::Config(format!("unknown variance mode `{other}` (free, tied, shared)"))),
    }
}

fn build_method(a: &MethodArgs) -> Result<Method> {
    let name = required(a.method.as_deref(), "--method")?;
    let reject = |flag: &str, given: bool| {
        if given {
            Err(Error::Config(format!("{flag} does not apply to method {name}")))
        } else {
            Ok(())
        }
    };
    let is_mixture = matches!(name, "gbtm" | "gmm");
    if !is_mixture {
        reject("--basis", a.basis.is_some())?;
    }
    if name != "gmm" {
        reject("--re", a.re.is_some())?;
    }
    if name != "ahc" {
        reject("--linkage", a.linkage.is_some())?;
    }
    if name != "features" {
        reject("--features", a.features.is_some())?;
    }
    if !is_mixture && name != "llpa" {
        reject("--variance", a.variance.is_some())?;
    }
    let basis = a.basis.clone().unwrap_or_else(|| "poly:2".into());
    let method = match name {
        "kml" => Method::Kml,
        "llpa" => Method::Llpa {
            variance: match a.variance.as_deref() {
                None | Some("free") => LpaVariance::PerTime,
                Some("tied") => LpaVariance::Tied,
                Some(other) => return Err(Error::Config(format!("unknown LLPA variance `{other}` (free, tied)"))),
            },
        },
        "ahc" => Method::Ahc { linkage: a.linkage.as_deref().unwrap_or("average").parse::<Linkage>()? },
        "kmedoids" => Method::Kmedoids,
        "features" => Method::Features {
            features: match &a.features {
                Some(list) => FeatureConfig::from_list(list)?,
                None => FeatureConfig::default(),
            },
        },
        "gbtm" => Method::Gbtm { basis, variance: parse_variance(a.variance.as_deref().unwrap_or("free"))? },
        "gmm" => Method::Gmm {
            basis,
            random_effects: match a.re.as_deref() {
                None | Some("intercept") => RandomEffects::Intercept,
                Some("basis") => RandomEffects::BasisDiagonal,
                Some("basis-full") => RandomEffects::BasisFull,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown random effects `{other}` (intercept, basis, basis-full)"
                    )))
                }
            },
            variance: parse_variance(a.variance.as_deref().unwrap_or("shared"))?,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown method `{other}` (kml, llpa, ahc, kmedoids, features, gbtm, gmm)"
            )))
        }
    };
    if let Method::Features { features } = &method {
        features.validate()?;
    }
    Ok(method)
}

fn parse_bic_n(s: Option<&str>) -> Result<BicSampleSize> {
    match s {
        None | Some("observations") => Ok(BicSampleSize::Observations),
        Some("subjects") => Ok(BicSampleSize::Subjects),
        Some(other) => Err(Error::Config(format!("unknown BIC sample size `{other}` (observations, subjects)"))),
    }
}

fn method_flags(a: &MethodArgs) -> Vec<(&'static str, bool)> {
    vec![
        ("--method", a.method.is_some()),
        ("--starts", a.starts.is_some()),
        ("--seed", a.seed.is_some()),
        ("--in", a.input.is_some()),
        ("--linkage", a.linkage.is_some()),
        ("--basis", a.basis.is_some()),
        ("--re", a.re.is_some()),
        ("--variance", a.variance.is_some()),
        ("--features", a.features.is_some()),
        ("--bic-n", a.bic_n.is_some()),
    ]
}

fn starts_and_seed(a: &MethodArgs) -> Result<(usize, u64)> {
    let starts = a.starts.unwrap_or(DEFAULT_STARTS);
    if starts == 0 {
        return Err(Error::Config("--starts must be at least 1".into()));
    }
    Ok((starts, a.seed.unwrap_or_else(rand::random)))
}

fn resolve_fit(a: FitArgs) -> Result<Resolved> {
    if let Some(path) = &a.common.config {
        let mut flags = method_flags(&a.common);
        flags.extend([
            ("--k", a.k.is_some()),
            ("--out", a.out.is_some()),
            ("--assign", a.assign.is_some()),
            ("--curves", a.curves.is_some()),
        ]);
        no_overrides(&flags)?;
        return match load_echo(path)? {
            r @ Resolved::Fit(_) => Ok(r),
            _ => Err(Error::Config("the configuration is not for `fit`".into())),
        };
    }
    let method = build_method(&a.common)?;
    let (starts, seed) = starts_and_seed(&a.common)?;
    Ok(Resolved::Fit(FitConfig {
        method,
        k: required(a.k, "--k")?,
        starts,
        seed,
        input: required(a.common.input, "--in")?,
        bic_n: parse_bic_n(a.common.bic_n.as_deref())?,
        out: a.out,
        assign: a.assign,
        curves: a.curves,
    }))
}

fn resolve_sweep(a: SweepArgs) -> Result<Resolved> {
    if let Some(path) = &a.common.config {
        let mut flags = method_flags(&a.common);
        flags.extend([
            ("--kmin", a.kmin.is_some()),
            ("--kmax", a.kmax.is_some()),
            ("--report", a.report.is_some()),
            ("--report-json", a.report_json.is_some()),
            ("--curves", a.curves.is_some()),
            ("--choose", a.choose.is_some()),
            ("--near-empty", a.near_empty.is_some()),
            ("--timings", a.timings),
        ]);
        no_overrides(&flags)?;
        return match load_echo(path)? {
            r @ Resolved::Sweep(_) => Ok(r),
            _ => Err(Error::Config("the configuration is not for `sweep`".into())),
        };
    }
    let method = build_method(&a.common)?;
    let (starts, seed) = starts_and_seed(&a.common)?;
    let near_empty = a.near_empty.unwrap_or(DEFAULT_NEAR_EMPTY_FRACTION);
    if !(0.0..1.0).contains(&near_empty) {
        return Err(Error::Config("--near-empty must be in [0, 1)".into()));
    }
    Ok(Resolved::Sweep(SweepRunConfig {
        method,
        kmin: a.kmin.unwrap_or(1),
        kmax: required(a.kmax, "--kmax")?,
        starts,
        seed,
        input: required(a.common.input, "--in")?,
        bic_n: parse_bic_n(a.common.bic_n.as_deref())?,
        near_empty,
        chooser: a.choose.as_deref().map(str::parse).transpose()?,
        report: a.report,
        report_json: a.report_json,
        curves: a.curves,
        timings: a.timings,
    }))
}

fn resolve_assign(a: AssignArgs) -> Result<Resolved> {
    if let Some(path) = &a.config {
        no_overrides(&[("--model", a.model.is_some()), ("--in", a.input.is_some()), ("--out", a.out.is_some())])?;
        return match load_echo(path)? {
            r @ Resolved::Assign(_) => Ok(r),
            _ => Err(Error::Config("the configuration is not for `assign`".into())),
        };
    }
    Ok(Resolved::Assign(AssignConfig {
        model: required(a.model, "--model")?,
        input: required(a.input, "--in")?,
        out: a.out,
    }))
}

/// Writes to `path`, or to stdout when `None`.
fn with_sink(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    load_trajectories(BufReader::new(File::open(path)?))
}

/// Executes a resolved configuration.
pub fn execute(resolved: &Resolved) -> Result<()> {
    match resolved {
        Resolved::Generate(c) => run_generate(c),
        Resolved::Fit(c) => run_fit(c),
        Resolved::Sweep(c) => run_sweep(c),
        Resolved::Assign(c) => run_assign(c),
    }
}

fn run_generate(c: &GenerateConfig) -> Result<()> {
    let specs = default_specs();
    let config = GeneratorConfig { n_patients: c.n, n_days: c.days, block_days: c.block, seed: c.seed };
    let (daily, truth) = generate(&config, &specs)?;
    let data = if c.daily { daily.clone() } else { downsample(&daily, c.block, c.block_time)? };
    with_sink(c.out.as_deref(), |w| write_trajectories(&data, w))?;
    if let Some(path) = &c.truth {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(["subject_id", "cluster", "cluster_name"])?;
        for (id, &l) in daily.subject_ids().iter().zip(truth.labels()) {
            w.write_record([id.as_str(), &(l + 1).to_string(), &specs[l].name])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn write_assignments(
    w: &mut dyn Write,
    ids: &[String],
    partition: &Partition,
    posterior: Option<&PosteriorMatrix>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["subject_id".to_string(), "cluster".to_string()];
    if let Some(p) = posterior {
        header.extend((1..=p.g()).map(|k| format!("p{k}")));
    }
    out.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone(), (partition.labels()[i] + 1).to_string()];
        if let Some(p) = posterior {
            rec.extend(p.row(i).iter().map(|v| format!("{v:?}")));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn run_fit(c: &FitConfig) -> Result<()> {
    let dataset = load_dataset(&c.input)?;
    let ctx = FitContext::new(&dataset, c.method.clone(), c.bic_n);
    let fit = ctx.fit(c.k, c.starts, c.seed)?;
    let doc = ModelDocument {
        version: crate::VERSION.into(),
        config: c.clone(),
        g: fit.g,
        loglik: fit.loglik,
        n_params: fit.n_params,
        bic: fit.bic,
        asw: fit.asw,
        entropy: fit.entropy,
        cluster_sizes: fit.partition.cluster_sizes(),
        model: fit.model.clone(),
    };
    let json = serde_json::to_string_pretty(&doc)?;
    with_sink(c.out.as_deref(), |w| {
        writeln!(w, "{json}")?;
        Ok(())
    })?;
    if let Some(path) = &c.assign {
        with_sink(Some(path), |w| {
            write_assignments(w, &dataset.subject_ids(), &fit.partition, fit.posterior.as_ref())
        })?;
    }
    if let Some(path) = &c.curves {
        let points: Vec<CurvePoint> = fit
            .curves
            .iter()
            .enumerate()
            .flat_map(|(k, curve)| {
                curve.iter().map(move |&(time, value)| CurvePoint { g: c.k, cluster: k + 1, time, value })
            })
            .collect();
        with_sink(Some(path), |w| write_curves(&points, w))?;
    }
    Ok(())
}

fn run_sweep(c: &SweepRunConfig) -> Result<()> {
    let dataset = load_dataset(&c.input)?;
    let config = SweepConfig {
        g_min: c.kmin,
        g_max: c.kmax,
        n_starts: c.starts,
        seed: c.seed,
        bic_n: c.bic_n,
        near_empty_fraction: c.near_empty,
        chooser: c.chooser,
    };
    let report: FitReport = sweep(&dataset, &c.method, &config)?;
    with_sink(c.report.as_deref(), |w| report.write_csv(w, c.timings))?;
    if let Some(path) = &c.report_json {
        let json = report.to_json()?;
        with_sink(Some(path), |w| {
            writeln!(w, "{json}")?;
            Ok(())
        })?;
    }
    if let Some(path) = &c.curves {
        with_sink(Some(path), |w| report.write_curves_csv(w))?;
    }
    for row in report.rows.iter().filter(|r| r.status != "ok") {
        eprintln!("warning: G={} failed: {}", row.g, row.status);
    }
    if let (Some(chooser), Some(g)) = (&c.chooser, report.chosen_g) {
        eprintln!("chosen G={g} by {chooser:?}");
    }
    Ok(())
}

fn run_assign(c: &AssignConfig) -> Result<()> {
    let doc: ModelDocument = serde_json::from_reader(BufReader::new(File::open(&c.model)?))?;
    let FittedModel::Mixture(model) = &doc.model else {
        return Err(Error::Config("assign needs a gbtm or gmm model".into()));
    };
    let dataset = load_dataset(&c.input)?;
    let n = dataset.len();
    let mut probs = Vec::with_capacity(n * model.g);
    for t in dataset.trajectories() {
        probs.extend(posterior(model, t.times(), t.values())?);
    }
    let post = PosteriorMatrix::new(n, model.g, probs)?;
    let partition = crate::data::hard_assign(&post);
    with_sink(c.out.as_deref(), |w| write_assignments(w, &dataset.subject_ids(), &partition, Some(&post)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let echo = Echo {
            tool: "trajcluster".into(),
            version: "0".into(),
            resolved: Resolved::Fit(FitConfig {
                method: Method::Gmm {
                    basis: "poly:2".into(),
                    random_effects: RandomEffects::Intercept,
                    variance: VarianceMode::SharedResidual,
                },
                k: 3,
                starts: 2,
                seed: 9,
                input: "x.csv".into(),
                bic_n: BicSampleSize::Observations,
                out: None,
                assign: Some("a.csv".into()),
                curves: None,
            }),
        };
        let text = serde_json::to_string_pretty(&echo).unwrap();
        assert_eq!(serde_json::from_str::<Echo>(&text).unwrap(), echo);
    }

    #[test]
    fn method_flag_validation() {
        let parse = |args: &[&str]| {
            let mut full = vec!["trajcluster", "fit"];
            full.extend_from_slice(args);
            let cli = Cli::try_parse_from(full).unwrap();
            let Command::Fit(a) = cli.command else { unreachable!() };
            resolve_fit(a)
        };
        assert!(parse(&["--method", "kml", "--k", "3", "--in", "d.csv", "--seed", "1"]).is_ok());
        assert!(parse(&["--method", "kml", "--k", "3", "--in", "d.csv", "--linkage", "ward"]).is_err());
        assert!(parse(&["--method", "nope", "--k", "3", "--in", "d.csv"]).is_err());
        assert!(parse(&["--method", "gmm", "--in", "d.csv"]).is_err());
        assert!(Cli::try_parse_from(["trajcluster", "fit", "--bogus"]).is_err());
    }
}
