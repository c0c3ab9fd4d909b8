//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines are always shown.

use std::path::Path;
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajcluster::crosssec::{llpa_fit, LpaVariance, LPA_SD_FLOOR};
use trajcluster::data::{adjusted_rand_index, align, hard_assign, Dataset, Partition, PosteriorMatrix, Trajectory};
use trajcluster::distance::{ahc, k_medoids, silhouette_values, DistanceMatrix, Linkage};
use trajcluster::features::{its_features, FeatureConfig};
use trajcluster::mixture::{
    fit_mixture, gbtm_fit, Basis, MixtureConfig, RandomEffects, VarianceMode, RESIDUAL_VARIANCE_FLOOR,
};
use trajcluster::selection::{posterior_entropy, sweep, BicSampleSize, FitReport, Method, SweepConfig};
use trajcluster::synthgen::{default_specs, generate_blocked, GeneratorConfig};

// Criterion 1
const STAT_SEEDS: std::ops::Range<u64> = 0..10;
const ZERO_FRACTION: (f64, f64) = (0.21, 0.03);
const NONZERO_MEAN: (f64, f64) = (4.6, 0.2);
const NONZERO_SD: (f64, f64) = (2.1, 0.2);
// Criteria 2-6
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const LADDER_TARGET: [f64; 4] = [33_433.0, 29_205.0, 27_375.0, 27_146.0];
const LADDER_REL_TOL: f64 = 0.03;
/// Behaviour claims on regenerated data must hold in this many of `SEEDS`.
const MIN_SEEDS: usize = 4;
/// Extra seeds reported alongside criteria 4 and 5 without gating them.
const READOUT_SEEDS: [u64; 5] = [6, 7, 8, 9, 10];
const GMM_MIN_ARI: f64 = 0.6;
const FEATURE_PEAK: (f64, f64) = (0.49, 0.05);
const AHC_MIN_GAP: f64 = 0.05;
const STARTS: usize = 20;
// Criterion 7
const SCORE_TOL: f64 = 1e-12;
const OLS_TOL: f64 = 1e-9;
const TAU_ZERO_TOL: f64 = 1e-6;
// Criterion 8
const RANDOM_FITS: usize = 100;
const TRACE_SLACK: f64 = 1e-8;
const ROW_SUM_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;
type Check = fn() -> Result<(), String>;

fn dataset(seed: u64) -> (Dataset, Partition) {
    generate_blocked(&GeneratorConfig::new(seed), &default_specs()).expect("generator")
}

fn sweep_rows(ds: &Dataset, method: Method, g_min: usize, seed: u64) -> FitReport {
    let config = SweepConfig {
        g_min,
        g_max: 8,
        n_starts: STARTS,
        seed,
        bic_n: BicSampleSize::Observations,
        near_empty_fraction: 0.01,
        chooser: None,
    };
    sweep(ds, &method, &config).expect("sweep")
}

fn argmax(pairs: &[(usize, f64)]) -> (usize, f64) {
    pairs.iter().copied().fold((0, f64::NEG_INFINITY), |b, p| if p.1 > b.1 { p } else { b })
}

fn fmt(v: &[f64], digits: usize) -> String {
    v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join("/")
}

fn criterion_1() -> Outcome {
    let (mut zero, mut mean, mut sd) = (0.0, 0.0, 0.0);
    for seed in STAT_SEEDS {
        let (ds, _) = dataset(seed);
        let all: Vec<f64> = ds.trajectories().iter().flat_map(|t| t.values().to_vec()).collect();
        let nz: Vec<f64> = all.iter().copied().filter(|&v| v > 0.0).collect();
        let m = nz.iter().sum::<f64>() / nz.len() as f64;
        zero += 1.0 - nz.len() as f64 / all.len() as f64;
        mean += m;
        sd += (nz.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nz.len() - 1) as f64).sqrt();
    }
    let k = STAT_SEEDS.count() as f64;
    let (zero, mean, sd) = (zero / k, mean / k, sd / k);
    let msg = format!("zero fraction {zero:.3}, non-zero mean {mean:.3} h, non-zero SD {sd:.3} h");
    let within = |x: f64, (target, tol): (f64, f64)| (x - target).abs() <= tol;
    if within(zero, ZERO_FRACTION) && within(mean, NONZERO_MEAN) && within(sd, NONZERO_SD) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_2() -> Outcome {
    let mut sums = [0.0; 4];
    let mut all_decreasing = true;
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let (ds, _) = dataset(seed);
        let bics: Vec<f64> = (0..4)
            .map(|d| {
                let cfg = MixtureConfig::new(Basis::polynomial(d, 0.0, 1.0), RandomEffects::BasisFull, 1, 1, seed);
                fit_mixture(&ds, &cfg).expect("ladder fit").0.bic
            })
            .collect();
        all_decreasing &= bics.windows(2).all(|w| w[1] < w[0]);
        for (s, b) in sums.iter_mut().zip(&bics) {
            *s += b;
        }
        per_seed.push(fmt(&bics, 0));
    }
    let means: Vec<f64> = sums.iter().map(|s| s / SEEDS.len() as f64).collect();
    let rel: Vec<f64> = means.iter().zip(LADDER_TARGET).map(|(m, t)| (m - t) / t).collect();
    let msg = format!(
        "mean BIC {} (relative {}), strictly decreasing in every seed: {all_decreasing} [{}]",
        fmt(&means, 0),
        fmt(&rel, 3),
        per_seed.join("; ")
    );
    if all_decreasing && rel.iter().all(|r| r.abs() <= LADDER_REL_TOL) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_3() -> Outcome {
    let method = Method::Gmm {
        basis: "poly:2".into(),
        random_effects: RandomEffects::Intercept,
        variance: VarianceMode::SharedResidual,
    };
    let mut at_seven = 0;
    let mut chosen = Vec::new();
    let mut aris = Vec::new();
    for seed in SEEDS {
        let (ds, truth) = dataset(seed);
        let report = sweep_rows(&ds, method.clone(), 1, seed);
        let best = report.rows.iter().filter_map(|r| r.bic.map(|b| (r.g, b))).fold((0, f64::INFINITY), |b, p| {
            if p.1 < b.1 {
                p
            } else {
                b
            }
        });
        at_seven += usize::from(best.0 == 7);
        chosen.push(best.0);
        let cfg = MixtureConfig {
            variance_mode: VarianceMode::SharedResidual,
            ..MixtureConfig::new(Basis::polynomial(2, 0.0, 1.0), RandomEffects::Intercept, 7, STARTS, seed)
        };
        let (_, post) = fit_mixture(&ds, &cfg).expect("gmm G=7");
        aris.push(adjusted_rand_index(&hard_assign(&post), &truth).expect("ari"));
    }
    let msg = format!(
        "BIC-minimizing G per seed {chosen:?} ({at_seven}/{} at G=7, need {MIN_SEEDS}); G=7 ARI {}",
        SEEDS.len(),
        fmt(&aris, 2)
    );
    if at_seven >= MIN_SEEDS && aris.iter().all(|&a| a >= GMM_MIN_ARI) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn feature_peak(seed: u64) -> (usize, f64) {
    let (ds, _) = dataset(seed);
    let report = sweep_rows(&ds, Method::Features { features: FeatureConfig::default() }, 2, seed);
    let asw: Vec<(usize, f64)> = report.rows.iter().map(|r| (r.g, r.asw.expect("asw"))).collect();
    argmax(&asw)
}

fn criterion_4() -> Outcome {
    let ok = |(g, peak): (usize, f64)| g == 7 && (peak - FEATURE_PEAK.0).abs() <= FEATURE_PEAK.1;
    let peaks: Vec<(usize, f64)> = SEEDS.iter().map(|&s| feature_peak(s)).collect();
    let passing = peaks.iter().filter(|&&p| ok(p)).count();
    let readout = READOUT_SEEDS.iter().filter(|&&s| ok(feature_peak(s))).count();
    let msg = format!(
        "ASW argmax per seed {} ({passing}/{} at G=7 within band, need {MIN_SEEDS}; seeds 6-10 readout {readout}/{})",
        peaks.iter().map(|(g, a)| format!("G={g} {a:.3}")).collect::<Vec<_>>().join(", "),
        SEEDS.len(),
        READOUT_SEEDS.len()
    );
    if passing >= MIN_SEEDS {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ahc_gap(seed: u64) -> f64 {
    let (ds, _) = dataset(seed);
    let report = sweep_rows(&ds, Method::Ahc { linkage: Linkage::Average }, 2, seed);
    let asw = |g: usize| report.rows.iter().find(|r| r.g == g).and_then(|r| r.asw).expect("asw");
    asw(3) - (4..=8).map(asw).fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_5() -> Outcome {
    let gaps: Vec<f64> = SEEDS.iter().map(|&s| ahc_gap(s)).collect();
    let passing = gaps.iter().filter(|&&g| g >= AHC_MIN_GAP).count();
    let readout = READOUT_SEEDS.iter().filter(|&&s| ahc_gap(s) >= AHC_MIN_GAP).count();
    let msg = format!(
        "ASW(3) - max ASW(4..8) per seed {} ({passing}/{} >= {AHC_MIN_GAP}, need {MIN_SEEDS}; seeds 6-10 readout {readout}/{})",
        fmt(&gaps, 3),
        SEEDS.len(),
        READOUT_SEEDS.len()
    );
    if passing >= MIN_SEEDS {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_6() -> Outcome {
    let mut failures = Vec::new();
    for seed in SEEDS {
        let (ds, _) = dataset(seed);
        let report = sweep_rows(&ds, Method::Kml, 2, seed);
        let bics: Vec<f64> = report.rows.iter().map(|r| r.bic.expect("kml bic")).collect();
        if !bics.windows(2).all(|w| w[1] < w[0]) {
            failures.push(format!("seed {seed}: {}", fmt(&bics, 0)));
        }
    }
    if failures.is_empty() {
        Ok(format!("KML BIC strictly decreasing over G=2..8 in {}/{} seeds", SEEDS.len(), SEEDS.len()))
    } else {
        Err(format!("not strictly decreasing: {}", failures.join("; ")))
    }
}

// ---- criterion 7 oracles ----

fn random_distances(rng: &mut ChaCha8Rng, n: usize) -> DistanceMatrix {
    let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    DistanceMatrix::euclidean(&points).unwrap()
}

/// Average linkage by recomputing every between-cluster mean from the
/// original distances. Clusters are keyed by their lowest member.
fn naive_upgma(dist: &DistanceMatrix) -> Vec<(usize, usize, f64, usize)> {
    let n = dist.len();
    let mut clusters: Vec<(Vec<usize>, usize)> = (0..n).map(|i| (vec![i], i)).collect();
    let mut out = Vec::new();
    for step in 0..n - 1 {
        let mut best = (0, 0, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let (ca, cb) = (&clusters[a].0, &clusters[b].0);
                let total: f64 = ca.iter().flat_map(|&i| cb.iter().map(move |&j| dist.get(i, j))).sum();
                let avg = total / (ca.len() * cb.len()) as f64;
                if avg < best.2 {
                    best = (a, b, avg);
                }
            }
        }
        let (a, b, h) = best;
        let (members_b, node_b) = clusters.remove(b);
        let (members_a, node_a) = &mut clusters[a];
        out.push((*node_a, node_b, h, members_a.len() + members_b.len()));
        members_a.extend(members_b);
        *node_a = n + step;
    }
    out
}

fn upgma_matches() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for instance in 0..100 {
        let n = 2 + instance % 7;
        let dist = random_distances(&mut rng, n);
        let fast = ahc(&dist, Linkage::Average);
        let naive = naive_upgma(&dist);
        for (m, (l, r, h, s)) in fast.merges.iter().zip(&naive) {
            if (m.left, m.right, m.size) != (*l, *r, *s) || (m.height - h).abs() > SCORE_TOL * h.max(1.0) {
                return Err(format!("UPGMA instance {instance} (N={n}) differs: {m:?} vs {:?}", (l, r, h, s)));
            }
        }
    }
    Ok(())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    (k - 1..n)
        .flat_map(|last| {
            combinations(last, k - 1).into_iter().map(move |mut c| {
                c.push(last);
                c
            })
        })
        .collect()
}

fn kmedoids_matches() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for instance in 0..60 {
        let n = 3 + instance % 8;
        let g = 1 + instance % 3;
        let dist = random_distances(&mut rng, n);
        let exhaustive = combinations(n, g)
            .iter()
            .map(|m| (0..n).map(|i| m.iter().map(|&k| dist.get(i, k)).fold(f64::INFINITY, f64::min)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let got = k_medoids(&dist, g, 10, instance as u64).map_err(|e| e.to_string())?.cost;
        if (got - exhaustive).abs() > 1e-9 {
            return Err(format!("k-medoids N={n} G={g}: cost {got} vs exhaustive {exhaustive}"));
        }
    }
    Ok(())
}

fn silhouette_oracle(dist: &DistanceMatrix, labels: &[usize], g: usize) -> Vec<f64> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mean_to = |k: usize| {
                let others: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == k).collect();
                (others.iter().map(|&j| dist.get(i, j)).sum::<f64>() / others.len() as f64, others.len())
            };
            let (a, own) = mean_to(labels[i]);
            if own == 0 {
                return 0.0;
            }
            let b = (0..g)
                .filter(|&k| k != labels[i])
                .map(mean_to)
                .filter(|p| p.1 > 0)
                .map(|p| p.0)
                .fold(f64::INFINITY, f64::min);
            if a.max(b) == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .collect()
}

fn scores_match() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for instance in 0..100 {
        let n = 4 + instance % 20;
        let g = 2 + instance % 3;
        let dist = random_distances(&mut rng, n);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..g)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let got = silhouette_values(&dist, &Partition::new(labels.clone(), g).unwrap()).map_err(|e| e.to_string())?;
        let want = silhouette_oracle(&dist, &labels, g);
        if got.iter().zip(&want).any(|(x, y)| (x - y).abs() > SCORE_TOL) {
            return Err(format!("silhouette instance {instance}: {got:?} vs {want:?}"));
        }

        let probs: Vec<f64> = (0..n)
            .flat_map(|_| {
                let w: Vec<f64> = (0..g).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(move |x| x / s)
            })
            .collect();
        let post = PosteriorMatrix::new(n, g, probs.clone()).unwrap();
        let want = -probs.iter().map(|&p| p * p.ln()).sum::<f64>() / n as f64;
        if (posterior_entropy(&post) - want).abs() > SCORE_TOL {
            return Err(format!("entropy instance {instance}"));
        }
    }
    Ok(())
}

/// Least squares by the normal equations `XᵀX b = Xᵀy`.
fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    (x.transpose() * x).lu().solve(&(x.transpose() * y)).expect("full rank")
}

fn its_matches() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let config = FeatureConfig {
        include_intercept: true,
        include_linear: true,
        include_quadratic: true,
        include_residual_sd: true,
        ..FeatureConfig::default()
    };
    for instance in 0..50 {
        let n = 26;
        let times: Vec<f64> = (0..n).map(|j| j as f64 / (n - 1) as f64).collect();
        let (b0, b1, b2) = (rng.gen_range(0.0..8.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        let values: Vec<f64> = times.iter().map(|t| b0 + b1 * t + b2 * t * t + rng.gen_range(-1.0..1.0)).collect();
        let traj = Trajectory::new("s", times.clone(), values.clone()).unwrap();
        let got = its_features(&traj, &config).map_err(|e| e.to_string())?.values;

        let nf = n as f64;
        let y = DVector::from_vec(values.clone());
        let design = |cols: usize| DMatrix::from_fn(n, cols, |i, k| times[i].powi(k as i32));
        let lin = normal_equations(&design(2), &y);
        let quad = normal_equations(&design(3), &y);
        let t_sq = DVector::from_iterator(n, times.iter().map(|t| t * t));
        let t_sq_resid = &t_sq - design(2) * normal_equations(&design(2), &t_sq);
        let t_mean = times.iter().sum::<f64>() / nf;
        let t_sd = (times.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>() / nf).sqrt();
        let rss = (&y - design(3) * &quad).norm_squared();
        let want = [
            values.iter().sum::<f64>() / nf,
            lin[1] * t_sd,
            quad[2] * (t_sq_resid.norm_squared() / nf).sqrt(),
            (rss / (nf - 3.0)).sqrt(),
        ];
        if got.iter().zip(&want).any(|(x, y)| (x - y).abs() > OLS_TOL) {
            return Err(format!("ITS instance {instance}: {got:?} vs {want:?}"));
        }
    }
    Ok(())
}

fn small_dataset(seed: u64, n_patients: usize) -> (Dataset, Partition) {
    generate_blocked(&GeneratorConfig { n_patients, ..GeneratorConfig::new(seed) }, &default_specs()).unwrap()
}

fn tau_zero_matches() -> Result<(), String> {
    for (seed, mode) in [(1, VarianceMode::PerCluster), (2, VarianceMode::Tied), (3, VarianceMode::SharedResidual)] {
        let (ds, _) = small_dataset(seed, 80);
        let basis = Basis::polynomial(2, 0.0, 1.0);
        let (gbtm, _) = gbtm_fit(&ds, basis, 3, 5, seed, mode).map_err(|e| e.to_string())?;
        let cfg = MixtureConfig {
            variance_mode: mode,
            fix_random_effects_at_zero: true,
            ..MixtureConfig::new(basis, RandomEffects::Intercept, 3, 5, seed)
        };
        let (gmm, _) = fit_mixture(&ds, &cfg).map_err(|e| e.to_string())?;
        if (gmm.loglik - gbtm.loglik).abs() > TAU_ZERO_TOL {
            return Err(format!("tau=0 {mode:?}: GMM {} vs GBTM {}", gmm.loglik, gbtm.loglik));
        }
    }
    Ok(())
}

fn criterion_7() -> Outcome {
    let checks: [(&str, Check); 5] = [
        ("UPGMA", upgma_matches),
        ("k-medoids", kmedoids_matches),
        ("silhouette+entropy", scores_match),
        ("ITS OLS", its_matches),
        ("tau=0", tau_zero_matches),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        if let Err(e) = check() {
            failed.push(format!("{name}: {e}"));
        }
    }
    if failed.is_empty() {
        Ok("UPGMA, k-medoids, silhouette, entropy, ITS OLS and tau=0 oracles agree".into())
    } else {
        Err(failed.join("; "))
    }
}

// ---- criterion 8 ----

fn check_em(name: &str, trace: &[f64], post: &PosteriorMatrix) -> Result<(), String> {
    if let Some(w) = trace.windows(2).find(|w| w[1] < w[0] - TRACE_SLACK * w[0].abs()) {
        return Err(format!("{name}: loglik fell from {} to {}", w[0], w[1]));
    }
    if let Some(row) = post.rows().find(|r| (r.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL) {
        return Err(format!("{name}: posterior row sums to {}", row.iter().sum::<f64>()));
    }
    Ok(())
}

fn one_random_fit(i: usize) -> Result<(), String> {
    let seed = 1000 + i as u64;
    let (ds, _) = small_dataset(seed, 40 + 5 * (i % 7));
    let g = 1 + i % 4;
    let starts = 3;
    match i % 3 {
        0 => {
            let variance = if i.is_multiple_of(2) { LpaVariance::PerTime } else { LpaVariance::Tied };
            let (m, post) =
                llpa_fit(&align(&ds, 1e-9).unwrap(), g, starts, seed, variance).map_err(|e| e.to_string())?;
            check_em("LLPA", &m.loglik_trace, &post)?;
            if m.sds.iter().flatten().any(|&s| s < LPA_SD_FLOOR) {
                return Err("LLPA: sd below floor".into());
            }
        }
        k => {
            let modes = [VarianceMode::PerCluster, VarianceMode::Tied, VarianceMode::SharedResidual];
            let re = if k == 1 {
                RandomEffects::None
            } else {
                [RandomEffects::Intercept, RandomEffects::BasisDiagonal, RandomEffects::BasisFull][i % 3]
            };
            let cfg = MixtureConfig {
                variance_mode: modes[i % 3],
                ..MixtureConfig::new(Basis::polynomial(1 + i % 2, 0.0, 1.0), re, g, starts, seed)
            };
            let (m, post) = fit_mixture(&ds, &cfg).map_err(|e| e.to_string())?;
            check_em(if k == 1 { "GBTM" } else { "GMM" }, &m.loglik_trace, &post)?;
            if m.residual_variances.iter().any(|&v| v < RESIDUAL_VARIANCE_FLOOR) {
                return Err("mixture: residual variance below floor".into());
            }
            if m.random_effect_variances.iter().flatten().any(|&v| v < 0.0) {
                return Err("mixture: negative random-effect variance".into());
            }
        }
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let failed: Vec<String> =
        (0..RANDOM_FITS).filter_map(|i| one_random_fit(i).err().map(|e| format!("fit {i}: {e}"))).collect();
    if failed.is_empty() {
        Ok(format!("{RANDOM_FITS} LLPA/GBTM/GMM fits monotone, rows sum to 1, variances above floors"))
    } else {
        Err(failed.join("; "))
    }
}

// ---- criterion 9 ----

fn run_cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_trajcluster"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok([out.stdout, out.stderr].concat())
}

fn cli_session(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let commands: Vec<Vec<&str>> = vec![
        vec!["generate", "--n", "40", "--seed", "3", "--out", "data.csv", "--truth", "truth.csv"],
        vec!["generate", "--n", "10", "--seed", "1"],
        vec![
            "fit", "--method", "kml", "--k", "3", "--seed", "5", "--in", "data.csv", "--out", "kml.json", "--assign",
            "kml.csv",
        ],
        vec![
            "fit",
            "--method",
            "llpa",
            "--k",
            "2",
            "--seed",
            "5",
            "--starts",
            "3",
            "--in",
            "data.csv",
            "--out",
            "llpa.json",
        ],
        vec![
            "fit",
            "--method",
            "ahc",
            "--k",
            "3",
            "--seed",
            "5",
            "--in",
            "data.csv",
            "--out",
            "ahc.json",
            "--curves",
            "ahc_curves.csv",
        ],
        vec!["fit", "--method", "kmedoids", "--k", "3", "--seed", "5", "--in", "data.csv", "--out", "pam.json"],
        vec!["fit", "--method", "features", "--k", "3", "--seed", "5", "--in", "data.csv", "--out", "feat.json"],
        vec![
            "fit",
            "--method",
            "gbtm",
            "--k",
            "3",
            "--basis",
            "poly:2",
            "--starts",
            "3",
            "--seed",
            "5",
            "--in",
            "data.csv",
            "--out",
            "gbtm.json",
            "--assign",
            "gbtm.csv",
        ],
        vec![
            "fit", "--method", "gmm", "--k", "2", "--starts", "2", "--seed", "5", "--in", "data.csv", "--out",
            "gmm.json",
        ],
        vec!["assign", "--model", "gbtm.json", "--in", "data.csv", "--out", "post.csv"],
        vec![
            "sweep",
            "--method",
            "kml",
            "--kmin",
            "2",
            "--kmax",
            "4",
            "--seed",
            "9",
            "--in",
            "data.csv",
            "--report",
            "kml_report.csv",
            "--report-json",
            "kml_report.json",
            "--curves",
            "kml_curves.csv",
            "--choose",
            "elbow",
        ],
        vec![
            "sweep",
            "--method",
            "gbtm",
            "--kmin",
            "1",
            "--kmax",
            "3",
            "--starts",
            "2",
            "--seed",
            "9",
            "--in",
            "data.csv",
            "--report",
            "gbtm_report.csv",
        ],
    ];
    let mut outputs = Vec::new();
    for args in &commands {
        outputs.push((args.join(" "), run_cli(dir, args)?));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    files.sort();
    for f in files {
        outputs.push((
            f.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&f).map_err(|e| e.to_string())?,
        ));
    }
    Ok(outputs)
}

fn criterion_9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_session(a.path())?;
    let second = cli_session(b.path())?;
    if first.len() != second.len() {
        return Err("runs produced different file sets".into());
    }
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    if differing.is_empty() {
        Ok(format!("{} command outputs and files byte-identical across two runs", first.len()))
    } else {
        Err(format!("differ: {differing:?}"))
    }
}

fn main() {
    // `cargo test -- --list` and name filters come through here too.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(usize, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (n, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match run() {
            Ok(msg) => println!("PASS criterion {n}: {msg}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL criterion {n}: {msg}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criterion(s) failed");
        std::process::exit(1);
    }
}
