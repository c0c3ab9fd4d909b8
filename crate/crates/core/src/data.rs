//! Trajectory data model, long-format CSV ingestion, grid alignment and
//! partition utilities.
//!
//! Cluster labels are stored 0-based (`0..g`). Files written by the CLI use
//! the same 0-based convention.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance used by [`align`] when matching time points.
pub const DEFAULT_ALIGN_TOLERANCE: f64 = 1e-9;

/// A single subject's ordered series of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    subject_id: String,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory, checking that times are strictly increasing and
    /// that every entry is finite.
    pub fn new(subject_id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if times.len() != values.len() {
            return Err(Error::Validation(format!(
                "subject {subject_id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::Validation(format!("subject {subject_id}: no observations")));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("subject {subject_id}: non-finite time {t}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("subject {subject_id}: non-finite value {v}")));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "subject {subject_id}: times not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { subject_id, times, values })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeUnit {
    RawDays,
    Normalized,
}

/// A non-empty collection of trajectories with unique subject ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    time_unit: TimeUnit,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, time_unit: TimeUnit) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Validation("dataset has no trajectories".into()));
        }
        let mut seen = HashMap::with_capacity(trajectories.len());
        for (i, t) in trajectories.iter().enumerate() {
            if seen.insert(t.subject_id(), i).is_some() {
                return Err(Error::Validation(format!("duplicate subject id {}", t.subject_id())));
            }
        }
        Ok(Self { trajectories, time_unit })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn time_unit(&self) -> TimeUnit {
        self.time_unit
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_observations(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.trajectories.iter().map(|t| t.subject_id.clone()).collect()
    }

    /// Earliest and latest observation time over all subjects.
    pub fn time_range(&self) -> (f64, f64) {
        self.trajectories
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t.times[0]), hi.max(t.times[t.len() - 1])))
    }
}

/// Reads a long-format CSV with header `subject_id,time,value`.
///
/// Subjects keep the order of their first appearance; rows within a subject
/// may be unsorted. The time unit is reported as normalized when every time
/// lies in `[0, 1]`, otherwise as raw days.
pub fn load_trajectories<R: Read>(source: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let expected = ["subject_id", "time", "value"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "expected header `subject_id,time,value`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Parse { line, msg: format!("expected 3 fields, found {}", record.len()) });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse { line, msg: "empty subject_id".into() });
        }
        let parse = |field: &str, name: &str| -> Result<f64> {
            field.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("invalid {name} `{field}`") })
        };
        let time = parse(&record[1], "time")?;
        let value = parse(&record[2], "value")?;
        if !time.is_finite() {
            return Err(Error::Validation(format!("line {line}: subject {id} has non-finite time")));
        }
        if !value.is_finite() {
            return Err(Error::Validation(format!("line {line}: subject {id} has non-finite value")));
        }
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((time, value));
    }

    let mut all_unit = true;
    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut obs = rows.remove(&id).unwrap_or_default();
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!("subject {id} has duplicate time {}", w[0].0)));
        }
        all_unit &= obs.iter().all(|&(t, _)| (0.0..=1.0).contains(&t));
        let (times, values) = obs.into_iter().unzip();
        trajectories.push(Trajectory::new(id, times, values)?);
    }
    let unit = if all_unit { TimeUnit::Normalized } else { TimeUnit::RawDays };
    Dataset::new(trajectories, unit)
}

/// Writes a dataset as long-format CSV. Numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_trajectories<W: Write>(dataset: &Dataset, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["subject_id", "time", "value"])?;
    for t in dataset.trajectories() {
        for (time, value) in t.times.iter().zip(&t.values) {
            writer.write_record([t.subject_id.as_str(), &format!("{time:?}"), &format!("{value:?}")])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Trajectories observed on one shared time grid, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedMatrix {
    subject_ids: Vec<String>,
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl AlignedMatrix {
    pub fn new(subject_ids: Vec<String>, grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || subject_ids.is_empty() {
            return Err(Error::Validation("aligned matrix must have at least one row and column".into()));
        }
        if values.len() != subject_ids.len() * grid.len() {
            return Err(Error::Validation(format!(
                "aligned matrix expects {} cells, got {}",
                subject_ids.len() * grid.len(),
                values.len()
            )));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("grid not strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("aligned matrix has non-finite cells".into()));
        }
        Ok(Self { subject_ids, grid, values })
    }

    /// Convenience constructor from rows; subject ids are `s0, s1, ...`.
    pub fn from_rows(grid: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| format!("s{i}")).collect();
        if let Some(r) = rows.iter().find(|r| r.len() != grid.len()) {
            return Err(Error::Validation(format!("row of length {} for grid of {}", r.len(), grid.len())));
        }
        Self::new(ids, grid, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.grid.len())
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Places every trajectory on the time grid of the first subject.
///
/// Each subject must observe exactly the grid times (within `tolerance`)
/// with no extras; all offenders are listed in the error.
pub fn align(dataset: &Dataset, tolerance: f64) -> Result<AlignedMatrix> {
    let grid = dataset.trajectories[0].times.clone();
    let mut offenders = Vec::new();
    let mut values = Vec::with_capacity(dataset.len() * grid.len());
    for t in dataset.trajectories() {
        let matches = t.len() == grid.len() && t.times.iter().zip(&grid).all(|(a, b)| (a - b).abs() <= tolerance);
        if matches {
            values.extend_from_slice(&t.values);
        } else {
            offenders.push(format!("{} ({} of {} grid times)", t.subject_id, t.len(), grid.len()));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Alignment(format!("subjects off the common grid: {}", offenders.join(", "))));
    }
    AlignedMatrix::new(dataset.subject_ids(), grid, values)
}

/// Hard cluster assignment, labels in `0..g`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    g: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, g: usize) -> Result<Self> {
        if g == 0 {
            return Err(Error::Validation("partition needs at least one cluster".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= g) {
            return Err(Error::Validation(format!("label {l} out of range for G={g}")));
        }
        Ok(Self { labels, g })
    }

    /// Builds a partition with `g` = number of distinct labels after
    /// relabeling in order of first appearance.
    pub fn from_arbitrary_labels<T: Eq + std::hash::Hash>(labels: &[T]) -> Self {
        let mut map = HashMap::new();
        let labels: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(l).or_insert(next)
            })
            .collect();
        let g = map.len().max(1);
        Self { labels, g }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.g];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// One-hot posterior encoding of this partition.
    pub fn to_posterior(&self) -> PosteriorMatrix {
        let mut probs = vec![0.0; self.labels.len() * self.g];
        for (i, &l) in self.labels.iter().enumerate() {
            probs[i * self.g + l] = 1.0;
        }
        PosteriorMatrix { n: self.labels.len(), g: self.g, probs }
    }
}

/// Row-stochastic N×G matrix of membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    n: usize,
    g: usize,
    probs: Vec<f64>,
}

impl PosteriorMatrix {
    pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(n: usize, g: usize, probs: Vec<f64>) -> Result<Self> {
        if g == 0 {
            return Err(Error::Validation("posterior needs at least one cluster".into()));
        }
        if probs.len() != n * g {
            return Err(Error::Validation(format!("posterior expects {} entries, got {}", n * g, probs.len())));
        }
        for (i, row) in probs.chunks_exact(g).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Validation(format!("posterior row {i} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOLERANCE {
                return Err(Error::Validation(format!("posterior row {i} sums to {s}")));
            }
        }
        Ok(Self { n, g, probs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.g..(i + 1) * self.g]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.g)
    }

    /// Total responsibility mass per cluster.
    pub fn cluster_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.g];
        for row in self.rows() {
            for (m, p) in mass.iter_mut().zip(row) {
                *m += p;
            }
        }
        mass
    }
}

/// Modal assignment; ties go to the lowest cluster index.
pub fn hard_assign(posterior: &PosteriorMatrix) -> Partition {
    let labels = posterior
        .rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (g, &p)| if p > best.1 { (g, p) } else { best })
                .0
        })
        .collect();
    Partition { labels, g: posterior.g }
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x.saturating_sub(1) as f64) / 2.0
}

/// Hypergeometric-adjusted Rand index.
///
/// Returns 1.0 when both partitions are the same trivial partition (the
/// adjustment is 0/0 there).
pub fn adjusted_rand_index(a: &Partition, b: &Partition) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("partitions cover {} and {} subjects", a.len(), b.len())));
    }
    let n = a.len() as u64;
    let mut table = vec![0u64; a.g * b.g];
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        table[la * b.g + lb] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_a: f64 = a.cluster_sizes().into_iter().map(|c| choose2(c as u64)).sum();
    let sum_b: f64 = b.cluster_sizes().into_iter().map(|c| choose2(c as u64)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(id: &str, times: &[f64], values: &[f64]) -> Trajectory {
        Trajectory::new(id, times.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn load_sorts_shuffled_rows() {
        let csv = "subject_id,time,value\ns1,2.0,3\ns1,0.5,1\ns1,1.0,2\n";
        let ds = load_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.trajectories()[0].times(), &[0.5, 1.0, 2.0]);
        assert_eq!(ds.trajectories()[0].values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn load_rejects_duplicate_time() {
        let csv = "subject_id,time,value\ns1,2.0,3\ns1,2.0,1\n";
        let err = load_trajectories(csv.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("s1") && err.contains('2'), "{err}");
    }

    #[test]
    fn load_reports_line_of_malformed_row() {
        let csv = "subject_id,time,value\ns1,1,3\ns1,abc,1\n";
        match load_trajectories(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_non_finite_and_bad_header() {
        let csv = "subject_id,time,value\ns1,1,NaN\n";
        assert!(matches!(load_trajectories(csv.as_bytes()), Err(Error::Validation(_))));
        let csv = "id,t,y\ns1,1,2\n";
        assert!(matches!(load_trajectories(csv.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn trajectory_invariants() {
        assert!(Trajectory::new("a", vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(Trajectory::new("a", vec![1.0], vec![0.0, 0.0]).is_err());
        assert!(Trajectory::new("a", vec![], vec![]).is_err());
        assert!(Dataset::new(vec![traj("a", &[0.0], &[1.0]), traj("a", &[1.0], &[1.0])], TimeUnit::RawDays).is_err());
    }

    #[test]
    fn align_two_subjects() {
        let ds = Dataset::new(
            vec![traj("a", &[0.0, 0.5, 1.0], &[1.0, 2.0, 3.0]), traj("b", &[0.0, 0.5, 1.0], &[4.0, 5.0, 6.0])],
            TimeUnit::Normalized,
        )
        .unwrap();
        let m = align(&ds, DEFAULT_ALIGN_TOLERANCE).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 3));
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn align_reports_missing_time() {
        let grid: Vec<f64> = (0..26).map(f64::from).collect();
        let ds =
            Dataset::new(vec![traj("a", &grid, &[0.0; 26]), traj("b", &grid[..25], &[0.0; 25])], TimeUnit::RawDays)
                .unwrap();
        let err = align(&ds, DEFAULT_ALIGN_TOLERANCE).unwrap_err();
        assert!(matches!(&err, Error::Alignment(m) if m.contains('b')), "{err}");
    }

    #[test]
    fn hard_assign_examples() {
        let p = PosteriorMatrix::new(3, 2, vec![0.2, 0.8, 0.5, 0.5, 1.0, 0.0]).unwrap();
        assert_eq!(hard_assign(&p).labels(), &[1, 0, 0]);
        let onehot = Partition::new(vec![2, 0, 1, 2], 3).unwrap();
        assert_eq!(hard_assign(&onehot.to_posterior()), onehot);
    }

    #[test]
    fn ari_all_one_vs_singletons_is_zero() {
        // pair-count oracle: 6 pairs, all together in a, none in b
        let a = Partition::new(vec![0; 4], 1).unwrap();
        let b = Partition::new(vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(adjusted_rand_index(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ari_relabel_and_length_mismatch() {
        let a = Partition::new(vec![0, 0, 1, 1, 2], 3).unwrap();
        let b = Partition::new(vec![2, 2, 0, 0, 1], 3).unwrap();
        assert!((adjusted_rand_index(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c = Partition::new(vec![0, 0], 1).unwrap();
        assert!(adjusted_rand_index(&a, &c).is_err());
    }

    #[test]
    fn ari_random_labels_near_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let truth: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..7)).collect();
        let random: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..7)).collect();
        let ari = adjusted_rand_index(&Partition::new(truth, 7).unwrap(), &Partition::new(random, 7).unwrap()).unwrap();
        assert!(ari.abs() < 0.05, "{ari}");
    }

    fn partition_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..40).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..4, n)))
    }

    proptest! {
        #[test]
        fn ari_symmetric_and_permutation_invariant((a, b) in partition_strategy(), shift in 1usize..5) {
            let pa = Partition::new(a.clone(), 5).unwrap();
            let pb = Partition::new(b, 4).unwrap();
            let ab = adjusted_rand_index(&pa, &pb).unwrap();
            let ba = adjusted_rand_index(&pb, &pa).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let permuted = Partition::new(a.iter().map(|l| (l + shift) % 5).collect(), 5).unwrap();
            let pb2 = adjusted_rand_index(&permuted, &pb).unwrap();
            prop_assert!((ab - pb2).abs() < 1e-12);
        }

        #[test]
        fn csv_round_trip(values in prop::collection::vec((-1e6f64..1e6, 0u32..1000), 1..30)) {
            let trajectories = values
                .iter()
                .enumerate()
                .map(|(i, &(v, t))| Trajectory::new(format!("p{i}"), vec![t as f64 / 7.0, t as f64 + 1.5], vec![v, v / 3.0]).unwrap())
                .collect();
            let ds = Dataset::new(trajectories, TimeUnit::RawDays).unwrap();
            let mut buf = Vec::new();
            write_trajectories(&ds, &mut buf).unwrap();
            let back = load_trajectories(buf.as_slice()).unwrap();
            let mut buf2 = Vec::new();
            write_trajectories(&back, &mut buf2).unwrap();
            prop_assert_eq!(back.trajectories(), ds.trajectories());
            prop_assert_eq!(buf, buf2);
        }
    }
}
