//! Distance-based clustering: Euclidean distance matrices, agglomerative
//! hierarchical clustering via Lance-Williams updates, PAM k-medoids and the
//! average silhouette width.

use std::io::Write;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AlignedMatrix, Partition};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Dense symmetric N×N distance matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry, a zero diagonal and non-negative finite entries.
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Validation(format!("distance matrix expects {} entries, got {}", n * n, d.len())));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::Validation(format!("non-zero diagonal at {i}")));
            }
            for j in 0..i {
                let v = d[i * n + j];
                if !v.is_finite() || v < 0.0 || v != d[j * n + i] {
                    return Err(Error::Validation(format!("invalid or asymmetric distance at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, d })
    }

    /// Euclidean distances between the given points.
    pub fn euclidean<P: AsRef<[f64]> + Sync>(points: &[P]) -> Result<Self> {
        if points.iter().any(|p| p.as_ref().iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("non-finite coordinate".into()));
        }
        let n = points.len();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = points[i].as_ref();
                (i + 1..n)
                    .map(|j| a.iter().zip(points[j].as_ref()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();
        let mut d = vec![0.0; n * n];
        for (i, row) in upper.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let j = i + 1 + k;
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Ok(Self { n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { n: self.n, d: self.d.iter().map(|v| v * factor).collect() }
    }

    /// Rows and columns reordered so that new index `k` is old `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.n;
        let mut d = vec![0.0; n * n];
        for (a, &i) in order.iter().enumerate() {
            for (b, &j) in order.iter().enumerate() {
                d[a * n + b] = self.get(i, j);
            }
        }
        Self { n, d }
    }
}

/// Euclidean distances between the rows of an aligned matrix.
pub fn pairwise_distances(data: &AlignedMatrix) -> Result<DistanceMatrix> {
    if data.n_rows() < 2 {
        return Err(Error::Validation("need at least two trajectories for distances".into()));
    }
    let rows: Vec<&[f64]> = data.rows().collect();
    DistanceMatrix::euclidean(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    /// UPGMA.
    #[default]
    Average,
    Single,
    Complete,
    Ward,
    Centroid,
}

impl Linkage {
    /// Ward and centroid linkage work on squared Euclidean distances; their
    /// merge heights are reported back on the distance scale.
    fn squared(self) -> bool {
        matches!(self, Linkage::Ward | Linkage::Centroid)
    }

    /// Merge heights are guaranteed non-decreasing (no inversions).
    pub fn is_monotone(self) -> bool {
        !matches!(self, Linkage::Centroid)
    }
}

impl std::str::FromStr for Linkage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "upgma" => Ok(Self::Average),
            "single" => Ok(Self::Single),
            "complete" => Ok(Self::Complete),
            "ward" => Ok(Self::Ward),
            "centroid" => Ok(Self::Centroid),
            other => Err(Error::Config(format!("unknown linkage `{other}`"))),
        }
    }
}

/// One agglomeration step. Leaves are nodes `0..N`; the node created by merge
/// `k` is `N + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n_leaves: usize,
    pub linkage: Linkage,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Merge list as CSV `left,right,height,size` with 0-based node ids.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["left", "right", "height", "size"])?;
        for m in &self.merges {
            w.write_record([m.left.to_string(), m.right.to_string(), format!("{:?}", m.height), m.size.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Greedy agglomerative clustering with Lance-Williams distance updates.
///
/// Each cluster lives in the slot of its lowest-indexed member. At every
/// step the pair of slots `(i, j)`, `i < j`, with the smallest linkage
/// distance merges into slot `i`; ties go to the lexicographically smallest
/// pair.
pub fn ahc(dist: &DistanceMatrix, linkage: Linkage) -> Dendrogram {
    let n = dist.len();
    let mut d: Vec<f64> = if linkage.squared() { dist.d.iter().map(|v| v * v).collect() } else { dist.d.clone() };
    let mut active: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut node: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for step in 0..n.saturating_sub(1) {
        let (mut bi, mut bj, mut best) = (0, 0, f64::INFINITY);
        for (a, &i) in active.iter().enumerate() {
            let row = &d[i * n..(i + 1) * n];
            for &j in &active[a + 1..] {
                if row[j] < best {
                    (bi, bj, best) = (i, j, row[j]);
                }
            }
        }
        let (ni, nj) = (size[bi] as f64, size[bj] as f64);
        for &k in &active {
            if k == bi || k == bj {
                continue;
            }
            let (dik, djk) = (d[bi * n + k], d[bj * n + k]);
            let nk = size[k] as f64;
            let updated = match linkage {
                Linkage::Single => dik.min(djk),
                Linkage::Complete => dik.max(djk),
                Linkage::Average => (ni * dik + nj * djk) / (ni + nj),
                Linkage::Ward => ((ni + nk) * dik + (nj + nk) * djk - nk * best) / (ni + nj + nk),
                Linkage::Centroid => (ni * dik + nj * djk) / (ni + nj) - ni * nj * best / ((ni + nj) * (ni + nj)),
            };
            d[bi * n + k] = updated;
            d[k * n + bi] = updated;
        }
        let height = if linkage.squared() { best.max(0.0).sqrt() } else { best };
        merges.push(Merge { left: node[bi], right: node[bj], height, size: size[bi] + size[bj] });
        size[bi] += size[bj];
        node[bi] = n + step;
        active.retain(|&k| k != bj);
    }
    Dendrogram { n_leaves: n, linkage, merges }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Partition into `g` clusters by undoing the last `g - 1` merges. Labels
/// follow the order of each cluster's lowest-indexed member.
pub fn cut_tree(dendrogram: &Dendrogram, g: usize) -> Result<Partition> {
    let n = dendrogram.n_leaves;
    if g == 0 || g > n {
        return Err(Error::Config(format!("cannot cut {n} leaves into {g} clusters")));
    }
    let mut parent: Vec<usize> = (0..2 * n).collect();
    for (k, m) in dendrogram.merges.iter().take(n - g).enumerate() {
        let new = n + k;
        let (a, b) = (find(&mut parent, m.left), find(&mut parent, m.right));
        parent[a] = new;
        parent[b] = new;
    }
    let mut seen: Vec<(usize, usize)> = Vec::new();
    let labels = (0..n)
        .map(|i| {
            let root = find(&mut parent, i);
            match seen.iter().find(|(r, _)| *r == root) {
                Some(&(_, l)) => l,
                None => {
                    seen.push((root, seen.len()));
                    seen.len() - 1
                }
            }
        })
        .collect();
    Partition::new(labels, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMedoidsResult {
    pub partition: Partition,
    /// Medoid indices in ascending order; cluster `k` is medoid `medoids[k]`.
    pub medoids: Vec<usize>,
    pub cost: f64,
    /// Total cost after the build step and after every accepted swap of the
    /// winning start.
    #[serde(skip)]
    pub cost_trace: Vec<f64>,
}

/// Nearest and second-nearest medoid distance of every point.
fn nearest_two(dist: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = dist.len();
    let mut near = vec![0; n];
    let mut d1 = vec![f64::INFINITY; n];
    let mut d2 = vec![f64::INFINITY; n];
    for i in 0..n {
        for (k, &m) in medoids.iter().enumerate() {
            let v = dist.get(i, m);
            if v < d1[i] {
                d2[i] = d1[i];
                d1[i] = v;
                near[i] = k;
            } else if v < d2[i] {
                d2[i] = v;
            }
        }
    }
    (near, d1, d2)
}

fn pam_build(dist: &DistanceMatrix, g: usize) -> Vec<usize> {
    let n = dist.len();
    let first = (0..n)
        .map(|i| (i, dist.row(i).iter().sum::<f64>()))
        .fold((0, f64::INFINITY), |b, (i, s)| if s < b.1 { (i, s) } else { b })
        .0;
    let mut medoids = vec![first];
    let mut d1: Vec<f64> = dist.row(first).to_vec();
    while medoids.len() < g {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for h in (0..n).filter(|h| !medoids.contains(h)) {
            let gain: f64 = (0..n).map(|j| (d1[j] - dist.get(j, h)).max(0.0)).sum();
            if gain > best.1 {
                best = (h, gain);
            }
        }
        medoids.push(best.0);
        for (j, v) in d1.iter_mut().enumerate() {
            *v = v.min(dist.get(j, best.0));
        }
    }
    medoids
}

/// PAM swap phase: repeatedly applies the best strictly improving
/// (medoid, non-medoid) exchange until none remains.
fn pam_swap(dist: &DistanceMatrix, mut medoids: Vec<usize>) -> (Vec<usize>, Vec<f64>) {
    let n = dist.len();
    let (mut near, mut d1, mut d2) = nearest_two(dist, &medoids);
    let mut cost: f64 = d1.iter().sum();
    let mut trace = vec![cost];
    let mut is_medoid = vec![false; n];
    medoids.iter().for_each(|&m| is_medoid[m] = true);
    for _ in 0..10_000 {
        let mut best = (0, 0, 0.0);
        for (k, _) in medoids.iter().enumerate() {
            for h in (0..n).filter(|&h| !is_medoid[h]) {
                let mut delta = 0.0;
                for j in 0..n {
                    let djh = dist.get(j, h);
                    delta += if near[j] == k { djh.min(d2[j]) - d1[j] } else { (djh - d1[j]).min(0.0) };
                }
                if delta < best.2 {
                    best = (k, h, delta);
                }
            }
        }
        if best.2 >= -1e-12 * cost.max(1.0) {
            break;
        }
        is_medoid[medoids[best.0]] = false;
        is_medoid[best.1] = true;
        medoids[best.0] = best.1;
        (near, d1, d2) = nearest_two(dist, &medoids);
        cost = d1.iter().sum();
        trace.push(cost);
    }
    (medoids, trace)
}

/// Partitioning around medoids, best of `n_starts` by total cost.
///
/// Start 0 uses the greedy build initialization; further starts draw the
/// initial medoids uniformly without replacement from their own stream.
pub fn k_medoids(dist: &DistanceMatrix, g: usize, n_starts: usize, seed: u64) -> Result<KMedoidsResult> {
    let n = dist.len();
    if g == 0 || g > n {
        return Err(Error::Config(format!("k-medoids needs 1 <= G <= N, got G={g}, N={n}")));
    }
    let runs: Vec<(Vec<usize>, Vec<f64>)> = (0..n_starts.max(1))
        .into_par_iter()
        .map(|s| {
            let init =
                if s == 0 { pam_build(dist, g) } else { sample(&mut substream(seed, s as u64), n, g).into_vec() };
            pam_swap(dist, init)
        })
        .collect();
    let (mut medoids, cost_trace) = runs
        .into_iter()
        .reduce(|best, run| if run.1.last() < best.1.last() { run } else { best })
        .expect("at least one start");
    medoids.sort_unstable();
    let (near, _, _) = nearest_two(dist, &medoids);
    let mut labels = near;
    for (k, &m) in medoids.iter().enumerate() {
        labels[m] = k;
    }
    let cost = labels.iter().enumerate().map(|(i, &k)| dist.get(i, medoids[k])).sum();
    Ok(KMedoidsResult { partition: Partition::new(labels, g)?, medoids, cost, cost_trace })
}

/// Per-object silhouette values.
///
/// Objects in singleton clusters get 0, as do objects with `a = b = 0`.
/// Empty clusters are ignored when computing `b`.
pub fn silhouette_values(dist: &DistanceMatrix, partition: &Partition) -> Result<Vec<f64>> {
    if partition.g() < 2 {
        return Err(Error::Validation("silhouette needs at least two clusters".into()));
    }
    if partition.len() != dist.len() {
        return Err(Error::Validation(format!(
            "partition covers {} objects, distance matrix {}",
            partition.len(),
            dist.len()
        )));
    }
    let g = partition.g();
    let sizes = partition.cluster_sizes();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Validation("silhouette needs at least two non-empty clusters".into()));
    }
    let labels = partition.labels();
    Ok((0..dist.len())
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; g];
            for (j, &l) in labels.iter().enumerate() {
                sums[l] += dist.get(i, j);
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..g)
                .filter(|&k| k != own && sizes[k] > 0)
                .map(|k| sums[k] / sizes[k] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect())
}

pub fn average_silhouette_width(dist: &DistanceMatrix, partition: &Partition) -> Result<f64> {
    let s = silhouette_values(dist, partition)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
