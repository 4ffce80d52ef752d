//! Pseudo-labels from DBSCAN over cosine distances.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Symmetric matrix of `1 - cos(f_i, f_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps a precomputed `n×n` matrix after checking symmetry, a zero
    /// diagonal and the `[0, 2]` range.
    pub fn from_raw(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::contract(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let d = data[i * n + j];
                if !(0.0..=2.0).contains(&d) || (d - data[j * n + i]).abs() > 1e-9 {
                    return Err(Error::contract(format!("invalid distance {d} at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Pairwise cosine distances of unit-norm rows.
pub fn pairwise_cosine_distance(features: &Tensor) -> Result<DistanceMatrix> {
    if features.ndim() != 2 {
        return Err(Error::shape(format!("features must be [N, D], got {:?}", features.dims())));
    }
    let n = features.dims()[0];
    for i in 0..n {
        let norm = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::contract(format!("feature row {i} has norm {norm}, expected 1")));
        }
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = features.row(i).iter().zip(features.row(j)).map(|(a, b)| a * b).sum();
            let d = (1.0 - dot).clamp(0.0, 2.0);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig { eps: 0.6, min_pts: 4 }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.min_pts == 0 {
            return Err(Error::Config(format!(
                "dbscan needs eps > 0 and min_pts >= 1, got eps={} min_pts={}",
                self.eps, self.min_pts
            )));
        }
        Ok(())
    }
}

/// Cluster id per sample; `None` marks an outlier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabeling {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl PseudoLabeling {
    /// Builds a labeling and checks ids are compact in `[0, M)`.
    pub fn new(labels: Vec<Option<usize>>) -> Result<Self> {
        let num_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; num_clusters];
        for l in labels.iter().flatten() {
            seen[*l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("cluster ids are not compact"));
        }
        Ok(PseudoLabeling { labels, num_clusters })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Member indices per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    /// Labels encoded with `-1` for outliers.
    pub fn to_i32(&self) -> Vec<i32> {
        self.labels
            .iter()
            .map(|l| l.map_or(-1, |c| c as i32))
            .collect()
    }
}

/// DBSCAN on a precomputed metric.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are connected components of core points plus the
/// border points they reach; a border point reachable from several clusters
/// joins the one of its lowest-index core neighbour. Cluster ids follow the
/// order of each cluster's first member.
pub fn dbscan(dist: &DistanceMatrix, config: &DbscanConfig) -> Result<PseudoLabeling> {
    config.validate()?;
    let n = dist.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= config.eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= config.min_pts).collect();

    let mut component = vec![usize::MAX; n];
    let mut components = 0;
    for start in 0..n {
        if !core[start] || component[start] != usize::MAX {
            continue;
        }
        component[start] = components;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if core[q] && component[q] == usize::MAX {
                    component[q] = components;
                    queue.push_back(q);
                }
            }
        }
        components += 1;
    }

    let mut raw: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        raw[i] = if core[i] {
            Some(component[i])
        } else {
            neighbours[i]
                .iter()
                .find(|&&j| core[j])
                .map(|&j| component[j])
        };
    }

    // Relabel by first member index.
    let mut remap: HashMap<usize, usize> = HashMap::new();
    let labels = raw
        .into_iter()
        .map(|l| {
            l.map(|c| {
                let next = remap.len();
                *remap.entry(c).or_insert(next)
            })
        })
        .collect();
    PseudoLabeling::new(labels)
}

/// Index-aligned view of the three feature spaces sharing one labeling.
#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    pub labeling: PseudoLabeling,
    pub original: Tensor,
    pub noised: Tensor,
    pub fused: Tensor,
    /// Non-outlier sample indices; the training pool for the epoch.
    pub pool: Vec<usize>,
}

/// Shares `labeling` across the original, noised and fused features and
/// drops outliers from the training pool.
pub fn assign_pseudo_labels(
    labeling: PseudoLabeling,
    original: Tensor,
    noised: Tensor,
    fused: Tensor,
) -> Result<LabeledFeatures> {
    let n = labeling.len();
    for (name, t) in [("original", &original), ("noised", &noised), ("fused", &fused)] {
        if t.rows() != n {
            return Err(Error::contract(format!(
                "{name} features have {} rows for {n} labels",
                t.rows()
            )));
        }
    }
    let pool: Vec<usize> = (0..n).filter(|&i| labeling.labels[i].is_some()).collect();
    if pool.is_empty() {
        log::warn!("all {n} samples are outliers; training pool is empty");
    }
    Ok(LabeledFeatures {
        labeling,
        original,
        noised,
        fused,
        pool,
    })
}

/// Share of clustered samples that belong to their cluster's majority identity.
pub fn cluster_purity<T: Eq + std::hash::Hash>(labeling: &PseudoLabeling, truth: &[T]) -> Result<f64> {
    if truth.len() != labeling.len() {
        return Err(Error::contract(format!(
            "{} truth labels for {} samples",
            truth.len(),
            labeling.len()
        )));
    }
    let mut clustered = 0usize;
    let mut majority = 0usize;
    for members in labeling.members() {
        let mut counts: HashMap<&T, usize> = HashMap::new();
        for &i in &members {
            *counts.entry(&truth[i]).or_default() += 1;
        }
        clustered += members.len();
        majority += counts.values().copied().max().unwrap_or(0);
    }
    if clustered == 0 {
        return Err(Error::contract("purity is undefined without clustered samples"));
    }
    Ok(majority as f64 / clustered as f64)
}
