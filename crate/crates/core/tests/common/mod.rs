//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written from the textbook definitions on plain
//! `Vec<f64>` data and shares no code with the library beyond input types.

#![allow(dead_code)]

pub mod cases;

use rand::Rng;

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v = random_vec(rng, d, 1.0);
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            return normalized(&v);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `-log softmax(sim(q, bank) / τ)[label]`, summing exponentials directly.
pub fn cluster_loss(q: &[f64], bank: &[Vec<f64>], label: usize, tau: f64) -> f64 {
    let logits: Vec<f64> = bank.iter().map(|m| cosine(q, m) / tau).collect();
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[label].exp() / denom).ln()
}

pub fn consistency_loss(f: &[f64], f_noised: &[f64], m_noised: &[f64], cluster: bool, instance: bool) -> f64 {
    let mut l = 0.0;
    if cluster {
        l -= cosine(f, m_noised);
    }
    if instance {
        l -= cosine(f, f_noised);
    }
    l
}

pub struct Sample<'a> {
    pub f: &'a [f64],
    pub f_noised: &'a [f64],
    pub f_fused: &'a [f64],
    pub label: usize,
}

pub struct Banks<'a> {
    pub original: &'a [Vec<f64>],
    pub noised: &'a [Vec<f64>],
    pub fused: &'a [Vec<f64>],
}

/// Batch mean of the three cluster losses plus consistency.
pub fn total_loss(batch: &[Sample], banks: &Banks, tau: f64, cluster: bool, instance: bool) -> f64 {
    let mut sum = 0.0;
    for s in batch {
        sum += cluster_loss(s.f, banks.original, s.label, tau)
            + cluster_loss(s.f_noised, banks.noised, s.label, tau)
            + cluster_loss(s.f_fused, banks.fused, s.label, tau)
            + consistency_loss(s.f, s.f_noised, &banks.noised[s.label], cluster, instance);
    }
    sum / batch.len() as f64
}

/// Reference DBSCAN: core flags, min-label propagation over core-core edges
/// until nothing changes, borders take the lowest-index core neighbour's
/// component, then components are renumbered by first member. `-1` is noise.
pub fn naive_dbscan(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i32> {
    let n = dist.len();
    let near = |i: usize, j: usize| dist[i][j] <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if core[i] && core[j] && near(i, j) && comp[j] < comp[i] {
                    comp[i] = comp[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let raw: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if core[i] {
                Some(comp[i])
            } else {
                (0..n).find(|&j| core[j] && near(i, j)).map(|j| comp[j])
            }
        })
        .collect();
    canonical(&raw)
}

/// Renumbers labels by order of first appearance, noise as `-1`.
pub fn canonical<T: PartialEq + Copy>(labels: &[Option<T>]) -> Vec<i32> {
    let mut seen: Vec<T> = Vec::new();
    labels
        .iter()
        .map(|l| match l {
            None => -1,
            Some(c) => match seen.iter().position(|s| s == c) {
                Some(p) => p as i32,
                None => {
                    seen.push(*c);
                    (seen.len() - 1) as i32
                }
            },
        })
        .collect()
}

pub fn cosine_distance_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|a| rows.iter().map(|b| (1.0 - dot(a, b)).clamp(0.0, 2.0)).collect())
        .collect()
}

/// Purity by explicit per-cluster class counting.
pub fn purity(labels: &[Option<usize>], truth: &[usize]) -> f64 {
    let clusters: Vec<usize> = {
        let mut c: Vec<usize> = labels.iter().flatten().copied().collect();
        c.sort();
        c.dedup();
        c
    };
    let classes: Vec<usize> = {
        let mut c = truth.to_vec();
        c.sort();
        c.dedup();
        c
    };
    let mut majority = 0;
    let mut total = 0;
    for &c in &clusters {
        let best = classes
            .iter()
            .map(|&k| (0..labels.len()).filter(|&i| labels[i] == Some(c) && truth[i] == k).count())
            .max()
            .unwrap();
        majority += best;
        total += labels.iter().filter(|l| **l == Some(c)).count();
    }
    majority as f64 / total as f64
}

/// Gallery order by selection: repeatedly take the highest remaining
/// similarity, lowest index first among equals.
pub fn argsort_desc(sims: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..sims.len()).collect();
    let mut out = Vec::with_capacity(sims.len());
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            if sims[left[p]] > sims[left[best]] {
                best = p;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Average precision straight from its definition.
pub fn brute_ap(relevant: &[bool]) -> Option<f64> {
    let r = relevant.iter().filter(|&&x| x).count();
    if r == 0 {
        return None;
    }
    let mut s = 0.0;
    for k in 1..=relevant.len() {
        if relevant[k - 1] {
            let hits = relevant[..k].iter().filter(|&&x| x).count();
            s += hits as f64 / k as f64;
        }
    }
    Some(s / r as f64)
}

/// `(mAP, cmc@1, cmc@5, cmc@10)` over queries with a relevant gallery item.
pub fn brute_metrics(query: &[Vec<f64>], qid: &[usize], gallery: &[Vec<f64>], gid: &[usize]) -> (f64, f64, f64, f64) {
    let (mut ap, mut c1, mut c5, mut c10, mut valid) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (q, id) in query.iter().zip(qid) {
        let sims: Vec<f64> = gallery.iter().map(|g| dot(q, g)).collect();
        let rel: Vec<bool> = argsort_desc(&sims).iter().map(|&j| gid[j] == *id).collect();
        let Some(a) = brute_ap(&rel) else { continue };
        valid += 1.0;
        ap += a;
        let hit = |k: usize| rel.iter().take(k).any(|&r| r) as u8 as f64;
        c1 += hit(1);
        c5 += hit(5);
        c10 += hit(10);
    }
    (ap / valid, c1 / valid, c5 / valid, c10 / valid)
}

/// Central difference of `f` with respect to coordinate `i` of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// One bias-corrected Adam step with coupled L2 decay on a single scalar.
#[allow(clippy::too_many_arguments)]
pub fn adam_scalar(p: f64, g: f64, m: f64, v: f64, t: u64, lr: f64, wd: f64) -> (f64, f64, f64) {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let g = g + wd * p;
    let m = b1 * m + (1.0 - b1) * g;
    let v = b2 * v + (1.0 - b2) * g * g;
    let mh = m / (1.0 - b1.powi(t as i32));
    let vh = v / (1.0 - b2.powi(t as i32));
    (p - lr * mh / (vh.sqrt() + eps), m, v)
}

/// Random orthogonal `d×d` matrix by Gram-Schmidt on random columns.
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v = random_vec(rng, d, 1.0);
        for b in &basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn apply_matrix(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}
