//! Cluster contrastive, consistency and joint objectives.
//!
//! All functions build on a [`Tape`] so gradients flow back into the query
//! features. Memory banks enter as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryBank, MemoryBanks};
use crate::tensorcore::{NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    /// `-sim(f_q, m̃₊)`
    pub cluster_consistency: bool,
    /// `-sim(f_q, f̃_q)`
    pub instance_consistency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            cluster_consistency: true,
            instance_consistency: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Cosine similarity of two plain vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of dims {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

fn check_nonzero_rows(t: &Tensor, what: &str) -> Result<()> {
    let d = t.dims().last().copied().unwrap_or(0);
    for r in 0..t.rows() {
        if t.data()[r * d..(r + 1) * d].iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric(format!("{what}: row {r} is a zero vector")));
        }
    }
    Ok(())
}

/// Row-wise cosine similarity of two `[B, D]` nodes, giving `[B]`.
pub fn cosine_sim(tape: &mut Tape, u: NodeId, v: NodeId) -> Result<NodeId> {
    check_nonzero_rows(tape.value(u), "cosine_sim lhs")?;
    check_nonzero_rows(tape.value(v), "cosine_sim rhs")?;
    let un = tape.l2_normalize(u)?;
    let vn = tape.l2_normalize(v)?;
    tape.row_dot(un, vn)
}

/// Per-query cluster contrastive loss `[B]`:
/// `logsumexp(sim(f, M)/τ) - sim(f, m₊)/τ`.
pub fn cluster_loss(tape: &mut Tape, queries: NodeId, bank: &MemoryBank, labels: &[usize], tau: f64) -> Result<NodeId> {
    let q = tape.value(queries);
    if q.ndim() != 2 || q.dims()[1] != bank.dim() || q.dims()[0] != labels.len() {
        return Err(Error::shape(format!(
            "queries {:?} with {} labels against a bank of dim {}",
            q.dims(),
            labels.len(),
            bank.dim()
        )));
    }
    if bank.is_empty() {
        return Err(Error::contract("cluster loss against an empty bank"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= bank.len()) {
        return Err(Error::contract(format!("label {bad} out of range ({} clusters)", bank.len())));
    }
    check_nonzero_rows(q, "cluster_loss query")?;
    let qn = tape.l2_normalize(queries)?;
    let bank_t = tape.constant(crate::tensorcore::transpose(bank.entries())?);
    let sims = tape.matmul(qn, bank_t)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let lse = tape.logsumexp(logits)?;
    let positive = tape.pick_columns(logits, labels.to_vec())?;
    tape.sub(lse, positive)
}

/// Per-query consistency loss `[B]` with each term switched by `config`.
///
/// `positives` holds the noised-bank entry of each query's cluster.
pub fn consistency_loss(
    tape: &mut Tape,
    original: NodeId,
    noised: NodeId,
    positives: &Tensor,
    config: &LossConfig,
) -> Result<NodeId> {
    let b = tape.value(original).rows();
    let mut terms = Vec::new();
    if config.cluster_consistency {
        let m = tape.constant(positives.clone());
        terms.push(cosine_sim(tape, original, m)?);
    }
    if config.instance_consistency {
        terms.push(cosine_sim(tape, original, noised)?);
    }
    let mut acc = match terms.split_first() {
        None => return Ok(tape.constant(Tensor::zeros(&[b]))),
        Some((first, rest)) => {
            let mut acc = *first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    acc = tape.scale(acc, -1.0)?;
    Ok(acc)
}

/// Query features of one batch in the three spaces.
#[derive(Clone, Copy, Debug)]
pub struct Queries {
    pub original: NodeId,
    pub noised: NodeId,
    pub fused: NodeId,
}

/// Scalar nodes of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub cluster_all: NodeId,
    pub consistency: NodeId,
}

fn tag(term: &str, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{term}: {msg}")),
        other => other,
    }
}

/// Batch mean of the three cluster losses plus the consistency loss.
pub fn total_loss(
    tape: &mut Tape,
    queries: Queries,
    banks: &MemoryBanks,
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    if labels.is_empty() {
        return Err(Error::contract("total loss of an empty batch"));
    }
    let tau = config.tau;
    let lc = cluster_loss(tape, queries.original, &banks.original, labels, tau)
        .map_err(|e| tag("L_cluster(original)", e))?;
    let ln = cluster_loss(tape, queries.noised, &banks.noised, labels, tau)
        .map_err(|e| tag("L_cluster(noised)", e))?;
    let lf = cluster_loss(tape, queries.fused, &banks.fused, labels, tau)
        .map_err(|e| tag("L_cluster(fused)", e))?;
    let positives = banks.noised.entries().select_rows(labels)?;
    let cons = consistency_loss(tape, queries.original, queries.noised, &positives, config)
        .map_err(|e| tag("L_consistency", e))?;
    let cluster_sum = tape.add(lc, ln)?;
    let cluster_sum = tape.add(cluster_sum, lf)?;
    let per_sample = tape.add(cluster_sum, cons)?;
    let total = tape.mean(per_sample).map_err(|e| tag("L_total", e))?;
    let cluster_all = tape.mean(cluster_sum)?;
    let consistency = tape.mean(cons)?;
    Ok(LossTerms {
        total,
        cluster_all,
        consistency,
    })
}
