//! Per-cluster memory banks for the original, noised and fused feature spaces.

use serde::{Deserialize, Serialize};

use crate::clustering::LabeledFeatures;
use crate::error::{Error, Result};
use crate::tensorcore::{Tensor, L2_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    Original,
    Noised,
    Fused,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Original => "original",
            Space::Noised => "noised",
            Space::Fused => "fused",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Weight kept by the stored entry on each update.
    pub alpha: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { alpha: 0.1 }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
    for x in v {
        *x /= norm;
    }
}

/// Unit-norm cluster centroids `[M, D]` of one feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub space: Space,
    entries: Tensor,
}

impl MemoryBank {
    /// Wraps `[M, D]` entries, which must already be unit rows.
    pub fn new(space: Space, entries: Tensor) -> Result<Self> {
        if entries.ndim() != 2 {
            return Err(Error::shape(format!("bank entries must be [M, D], got {:?}", entries.dims())));
        }
        for i in 0..entries.dims()[0] {
            let norm = entries.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("bank entry {i} has norm {norm}")));
            }
        }
        Ok(MemoryBank { space, entries })
    }

    /// Normalized mean of each cluster's features.
    pub fn from_clusters(space: Space, features: &Tensor, members: &[Vec<usize>]) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::shape(format!("features must be [N, D], got {:?}", features.dims())));
        }
        let d = features.dims()[1];
        let mut data = Vec::with_capacity(members.len() * d);
        for (c, idx) in members.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::contract(format!("cluster {c} has no members")));
            }
            if let [only] = idx[..] {
                data.extend_from_slice(features.row(only));
                continue;
            }
            let mut mean = vec![0.0; d];
            for &i in idx {
                for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= idx.len() as f64;
            }
            normalize(&mut mean);
            data.extend(mean);
        }
        MemoryBank::new(space, Tensor::new(vec![members.len(), d], data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.dims()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.len() {
            return Err(Error::contract(format!(
                "label {label} out of range for {} bank of {} clusters",
                self.space.name(),
                self.len()
            )));
        }
        Ok(())
    }

    /// The positive entry for `label`.
    pub fn positive(&self, label: usize) -> Result<&[f64]> {
        self.check_label(label)?;
        Ok(self.entries.row(label))
    }

    /// `m ← normalize(α·m + (1−α)·f)` on the single entry `label`.
    pub fn momentum_update(&mut self, label: Option<usize>, feature: &[f64], alpha: f64) -> Result<()> {
        let label = label.ok_or_else(|| Error::contract("outliers never update a memory bank"))?;
        self.check_label(label)?;
        if feature.len() != self.dim() {
            return Err(Error::shape(format!(
                "feature of dim {} for bank of dim {}",
                feature.len(),
                self.dim()
            )));
        }
        let d = self.dim();
        let row = &mut self.entries.data_mut()[label * d..(label + 1) * d];
        // Both operands are unit rows, so the boundaries need no renormalization.
        if alpha == 1.0 {
            return Ok(());
        }
        if alpha == 0.0 {
            row.copy_from_slice(feature);
            return Ok(());
        }
        for (m, &f) in row.iter_mut().zip(feature) {
            *m = alpha * *m + (1.0 - alpha) * f;
        }
        normalize(row);
        Ok(())
    }
}

/// The three banks of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBanks {
    pub original: MemoryBank,
    pub noised: MemoryBank,
    pub fused: MemoryBank,
}

impl MemoryBanks {
    pub fn get(&self, space: Space) -> &MemoryBank {
        match space {
            Space::Original => &self.original,
            Space::Noised => &self.noised,
            Space::Fused => &self.fused,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.original.len()
    }

    /// Sequential updates of the `label`ed entries with a batch of
    /// `[B, D]` query features per space, in batch order.
    pub fn update_batch(
        &mut self,
        labels: &[usize],
        original: &Tensor,
        noised: &Tensor,
        fused: &Tensor,
        alpha: f64,
    ) -> Result<()> {
        for (bank, feats) in [
            (&mut self.original, original),
            (&mut self.noised, noised),
            (&mut self.fused, fused),
        ] {
            if feats.rows() != labels.len() {
                return Err(Error::contract(format!(
                    "{} query rows for {} labels",
                    feats.rows(),
                    labels.len()
                )));
            }
            for (i, &label) in labels.iter().enumerate() {
                bank.momentum_update(Some(label), feats.row(i), alpha)?;
            }
        }
        Ok(())
    }
}

/// Builds all three banks from the epoch's labeled features.
pub fn init_banks(view: &LabeledFeatures) -> Result<MemoryBanks> {
    if view.labeling.num_clusters == 0 {
        return Err(Error::contract("memory banks need at least one cluster"));
    }
    let members = view.labeling.members();
    Ok(MemoryBanks {
        original: MemoryBank::from_clusters(Space::Original, &view.original, &members)?,
        noised: MemoryBank::from_clusters(Space::Noised, &view.noised, &members)?,
        fused: MemoryBank::from_clusters(Space::Fused, &view.fused, &members)?,
    })
}
