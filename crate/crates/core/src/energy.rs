//! Energy-based expert denoising: score each foreign expert's similarity to
//! the local one via negative Helmholtz free energy over per-dimension
//! energies, then drop the lowest-scoring fraction.
//!
//! The per-dimension energy of a pair (h_j, h_k) is the negated elementwise
//! product normalized by both norms, so the energies sum to minus the cosine
//! similarity and the free energy is a temperature-weighted logsumexp of the
//! alignment profile.

use crate::error::{Error, Result};
use crate::numerics::logsumexp;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConfig {
    /// Temperature of the free energy, > 0.
    pub temperature: f64,
    /// Fraction of foreign experts to drop, in [0, 1). Zero disables removal.
    pub dropout_ratio: f64,
}

impl EnergyConfig {
    pub fn new(temperature: f64, dropout_ratio: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidParameter {
                name: "temperature",
                message: format!("must be > 0, got {temperature}"),
            });
        }
        if !(0.0..1.0).contains(&dropout_ratio) {
            return Err(Error::InvalidParameter {
                name: "dropout_ratio",
                message: format!("must be in [0, 1), got {dropout_ratio}"),
            });
        }
        Ok(EnergyConfig {
            temperature,
            dropout_ratio,
        })
    }
}

/// Elementwise product of the two vectors over the product of their norms.
/// Sums to the cosine similarity. `None` when either vector has zero norm.
pub fn projected_vector(h_j: &[f64], h_k: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(h_j.len(), h_k.len());
    let nj: f64 = h_j.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nk: f64 = h_k.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nj == 0.0 || nk == 0.0 {
        return None;
    }
    Some(
        h_j.iter()
            .zip(h_k)
            .map(|(a, b)| a * b / (nj * nk))
            .collect(),
    )
}

/// Confidence score: temperature-weighted logsumexp of the alignment profile
/// (the negative free energy). Zero-norm inputs score negative infinity, so
/// degenerate experts sort first for removal instead of crashing.
pub fn confidence(h_j: &[f64], h_k: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter {
            name: "temperature",
            message: format!("must be > 0, got {temperature}"),
        });
    }
    match projected_vector(h_j, h_k) {
        Some(v) => logsumexp(&v, temperature),
        None => Ok(f64::NEG_INFINITY),
    }
}

/// Denoising outcome for one anchor client.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    /// Pool index of the local expert; always kept.
    pub anchor: usize,
    /// Mean confidence per pool entry; the anchor's own slot is +inf.
    pub confidence: Vec<f64>,
    /// Kept mask over pool indices.
    pub kept: Vec<bool>,
    /// Removed indices in removal order (lowest confidence first).
    pub removed: Vec<usize>,
}

impl EnergyReport {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }
}

/// Score every foreign expert against the anchor over a batch and remove the
/// bottom `floor(dropout_ratio * (pool_size - 1))` by mean confidence.
///
/// `expert_reprs[k][i]` is expert k's representation of batch sample i; the
/// anchor's own row provides the h_j vectors. Samples where the anchor
/// representation itself has zero norm carry no alignment information and are
/// skipped; a foreign expert that is zero on a usable sample still scores
/// negative infinity and is dropped first.
pub fn denoise(
    expert_reprs: &[Vec<Vec<f64>>],
    anchor: usize,
    cfg: &EnergyConfig,
) -> Result<EnergyReport> {
    let pool_size = expert_reprs.len();
    if anchor >= pool_size {
        return Err(Error::InvalidParameter {
            name: "anchor",
            message: format!("index {anchor} out of range for pool of {pool_size}"),
        });
    }
    let batch = expert_reprs[anchor].len();
    if batch == 0 {
        return Err(Error::EmptyInput { context: "denoise" });
    }
    let usable: Vec<usize> = (0..batch)
        .filter(|&i| expert_reprs[anchor][i].iter().any(|&v| v != 0.0))
        .collect();
    let mut mean_conf = vec![f64::INFINITY; pool_size];
    for (k, reprs) in expert_reprs.iter().enumerate() {
        if k == anchor {
            continue;
        }
        if usable.is_empty() {
            mean_conf[k] = f64::NEG_INFINITY;
            continue;
        }
        let mut acc = 0.0;
        for &i in &usable {
            acc += confidence(&expert_reprs[anchor][i], &reprs[i], cfg.temperature)?;
        }
        mean_conf[k] = acc / usable.len() as f64;
    }
    let remove_count = (cfg.dropout_ratio * (pool_size as f64 - 1.0)).floor() as usize;
    let mut foreign: Vec<usize> = (0..pool_size).filter(|&k| k != anchor).collect();
    foreign.sort_by(|&a, &b| mean_conf[a].total_cmp(&mean_conf[b]).then(a.cmp(&b)));
    let removed: Vec<usize> = foreign.into_iter().take(remove_count).collect();
    let mut kept = vec![true; pool_size];
    for &k in &removed {
        kept[k] = false;
    }
    Ok(EnergyReport {
        anchor,
        confidence: mean_conf,
        kept,
        removed,
    })
}
