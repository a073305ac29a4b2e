//! Exemplar memory: one key slot per unlabeled target image.
//!
//! Keys start at zero and are refreshed with a momentum rule each time the
//! corresponding image is forwarded, then re-projected onto the unit sphere.
//! The value of slot `i` is always `i`, so the slot index doubles as the
//! pseudo-class of the image.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, norm, softmax_temp, DenseMat, EPS};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    keys: DenseMat,
    values: Vec<usize>,
    alpha: Option<f64>,
}

/// Anchor slot followed by its `k − 1` most similar memory slots.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl NeighborSet {
    pub fn anchor(&self) -> usize {
        self.indices[0]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_unit(f: &[f64]) -> Result<()> {
    let n = norm(f);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "memory input must be unit-norm, got norm {n}"
        )));
    }
    Ok(())
}

impl ExemplarMemory {
    pub fn new(n_slots: usize, dim: usize) -> Result<Self> {
        if n_slots == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "memory needs at least one slot and one dimension, got {n_slots}x{dim}"
            )));
        }
        Ok(ExemplarMemory {
            keys: DenseMat::zeros(n_slots, dim),
            values: (0..n_slots).collect(),
            alpha: None,
        })
    }

    /// Rebuild a memory from stored keys, e.g. from a checkpoint. Every row
    /// must be zero or unit-norm.
    pub fn from_keys(keys: DenseMat) -> Result<Self> {
        let mut mem = ExemplarMemory::new(keys.rows(), keys.cols())?;
        for (i, row) in keys.iter_rows().enumerate() {
            let n = norm(row);
            if n != 0.0 && (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "memory key {i} has norm {n}; keys must be zero or unit"
                )));
            }
        }
        mem.keys = keys;
        Ok(mem)
    }

    pub fn n_slots(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &DenseMat {
        &self.keys
    }

    pub fn key(&self, i: usize) -> &[f64] {
        self.keys.row(i)
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// Set the updating rate used by [`ExemplarMemory::update_current`].
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        self.alpha = Some(alpha);
        Ok(())
    }

    /// `K[i] ← normalize(α·K[i] + (1 − α)·f)`
    pub fn update(&mut self, i: usize, f: &[f64], alpha: f64) -> Result<()> {
        if i >= self.n_slots() {
            return Err(Error::IndexOutOfRange {
                what: "memory slot",
                index: i,
                len: self.n_slots(),
            });
        }
        self.check_dim(f)?;
        check_unit(f)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        let blended: Vec<f64> = self
            .keys
            .row(i)
            .iter()
            .zip(f)
            .map(|(k, x)| alpha * k + (1.0 - alpha) * x)
            .collect();
        // α = 1 on a zero slot leaves a zero vector, which stays zero.
        self.keys
            .row_mut(i)
            .copy_from_slice(&l2_normalize(&blended, EPS));
        Ok(())
    }

    /// Update with the rate set through [`ExemplarMemory::set_alpha`].
    pub fn update_current(&mut self, i: usize, f: &[f64]) -> Result<()> {
        let alpha = self
            .alpha
            .ok_or_else(|| Error::InvalidArgument("memory alpha has not been set".into()))?;
        self.update(i, f, alpha)
    }

    fn check_dim(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "memory feature",
                expected: self.dim(),
                found: f.len(),
            });
        }
        Ok(())
    }

    /// Raw cosine similarities `K[j]ᵀ f`.
    pub fn similarities(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(f)?;
        Ok(self.keys.matvec(f))
    }

    /// Temperature-scaled logits `K[j]ᵀ f / β`.
    pub fn scores(&self, f: &[f64], beta: f64) -> Result<Vec<f64>> {
        check_beta(beta)?;
        check_unit(f)?;
        let mut s = self.similarities(f)?;
        for x in &mut s {
            *x /= beta;
        }
        Ok(s)
    }

    /// Probability that `f` belongs to each slot's class.
    pub fn probabilities(&self, f: &[f64], beta: f64) -> Result<Vec<f64>> {
        Ok(softmax_temp(&self.scores(f, beta)?, 1.0))
    }

    /// The anchor followed by the `k − 1` slots most similar to `f`, ties
    /// broken by ascending slot index.
    pub fn knn(&self, anchor: usize, f: &[f64], k: usize) -> Result<NeighborSet> {
        if anchor >= self.n_slots() {
            return Err(Error::IndexOutOfRange {
                what: "memory slot",
                index: anchor,
                len: self.n_slots(),
            });
        }
        check_unit(f)?;
        let sims = self.similarities(f)?;
        neighbors_from_similarities(&sims, anchor, k)
    }
}

/// Selection shared by [`ExemplarMemory::knn`] and the loss code, which
/// already holds the similarity vector.
pub(crate) fn neighbors_from_similarities(
    sims: &[f64],
    anchor: usize,
    k: usize,
) -> Result<NeighborSet> {
    if k == 0 || k > sims.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [1, {}]",
            sims.len()
        )));
    }
    let mut rest: Vec<usize> = (0..sims.len()).filter(|&j| j != anchor).collect();
    // partial_cmp so that -0.0 and 0.0 tie; similarities are finite.
    let by_similarity = |a: &usize, b: &usize| {
        sims[*b]
            .partial_cmp(&sims[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let take = k - 1;
    if take > 0 && take < rest.len() {
        rest.select_nth_unstable_by(take - 1, by_similarity);
    }
    rest.truncate(take);
    rest.sort_unstable_by(by_similarity);

    let mut indices = Vec::with_capacity(k);
    indices.push(anchor);
    indices.extend(rest);
    let similarities = indices.iter().map(|&j| sims[j]).collect();
    Ok(NeighborSet {
        indices,
        similarities,
    })
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta {beta} outside (0, 1]"
        )));
    }
    Ok(())
}
