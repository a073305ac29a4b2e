//! Loss terms and their analytic gradients.
//!
//! The source branch is a plain softmax cross-entropy over identity logits.
//! The target branch is a soft-label cross-entropy against the exemplar
//! memory: the sample's own slot gets weight 1 and each of its `k − 1`
//! nearest slots gets weight `1/k`. With `k = 1` only the own-slot term is
//! left, which is exemplar invariance for a real image and camera invariance
//! for a camera-transferred one.

use crate::error::{Error, Result};
use crate::memory::{check_beta, neighbors_from_similarities, ExemplarMemory, NeighborSet};
use crate::numerics::{axpy, log_softmax, norm};

/// Per-anchor weights over its neighbor set.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborWeights {
    pub anchor: usize,
    pub entries: Vec<(usize, f64)>,
}

impl NeighborWeights {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }
}

/// Own-slot term and neighbor term of the target loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TargetSplit {
    pub exemplar_or_camera: f64,
    pub neighborhood: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetLoss {
    pub loss: f64,
    pub grad_f: Vec<f64>,
    pub split: TargetSplit,
}

/// Batch-level loss values plus the gradients handed to the network.
///
/// `grad_embeddings[t]` is the gradient of `total` with respect to the
/// normalized embedding of target item `t`; `grad_logits[s]` is the gradient
/// of `total` with respect to the logits of source item `s`. Both already
/// include the batch mean and the `λ` weighting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub src: f64,
    pub tgt: f64,
    pub tgt_split: TargetSplit,
    pub grad_embeddings: Vec<Vec<f64>>,
    pub grad_logits: Vec<Vec<f64>>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.src.is_finite()
            && self.tgt.is_finite()
            && self.grad_embeddings.iter().flatten().all(|x| x.is_finite())
            && self.grad_logits.iter().flatten().all(|x| x.is_finite())
    }
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn source_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfRange {
            what: "class label",
            index: label,
            len: logits.len(),
        });
    }
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    Ok((-logp[label], grad))
}

pub fn neighbor_weights(neighbors: &NeighborSet, k: usize) -> NeighborWeights {
    let anchor = neighbors.anchor();
    let other = 1.0 / k as f64;
    NeighborWeights {
        anchor,
        entries: neighbors
            .indices
            .iter()
            .map(|&j| (j, if j == anchor { 1.0 } else { other }))
            .collect(),
    }
}

/// Target loss for one forwarded target feature `f` (unit norm) whose
/// memory slot is `anchor`.
pub fn target_loss(
    mem: &ExemplarMemory,
    f: &[f64],
    anchor: usize,
    k: usize,
    beta: f64,
) -> Result<TargetLoss> {
    let n = norm(f);
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "target feature must be unit-norm, got norm {n}"
        )));
    }
    soft_label_loss(mem, f, anchor, k, beta)
}

/// Same as [`target_loss`] without the unit-norm check, so the gradient can
/// be probed off the sphere.
pub(crate) fn soft_label_loss(
    mem: &ExemplarMemory,
    f: &[f64],
    anchor: usize,
    k: usize,
    beta: f64,
) -> Result<TargetLoss> {
    check_beta(beta)?;
    if anchor >= mem.n_slots() {
        return Err(Error::IndexOutOfRange {
            what: "memory slot",
            index: anchor,
            len: mem.n_slots(),
        });
    }
    let sims = mem.similarities(f)?;
    let neighbors = neighbors_from_similarities(&sims, anchor, k)?;
    let weights = neighbor_weights(&neighbors, k);

    let scores: Vec<f64> = sims.iter().map(|s| s / beta).collect();
    let logp = log_softmax(&scores);

    let mut split = TargetSplit::default();
    for &(j, w) in &weights.entries {
        if j == anchor {
            split.exemplar_or_camera -= w * logp[j];
        } else {
            split.neighborhood -= w * logp[j];
        }
    }

    // dL/df = (1/β)·(S_w·Σ_l p_l K[l] − Σ_{j∈M} w_j K[j])
    let total_weight = weights.total();
    let keys = mem.keys();
    let coeffs: Vec<f64> = logp.iter().map(|l| total_weight * l.exp()).collect();
    let mut grad_f = keys.matvec_t(&coeffs);
    for &(j, w) in &weights.entries {
        axpy(&mut grad_f, -w, keys.row(j));
    }
    for g in &mut grad_f {
        *g /= beta;
    }

    Ok(TargetLoss {
        loss: split.exemplar_or_camera + split.neighborhood,
        grad_f,
        split,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `(1 − λ)·src + λ·tgt`
pub fn total_loss(src_loss: f64, tgt_loss: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * src_loss + lambda * tgt_loss)
}

/// One labeled source item: classifier logits and its class index.
#[derive(Clone, Copy, Debug)]
pub struct SourceTerm<'a> {
    pub logits: &'a [f64],
    pub label: usize,
}

/// One target item: its normalized embedding and its memory slot.
#[derive(Clone, Copy, Debug)]
pub struct TargetTerm<'a> {
    pub feature: &'a [f64],
    pub slot: usize,
}

/// Batch-mean losses for both branches combined with weight `λ`.
///
/// Target features must be unit-norm or exactly zero (a dead embedding,
/// scored as uniform over the memory). An empty branch contributes zero.
/// Gradients are not computed for a branch whose weight is exactly zero;
/// their vectors are left empty.
pub fn batch_loss(
    mem: &ExemplarMemory,
    sources: &[SourceTerm<'_>],
    targets: &[TargetTerm<'_>],
    k: usize,
    beta: f64,
    lambda: f64,
) -> Result<LossReport> {
    check_lambda(lambda)?;
    let mut report = LossReport::default();

    if !sources.is_empty() {
        let scale = (1.0 - lambda) / sources.len() as f64;
        for term in sources {
            let (loss, mut grad) = source_ce(term.logits, term.label)?;
            report.src += loss;
            if scale != 0.0 {
                grad.iter_mut().for_each(|g| *g *= scale);
                report.grad_logits.push(grad);
            }
        }
        report.src /= sources.len() as f64;
    }

    if !targets.is_empty() {
        let scale = lambda / targets.len() as f64;
        for term in targets {
            let t = if term.feature.iter().all(|&v| v == 0.0) {
                soft_label_loss(mem, term.feature, term.slot, k, beta)?
            } else {
                target_loss(mem, term.feature, term.slot, k, beta)?
            };
            report.tgt += t.loss;
            report.tgt_split.exemplar_or_camera += t.split.exemplar_or_camera;
            report.tgt_split.neighborhood += t.split.neighborhood;
            if scale != 0.0 {
                let mut grad = t.grad_f;
                grad.iter_mut().for_each(|g| *g *= scale);
                report.grad_embeddings.push(grad);
            }
        }
        let n = targets.len() as f64;
        report.tgt /= n;
        report.tgt_split.exemplar_or_camera /= n;
        report.tgt_split.neighborhood /= n;
    }

    report.total = total_loss(report.src, report.tgt, lambda)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize, DenseMat, Prng, EPS};
    use proptest::prelude::*;

    fn random_unit(rng: &mut Prng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        l2_normalize(&v, EPS)
    }

    fn random_memory(rng: &mut Prng, n: usize, d: usize) -> ExemplarMemory {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(rng, d)).collect();
        ExemplarMemory::from_keys(DenseMat::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn source_ce_examples() {
        let (loss, grad) = source_ce(&[0.3; 4], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);

        let (loss, _) = source_ce(&[10.0, -10.0], 0).unwrap();
        let expected = (1.0 + (-20f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-20);
        assert!((loss - 2.06e-9).abs() < 0.01e-9);

        assert!(source_ce(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn source_ce_grad_sums_to_zero() {
        let mut rng = Prng::new(11);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..7).map(|_| 5.0 * rng.normal()).collect();
            let (_, g) = source_ce(&logits, rng.below(7)).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_weight_examples() {
        let set = NeighborSet {
            indices: vec![4, 0, 1, 2, 3, 5],
            similarities: vec![0.0; 6],
        };
        let w = neighbor_weights(&set, 6);
        assert_eq!(w.entries[0], (4, 1.0));
        for &(_, x) in &w.entries[1..] {
            assert!((x - 0.16667).abs() < 1e-5);
        }
        let others: f64 = w.entries[1..].iter().map(|(_, x)| x).sum();
        assert!((others - 5.0 / 6.0).abs() < 1e-15);
        assert!((w.total() - (1.0 + 5.0 / 6.0)).abs() < 1e-15);

        let single = NeighborSet {
            indices: vec![2],
            similarities: vec![0.0],
        };
        assert_eq!(neighbor_weights(&single, 1).entries, vec![(2, 1.0)]);
    }

    #[test]
    fn k1_is_own_slot_log_probability() {
        let mut rng = Prng::new(5);
        let mem = random_memory(&mut rng, 12, 5);
        let f = random_unit(&mut rng, 5);
        let t = target_loss(&mem, &f, 3, 1, 0.1).unwrap();
        let p = mem.probabilities(&f, 0.1).unwrap();
        assert!((t.loss + p[3].ln()).abs() < 1e-12);
        assert_eq!(t.split.neighborhood, 0.0);
    }

    #[test]
    fn fresh_memory_loss_is_log_n() {
        let mem = ExemplarMemory::new(17, 4).unwrap();
        let t = target_loss(&mem, &[0.5; 4], 0, 1, 0.05).unwrap();
        assert!((t.loss - 17f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn target_gradient_matches_finite_differences() {
        let mut rng = Prng::new(2024);
        for trial in 0..10 {
            let mem = random_memory(&mut rng, 20, 8);
            let f = random_unit(&mut rng, 8);
            let anchor = rng.below(20);
            let beta = if trial % 2 == 0 { 0.5 } else { 0.05 };
            let analytic = soft_label_loss(&mem, &f, anchor, 3, beta).unwrap();
            let numeric = finite_diff_grad(
                |x| soft_label_loss(&mem, x, anchor, 3, beta).unwrap().loss,
                &f,
                1e-5,
            );
            let base = mem.knn(anchor, &f, 3).unwrap();
            for (a, n) in analytic.grad_f.iter().zip(&numeric) {
                let scale = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / scale < 1e-5,
                    "trial {trial}: {a} vs {n} (neighbors {:?})",
                    base.indices
                );
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 1.0, 0.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((total_loss(2.0, 1.0, 0.3).unwrap() - 1.7).abs() < 1e-15);
        assert!(total_loss(2.0, 1.0, -0.1).is_err());
        assert!(total_loss(2.0, 1.0, 1.1).is_err());
    }

    #[test]
    fn batch_loss_combines_means() {
        let mut rng = Prng::new(9);
        let mem = random_memory(&mut rng, 10, 4);
        let logits = [vec![1.0, 0.0, -1.0], vec![0.2, 0.1, 0.0]];
        let feats = [random_unit(&mut rng, 4), random_unit(&mut rng, 4)];
        let sources = [
            SourceTerm {
                logits: &logits[0],
                label: 0,
            },
            SourceTerm {
                logits: &logits[1],
                label: 2,
            },
        ];
        let targets = [
            TargetTerm {
                feature: &feats[0],
                slot: 1,
            },
            TargetTerm {
                feature: &feats[1],
                slot: 7,
            },
        ];
        let r = batch_loss(&mem, &sources, &targets, 3, 0.05, 0.3).unwrap();
        let src = (source_ce(&logits[0], 0).unwrap().0 + source_ce(&logits[1], 2).unwrap().0) / 2.0;
        let tgt = (target_loss(&mem, &feats[0], 1, 3, 0.05).unwrap().loss
            + target_loss(&mem, &feats[1], 7, 3, 0.05).unwrap().loss)
            / 2.0;
        assert!((r.src - src).abs() < 1e-12);
        assert!((r.tgt - tgt).abs() < 1e-12);
        assert!((r.total - (0.7 * r.src + 0.3 * r.tgt)).abs() < 1e-10);
        assert!((r.tgt_split.exemplar_or_camera + r.tgt_split.neighborhood - r.tgt).abs() < 1e-12);
        assert_eq!(r.grad_logits.len(), 2);
        assert_eq!(r.grad_embeddings.len(), 2);

        let r0 = batch_loss(&mem, &sources, &targets, 3, 0.05, 0.0).unwrap();
        assert!(r0.grad_embeddings.is_empty());
        assert_eq!(r0.total, r0.src);
    }

    #[test]
    fn dead_feature_scores_uniform() {
        let mut rng = Prng::new(3);
        let mem = random_memory(&mut rng, 10, 4);
        let zero = [0.0; 4];
        let half = [0.5, 0.0, 0.0, 0.0];
        let r = batch_loss(
            &mem,
            &[],
            &[TargetTerm {
                feature: &zero,
                slot: 2,
            }],
            1,
            0.05,
            0.3,
        )
        .unwrap();
        assert!((r.tgt - 10f64.ln()).abs() < 1e-12);
        assert!(batch_loss(
            &mem,
            &[],
            &[TargetTerm {
                feature: &half,
                slot: 2
            }],
            1,
            0.05,
            0.3
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn target_loss_is_nonnegative(seed in any::<u64>(), k in 1usize..8, beta in 0.02f64..=1.0) {
            let mut rng = Prng::new(seed);
            let mem = random_memory(&mut rng, 8, 3);
            let f = random_unit(&mut rng, 3);
            let t = target_loss(&mem, &f, rng.below(8), k, beta).unwrap();
            prop_assert!(t.loss >= 0.0 && t.loss.is_finite());
        }

        #[test]
        fn weights_are_not_renormalized(k in 1usize..30) {
            let set = NeighborSet { indices: (0..k).collect(), similarities: vec![0.0; k] };
            let w = neighbor_weights(&set, k);
            prop_assert_eq!(w.entries.len(), k);
            prop_assert!((w.total() - (1.0 + (k as f64 - 1.0) / k as f64)).abs() < 1e-12);
        }
    }
}
