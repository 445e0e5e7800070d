//! Cross-entropy and the classifier discrepancy loss family.
//!
//! The pair discrepancy of two probability batches is the per-sample mean
//! absolute difference of the two probability vectors scaled by 1/K, then
//! averaged over the batch; it is bounded by 2/K. The multi-classifier
//! discrepancy sums the pair discrepancy over every unordered head pair,
//! forming a closed loop of n(n-1)/2 terms. The ablation variants punch a
//! hole in that loop by removing one pair term or replacing it with a copy
//! of another.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor};
use crate::{Error, Result};

/// Floor applied to probabilities before the log inside cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Which pair terms enter the multi-classifier discrepancy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// All n(n-1)/2 unordered pair terms.
    Full,
    /// Drop the term for this unordered head pair.
    RemovePair(usize, usize),
    /// Replace the `replaced` pair term with a second copy of the
    /// `copy_of` pair term; the total term count is unchanged.
    DuplicatePair {
        replaced: (usize, usize),
        copy_of: (usize, usize),
    },
}

fn norm_pair(op: &str, (i, j): (usize, usize), n: usize) -> Result<(usize, usize)> {
    if i == j || i >= n || j >= n {
        return Err(Error::Contract(format!(
            "{op}: pair ({i},{j}) is not a valid unordered pair for {n} classifiers"
        )));
    }
    Ok((i.min(j), i.max(j)))
}

impl LossVariant {
    pub fn validate(&self, n_classifiers: usize) -> Result<()> {
        self.pair_terms(n_classifiers).map(|_| ())
    }

    /// The ordered list of pair terms this variant sums, after validation
    /// against the head count. The full variant always yields exactly
    /// n(n-1)/2 entries; the ablations keep that count (duplicate) or drop
    /// exactly one (remove).
    pub fn pair_terms(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        if n < 2 {
            return Err(Error::Contract(format!(
                "multi_discrepancy needs at least 2 classifiers, got {n}"
            )));
        }
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
            }
        }
        match self {
            LossVariant::Full => Ok(pairs),
            LossVariant::RemovePair(i, j) => {
                let p = norm_pair("remove-pair", (*i, *j), n)?;
                pairs.retain(|&q| q != p);
                Ok(pairs)
            }
            LossVariant::DuplicatePair { replaced, copy_of } => {
                let rep = norm_pair("duplicate-pair", *replaced, n)?;
                let cp = norm_pair("duplicate-pair", *copy_of, n)?;
                if rep == cp {
                    return Err(Error::Contract(format!(
                        "duplicate-pair: replaced pair {rep:?} must differ from the copied pair"
                    )));
                }
                for q in &mut pairs {
                    if *q == rep {
                        *q = cp;
                    }
                }
                Ok(pairs)
            }
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossVariant::Full => write!(f, "full"),
            LossVariant::RemovePair(i, j) => write!(f, "remove:{i},{j}"),
            LossVariant::DuplicatePair { replaced, copy_of } => write!(
                f,
                "duplicate:{},{}={},{}",
                replaced.0, replaced.1, copy_of.0, copy_of.1
            ),
        }
    }
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl FromStr for LossVariant {
    type Err = Error;

    /// Syntax: `full`, `remove:i,j`, or `duplicate:i,j=k,l` (replace pair
    /// (i,j) with a copy of (k,l)); head indices are zero-based.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidConfig(format!(
                "invalid variant '{s}': expected 'full', 'remove:i,j', or 'duplicate:i,j=k,l'"
            ))
        };
        if s == "full" {
            return Ok(LossVariant::Full);
        }
        if let Some(rest) = s.strip_prefix("remove:") {
            let (i, j) = parse_pair(rest).ok_or_else(bad)?;
            return Ok(LossVariant::RemovePair(i, j));
        }
        if let Some(rest) = s.strip_prefix("duplicate:") {
            let (rep, cp) = rest.split_once('=').ok_or_else(bad)?;
            return Ok(LossVariant::DuplicatePair {
                replaced: parse_pair(rep).ok_or_else(bad)?,
                copy_of: parse_pair(cp).ok_or_else(bad)?,
            });
        }
        Err(bad())
    }
}

/// Mean over the batch of `-log p[true class]`, with the probability
/// clamped to at least [`LOG_CLAMP`] so a confidently wrong head cannot
/// produce an infinite loss.
pub fn cross_entropy(g: &mut Graph, probs: Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeContract {
            op: "cross_entropy",
            expected: format!("[{}, K] probabilities", labels.len()),
            got: shape,
        });
    }
    let (b, k) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; b * k];
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        onehot[r * k + y] = 1.0;
    }
    let mask = g.constant(&[b, k], onehot)?;
    let clamped = g.clamp_min(probs, LOG_CLAMP)?;
    let logp = g.log(clamped)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / b as f64)
}

/// Eq.-1 style pair discrepancy: per sample (1/K) sum_k |p1_k - p2_k|,
/// averaged over the batch. Equal to the mean over all entries of
/// |p1 - p2|, and bounded by 2/K.
pub fn pair_discrepancy(g: &mut Graph, p1: Tensor, p2: Tensor) -> Result<Tensor> {
    let d = g.sub(p1, p2)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Sum of [`pair_discrepancy`] over the variant's pair terms.
pub fn multi_discrepancy(g: &mut Graph, ps: &[Tensor], variant: &LossVariant) -> Result<Tensor> {
    let terms = variant.pair_terms(ps.len())?;
    let mut acc: Option<Tensor> = None;
    for (i, j) in terms {
        let t = pair_discrepancy(g, ps[i], ps[j])?;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    // n >= 2 guarantees at least one term for full/duplicate; remove-pair
    // with n = 2 leaves none, which is a degenerate but well-defined zero.
    match acc {
        Some(t) => Ok(t),
        None => g.constant(&[1], vec![0.0]),
    }
}

/// Step-1 objective: sum of the per-head source cross-entropies.
pub fn loss_step1(g: &mut Graph, source_probs: &[Tensor], labels: &[usize]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for &p in source_probs {
        let ce = cross_entropy(g, p, labels)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => g.add(a, ce)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("loss_step1 needs at least one head output".into()))
}

/// Step-2 objective: source cross-entropy sum minus the target
/// discrepancy. Minimizing it maximizes the target discrepancy while
/// keeping the heads accurate on source.
pub fn loss_step2(
    g: &mut Graph,
    source_probs: &[Tensor],
    labels: &[usize],
    target_probs: &[Tensor],
    variant: &LossVariant,
) -> Result<Tensor> {
    let loss_s = loss_step1(g, source_probs, labels)?;
    let dis = multi_discrepancy(g, target_probs, variant)?;
    g.sub(loss_s, dis)
}

/// Step-3 objective: the target discrepancy itself.
pub fn loss_step3(g: &mut Graph, target_probs: &[Tensor], variant: &LossVariant) -> Result<Tensor> {
    multi_discrepancy(g, target_probs, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(g: &mut Graph, rows: &[Vec<f64>]) -> Tensor {
        let m = crate::autodiff::Matrix::from_rows(rows);
        g.input_matrix(&m)
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.25; 4], vec![0.25; 4]]);
        let l = cross_entropy(&mut g, p, &[2, 0]).unwrap();
        assert!((g.scalar_value(l) - 4.0_f64.ln()).abs() < 1e-12);
        assert!((g.scalar_value(l) - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = cross_entropy(&mut g, p, &[0, 1]).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // -ln 0.2 computed independently: 1.6094379124341003
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.8, 0.2]]);
        let l = cross_entropy(&mut g, p, &[1]).unwrap();
        assert!((g.scalar_value(l) - 1.6094379124341003).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.5, 0.5]]);
        assert!(matches!(
            cross_entropy(&mut g, p, &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pair_discrepancy_identity_is_zero() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.3, 0.7], vec![0.9, 0.1]]);
        let d = pair_discrepancy(&mut g, p, p).unwrap();
        assert_eq!(g.scalar_value(d), 0.0);
    }

    #[test]
    fn pair_discrepancy_disjoint_onehots_k2() {
        // (|1| + |-1|) / 2 = 1.0
        let mut g = Graph::new();
        let p1 = probs(&mut g, &[vec![1.0, 0.0]]);
        let p2 = probs(&mut g, &[vec![0.0, 1.0]]);
        let d = pair_discrepancy(&mut g, p1, p2).unwrap();
        assert_eq!(g.scalar_value(d), 1.0);
    }

    #[test]
    fn pair_discrepancy_hits_two_over_k_bound() {
        let mut g = Graph::new();
        let p1 = probs(&mut g, &[vec![1.0, 0.0, 0.0, 0.0]]);
        let p2 = probs(&mut g, &[vec![0.0, 0.0, 1.0, 0.0]]);
        let d = pair_discrepancy(&mut g, p1, p2).unwrap();
        assert_eq!(g.scalar_value(d), 0.5);
    }

    #[test]
    fn multi_discrepancy_identical_heads_is_zero() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.6, 0.4]]);
        let d = multi_discrepancy(&mut g, &[p, p, p], &LossVariant::Full).unwrap();
        assert_eq!(g.scalar_value(d), 0.0);
    }

    #[test]
    fn multi_discrepancy_three_heads_hand_sum() {
        // dis(p1,p2)=0, dis(p1,p3)=1, dis(p2,p3)=1 -> 2.0
        let mut g = Graph::new();
        let p1 = probs(&mut g, &[vec![1.0, 0.0]]);
        let p2 = probs(&mut g, &[vec![1.0, 0.0]]);
        let p3 = probs(&mut g, &[vec![0.0, 1.0]]);
        let d = multi_discrepancy(&mut g, &[p1, p2, p3], &LossVariant::Full).unwrap();
        assert_eq!(g.scalar_value(d), 2.0);
    }

    #[test]
    fn four_heads_have_six_pair_terms() {
        assert_eq!(LossVariant::Full.pair_terms(4).unwrap().len(), 6);
        assert_eq!(
            LossVariant::Full.pair_terms(4).unwrap(),
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        );
    }

    #[test]
    fn pair_term_counts_for_all_variants() {
        for n in 2..=8 {
            let full = LossVariant::Full.pair_terms(n).unwrap();
            assert_eq!(full.len(), n * (n - 1) / 2);
            if n >= 3 {
                assert_eq!(
                    LossVariant::RemovePair(0, 1).pair_terms(n).unwrap().len(),
                    full.len() - 1
                );
                let dup = LossVariant::DuplicatePair {
                    replaced: (0, 1),
                    copy_of: (0, 2),
                }
                .pair_terms(n)
                .unwrap();
                assert_eq!(dup.len(), full.len());
            }
        }
    }

    #[test]
    fn variant_validation_errors() {
        assert!(LossVariant::Full.pair_terms(1).is_err());
        assert!(LossVariant::RemovePair(0, 3).validate(3).is_err());
        assert!(LossVariant::RemovePair(1, 1).validate(3).is_err());
        assert!(LossVariant::DuplicatePair {
            replaced: (0, 1),
            copy_of: (1, 0)
        }
        .validate(3)
        .is_err());
    }

    #[test]
    fn variant_round_trips_through_strings() {
        for s in ["full", "remove:0,1", "duplicate:0,1=0,2"] {
            let v: LossVariant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert!("remove:1".parse::<LossVariant>().is_err());
        assert!("bogus".parse::<LossVariant>().is_err());
    }

    fn random_simplex_batch(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Vec<Vec<f64>> {
        (0..b)
            .map(|_| {
                let mut row: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().ln()).collect();
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
                row
            })
            .collect()
    }

    #[test]
    fn n2_reduction_recovers_pair_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_simplex_batch(&mut rng, 4, 3);
            let b = random_simplex_batch(&mut rng, 4, 3);
            let mut g = Graph::new();
            let p1 = probs(&mut g, &a);
            let p2 = probs(&mut g, &b);
            let dis = multi_discrepancy(&mut g, &[p1, p2], &LossVariant::Full).unwrap();
            let pd = pair_discrepancy(&mut g, p1, p2).unwrap();
            assert_eq!(g.scalar_value(dis), g.scalar_value(pd));
        }
    }

    #[test]
    fn permutation_invariance_of_full_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches: Vec<Vec<Vec<f64>>> =
            (0..4).map(|_| random_simplex_batch(&mut rng, 3, 4)).collect();
        let eval = |order: &[usize]| {
            let mut g = Graph::new();
            let ps: Vec<Tensor> = order.iter().map(|&i| probs(&mut g, &batches[i])).collect();
            let d = multi_discrepancy(&mut g, &ps, &LossVariant::Full).unwrap();
            g.scalar_value(d)
        };
        let base = eval(&[0, 1, 2, 3]);
        for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
            assert!((eval(&order) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_identities_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batches: Vec<Vec<Vec<f64>>> =
            (0..3).map(|_| random_simplex_batch(&mut rng, 5, 2)).collect();
        let mut g = Graph::new();
        let ps: Vec<Tensor> = batches.iter().map(|b| probs(&mut g, b)).collect();
        let full = multi_discrepancy(&mut g, &ps, &LossVariant::Full).unwrap();
        let removed = multi_discrepancy(&mut g, &ps, &LossVariant::RemovePair(0, 1)).unwrap();
        let dup = multi_discrepancy(
            &mut g,
            &ps,
            &LossVariant::DuplicatePair {
                replaced: (0, 1),
                copy_of: (0, 2),
            },
        )
        .unwrap();
        let d01 = pair_discrepancy(&mut g, ps[0], ps[1]).unwrap();
        let d02 = pair_discrepancy(&mut g, ps[0], ps[2]).unwrap();
        let (full_v, rem_v, dup_v) = (
            g.scalar_value(full),
            g.scalar_value(removed),
            g.scalar_value(dup),
        );
        assert!((rem_v - (full_v - g.scalar_value(d01))).abs() < 1e-12);
        assert!((dup_v - (full_v - g.scalar_value(d01) + g.scalar_value(d02))).abs() < 1e-12);
    }

    #[test]
    fn step_losses_compose() {
        let mut g = Graph::new();
        let perfect = probs(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let t1 = probs(&mut g, &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let t2 = probs(&mut g, &[vec![0.0, 1.0], vec![0.0, 1.0]]);
        let labels = [0usize, 1];
        // Loss_s ~ 0 with perfect heads, so Loss_2 = -Dis.
        let l2 = loss_step2(
            &mut g,
            &[perfect, perfect],
            &labels,
            &[t1, t2],
            &LossVariant::Full,
        )
        .unwrap();
        let l3 = loss_step3(&mut g, &[t1, t2], &LossVariant::Full).unwrap();
        assert!((g.scalar_value(l2) + g.scalar_value(l3)).abs() < 1e-10);
        assert_eq!(g.scalar_value(l3), 1.0);
    }

    #[test]
    fn loss_step1_is_sum_of_head_cross_entropies() {
        let mut g = Graph::new();
        let uniform = probs(&mut g, &[vec![0.5, 0.5]]);
        let l = loss_step1(&mut g, &[uniform, uniform, uniform], &[0]).unwrap();
        assert!((g.scalar_value(l) - 3.0 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_step2_with_identical_targets_equals_loss_s() {
        let mut g = Graph::new();
        let sp = probs(&mut g, &[vec![0.7, 0.3]]);
        let tp = probs(&mut g, &[vec![0.4, 0.6]]);
        let l2 = loss_step2(&mut g, &[sp, sp], &[0], &[tp, tp], &LossVariant::Full).unwrap();
        let ls = loss_step1(&mut g, &[sp, sp], &[0]).unwrap();
        assert!((g.scalar_value(l2) - g.scalar_value(ls)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pair_discrepancy_symmetric_and_bounded(
            raw1 in proptest::collection::vec(1e-3..1.0f64, 8),
            raw2 in proptest::collection::vec(1e-3..1.0f64, 8),
        ) {
            let norm = |raw: &[f64]| -> Vec<Vec<f64>> {
                raw.chunks(4).map(|c| {
                    let z: f64 = c.iter().sum();
                    c.iter().map(|v| v / z).collect()
                }).collect()
            };
            let (a, b) = (norm(&raw1), norm(&raw2));
            let k = 4.0;
            let mut g = Graph::new();
            let p1 = probs(&mut g, &a);
            let p2 = probs(&mut g, &b);
            let d12 = pair_discrepancy(&mut g, p1, p2).unwrap();
            let d21 = pair_discrepancy(&mut g, p2, p1).unwrap();
            prop_assert_eq!(g.scalar_value(d12), g.scalar_value(d21));
            prop_assert!(g.scalar_value(d12) >= 0.0);
            prop_assert!(g.scalar_value(d12) <= 2.0 / k + 1e-12);
        }
    }
}
