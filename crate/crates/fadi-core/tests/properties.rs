//! Property tests for the module invariants that hold over whole input
//! families rather than fixed cases.

use proptest::prelude::*;

use fadi_core::association::{assign, AssignPolicy};
use fadi_core::losses::{margin_loss_sample, set_specialized_margin, LabelPartition, MarginConfig};
use fadi_core::nethead::{softmax, CosineClassifier, DualHead, LinearLayer, Matrix};
use fadi_core::taxonomy::SimilarityMatrix;

fn sim_matrix(novel: usize, base: usize, values: Vec<f64>) -> SimilarityMatrix {
    SimilarityMatrix::new(
        (0..novel).map(|i| format!("n{i:02}")).collect(),
        (0..base).map(|j| format!("b{j:02}")).collect(),
        values,
    )
    .unwrap()
}

/// Brute-force row argmax with the same tie-break (largest similarity,
/// then lexicographically smallest base name; names are index-ordered).
fn row_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

proptest! {
    #[test]
    fn topk1_matches_brute_force_argmax(
        base in 1usize..8,
        novel in 1usize..6,
        seed_values in proptest::collection::vec(0.0f64..1.0, 48),
    ) {
        let values: Vec<f64> = seed_values[..novel * base].to_vec();
        let m = sim_matrix(novel, base, values.clone());
        let map = assign(&m, &AssignPolicy::TopK { k: 1 }).unwrap();
        for i in 0..novel {
            let expect = row_argmax(&values[i * base..(i + 1) * base]);
            prop_assert_eq!(&map.pairs[i].base, &format!("b{expect:02}"));
        }
    }

    #[test]
    fn nodup_is_injective_and_permutation_invariant(
        base in 3usize..8,
        novel in 1usize..4,
        seed_values in proptest::collection::vec(0.0f64..1.0, 32),
        rot_rows in 0usize..4,
        rot_cols in 0usize..8,
    ) {
        prop_assume!(novel <= base);
        let values: Vec<f64> = seed_values[..novel * base].to_vec();
        let m = sim_matrix(novel, base, values.clone());
        let map = assign(&m, &AssignPolicy::Top1NoDup).unwrap();

        // injective
        let bases: std::collections::BTreeSet<_> =
            map.pairs.iter().map(|p| p.base.clone()).collect();
        prop_assert_eq!(bases.len(), novel);

        // invariant to rotating rows/columns (a permutation), up to names
        let rr = rot_rows % novel;
        let rc = rot_cols % base;
        let mut rotated = vec![0.0; novel * base];
        let mut novel_names = Vec::new();
        let mut base_names = Vec::new();
        for i in 0..novel {
            novel_names.push(format!("n{:02}", (i + rr) % novel));
        }
        for j in 0..base {
            base_names.push(format!("b{:02}", (j + rc) % base));
        }
        for i in 0..novel {
            for j in 0..base {
                rotated[i * base + j] = values[((i + rr) % novel) * base + (j + rc) % base];
            }
        }
        let m2 = SimilarityMatrix::new(novel_names, base_names, rotated).unwrap();
        let map2 = assign(&m2, &AssignPolicy::Top1NoDup).unwrap();
        let as_set = |m: &fadi_core::association::AssociationMap| {
            m.pairs
                .iter()
                .map(|p| (p.novel.clone(), p.base.clone()))
                .collect::<std::collections::BTreeSet<_>>()
        };
        prop_assert_eq!(as_set(&map), as_set(&map2));
    }

    /// Greedy sanity: the deduplicating policy always keeps the globally
    /// highest-similarity pair. (The stronger claim — that its total
    /// similarity dominates the run that discards this first pick — is
    /// false: the global max can block two complementary pairs worth more
    /// together, so only the first-pick property is asserted.)
    #[test]
    fn nodup_first_pick_is_the_global_max(
        base in 2usize..7,
        novel in 2usize..5,
        seed_values in proptest::collection::vec(0.0f64..1.0, 35),
    ) {
        prop_assume!(novel <= base);
        let values: Vec<f64> = seed_values[..novel * base].to_vec();
        let (mut bi, mut bj) = (0, 0);
        for i in 0..novel {
            for j in 0..base {
                if values[i * base + j] > values[bi * base + bj] {
                    bi = i;
                    bj = j;
                }
            }
        }
        // require a strict global max so the pick is forced
        let max = values[bi * base + bj];
        prop_assume!(
            values.iter().enumerate().all(|(k, &v)| k == bi * base + bj || v < max)
        );
        let m = sim_matrix(novel, base, values.clone());
        let map = assign(&m, &AssignPolicy::Top1NoDup).unwrap();
        prop_assert_eq!(&map.pairs[bi].base, &format!("b{bj:02}"));
        prop_assert_eq!(map.pairs[bi].sim, max);
    }

    #[test]
    fn random_policy_is_seed_deterministic(
        base in 1usize..8,
        novel in 1usize..5,
        seed in any::<u64>(),
        seed_values in proptest::collection::vec(0.0f64..1.0, 40),
    ) {
        let values: Vec<f64> = seed_values[..novel * base].to_vec();
        let m = sim_matrix(novel, base, values);
        let p = AssignPolicy::RandomSeeded { seed };
        prop_assert_eq!(assign(&m, &p).unwrap(), assign(&m, &p).unwrap());
    }

    #[test]
    fn softmax_is_a_distribution(
        logits in proptest::collection::vec(-100.0f64..100.0, 1..24),
    ) {
        let s = softmax(&logits);
        prop_assert!(s.iter().all(|&v| v > 0.0 && v.is_finite()));
        let sum: f64 = s.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        // order preserved
        for i in 0..logits.len() {
            for j in 0..logits.len() {
                if logits[i] > logits[j] {
                    prop_assert!(s[i] >= s[j]);
                }
            }
        }
    }

    #[test]
    fn dual_forward_outputs_probability_vectors(
        q in proptest::collection::vec(-1.0f64..1.0, 6),
        w in proptest::collection::vec(-1.0f64..1.0, 96),
    ) {
        let g = |offset: usize| {
            let m = Matrix::from_vec(4, 6, w[offset..offset + 24].to_vec()).unwrap();
            let mut layer = LinearLayer::new(m, Matrix::zeros(4, 1)).unwrap();
            layer.frozen = true;
            layer
        };
        let cls = |offset: usize, rows: usize| {
            let mut m = Matrix::from_vec(rows, 4, w[offset..offset + rows * 4].to_vec()).unwrap();
            for r in 0..rows {
                if fadi_core::nethead::norm(m.row(r)) == 0.0 {
                    m.row_mut(r)[0] = 0.5;
                }
            }
            CosineClassifier::new(m, 20.0).unwrap()
        };
        let head = DualHead::new(g(0), g(24), cls(48, 3), cls(60, 3)).unwrap();
        let act = head.forward(&q).unwrap();
        prop_assert_eq!(act.probs.len(), 6);
        prop_assert!(act.probs.iter().all(|&p| p >= 0.0));
        let sum: f64 = act.probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    /// Raising the true-class score (keeping every gap positive) never
    /// increases the margin loss.
    #[test]
    fn margin_loss_nonincreasing_in_true_score(
        others in proptest::collection::vec(0.01f64..0.2, 2..6),
        bump in 0.0f64..0.3,
    ) {
        let max_other = others.iter().cloned().fold(0.0, f64::max);
        let sy = max_other + 0.05;
        let mut s = vec![sy];
        s.extend(&others);
        let l1 = margin_loss_sample(&s, 0, 1e-7).unwrap();
        s[0] = sy + bump;
        let l2 = margin_loss_sample(&s, 0, 1e-7).unwrap();
        prop_assert!(l2 <= l1 + 1e-12);
    }

    /// The batch margin is linear in each set weight.
    #[test]
    fn set_margin_linear_in_weights(
        scale in 0.1f64..5.0,
        s1 in proptest::collection::vec(0.05f64..1.0, 4),
        s2 in proptest::collection::vec(0.05f64..1.0, 4),
    ) {
        let norm = |v: &[f64]| {
            let t: f64 = v.iter().sum();
            v.iter().map(|x| x / t).collect::<Vec<f64>>()
        };
        let batch = vec![norm(&s1), norm(&s2)];
        let labels = [1usize, 3usize]; // one base, one background
        let part = LabelPartition::contiguous(2, 1);
        let base = MarginConfig { alpha: 0.7, beta: 0.0, gamma: 0.3, epsilon: 1e-7 };
        let scaled = MarginConfig {
            alpha: base.alpha * scale,
            gamma: base.gamma * scale,
            ..base
        };
        let (l1, _) = set_specialized_margin(&batch, &labels, &part, &base).unwrap();
        let (l2, _) = set_specialized_margin(&batch, &labels, &part, &scaled).unwrap();
        prop_assert!((l2 - scale * l1).abs() < 1e-9 * l1.abs().max(1.0));
    }

    /// Positive rescaling of the input leaves cosine logits unchanged up to
    /// the norm stabilizer.
    #[test]
    fn cosine_logits_positively_scale_invariant(
        x in proptest::collection::vec(-1.0f64..1.0, 5),
        w in proptest::collection::vec(-1.0f64..1.0, 20),
        factor in 1.0f64..100.0,
    ) {
        prop_assume!(fadi_core::nethead::norm(&x) > 1e-3);
        let mut m = Matrix::from_vec(4, 5, w).unwrap();
        for r in 0..4 {
            if fadi_core::nethead::norm(m.row(r)) < 1e-3 {
                m.row_mut(r)[0] += 0.5;
            }
        }
        let cls = CosineClassifier::new(m, 20.0).unwrap();
        let a = cls.logits(&x).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * factor).collect();
        let b = cls.logits(&scaled).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}
