//! Novel-to-base class association and pseudo-label relabeling.
//!
//! Assignment turns a novel × base similarity matrix into one associated
//! base class per novel class under a selectable policy. The deduplicating
//! policy is the iterated global argmax: the highest-similarity (novel,
//! base) pair is associated and both classes leave the pool, then the next
//! highest among the remainder, and so on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::LabeledSet;
use crate::losses::{LabelPartition, LossError, SampleSet};
use crate::taxonomy::SimilarityMatrix;

#[derive(Debug, Error)]
pub enum AssociationError {
    #[error("similarity matrix has no base classes")]
    NoBases,
    #[error("deduplicating policy needs at least as many bases ({bases}) as novels ({novels})")]
    TooFewBases { bases: usize, novels: usize },
    #[error("rank k must be at least 1")]
    ZeroRank,
    #[error("rank {k} exceeds {bases} base classes")]
    RankOutOfRange { k: usize, bases: usize },
    #[error("unknown class name {0:?}")]
    UnknownName(String),
    #[error("novel class {0:?} appears more than once")]
    DuplicateNovel(String),
    #[error("novel class {0:?} has no pair")]
    MissingNovel(String),
    #[error("cannot parse assign policy {0:?}")]
    BadPolicy(String),
    #[error(transparent)]
    Partition(#[from] LossError),
}

/// How each novel class picks its associated base class.
#[derive(Clone, Debug, PartialEq)]
pub enum AssignPolicy {
    /// Each novel class takes its k-th most similar base class (k = 1 is
    /// the plain argmax).
    TopK { k: usize },
    /// Iterated global argmax with similarity as the assignment priority;
    /// every base class is used at most once.
    Top1NoDup,
    /// Uniform seeded choice of a base class per novel class.
    RandomSeeded { seed: u64 },
    /// Explicit novel → base pairs, validated against the matrix.
    Manual { pairs: Vec<(String, String)> },
}

impl fmt::Display for AssignPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssignPolicy::TopK { k: 1 } => write!(f, "top1"),
            AssignPolicy::TopK { k } => write!(f, "topk:{k}"),
            AssignPolicy::Top1NoDup => write!(f, "top1-nodup"),
            AssignPolicy::RandomSeeded { seed } => write!(f, "random:{seed}"),
            AssignPolicy::Manual { .. } => write!(f, "manual"),
        }
    }
}

impl FromStr for AssignPolicy {
    type Err = AssociationError;

    /// Accepts `top1`, `topk:K`, `top1-nodup`, `random:SEED`, and
    /// `manual:{"novel":"base",...}`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AssociationError::BadPolicy(s.to_string());
        if s == "top1" {
            return Ok(AssignPolicy::TopK { k: 1 });
        }
        if s == "top1-nodup" {
            return Ok(AssignPolicy::Top1NoDup);
        }
        if let Some(rest) = s.strip_prefix("topk:") {
            let k: usize = rest.parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(AssociationError::ZeroRank);
            }
            return Ok(AssignPolicy::TopK { k });
        }
        if let Some(rest) = s.strip_prefix("random:") {
            let seed: u64 = rest.parse().map_err(|_| bad())?;
            return Ok(AssignPolicy::RandomSeeded { seed });
        }
        if let Some(rest) = s.strip_prefix("manual:") {
            let map: BTreeMap<String, String> = serde_json::from_str(rest).map_err(|_| bad())?;
            return Ok(AssignPolicy::Manual { pairs: map.into_iter().collect() });
        }
        Err(bad())
    }
}

/// One association with the similarity it was chosen at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationPair {
    pub novel: String,
    pub base: String,
    pub sim: f64,
}

/// The novel → base association produced by [`assign`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationMap {
    pub policy: String,
    pub pairs: Vec<AssociationPair>,
}

impl AssociationMap {
    pub fn base_for(&self, novel: &str) -> Option<&str> {
        self.pairs.iter().find(|p| p.novel == novel).map(|p| p.base.as_str())
    }

    pub fn associated_bases(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.base.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("association map serializes");
        s.push('\n');
        s
    }
}

/// Row ranking used by the top-k policies: similarity descending, ties
/// broken by base-name lexicographic order.
fn ranked_bases(sim: &SimilarityMatrix, row: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sim.num_base()).collect();
    order.sort_by(|&a, &b| {
        sim.get(row, b)
            .partial_cmp(&sim.get(row, a))
            .unwrap()
            .then_with(|| sim.base_names()[a].cmp(&sim.base_names()[b]))
    });
    order
}

/// Associates every novel class of the matrix with a base class under the
/// given policy. Pairs are reported in the matrix's novel-axis order.
pub fn assign(
    sim: &SimilarityMatrix,
    policy: &AssignPolicy,
) -> Result<AssociationMap, AssociationError> {
    if sim.num_base() == 0 {
        return Err(AssociationError::NoBases);
    }
    let chosen: Vec<usize> = match policy {
        AssignPolicy::TopK { k } => {
            if *k == 0 {
                return Err(AssociationError::ZeroRank);
            }
            if *k > sim.num_base() {
                return Err(AssociationError::RankOutOfRange { k: *k, bases: sim.num_base() });
            }
            (0..sim.num_novel()).map(|i| ranked_bases(sim, i)[k - 1]).collect()
        }
        AssignPolicy::Top1NoDup => {
            if sim.num_base() < sim.num_novel() {
                return Err(AssociationError::TooFewBases {
                    bases: sim.num_base(),
                    novels: sim.num_novel(),
                });
            }
            let mut unassigned: BTreeSet<usize> = (0..sim.num_novel()).collect();
            let mut unused: BTreeSet<usize> = (0..sim.num_base()).collect();
            let mut chosen = vec![usize::MAX; sim.num_novel()];
            while !unassigned.is_empty() {
                let mut best: Option<(f64, usize, usize)> = None;
                for &i in &unassigned {
                    for &j in &unused {
                        let s = sim.get(i, j);
                        let better = match best {
                            None => true,
                            Some((bs, bi, bj)) => {
                                s > bs
                                    || (s == bs
                                        && (sim.base_names()[j] < sim.base_names()[bj]
                                            || (sim.base_names()[j] == sim.base_names()[bj]
                                                && sim.novel_names()[i] < sim.novel_names()[bi])))
                            }
                        };
                        if better {
                            best = Some((s, i, j));
                        }
                    }
                }
                let (_, i, j) = best.expect("nonempty pools");
                chosen[i] = j;
                unassigned.remove(&i);
                unused.remove(&j);
            }
            chosen
        }
        AssignPolicy::RandomSeeded { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..sim.num_novel()).map(|_| rng.gen_range(0..sim.num_base())).collect()
        }
        AssignPolicy::Manual { pairs } => {
            let mut chosen = vec![usize::MAX; sim.num_novel()];
            for (novel, base) in pairs {
                let i = sim
                    .novel_index(novel)
                    .ok_or_else(|| AssociationError::UnknownName(novel.clone()))?;
                let j = sim
                    .base_index(base)
                    .ok_or_else(|| AssociationError::UnknownName(base.clone()))?;
                if chosen[i] != usize::MAX {
                    return Err(AssociationError::DuplicateNovel(novel.clone()));
                }
                chosen[i] = j;
            }
            if let Some(i) = chosen.iter().position(|&j| j == usize::MAX) {
                return Err(AssociationError::MissingNovel(sim.novel_names()[i].clone()));
            }
            chosen
        }
    };

    let pairs = chosen
        .into_iter()
        .enumerate()
        .map(|(i, j)| AssociationPair {
            novel: sim.novel_names()[i].clone(),
            base: sim.base_names()[j].clone(),
            sim: sim.get(i, j),
        })
        .collect();
    Ok(AssociationMap { policy: policy.to_string(), pairs })
}

/// Rewrites a labeled set for the feature-alignment step: novel-class
/// samples take the label of their associated base class, samples of
/// associated base classes are discarded, and background plus unassociated
/// base samples pass through unchanged. Input order is preserved.
pub fn pseudo_relabel(
    data: &LabeledSet,
    map: &AssociationMap,
    part: &LabelPartition,
) -> Result<LabeledSet, AssociationError> {
    let name_of = |label: usize| data.class_names[label].as_str();
    let label_of = |name: &str| {
        data.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| AssociationError::UnknownName(name.to_string()))
    };
    let associated: BTreeSet<usize> = map
        .pairs
        .iter()
        .map(|p| label_of(&p.base))
        .collect::<Result<_, _>>()?;

    let mut out = LabeledSet::empty(data.dim, data.class_names.clone());
    for (x, label) in data.iter() {
        match part.set_of(label)? {
            SampleSet::Novel => {
                let base = map
                    .base_for(name_of(label))
                    .ok_or_else(|| AssociationError::MissingNovel(name_of(label).to_string()))?;
                out.push(x.to_vec(), label_of(base)?);
            }
            SampleSet::Base => {
                if !associated.contains(&label) {
                    out.push(x.to_vec(), label);
                }
            }
            SampleSet::Background => out.push(x.to_vec(), label),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(novel: &[&str], base: &[&str], values: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix::new(
            novel.iter().map(|s| s.to_string()).collect(),
            base.iter().map(|s| s.to_string()).collect(),
            values,
        )
        .unwrap()
    }

    #[test]
    fn top1_is_row_argmax() {
        let m = matrix(&["a", "b"], &["x", "y", "z"], vec![0.1, 0.9, 0.3, 0.8, 0.2, 0.4]);
        let map = assign(&m, &AssignPolicy::TopK { k: 1 }).unwrap();
        assert_eq!(map.base_for("a"), Some("y"));
        assert_eq!(map.base_for("b"), Some("x"));
        assert_eq!(map.policy, "top1");
        assert_eq!(map.pairs[0].sim, 0.9);
    }

    #[test]
    fn topk_takes_kth_ranked() {
        let m = matrix(&["a"], &["x", "y", "z"], vec![0.1, 0.9, 0.3]);
        let map = assign(&m, &AssignPolicy::TopK { k: 2 }).unwrap();
        assert_eq!(map.base_for("a"), Some("z"));
        assert!(matches!(
            assign(&m, &AssignPolicy::TopK { k: 4 }).unwrap_err(),
            AssociationError::RankOutOfRange { .. }
        ));
    }

    #[test]
    fn ties_break_lexicographically_by_base() {
        let m = matrix(&["a"], &["y", "x"], vec![0.5, 0.5]);
        let map = assign(&m, &AssignPolicy::TopK { k: 1 }).unwrap();
        assert_eq!(map.base_for("a"), Some("x"));
    }

    #[test]
    fn nodup_resolves_conflicts_by_similarity_priority() {
        // both novels prefer x, but b has the higher similarity
        let m = matrix(&["a", "b"], &["x", "y"], vec![0.8, 0.5, 0.9, 0.1]);
        let map = assign(&m, &AssignPolicy::Top1NoDup).unwrap();
        assert_eq!(map.base_for("b"), Some("x"));
        assert_eq!(map.base_for("a"), Some("y"));
        // injective
        assert_eq!(map.associated_bases().len(), 2);
    }

    #[test]
    fn nodup_needs_enough_bases() {
        let m = matrix(&["a", "b"], &["x"], vec![0.8, 0.9]);
        assert!(matches!(
            assign(&m, &AssignPolicy::Top1NoDup).unwrap_err(),
            AssociationError::TooFewBases { .. }
        ));
    }

    #[test]
    fn single_option_under_any_policy() {
        let m = matrix(&["a"], &["x"], vec![0.4]);
        for policy in [
            AssignPolicy::TopK { k: 1 },
            AssignPolicy::Top1NoDup,
            AssignPolicy::RandomSeeded { seed: 9 },
        ] {
            let map = assign(&m, &policy).unwrap();
            assert_eq!(map.base_for("a"), Some("x"));
        }
    }

    #[test]
    fn random_is_seed_deterministic() {
        let m = matrix(&["a", "b"], &["x", "y", "z"], vec![0.1; 6]);
        let p = AssignPolicy::RandomSeeded { seed: 1234 };
        assert_eq!(assign(&m, &p).unwrap(), assign(&m, &p).unwrap());
    }

    #[test]
    fn manual_validates_names_and_coverage() {
        let m = matrix(&["a", "b"], &["x", "y"], vec![0.1, 0.2, 0.3, 0.4]);
        let ok = AssignPolicy::Manual {
            pairs: vec![("a".into(), "y".into()), ("b".into(), "y".into())],
        };
        let map = assign(&m, &ok).unwrap();
        assert_eq!(map.base_for("a"), Some("y"));
        assert_eq!(map.pairs[0].sim, 0.2);

        let unknown = AssignPolicy::Manual { pairs: vec![("a".into(), "q".into())] };
        assert!(matches!(assign(&m, &unknown).unwrap_err(), AssociationError::UnknownName(_)));
        let missing = AssignPolicy::Manual { pairs: vec![("a".into(), "x".into())] };
        assert!(matches!(assign(&m, &missing).unwrap_err(), AssociationError::MissingNovel(_)));
    }

    #[test]
    fn policy_strings_round_trip() {
        for s in ["top1", "topk:2", "top1-nodup", "random:42"] {
            let p: AssignPolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        let p: AssignPolicy = r#"manual:{"cow":"horse"}"#.parse().unwrap();
        assert!(matches!(p, AssignPolicy::Manual { .. }));
        assert!("nonsense".parse::<AssignPolicy>().is_err());
        assert!("topk:0".parse::<AssignPolicy>().is_err());
    }

    #[test]
    fn map_json_shape() {
        let m = matrix(&["cow"], &["horse"], vec![0.7]);
        let map = assign(&m, &AssignPolicy::TopK { k: 1 }).unwrap();
        let json: serde_json::Value = serde_json::from_str(&map.to_json()).unwrap();
        assert_eq!(json["policy"], "top1");
        assert_eq!(json["pairs"][0]["novel"], "cow");
        assert_eq!(json["pairs"][0]["base"], "horse");
        assert_eq!(json["pairs"][0]["sim"], 0.7);
    }

    fn relabel_fixture() -> (LabeledSet, AssociationMap, LabelPartition) {
        // labels: 0 horse (base), 1 dog (base), 2 cow (novel), 3 background
        let names = vec!["horse".into(), "dog".into(), "cow".into(), "background".into()];
        let mut set = LabeledSet::empty(1, names);
        set.push(vec![0.0], 0);
        set.push(vec![1.0], 1);
        set.push(vec![2.0], 2);
        set.push(vec![3.0], 3);
        let map = AssociationMap {
            policy: "manual".into(),
            pairs: vec![AssociationPair { novel: "cow".into(), base: "horse".into(), sim: 0.9 }],
        };
        let part = LabelPartition::new([0, 1].into(), [2].into(), 3).unwrap();
        (set, map, part)
    }

    #[test]
    fn pseudo_relabel_rewrites_drops_and_passes() {
        let (set, map, part) = relabel_fixture();
        let out = pseudo_relabel(&set, &map, &part).unwrap();
        // horse sample dropped (associated base), dog kept, cow -> horse,
        // background kept; input order preserved
        assert_eq!(out.labels, vec![1, 0, 3]);
        assert_eq!(out.features, vec![vec![1.0], vec![2.0], vec![3.0]]);
    }

    #[test]
    fn pseudo_relabel_requires_map_coverage() {
        let (set, _, part) = relabel_fixture();
        let empty = AssociationMap { policy: "manual".into(), pairs: vec![] };
        assert!(matches!(
            pseudo_relabel(&set, &empty, &part).unwrap_err(),
            AssociationError::MissingNovel(_)
        ));
    }
}
