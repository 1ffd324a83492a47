//! Classification, margin, and regression losses with exact gradients.
//!
//! The per-sample margin loss penalizes every score gap between the true
//! class and each other class: `L = Σ_{j≠y} −ln((s_y − s_j)⁺ + ε)`. It is
//! applied as an auxiliary term next to cross-entropy and weighted per
//! sample set (base / novel / background), which is what makes it usable
//! under the heavy base-class bias of few-shot fine-tuning. CosFace and
//! ArcFace logit variants are provided as comparison baselines.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nethead::{CosineClassifier, Matrix, NetError};

/// Default numerical-stability constant inside the margin logarithm.
pub const MARGIN_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label {0} is in no partition set")]
    UnpartitionedLabel(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("partition sets overlap on label {0}")]
    OverlappingPartition(usize),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Weights of the set-specialized margin loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Weight on base-labeled samples.
    pub alpha: f64,
    /// Weight on novel-labeled samples.
    pub beta: f64,
    /// Weight on background samples.
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    MARGIN_EPSILON
}

impl MarginConfig {
    /// Shot-dependent schedule: `β = 1/K`, `α = 1/(3K)`, `γ = 0.001`.
    pub fn for_shots(k: usize) -> MarginConfig {
        let kf = k as f64;
        MarginConfig { alpha: 1.0 / (3.0 * kf), beta: 1.0 / kf, gamma: 0.001, epsilon: MARGIN_EPSILON }
    }
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig::for_shots(1)
    }
}

/// Disjoint split of the label space into base, novel, and background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPartition {
    pub base_ids: BTreeSet<usize>,
    pub novel_ids: BTreeSet<usize>,
    pub background_id: usize,
}

/// Which of the three sample sets a label belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSet {
    Base,
    Novel,
    Background,
}

impl LabelPartition {
    pub fn new(
        base_ids: BTreeSet<usize>,
        novel_ids: BTreeSet<usize>,
        background_id: usize,
    ) -> Result<Self, LossError> {
        if let Some(&l) = base_ids.intersection(&novel_ids).next() {
            return Err(LossError::OverlappingPartition(l));
        }
        if base_ids.contains(&background_id) || novel_ids.contains(&background_id) {
            return Err(LossError::OverlappingPartition(background_id));
        }
        Ok(LabelPartition { base_ids, novel_ids, background_id })
    }

    /// Standard layout: base classes `0..num_base`, novel classes
    /// `num_base..num_base+num_novel`, background last.
    pub fn contiguous(num_base: usize, num_novel: usize) -> LabelPartition {
        LabelPartition {
            base_ids: (0..num_base).collect(),
            novel_ids: (num_base..num_base + num_novel).collect(),
            background_id: num_base + num_novel,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.base_ids.len() + self.novel_ids.len() + 1
    }

    pub fn set_of(&self, label: usize) -> Result<SampleSet, LossError> {
        if label == self.background_id {
            Ok(SampleSet::Background)
        } else if self.base_ids.contains(&label) {
            Ok(SampleSet::Base)
        } else if self.novel_ids.contains(&label) {
            Ok(SampleSet::Novel)
        } else {
            Err(LossError::UnpartitionedLabel(label))
        }
    }
}

/// `−ln(probs[label])`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, LossError> {
    if label >= probs.len() {
        return Err(LossError::LabelOutOfRange { label, classes: probs.len() });
    }
    Ok(-probs[label].ln())
}

/// Gradient of cross-entropy w.r.t. the logits feeding the softmax that
/// produced `probs`: the classic `s − e_y` composition.
pub fn softmax_cross_entropy_grad(probs: &[f64], label: usize) -> Result<Vec<f64>, LossError> {
    if label >= probs.len() {
        return Err(LossError::LabelOutOfRange { label, classes: probs.len() });
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    Ok(g)
}

/// Per-sample margin loss `Σ_{j≠y} −ln((s_y − s_j)⁺ + ε)`.
pub fn margin_loss_sample(s: &[f64], label: usize, epsilon: f64) -> Result<f64, LossError> {
    if label >= s.len() {
        return Err(LossError::LabelOutOfRange { label, classes: s.len() });
    }
    let sy = s[label];
    let mut loss = 0.0;
    for (j, &sj) in s.iter().enumerate() {
        if j == label {
            continue;
        }
        loss -= ((sy - sj).max(0.0) + epsilon).ln();
    }
    Ok(loss)
}

/// Gradient of [`margin_loss_sample`] w.r.t. `s`; 0 on the violated side of
/// the positive part (the loss saturates at `−ln ε` once `s_y ≤ s_j`).
pub fn margin_loss_sample_grad(
    s: &[f64],
    label: usize,
    epsilon: f64,
) -> Result<Vec<f64>, LossError> {
    if label >= s.len() {
        return Err(LossError::LabelOutOfRange { label, classes: s.len() });
    }
    let sy = s[label];
    let mut grad = vec![0.0; s.len()];
    for (j, &sj) in s.iter().enumerate() {
        if j == label {
            continue;
        }
        let gap = sy - sj;
        if gap > 0.0 {
            let inv = 1.0 / (gap + epsilon);
            grad[label] -= inv;
            grad[j] += inv;
        }
    }
    Ok(grad)
}

/// Set-specialized margin over a batch: per-sample losses weighted by
/// α / β / γ according to the label's set, summed (not averaged) over the
/// batch. Returns the loss and the per-sample gradients w.r.t. each `s`.
pub fn set_specialized_margin(
    batch_s: &[Vec<f64>],
    labels: &[usize],
    part: &LabelPartition,
    cfg: &MarginConfig,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if batch_s.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if batch_s.len() != labels.len() {
        return Err(LossError::LengthMismatch(batch_s.len(), labels.len()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch_s.len());
    for (s, &label) in batch_s.iter().zip(labels) {
        let w = match part.set_of(label)? {
            SampleSet::Base => cfg.alpha,
            SampleSet::Novel => cfg.beta,
            SampleSet::Background => cfg.gamma,
        };
        if w == 0.0 {
            grads.push(vec![0.0; s.len()]);
            continue;
        }
        total += w * margin_loss_sample(s, label, cfg.epsilon)?;
        let mut g = margin_loss_sample_grad(s, label, cfg.epsilon)?;
        for v in &mut g {
            *v *= w;
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// CosFace-style logits: plain cosine logits with `τ·m` subtracted at the
/// true class. With `novel_only`, the subtraction applies only when the
/// label is a novel class.
pub fn cosface_logits(
    c: &CosineClassifier,
    x: &[f64],
    label: usize,
    m: f64,
    novel_only: bool,
    part: &LabelPartition,
) -> Result<Vec<f64>, LossError> {
    let mut logits = c.logits(x)?;
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange { label, classes: logits.len() });
    }
    if margin_applies(label, novel_only, part)? {
        logits[label] -= c.tau * m;
    }
    Ok(logits)
}

/// Backward of [`cosface_logits`]; the additive margin is constant in the
/// parameters, so this is exactly the cosine-logits backward.
pub fn cosface_backward(
    c: &CosineClassifier,
    x: &[f64],
    grad_logits: &[f64],
) -> Result<(Matrix, Vec<f64>), LossError> {
    Ok(c.logits_backward(x, grad_logits)?)
}

/// ArcFace-style logits: the true-class logit becomes `τ·cos(θ_y + m)` with
/// `θ_y` clamped to `[0, π − m]` so the margined logit stays monotone in the
/// cosine. Other classes (and non-novel labels under `novel_only`) keep
/// plain cosine logits, bitwise.
pub fn arcface_logits(
    c: &CosineClassifier,
    x: &[f64],
    label: usize,
    m: f64,
    novel_only: bool,
    part: &LabelPartition,
) -> Result<Vec<f64>, LossError> {
    let cosines = c.cosines(x)?;
    if label >= cosines.len() {
        return Err(LossError::LabelOutOfRange { label, classes: cosines.len() });
    }
    let mut logits: Vec<f64> = cosines.iter().map(|&v| c.tau * v).collect();
    if m != 0.0 && margin_applies(label, novel_only, part)? {
        let theta = cosines[label].clamp(-1.0, 1.0).acos().min(std::f64::consts::PI - m);
        logits[label] = c.tau * (theta + m).cos();
    }
    Ok(logits)
}

/// Backward of [`arcface_logits`]. The margined entry picks up the chain
/// factor `d cos(θ+m)/d cos θ = cos m + cos θ · sin m / sin θ`; it is 0 in
/// the clamped region and left untouched when no margin was applied.
pub fn arcface_backward(
    c: &CosineClassifier,
    x: &[f64],
    label: usize,
    m: f64,
    novel_only: bool,
    part: &LabelPartition,
    grad_logits: &[f64],
) -> Result<(Matrix, Vec<f64>), LossError> {
    if grad_logits.len() != c.num_classes() {
        return Err(LossError::LengthMismatch(grad_logits.len(), c.num_classes()));
    }
    let mut grad = grad_logits.to_vec();
    if m != 0.0 && margin_applies(label, novel_only, part)? {
        let cosines = c.cosines(x)?;
        let ct = cosines[label].clamp(-1.0, 1.0);
        let theta = ct.acos();
        let factor = if theta >= std::f64::consts::PI - m {
            0.0
        } else {
            let sin_theta = (1.0 - ct * ct).sqrt();
            if sin_theta == 0.0 {
                // cos(θ+m) has zero slope in cos θ at θ = 0 only through
                // this symmetric limit; treat as the m=0 factor.
                m.cos()
            } else {
                m.cos() + ct * m.sin() / sin_theta
            }
        };
        grad[label] *= factor;
    }
    Ok(c.logits_backward(x, &grad)?)
}

fn margin_applies(label: usize, novel_only: bool, part: &LabelPartition) -> Result<bool, LossError> {
    if !novel_only {
        return Ok(true);
    }
    Ok(matches!(part.set_of(label)?, SampleSet::Novel))
}

/// Smooth-L1 with unit transition: `Σ_i 0.5 d_i²` for `|d_i| < 1`, else
/// `|d_i| − 0.5`, with `d = pred − target`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch(pred.len(), target.len()));
    }
    let mut loss = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        loss += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    }
    Ok(loss)
}

/// Gradient of [`smooth_l1`] w.r.t. `pred`: `d` inside the quadratic zone,
/// `sign(d)` outside.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch(pred.len(), target.len()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                d
            } else {
                d.signum()
            }
        })
        .collect())
}

/// Fine-tuning total: classification + margin + 2 × regression.
pub fn total_finetune_loss(cls: f64, margin: f64, reg: f64) -> f64 {
    cls + margin + 2.0 * reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn part3() -> LabelPartition {
        // labels: 0 base, 1 novel, 2 background
        LabelPartition::contiguous(1, 1)
    }

    #[test]
    fn cross_entropy_known_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let c = 5;
        let uniform = vec![1.0 / c as f64; c];
        assert_relative_eq!(cross_entropy(&uniform, 2).unwrap(), (c as f64).ln(), epsilon = 1e-12);
        let probs = [1.0 / 6.0, 1.0 / 3.0, 0.5];
        assert_relative_eq!(cross_entropy(&probs, 2).unwrap(), 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn margin_loss_one_hot_is_tiny() {
        let mut s = vec![0.0; 4];
        s[1] = 1.0;
        let l = margin_loss_sample(&s, 1, MARGIN_EPSILON).unwrap();
        // 3 * -ln(1 + 1e-7)
        assert!(l.abs() < 1e-6);
        assert!(l < 0.0);
    }

    #[test]
    fn margin_loss_uniform_value() {
        for c in [3usize, 5, 8] {
            let s = vec![1.0 / c as f64; c];
            let l = margin_loss_sample(&s, 0, MARGIN_EPSILON).unwrap();
            let expected = (c - 1) as f64 * -(MARGIN_EPSILON.ln());
            assert_relative_eq!(l, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn margin_loss_two_class_example() {
        let l = margin_loss_sample(&[0.8, 0.2], 0, MARGIN_EPSILON).unwrap();
        assert_relative_eq!(l, -(0.6 + MARGIN_EPSILON).ln(), epsilon = 1e-12);
        assert_relative_eq!(l, 0.5108, epsilon = 1e-4);
    }

    #[test]
    fn margin_grad_zero_on_violated_side() {
        let g = margin_loss_sample_grad(&[0.2, 0.8], 0, MARGIN_EPSILON).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn set_margin_zero_weights_zero_loss() {
        let cfg = MarginConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, epsilon: MARGIN_EPSILON };
        let batch = vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.25, 0.25]];
        let (l, g) = set_specialized_margin(&batch, &[0, 1], &part3(), &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn set_margin_single_novel_reduces_to_plain() {
        let cfg = MarginConfig { alpha: 0.7, beta: 1.0, gamma: 0.3, epsilon: MARGIN_EPSILON };
        let s = vec![0.1, 0.6, 0.3];
        let (l, _) = set_specialized_margin(&[s.clone()], &[1], &part3(), &cfg).unwrap();
        assert_relative_eq!(l, margin_loss_sample(&s, 1, cfg.epsilon).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn set_margin_weighted_batch_example() {
        // one base sample with alpha = 1/3 and one background with gamma = 0.001,
        // both uniform over 3 classes
        let cfg = MarginConfig { alpha: 1.0 / 3.0, beta: 1.0, gamma: 0.001, epsilon: MARGIN_EPSILON };
        let u = vec![1.0 / 3.0; 3];
        let (l, _) =
            set_specialized_margin(&[u.clone(), u], &[0, 2], &part3(), &cfg).unwrap();
        let per_sample = 2.0 * -(MARGIN_EPSILON.ln());
        assert_relative_eq!(l, (1.0 / 3.0 + 0.001) * per_sample, epsilon = 1e-9);
    }

    #[test]
    fn set_margin_is_linear_in_gamma() {
        let base = MarginConfig { alpha: 0.0, beta: 0.0, gamma: 0.4, epsilon: MARGIN_EPSILON };
        let doubled = MarginConfig { gamma: 0.8, ..base };
        let batch = vec![vec![0.3, 0.3, 0.4]];
        let (l1, _) = set_specialized_margin(&batch, &[2], &part3(), &base).unwrap();
        let (l2, _) = set_specialized_margin(&batch, &[2], &part3(), &doubled).unwrap();
        assert_relative_eq!(l2, 2.0 * l1, epsilon = 1e-12);
    }

    #[test]
    fn set_margin_rejects_unknown_label() {
        let cfg = MarginConfig::default();
        let err = set_specialized_margin(&[vec![0.5, 0.3, 0.2]], &[7], &part3(), &cfg);
        assert!(err.is_err());
    }

    #[test]
    fn margin_schedule_matches_shots() {
        for k in [1usize, 2, 3, 5, 10] {
            let cfg = MarginConfig::for_shots(k);
            assert_eq!(cfg.beta, 1.0 / k as f64);
            assert_eq!(cfg.alpha, 1.0 / (3.0 * k as f64));
            assert_eq!(cfg.gamma, 0.001);
            assert_eq!(cfg.epsilon, 1e-7);
        }
    }

    fn test_classifier() -> CosineClassifier {
        let w = Matrix::from_vec(3, 3, vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.3, 0.4, 0.5]).unwrap();
        CosineClassifier::new(w, 20.0).unwrap()
    }

    #[test]
    fn cosface_zero_margin_is_bitwise_plain() {
        let c = test_classifier();
        let x = [0.7, -0.1, 0.4];
        let plain = c.logits(&x).unwrap();
        let cf = cosface_logits(&c, &x, 1, 0.0, false, &part3()).unwrap();
        assert_eq!(plain, cf);
    }

    #[test]
    fn cosface_aligned_example() {
        let c = test_classifier();
        // x parallel to row 0
        let p = cosface_logits(&c, &[5.0, 0.0, 0.0], 0, 0.35, false, &part3()).unwrap();
        assert_relative_eq!(p[0], 20.0 * (1.0 - 0.35), max_relative = 1e-9);
    }

    #[test]
    fn cosface_novel_only_skips_base_labels() {
        let c = test_classifier();
        let x = [0.7, -0.1, 0.4];
        let plain = c.logits(&x).unwrap();
        // label 0 is a base class in part3()
        let cf = cosface_logits(&c, &x, 0, 0.35, true, &part3()).unwrap();
        assert_eq!(plain, cf);
    }

    #[test]
    fn arcface_zero_margin_is_bitwise_plain() {
        let c = test_classifier();
        let x = [0.7, -0.1, 0.4];
        assert_eq!(c.logits(&x).unwrap(), arcface_logits(&c, &x, 2, 0.0, false, &part3()).unwrap());
    }

    #[test]
    fn arcface_sixty_degree_example() {
        // x at 60 degrees from row 0 of an orthonormal-ish classifier
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = CosineClassifier::new(w, 20.0).unwrap();
        let x = [0.5, 3.0_f64.sqrt() / 2.0]; // cos θ_0 = 1/2
        let p = arcface_logits(&c, &x, 0, std::f64::consts::FRAC_PI_6, false, &part3()).unwrap();
        // τ cos(π/3 + π/6) = τ cos(π/2) = 0
        assert!(p[0].abs() < 1e-9);
        // non-target logit untouched
        assert_relative_eq!(p[1], c.logits(&x).unwrap()[1], epsilon = 1e-12);
    }

    #[test]
    fn smooth_l1_values_and_continuity() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125, epsilon = 1e-12);
        assert_relative_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5, epsilon = 1e-12);
        // value and slope continuous at |d| = 1
        let eps = 4e-10;
        let below = smooth_l1(&[1.0 - eps], &[0.0]).unwrap();
        let above = smooth_l1(&[1.0 + eps], &[0.0]).unwrap();
        assert!((below - above).abs() < 1e-9);
        let gb = smooth_l1_grad(&[1.0 - eps], &[0.0]).unwrap()[0];
        let ga = smooth_l1_grad(&[1.0 + eps], &[0.0]).unwrap()[0];
        assert!((gb - ga).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_length_mismatch() {
        assert!(smooth_l1(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        assert_eq!(total_finetune_loss(1.0, 0.0, 0.0), 1.0);
        assert_eq!(total_finetune_loss(0.0, 0.0, 1.0), 2.0);
        assert_relative_eq!(total_finetune_loss(0.5, 0.3, 0.1), 1.0, epsilon = 1e-15);
    }
}
