//! Three-stage training orchestration: base training, the association step
//! (pseudo-label feature alignment through a dedicated fc layer), and the
//! discrimination step (disentangled dual head trained with cross-entropy
//! plus the set-specialized margin loss), plus the single-head baseline
//! fine-tune used as the comparison arm. All stages run SGD with momentum
//! and weight decay and are bit-for-bit deterministic given (seed, config).

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{pseudo_relabel, AssociationError, AssociationMap};
use crate::episodes::{Episode, EpisodeError, EpisodeModel};
use crate::losses::{
    cross_entropy, margin_loss_sample, margin_loss_sample_grad, softmax_cross_entropy_grad,
    smooth_l1, smooth_l1_grad, total_finetune_loss, LossError, MarginConfig, SampleSet,
};
use crate::nethead::{
    cosine, relu_backward_slice, relu_slice, softmax, softmax_backward, CosineClassifier,
    DualHead, LinearLayer, Matrix, NetError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("episode has no base-labeled samples")]
    EmptyBaseSet,
    #[error("episode has no novel-labeled samples")]
    EmptyNovelSet,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("episode labels are not in the contiguous base/novel/background layout")]
    NonContiguousLabels,
    #[error("unexpected label {label} in {stage} training data")]
    UnexpectedLabel { label: usize, stage: StageKind },
    #[error("non-finite loss at {stage} iteration {iteration}")]
    NumericFailure { stage: StageKind, iteration: usize },
    #[error("fc layer shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

/// SGD with momentum and weight decay; defaults follow the reference
/// fine-tuning recipe (lr 0.001, momentum 0.9, weight decay 1e-4).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            iterations: 1000,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// One momentum update: `v ← momentum·v + grad + weight_decay·param`,
/// `param ← param − lr·v`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, cfg: &SgdConfig) {
    assert_eq!(param.rows(), grad.rows());
    assert_eq!(param.cols(), grad.cols());
    assert_eq!(param.rows(), velocity.rows());
    assert_eq!(param.cols(), velocity.cols());
    let p = param.data_mut();
    let g = grad.data();
    let v = velocity.data_mut();
    for i in 0..p.len() {
        v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * p[i];
        p[i] -= cfg.lr * v[i];
    }
}

/// Deterministic seed derivation for independent RNG streams.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    BaseTrain,
    Associate,
    Discriminate,
    TfaFinetune,
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StageKind::BaseTrain => "base",
            StageKind::Associate => "associate",
            StageKind::Discriminate => "discriminate",
            StageKind::TfaFinetune => "tfa",
        };
        write!(f, "{s}")
    }
}

/// Outcome of one training stage: the per-iteration loss trace and wall
/// time. Wall time never enters serialized artifacts.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: StageKind,
    pub losses: Vec<f64>,
    pub wall: Duration,
}

/// The base-trained head: the shared fc layer (`FC2`) and a cosine
/// classifier over base classes plus background (background row last).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainedHead {
    pub g: LinearLayer,
    pub classifier: CosineClassifier,
    pub class_names: Vec<String>,
    pub num_base: usize,
    pub num_novel: usize,
}

impl PretrainedHead {
    /// Row of the background class in the local (base + background) space.
    pub fn background_row(&self) -> usize {
        self.num_base
    }

    /// Expands a (base + background) distribution into the joint space,
    /// novel classes receiving zero mass.
    fn joint_probs(&self, local: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_base + self.num_novel + 1];
        out[..self.num_base].copy_from_slice(&local[..self.num_base]);
        out[self.num_base + self.num_novel] = local[self.num_base];
        out
    }
}

impl EpisodeModel for PretrainedHead {
    fn num_classes(&self) -> usize {
        self.num_base + self.num_novel + 1
    }

    fn predict(&self, features: &[f64]) -> Vec<f64> {
        let z = relu_slice(&self.g.apply(features));
        let probs = softmax(&self.classifier.logits(&z).expect("dims checked at build"));
        self.joint_probs(&probs)
    }

    fn embed(&self, features: &[f64]) -> Vec<f64> {
        relu_slice(&self.g.apply(features))
    }

    fn stage_label(&self) -> &str {
        "base"
    }
}

/// Association-step model view: the aligned fc layer in front of the frozen
/// pretrained classifier.
pub struct AssociationModel<'a> {
    pub pre: &'a PretrainedHead,
    pub w_asso: &'a LinearLayer,
}

impl EpisodeModel for AssociationModel<'_> {
    fn num_classes(&self) -> usize {
        self.pre.num_classes()
    }

    fn predict(&self, features: &[f64]) -> Vec<f64> {
        let z = relu_slice(&self.w_asso.apply(features));
        let probs = softmax(&self.pre.classifier.logits(&z).expect("dims checked at build"));
        self.pre.joint_probs(&probs)
    }

    fn embed(&self, features: &[f64]) -> Vec<f64> {
        relu_slice(&self.w_asso.apply(features))
    }

    fn stage_label(&self) -> &str {
        "associate"
    }
}

/// Evaluation view of the dual head; geometry metrics live in the novel
/// branch's feature space (the branch that changed relative to the base
/// model).
pub struct DualModel<'a> {
    pub head: &'a DualHead,
}

impl EpisodeModel for DualModel<'_> {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn predict(&self, features: &[f64]) -> Vec<f64> {
        self.head.forward(features).expect("dims checked at build").probs
    }

    fn embed(&self, features: &[f64]) -> Vec<f64> {
        self.head.forward(features).expect("dims checked at build").z_novel
    }

    fn stage_label(&self) -> &str {
        "discriminate"
    }
}

/// Single-head baseline: the pretrained fc layer with an expanded
/// classifier over the full joint label space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TfaHead {
    pub g: LinearLayer,
    pub classifier: CosineClassifier,
    pub class_names: Vec<String>,
    pub num_base: usize,
    pub num_novel: usize,
}

impl EpisodeModel for TfaHead {
    fn num_classes(&self) -> usize {
        self.num_base + self.num_novel + 1
    }

    fn predict(&self, features: &[f64]) -> Vec<f64> {
        let z = relu_slice(&self.g.apply(features));
        softmax(&self.classifier.logits(&z).expect("dims checked at build"))
    }

    fn embed(&self, features: &[f64]) -> Vec<f64> {
        relu_slice(&self.g.apply(features))
    }

    fn stage_label(&self) -> &str {
        "tfa"
    }
}

fn check_layout(episode: &Episode) -> Result<(usize, usize), PipelineError> {
    let b = episode.num_base();
    let n = episode.num_novel();
    let part = &episode.partition;
    let contiguous = part.base_ids.iter().copied().eq(0..b)
        && part.novel_ids.iter().copied().eq(b..b + n)
        && part.background_id == b + n;
    if !contiguous {
        return Err(PipelineError::NonContiguousLabels);
    }
    Ok((b, n))
}

fn init_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = (1.0 / cols as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    loop {
        for v in m.data_mut() {
            *v = rng.gen_range(-a..a);
        }
        if (0..rows).all(|r| crate::nethead::norm(m.row(r)) > 0.0) {
            return m;
        }
    }
}

/// Epoch-shuffled batch iterator over sample indices.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batcher {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: 0,
            batch: batch.max(1),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

fn accumulate_linear(acc_w: &mut Matrix, acc_b: &mut Matrix, x: &[f64], dpre: &[f64]) {
    for (r, &d) in dpre.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = acc_w.row_mut(r);
        for (w, &xv) in row.iter_mut().zip(x) {
            *w += d * xv;
        }
        let b = acc_b.get(r, 0) + d;
        acc_b.set(r, 0, b);
    }
}

/// Trains the shared fc layer and a (base + background) cosine classifier
/// jointly by cross-entropy on the abundant base set. Deterministic given
/// the seed; `iterations = 0` returns the initialization unchanged.
pub fn base_train(
    episode: &Episode,
    hidden_dim: usize,
    tau: f64,
    cfg: &SgdConfig,
) -> Result<(PretrainedHead, StageResult), PipelineError> {
    let start = Instant::now();
    let (b, n) = check_layout(episode)?;
    let data = &episode.abundant_base;
    if !data.labels.iter().any(|&l| l < b) {
        return Err(PipelineError::EmptyBaseSet);
    }
    let bg_joint = b + n;
    for &l in &data.labels {
        if l >= b && l != bg_joint {
            return Err(PipelineError::UnexpectedLabel { label: l, stage: StageKind::BaseTrain });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xB0));
    let mut g = LinearLayer::new(init_matrix(hidden_dim, data.dim, &mut rng), Matrix::zeros(hidden_dim, 1))?;
    let mut cls = CosineClassifier::new(init_matrix(b + 1, hidden_dim, &mut rng), tau)?;

    let mut vel_gw = Matrix::zeros(hidden_dim, data.dim);
    let mut vel_gb = Matrix::zeros(hidden_dim, 1);
    let mut vel_cls = Matrix::zeros(b + 1, hidden_dim);
    let mut batcher = Batcher::new(data.len(), cfg.batch_size, mix_seed(cfg.seed, 0xB1));
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = batcher.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut acc_gw = Matrix::zeros(hidden_dim, data.dim);
        let mut acc_gb = Matrix::zeros(hidden_dim, 1);
        let mut acc_cls = Matrix::zeros(b + 1, hidden_dim);
        let mut loss_sum = 0.0;
        for &idx in &batch {
            let x = &data.features[idx];
            let y = if data.labels[idx] == bg_joint { b } else { data.labels[idx] };
            let pre = g.apply(x);
            let z = relu_slice(&pre);
            let probs = softmax(&cls.logits(&z)?);
            loss_sum += cross_entropy(&probs, y)?;
            let mut gl = softmax_cross_entropy_grad(&probs, y)?;
            for v in &mut gl {
                *v *= scale;
            }
            let (dw_cls, dz) = cls.logits_backward(&z, &gl)?;
            acc_cls.add_scaled(&dw_cls, 1.0);
            let dpre = relu_backward_slice(&pre, &dz);
            accumulate_linear(&mut acc_gw, &mut acc_gb, x, &dpre);
        }
        sgd_step(&mut g.weight, &acc_gw, &mut vel_gw, cfg);
        sgd_step(&mut g.bias, &acc_gb, &mut vel_gb, cfg);
        sgd_step(&mut cls.weight, &acc_cls, &mut vel_cls, cfg);
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(PipelineError::NumericFailure { stage: StageKind::BaseTrain, iteration });
        }
        losses.push(loss);
    }

    let head = PretrainedHead {
        g,
        classifier: cls,
        class_names: data.class_names.clone(),
        num_base: b,
        num_novel: n,
    };
    Ok((head, StageResult { stage: StageKind::BaseTrain, losses, wall: start.elapsed() }))
}

/// Association step: pseudo-relabels the balanced K-shot set (novel samples
/// take their associated base label, associated base classes drop out) and
/// trains only the `FC2'` copy of the fc layer against the frozen
/// pretrained classifier. Returns the aligned layer, frozen.
pub fn association_step(
    pre: &PretrainedHead,
    episode: &Episode,
    map: &AssociationMap,
    cfg: &SgdConfig,
    warm_start: bool,
) -> Result<(LinearLayer, StageResult), PipelineError> {
    let start = Instant::now();
    let (b, n) = check_layout(episode)?;
    let bg_joint = b + n;
    let train = pseudo_relabel(&episode.balanced_kshot, map, &episode.partition)?;
    if train.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }

    let mut g = if warm_start {
        pre.g.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xA0));
        LinearLayer::new(
            init_matrix(pre.g.out_dim(), pre.g.in_dim(), &mut rng),
            Matrix::zeros(pre.g.out_dim(), 1),
        )?
    };
    g.frozen = false;

    let mut vel_w = Matrix::zeros(g.out_dim(), g.in_dim());
    let mut vel_b = Matrix::zeros(g.out_dim(), 1);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, mix_seed(cfg.seed, 0xA1));
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = batcher.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut acc_w = Matrix::zeros(g.out_dim(), g.in_dim());
        let mut acc_b = Matrix::zeros(g.out_dim(), 1);
        let mut loss_sum = 0.0;
        for &idx in &batch {
            let x = &train.features[idx];
            let y = if train.labels[idx] == bg_joint { b } else { train.labels[idx] };
            let pre_act = g.apply(x);
            let z = relu_slice(&pre_act);
            let probs = softmax(&pre.classifier.logits(&z)?);
            loss_sum += cross_entropy(&probs, y)?;
            let mut gl = softmax_cross_entropy_grad(&probs, y)?;
            for v in &mut gl {
                *v *= scale;
            }
            let (_, dz) = pre.classifier.logits_backward(&z, &gl)?;
            let dpre = relu_backward_slice(&pre_act, &dz);
            accumulate_linear(&mut acc_w, &mut acc_b, x, &dpre);
        }
        sgd_step(&mut g.weight, &acc_w, &mut vel_w, cfg);
        sgd_step(&mut g.bias, &acc_b, &mut vel_b, cfg);
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(PipelineError::NumericFailure { stage: StageKind::Associate, iteration });
        }
        losses.push(loss);
    }

    g.frozen = true;
    Ok((g, StageResult { stage: StageKind::Associate, losses, wall: start.elapsed() }))
}

/// Knobs of the discrimination step that the write-up leaves open.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminationOptions {
    /// Train a 4-d regressor on the base branch and add 2 × smooth-L1.
    pub with_regression: bool,
    /// Initialize the base classifier from the pretrained rows instead of
    /// randomly.
    pub inherit_base_rows: bool,
    /// Initialize each novel row from its associated base class's
    /// pretrained classifier row (background row is always inherited).
    pub init_novel_from_assoc: bool,
}

impl Default for DiscriminationOptions {
    fn default() -> Self {
        DiscriminationOptions {
            with_regression: false,
            inherit_base_rows: true,
            init_novel_from_assoc: true,
        }
    }
}

/// Discrimination step: builds the disentangled dual head (frozen `FC2`
/// base branch, frozen `FC2'` novel branch) and trains only the two cosine
/// classifiers on the balanced set with true labels restored, minimizing
/// cross-entropy over the joint softmax plus the set-specialized margin
/// loss (and optionally 2 × smooth-L1 through a small regressor on the
/// base branch).
pub fn discrimination_step(
    pre: &PretrainedHead,
    w_asso: &LinearLayer,
    map: &AssociationMap,
    episode: &Episode,
    mcfg: &MarginConfig,
    cfg: &SgdConfig,
    opts: &DiscriminationOptions,
) -> Result<(DualHead, Option<LinearLayer>, StageResult), PipelineError> {
    let start = Instant::now();
    let (b, n) = check_layout(episode)?;
    if w_asso.in_dim() != pre.g.in_dim() || w_asso.out_dim() != pre.g.out_dim() {
        return Err(PipelineError::ShapeMismatch(format!(
            "aligned layer {}x{} vs pretrained {}x{}",
            w_asso.out_dim(),
            w_asso.in_dim(),
            pre.g.out_dim(),
            pre.g.in_dim()
        )));
    }
    let hidden = pre.g.out_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD0));

    let mut g_base = pre.g.clone();
    g_base.frozen = true;
    let mut g_novel = w_asso.clone();
    g_novel.frozen = true;

    let base_w = if opts.inherit_base_rows {
        let mut w = Matrix::zeros(b, hidden);
        for r in 0..b {
            w.row_mut(r).copy_from_slice(pre.classifier.weight.row(r));
        }
        w
    } else {
        init_matrix(b, hidden, &mut rng)
    };

    let mut novel_w = init_matrix(n + 1, hidden, &mut rng);
    if opts.init_novel_from_assoc {
        for i in 0..n {
            let novel_name = &pre.class_names[b + i];
            let base_name = map
                .base_for(novel_name)
                .ok_or_else(|| AssociationError::MissingNovel(novel_name.clone()))?;
            let row = pre.class_names[..b]
                .iter()
                .position(|c| c == base_name)
                .ok_or_else(|| AssociationError::UnknownName(base_name.to_string()))?;
            novel_w.row_mut(i).copy_from_slice(pre.classifier.weight.row(row));
        }
    }
    novel_w.row_mut(n).copy_from_slice(pre.classifier.weight.row(pre.background_row()));

    let mut head = DualHead::new(
        g_base,
        g_novel,
        CosineClassifier::new(base_w, pre.classifier.tau)?,
        CosineClassifier::new(novel_w, pre.classifier.tau)?,
    )?;

    let mut regressor = if opts.with_regression {
        Some(LinearLayer::new(init_matrix(4, hidden, &mut rng), Matrix::zeros(4, 1))?)
    } else {
        None
    };

    let data = &episode.balanced_kshot;
    if data.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    let part = &episode.partition;
    let classes = b + n + 1;

    let mut vel_base = Matrix::zeros(b, hidden);
    let mut vel_novel = Matrix::zeros(n + 1, hidden);
    let mut vel_rw = Matrix::zeros(4, hidden);
    let mut vel_rb = Matrix::zeros(4, 1);
    let mut batcher = Batcher::new(data.len(), cfg.batch_size, mix_seed(cfg.seed, 0xD2));
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = batcher.next_batch();
        let ce_scale = 1.0 / batch.len() as f64;
        let fg_count = batch.iter().filter(|&&i| data.labels[i] != part.background_id).count();
        let mut acc_base = Matrix::zeros(b, hidden);
        let mut acc_novel = Matrix::zeros(n + 1, hidden);
        let mut acc_rw = Matrix::zeros(4, hidden);
        let mut acc_rb = Matrix::zeros(4, 1);
        let mut ce_sum = 0.0;
        let mut margin_sum = 0.0;
        let mut reg_sum = 0.0;

        for &idx in &batch {
            let x = &data.features[idx];
            let y = data.labels[idx];
            if y >= classes {
                return Err(PipelineError::UnexpectedLabel { label: y, stage: StageKind::Discriminate });
            }
            let act = head.forward(x)?;
            ce_sum += cross_entropy(&act.probs, y)?;
            let mut grad_logits = softmax_cross_entropy_grad(&act.probs, y)?;
            for v in &mut grad_logits {
                *v *= ce_scale;
            }
            let weight = match part.set_of(y)? {
                SampleSet::Base => mcfg.alpha,
                SampleSet::Novel => mcfg.beta,
                SampleSet::Background => mcfg.gamma,
            };
            if weight != 0.0 {
                margin_sum += weight * margin_loss_sample(&act.probs, y, mcfg.epsilon)?;
                let mut gs = margin_loss_sample_grad(&act.probs, y, mcfg.epsilon)?;
                for v in &mut gs {
                    *v *= weight;
                }
                let gp = softmax_backward(&act.probs, &gs);
                for (g, p) in grad_logits.iter_mut().zip(&gp) {
                    *g += p;
                }
            }
            let grads = head.backward(&act, &grad_logits)?;
            acc_base.add_scaled(&grads.cls_base, 1.0);
            acc_novel.add_scaled(&grads.cls_novel, 1.0);

            if let Some(reg) = &regressor {
                if y != part.background_id && fg_count > 0 {
                    let target = episode
                        .regression_targets
                        .as_ref()
                        .map(|t| t[idx])
                        .unwrap_or([0.0; 4]);
                    let pred = reg.apply(&act.z_base);
                    reg_sum += smooth_l1(&pred, &target)?;
                    let mut gp = smooth_l1_grad(&pred, &target)?;
                    let scale = 2.0 / fg_count as f64;
                    for v in &mut gp {
                        *v *= scale;
                    }
                    accumulate_linear(&mut acc_rw, &mut acc_rb, &act.z_base, &gp);
                }
            }
        }

        sgd_step(&mut head.cls_base.weight, &acc_base, &mut vel_base, cfg);
        sgd_step(&mut head.cls_novel.weight, &acc_novel, &mut vel_novel, cfg);
        if let Some(reg) = regressor.as_mut() {
            sgd_step(&mut reg.weight, &acc_rw, &mut vel_rw, cfg);
            sgd_step(&mut reg.bias, &acc_rb, &mut vel_rb, cfg);
        }

        let reg_mean = if fg_count > 0 { reg_sum / fg_count as f64 } else { 0.0 };
        let loss = total_finetune_loss(ce_sum * ce_scale, margin_sum, reg_mean);
        if !loss.is_finite() {
            return Err(PipelineError::NumericFailure { stage: StageKind::Discriminate, iteration });
        }
        losses.push(loss);
    }

    Ok((head, regressor, StageResult { stage: StageKind::Discriminate, losses, wall: start.elapsed() }))
}

/// Baseline fine-tune: expand the pretrained classifier to the full joint
/// label space (novel rows randomly initialized) and train only the
/// classifier on the balanced set by cross-entropy.
pub fn tfa_baseline_finetune(
    pre: &PretrainedHead,
    episode: &Episode,
    cfg: &SgdConfig,
) -> Result<(TfaHead, StageResult), PipelineError> {
    let start = Instant::now();
    let (b, n) = check_layout(episode)?;
    let data = &episode.balanced_kshot;
    if !data.labels.iter().any(|&l| episode.partition.novel_ids.contains(&l)) {
        return Err(PipelineError::EmptyNovelSet);
    }
    let hidden = pre.g.out_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xF0));

    let mut w = init_matrix(b + n + 1, hidden, &mut rng);
    for r in 0..b {
        w.row_mut(r).copy_from_slice(pre.classifier.weight.row(r));
    }
    w.row_mut(b + n).copy_from_slice(pre.classifier.weight.row(pre.background_row()));
    let mut cls = CosineClassifier::new(w, pre.classifier.tau)?;
    let mut g = pre.g.clone();
    g.frozen = true;

    let mut vel = Matrix::zeros(b + n + 1, hidden);
    let mut batcher = Batcher::new(data.len(), cfg.batch_size, mix_seed(cfg.seed, 0xF1));
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = batcher.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut acc = Matrix::zeros(b + n + 1, hidden);
        let mut loss_sum = 0.0;
        for &idx in &batch {
            let x = &data.features[idx];
            let y = data.labels[idx];
            let z = relu_slice(&g.apply(x));
            let probs = softmax(&cls.logits(&z)?);
            loss_sum += cross_entropy(&probs, y)?;
            let mut gl = softmax_cross_entropy_grad(&probs, y)?;
            for v in &mut gl {
                *v *= scale;
            }
            let (dw, _) = cls.logits_backward(&z, &gl)?;
            acc.add_scaled(&dw, 1.0);
        }
        sgd_step(&mut cls.weight, &acc, &mut vel, cfg);
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(PipelineError::NumericFailure { stage: StageKind::TfaFinetune, iteration });
        }
        losses.push(loss);
    }

    let head = TfaHead {
        g,
        classifier: cls,
        class_names: data.class_names.clone(),
        num_base: b,
        num_novel: n,
    };
    Ok((head, StageResult { stage: StageKind::TfaFinetune, losses, wall: start.elapsed() }))
}

/// Mean cosine between the aligned novel K-shot features `relu(g(x))` and
/// the frozen classifier row of each sample's associated base class. The
/// association step exists to push this up.
pub fn mean_assoc_alignment(
    g: &LinearLayer,
    pre: &PretrainedHead,
    episode: &Episode,
    map: &AssociationMap,
) -> Result<f64, PipelineError> {
    let (b, _) = check_layout(episode)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, label) in episode.balanced_kshot.iter() {
        if !episode.partition.novel_ids.contains(&label) {
            continue;
        }
        let novel_name = &episode.balanced_kshot.class_names[label];
        let base_name = map
            .base_for(novel_name)
            .ok_or_else(|| AssociationError::MissingNovel(novel_name.clone()))?;
        let row = pre.class_names[..b]
            .iter()
            .position(|c| c == base_name)
            .ok_or_else(|| AssociationError::UnknownName(base_name.to_string()))?;
        let z = relu_slice(&g.apply(x));
        sum += cosine(&z, pre.classifier.weight.row(row));
        count += 1;
    }
    if count == 0 {
        return Err(PipelineError::EmptyNovelSet);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_grad_is_identity() {
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        let mut p = Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let before = p.clone();
        let mut v = Matrix::zeros(1, 2);
        sgd_step(&mut p, &Matrix::zeros(1, 2), &mut v, &cfg);
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_plain_descent_without_momentum() {
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0, lr: 0.1, ..SgdConfig::default() };
        let mut p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let mut v = Matrix::zeros(1, 1);
        sgd_step(&mut p, &g, &mut v, &cfg);
        assert!((p.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        // two steps with constant gradient: v2 = 0.9 g + g = 1.9 g
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0, lr: 1.0, ..SgdConfig::default() };
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut p = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let mut v = Matrix::zeros(1, 1);
        sgd_step(&mut p, &g, &mut v, &cfg);
        assert!((v.get(0, 0) - 1.0).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut v, &cfg);
        assert!((v.get(0, 0) - 1.9).abs() < 1e-15);
        assert!((p.get(0, 0) + 2.9).abs() < 1e-12);
    }

    #[test]
    fn mix_seed_spreads_tags() {
        assert_ne!(mix_seed(7, 1), mix_seed(7, 2));
        assert_ne!(mix_seed(7, 1), mix_seed(8, 1));
        assert_eq!(mix_seed(7, 1), mix_seed(7, 1));
    }

    #[test]
    fn batcher_partitions_epochs() {
        let mut batcher = Batcher::new(5, 2, 3);
        let mut seen: Vec<usize> = Vec::new();
        seen.extend(batcher.next_batch());
        seen.extend(batcher.next_batch());
        seen.extend(batcher.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
