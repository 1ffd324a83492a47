//! Synthetic few-shot world generation, external embedding ingestion,
//! balanced-set construction, and evaluation metrics.
//!
//! A generated world stands in for frozen detector RoI features: base
//! classes are tight Gaussian clusters with means on the unit sphere, each
//! novel class mean is a convex blend of its two nearest base means, and
//! background is one broad cluster around the origin. The generator also
//! emits a matching hypernym taxonomy (each novel leaf attached under its
//! nearest base's family node) so the taxonomy-based association path can
//! run end to end on synthetic data.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LabelPartition;
use crate::taxonomy::{SimilarityMatrix, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("embeddings csv line {line}: {msg}")]
    BadCsv { line: usize, msg: String },
    #[error("model outputs {got} classes, episode has {want}")]
    ModelOutputMismatch { got: usize, want: usize },
    #[error("class {0:?} has no test samples")]
    EmptyTestClass(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A set of labeled feature vectors with an induced class vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub dim: usize,
    pub class_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn empty(dim: usize, class_names: Vec<String>) -> Self {
        LabeledSet { dim, class_names, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: Vec<f64>, label: usize) {
        debug_assert_eq!(features.len(), self.dim);
        debug_assert!(label < self.class_names.len());
        self.features.push(features);
        self.labels.push(label);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    pub fn label_count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Parses `label,f1,...,fd` rows (constant `d`); the label vocabulary is
    /// induced in first-appearance order. A leading `label,...` header row,
    /// as written by [`export_features`], is skipped, along with its
    /// optional `stage` column.
    pub fn from_csv(text: &str) -> Result<LabeledSet, EpisodeError> {
        let mut class_names: Vec<String> = Vec::new();
        let mut features: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut dim: Option<usize> = None;
        let mut skip_cols = 1;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if lineno == 0 && cells[0].trim() == "label" {
                if cells.get(1).map(|c| c.trim()) == Some("stage") {
                    skip_cols = 2;
                }
                continue;
            }
            if cells.len() <= skip_cols {
                return Err(EpisodeError::BadCsv { line: lineno + 1, msg: "no feature cells".into() });
            }
            let d = cells.len() - skip_cols;
            match dim {
                None => dim = Some(d),
                Some(existing) if existing != d => {
                    return Err(EpisodeError::BadCsv {
                        line: lineno + 1,
                        msg: format!("expected {existing} features, got {d}"),
                    })
                }
                _ => {}
            }
            let name = cells[0].trim();
            let label = match class_names.iter().position(|c| c == name) {
                Some(i) => i,
                None => {
                    class_names.push(name.to_string());
                    class_names.len() - 1
                }
            };
            let mut fs = Vec::with_capacity(d);
            for cell in &cells[skip_cols..] {
                let v: f64 = cell.trim().parse().map_err(|_| EpisodeError::BadCsv {
                    line: lineno + 1,
                    msg: format!("non-numeric feature {cell:?}"),
                })?;
                fs.push(v);
            }
            features.push(fs);
            labels.push(label);
        }
        Ok(LabeledSet { dim: dim.unwrap_or(0), class_names, features, labels })
    }
}

/// Parameters of the synthetic world generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_base: usize,
    pub num_novel: usize,
    pub dim: usize,
    pub base_samples_per_class: usize,
    pub test_samples_per_class: usize,
    #[serde(alias = "k")]
    pub k_shot: usize,
    pub cluster_spread: f64,
    /// Convex-combination weight placing each novel mean between its two
    /// nearest base means (1.0 puts it on the nearest one).
    pub novel_mix: f64,
    pub background_spread: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_base: 6,
            num_novel: 3,
            dim: 32,
            base_samples_per_class: 200,
            test_samples_per_class: 50,
            k_shot: 1,
            cluster_spread: 0.15,
            novel_mix: 0.65,
            background_spread: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let fail = |msg: &str| Err(EpisodeError::InvalidConfig(msg.to_string()));
        if self.num_base == 0 || self.num_novel == 0 {
            return fail("num_base and num_novel must be positive");
        }
        if self.novel_mix > 0.0 && self.num_base < 2 {
            return fail("num_base must be at least 2 when novel_mix > 0");
        }
        if self.dim == 0 {
            return fail("dim must be positive");
        }
        if self.base_samples_per_class == 0 || self.test_samples_per_class == 0 {
            return fail("sample counts must be positive");
        }
        if self.k_shot == 0 {
            return fail("k_shot must be positive");
        }
        if self.k_shot > self.test_samples_per_class {
            return fail("k_shot exceeds the test pool size");
        }
        if !(self.cluster_spread > 0.0) || !(self.background_spread > 0.0) {
            return fail("spreads must be positive");
        }
        if !(0.0..=1.0).contains(&self.novel_mix) {
            return fail("novel_mix must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One few-shot world: an abundant base set, the balanced K-shot set, a
/// test set, the label partition, and the generator's ground-truth
/// novel-to-base affinity.
#[derive(Clone, Debug)]
pub struct Episode {
    pub abundant_base: LabeledSet,
    pub balanced_kshot: LabeledSet,
    pub test: LabeledSet,
    pub partition: LabelPartition,
    pub ground_truth_affinity: SimilarityMatrix,
    /// Per balanced-set sample, 4-d synthetic regression offsets; zero for
    /// background rows, which never enter the regression loss.
    pub regression_targets: Option<Vec<[f64; 4]>>,
}

impl Episode {
    pub fn num_base(&self) -> usize {
        self.partition.base_ids.len()
    }

    pub fn num_novel(&self) -> usize {
        self.partition.novel_ids.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.balanced_kshot.class_names
    }

    pub fn novel_names(&self) -> Vec<String> {
        self.partition.novel_ids.iter().map(|&i| self.class_names()[i].clone()).collect()
    }

    pub fn base_names(&self) -> Vec<String> {
        self.partition.base_ids.iter().map(|&i| self.class_names()[i].clone()).collect()
    }
}

/// A generated episode together with its matching synthetic taxonomy.
#[derive(Clone, Debug)]
pub struct World {
    pub episode: Episode,
    pub taxonomy: Taxonomy,
    pub taxonomy_text: String,
    pub config: WorldConfig,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::nethead::norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn gaussian_around(rng: &mut ChaCha8Rng, mean: &[f64], spread: f64) -> Vec<f64> {
    mean.iter().map(|&m| m + spread * sample_normal(rng)).collect()
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// How far each novel mode is pulled from the class's blend coordinate
/// toward its side's base class. The two modes sit at
/// `mix + MODE_PULL·(1−mix)` and `(1−MODE_PULL)·mix` in the blend
/// coordinate, with weights mix and 1−mix, so the class mean stays at the
/// stated blend for any pull.
const MODE_PULL: f64 = 0.5;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Generates a seeded synthetic world; identical configs produce identical
/// worlds byte for byte.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, EpisodeError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.num_base;
    let n = cfg.num_novel;
    let dim = cfg.dim;

    let base_means: Vec<Vec<f64>> = (0..b).map(|_| unit_vector(&mut rng, dim)).collect();

    // Each novel mean blends the two base means nearest to a random anchor.
    // Individual novel samples side with one of the two source classes
    // (mode weight novel_mix), so the class scatters across both base
    // regions while its mean stays at the stated blend: the structure the
    // association step exists to compact.
    let offset_sigma = 0.1 * cfg.cluster_spread;
    let mut novel_means = Vec::with_capacity(n);
    let mut novel_sources = Vec::with_capacity(n);
    let mut novel_offsets = Vec::with_capacity(n);
    let mut nearest_base = Vec::with_capacity(n);
    for _ in 0..n {
        let anchor = unit_vector(&mut rng, dim);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| {
            distance(&anchor, &base_means[i])
                .partial_cmp(&distance(&anchor, &base_means[j]))
                .unwrap()
        });
        let (first, second) = (order[0], order[1.min(b - 1)]);
        let offset: Vec<f64> = (0..dim).map(|_| offset_sigma * sample_normal(&mut rng)).collect();
        let mean: Vec<f64> = (0..dim)
            .map(|k| {
                cfg.novel_mix * base_means[first][k]
                    + (1.0 - cfg.novel_mix) * base_means[second][k]
                    + offset[k]
            })
            .collect();
        novel_means.push(mean);
        novel_sources.push((first, second));
        novel_offsets.push(offset);
        nearest_base.push(first);
    }

    let mut class_names: Vec<String> = (0..b).map(|i| format!("base{i}")).collect();
    class_names.extend((0..n).map(|i| format!("novel{i}")));
    class_names.push("background".to_string());
    let background_id = b + n;
    let partition = LabelPartition::contiguous(b, n);

    let origin = vec![0.0; dim];
    let novel_sample = |rng: &mut ChaCha8Rng, i: usize, force_primary: bool| -> Vec<f64> {
        let (first, second) = novel_sources[i];
        let primary = if force_primary { false } else { rng.gen_bool(cfg.novel_mix) };
        let t = if primary {
            cfg.novel_mix + MODE_PULL * (1.0 - cfg.novel_mix)
        } else {
            (1.0 - MODE_PULL) * cfg.novel_mix
        };
        (0..dim)
            .map(|k| {
                t * base_means[first][k]
                    + (1.0 - t) * base_means[second][k]
                    + novel_offsets[i][k]
                    + cfg.cluster_spread * sample_normal(rng)
            })
            .collect()
    };

    let mut abundant = LabeledSet::empty(dim, class_names.clone());
    for (i, mean) in base_means.iter().enumerate() {
        for _ in 0..cfg.base_samples_per_class {
            let x = gaussian_around(&mut rng, mean, cfg.cluster_spread);
            abundant.push(x, i);
        }
    }
    for _ in 0..cfg.base_samples_per_class {
        abundant.push(gaussian_around(&mut rng, &origin, cfg.background_spread), background_id);
    }

    let mut balanced = LabeledSet::empty(dim, class_names.clone());
    for (i, mean) in base_means.iter().enumerate() {
        for _ in 0..cfg.k_shot {
            balanced.push(gaussian_around(&mut rng, mean, cfg.cluster_spread), i);
        }
    }
    for i in 0..n {
        for _ in 0..cfg.k_shot {
            let x = novel_sample(&mut rng, i, true);
            balanced.push(x, b + i);
        }
    }
    let bg_factor: usize = std::env::var("FADI_PROBE_BG").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    for _ in 0..cfg.k_shot * (b + n) * bg_factor {
        balanced.push(gaussian_around(&mut rng, &origin, cfg.background_spread), background_id);
    }

    let mut test = LabeledSet::empty(dim, class_names.clone());
    for (i, mean) in base_means.iter().enumerate() {
        for _ in 0..cfg.test_samples_per_class {
            test.push(gaussian_around(&mut rng, mean, cfg.cluster_spread), i);
        }
    }
    for i in 0..n {
        for _ in 0..cfg.test_samples_per_class {
            let x = novel_sample(&mut rng, i, false);
            test.push(x, b + i);
        }
    }
    for _ in 0..cfg.test_samples_per_class {
        test.push(gaussian_around(&mut rng, &origin, cfg.background_spread), background_id);
    }

    // Ground-truth affinity: softmax over base classes of negative
    // mean-to-mean distances, one distribution per novel class.
    let novel_names: Vec<String> = (0..n).map(|i| format!("novel{i}")).collect();
    let base_names: Vec<String> = (0..b).map(|i| format!("base{i}")).collect();
    let mut affinity = Vec::with_capacity(n * b);
    for mean in &novel_means {
        let neg: Vec<f64> = base_means.iter().map(|bm| -distance(mean, bm)).collect();
        affinity.extend(crate::nethead::softmax(&neg));
    }
    let ground_truth_affinity =
        SimilarityMatrix::new(novel_names.clone(), base_names.clone(), affinity)?;

    // Regression targets for foreground balanced samples.
    let mut targets = Vec::with_capacity(balanced.len());
    for &label in &balanced.labels {
        if label == background_id {
            targets.push([0.0; 4]);
        } else {
            targets.push([
                0.3 * sample_normal(&mut rng),
                0.3 * sample_normal(&mut rng),
                0.3 * sample_normal(&mut rng),
                0.3 * sample_normal(&mut rng),
            ]);
        }
    }

    // Matching taxonomy: one family per base class; each novel leaf hangs
    // under the family of its nearest base mean.
    let mut text = String::from("# synthetic world taxonomy\nroot\t\t0\n");
    for name in &base_names {
        let _ = writeln!(text, "family_{name}\troot\t0");
        let _ = writeln!(text, "{name}\tfamily_{name}\t100");
    }
    for (i, name) in novel_names.iter().enumerate() {
        let _ = writeln!(text, "{name}\tfamily_base{}\t10", nearest_base[i]);
    }
    let taxonomy = Taxonomy::parse(&text)?;

    Ok(World {
        episode: Episode {
            abundant_base: abundant,
            balanced_kshot: balanced,
            test,
            partition,
            ground_truth_affinity,
            regression_targets: Some(targets),
        },
        taxonomy,
        taxonomy_text: text,
        config: cfg.clone(),
    })
}

/// A trained model evaluated over an episode: a joint probability vector
/// per feature plus the post-g embedding used for geometry metrics.
pub trait EpisodeModel {
    /// Joint class count including background.
    fn num_classes(&self) -> usize;
    /// Probability vector over the joint label space.
    fn predict(&self, features: &[f64]) -> Vec<f64>;
    /// Post-g feature embedding for compactness/separability.
    fn embed(&self, features: &[f64]) -> Vec<f64>;
    /// Short tag written into feature exports.
    fn stage_label(&self) -> &str {
        "model"
    }
}

/// Evaluation summary over an episode's test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub novel_names: Vec<String>,
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub overall_accuracy: f64,
    /// Row per novel class (in `novel_names` order), column per joint class:
    /// mean predicted distribution over that novel class's test samples.
    pub score_confusion: Vec<Vec<f64>>,
    /// Mean intra-class cosine dispersion `1 − cos(sample, centroid)` of
    /// post-g features, one entry per foreground class in id order.
    pub compactness: Vec<f64>,
    /// Minimum pairwise angular distance between foreground class centroids.
    pub separability: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean with the addends reduced in value order, so the result does not
/// depend on sample order (the evaluation must be shuffle-invariant).
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum::<f64>() / n as f64
}

/// Argmax accuracies split by partition, mean score distributions per novel
/// class, and post-g geometry metrics, all over the test set.
pub fn evaluate(model: &dyn EpisodeModel, episode: &Episode) -> Result<EvalReport, EpisodeError> {
    let part = &episode.partition;
    let classes = part.num_classes();
    if model.num_classes() != classes {
        return Err(EpisodeError::ModelOutputMismatch { got: model.num_classes(), want: classes });
    }
    let test = &episode.test;
    let mut correct = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let novel_ids: Vec<usize> = part.novel_ids.iter().copied().collect();
    let mut novel_probs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); novel_ids.len()];

    let fg: Vec<usize> = part.base_ids.iter().chain(part.novel_ids.iter()).copied().collect();
    let mut centroids: Vec<Vec<f64>> = Vec::new();
    let mut embeds: Vec<Vec<Vec<f64>>> = vec![Vec::new(); fg.len()];

    for (x, label) in test.iter() {
        let probs = model.predict(x);
        debug_assert_eq!(probs.len(), classes);
        let pred = argmax(&probs);
        seen[label] += 1;
        if pred == label {
            correct[label] += 1;
        }
        if let Some(slot) = fg.iter().position(|&i| i == label) {
            embeds[slot].push(model.embed(x));
        }
        if let Some(row) = novel_ids.iter().position(|&i| i == label) {
            novel_probs[row].push(probs);
        }
    }

    let ratio = |ids: &[usize]| -> f64 {
        let c: usize = ids.iter().map(|&i| correct[i]).sum();
        let s: usize = ids.iter().map(|&i| seen[i]).sum();
        if s == 0 {
            0.0
        } else {
            c as f64 / s as f64
        }
    };
    let base_ids: Vec<usize> = part.base_ids.iter().copied().collect();
    let all_ids: Vec<usize> = (0..classes).collect();

    let mut confusion = Vec::with_capacity(novel_ids.len());
    for (probs, &label) in novel_probs.iter().zip(&novel_ids) {
        if probs.is_empty() {
            return Err(EpisodeError::EmptyTestClass(test.class_names[label].clone()));
        }
        let row: Vec<f64> = (0..classes)
            .map(|c| sorted_mean(probs.iter().map(|p| p[c]).collect()))
            .collect();
        confusion.push(row);
    }

    let mut compactness = Vec::with_capacity(fg.len());
    for (slot, &label) in fg.iter().enumerate() {
        let samples = &embeds[slot];
        if samples.is_empty() {
            return Err(EpisodeError::EmptyTestClass(test.class_names[label].clone()));
        }
        let dim = samples[0].len();
        let centroid: Vec<f64> = (0..dim)
            .map(|d| sorted_mean(samples.iter().map(|s| s[d]).collect()))
            .collect();
        let disp = sorted_mean(
            samples.iter().map(|s| 1.0 - crate::nethead::cosine(s, &centroid)).collect(),
        );
        compactness.push(disp);
        centroids.push(centroid);
    }

    let mut separability = std::f64::consts::PI;
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            let cos = crate::nethead::cosine(&centroids[i], &centroids[j]).clamp(-1.0, 1.0);
            separability = separability.min(cos.acos());
        }
    }

    Ok(EvalReport {
        class_names: test.class_names.clone(),
        novel_names: novel_ids.iter().map(|&i| test.class_names[i].clone()).collect(),
        base_accuracy: ratio(&base_ids),
        novel_accuracy: ratio(&novel_ids),
        overall_accuracy: ratio(&all_ids),
        score_confusion: confusion,
        compactness,
        separability,
    })
}

/// Writes post-g features of the test set as `label,stage,f1..fd` CSV for
/// external visualization.
pub fn export_features(
    model: &dyn EpisodeModel,
    episode: &Episode,
    path: &Path,
) -> Result<(), EpisodeError> {
    let mut out = String::new();
    let dim = model.embed(&episode.test.features[0]).len();
    out.push_str("label,stage");
    for i in 0..dim {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    let stage = model.stage_label();
    for (x, label) in episode.test.iter() {
        let e = model.embed(x);
        out.push_str(&episode.test.class_names[label]);
        out.push(',');
        out.push_str(stage);
        for v in &e {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
