//! `fadi sweep`: seeded grid search over margin weights, shot count, and
//! assign policy. One CSV row per (cell, seed) plus per-cell mean rows.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::association::{assign, AssignPolicy};
use crate::cli::{CliError, RunConfig, SimilaritySource};
use crate::episodes::{evaluate, generate_world};
use crate::losses::MarginConfig;
use crate::pipeline::{
    association_step, base_train, discrimination_step, tfa_baseline_finetune, DualModel, StageKind,
};

/// Grid axes; absent axes keep the base config's value.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub policy: Option<Vec<String>>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<SweepGrid, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read grid {}: {e}", path.display())))?;
        let grid: SweepGrid = serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("invalid grid {}: {e}", path.display())))?;
        Ok(grid)
    }

    fn validate(&self) -> Result<(), CliError> {
        let present = self.alpha.is_some()
            || self.beta.is_some()
            || self.gamma.is_some()
            || self.k.is_some()
            || self.policy.is_some();
        let any_empty = self.alpha.as_deref().is_some_and(<[f64]>::is_empty)
            || self.beta.as_deref().is_some_and(<[f64]>::is_empty)
            || self.gamma.as_deref().is_some_and(<[f64]>::is_empty)
            || self.k.as_deref().is_some_and(<[usize]>::is_empty)
            || self.policy.as_deref().is_some_and(<[String]>::is_empty);
        if !present || any_empty {
            return Err(CliError::data("empty sweep grid"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Cell {
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    k: Option<usize>,
    policy: Option<String>,
}

fn cells_of(grid: &SweepGrid) -> Vec<Cell> {
    fn axis<T: Clone>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
        match v {
            Some(values) => values.iter().cloned().map(Some).collect(),
            None => vec![None],
        }
    }
    let mut cells = Vec::new();
    for a in axis(&grid.alpha) {
        for b in axis(&grid.beta) {
            for g in axis(&grid.gamma) {
                for k in axis(&grid.k) {
                    for p in axis(&grid.policy) {
                        cells.push(Cell {
                            alpha: a,
                            beta: b,
                            gamma: g,
                            k,
                            policy: p.clone(),
                        });
                    }
                }
            }
        }
    }
    cells
}

struct CellMetrics {
    base_acc: f64,
    novel_acc: f64,
    overall_acc: f64,
    tfa_novel_acc: f64,
}

fn run_cell(cfg: &RunConfig, cell: &Cell, seed: u64) -> Result<(MarginConfig, usize, String, CellMetrics), CliError> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    if let Some(k) = cell.k {
        cfg.world.k_shot = k;
    }
    if let Some(p) = &cell.policy {
        cfg.policy = p.clone();
    }
    let mut margin = cfg.margin_config();
    if let Some(a) = cell.alpha {
        margin.alpha = a;
    }
    if let Some(b) = cell.beta {
        margin.beta = b;
    }
    if let Some(g) = cell.gamma {
        margin.gamma = g;
    }

    let world = generate_world(&cfg.resolved_world())?;
    let (pre, _) = base_train(&world.episode, cfg.hidden_dim, cfg.tau, &cfg.stage_sgd(StageKind::BaseTrain))?;
    let sim = match cfg.similarity_source {
        SimilaritySource::Affinity => world.episode.ground_truth_affinity.clone(),
        SimilaritySource::Taxonomy => world
            .taxonomy
            .build_similarity_matrix(&world.episode.novel_names(), &world.episode.base_names())?,
    };
    let policy: AssignPolicy = cfg
        .policy
        .parse()
        .map_err(|e: crate::association::AssociationError| CliError::data(format!("policy: {e}")))?;
    let map = assign(&sim, &policy)?;
    let (w_asso, _) = association_step(
        &pre,
        &world.episode,
        &map,
        &cfg.stage_sgd(StageKind::Associate),
        cfg.assoc_warm_start,
    )?;
    let (head, _, _) = discrimination_step(
        &pre,
        &w_asso,
        &map,
        &world.episode,
        &margin,
        &cfg.stage_sgd(StageKind::Discriminate),
        &cfg.discrimination_options(),
    )?;
    let fadi = evaluate(&DualModel { head: &head }, &world.episode)?;
    let (tfa, _) = tfa_baseline_finetune(&pre, &world.episode, &cfg.stage_sgd(StageKind::TfaFinetune))?;
    let tfa_report = evaluate(&tfa, &world.episode)?;

    Ok((
        margin,
        cfg.world.k_shot,
        cfg.policy.clone(),
        CellMetrics {
            base_acc: fadi.base_accuracy,
            novel_acc: fadi.novel_accuracy,
            overall_acc: fadi.overall_accuracy,
            tfa_novel_acc: tfa_report.novel_accuracy,
        },
    ))
}

/// Executes the sweep and writes the CSV to `out` (or stdout when absent).
pub fn cmd_sweep(
    cfg: &RunConfig,
    grid: &SweepGrid,
    seeds: usize,
    out: Option<&Path>,
) -> Result<String, CliError> {
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    grid.validate()?;
    let cells = cells_of(grid);

    let mut csv = String::from(
        "cell,alpha,beta,gamma,k,policy,seed,base_acc,novel_acc,overall_acc,tfa_novel_acc\n",
    );
    let mut aggregates = String::new();
    for (ci, cell) in cells.iter().enumerate() {
        let mut sums = [0.0f64; 4];
        let mut effective: Option<(MarginConfig, usize, String)> = None;
        for s in 0..seeds {
            let seed = cfg.seed.wrapping_add(s as u64);
            let (margin, k, policy, m) = run_cell(cfg, cell, seed)?;
            let _ = writeln!(
                csv,
                "{ci},{},{},{},{k},{policy},{seed},{},{},{},{}",
                margin.alpha, margin.beta, margin.gamma, m.base_acc, m.novel_acc, m.overall_acc, m.tfa_novel_acc
            );
            sums[0] += m.base_acc;
            sums[1] += m.novel_acc;
            sums[2] += m.overall_acc;
            sums[3] += m.tfa_novel_acc;
            effective = Some((margin, k, policy));
        }
        let (margin, k, policy) = effective.expect("seeds >= 1");
        let n = seeds as f64;
        let _ = writeln!(
            aggregates,
            "{ci},{},{},{},{k},{policy},mean,{},{},{},{}",
            margin.alpha,
            margin.beta,
            margin.gamma,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        );
    }
    csv.push_str(&aggregates);

    match out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(csv)
}
