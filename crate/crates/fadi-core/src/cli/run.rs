//! `fadi run`: executes the requested stages against a seeded synthetic
//! world, writing the manifest first, then checkpoints, loss traces, and
//! evaluation reports. Later stages always reload their inputs from the
//! checkpoint files, so `--stage all` and stage-by-stage invocations
//! produce identical artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::association::{assign, AssignPolicy, AssociationMap};
use crate::checkpoint::Checkpoint;
use crate::cli::{CliError, RunConfig, RunManifest, SimilaritySource};
use crate::episodes::{evaluate, generate_world, EvalReport, World};
use crate::nethead::LinearLayer;
use crate::pipeline::{
    association_step, base_train, discrimination_step, tfa_baseline_finetune, DualModel,
    StageKind, StageResult,
};
use crate::taxonomy::SimilarityMatrix;

/// Stage selector of `fadi run --stage`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSel {
    Base,
    Associate,
    Discriminate,
    Tfa,
    All,
}

impl FromStr for StageSel {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(StageSel::Base),
            "associate" => Ok(StageSel::Associate),
            "discriminate" => Ok(StageSel::Discriminate),
            "tfa" => Ok(StageSel::Tfa),
            "all" => Ok(StageSel::All),
            other => Err(CliError::usage(format!(
                "unknown stage {other:?} (expected base|associate|discriminate|tfa|all)"
            ))),
        }
    }
}

impl StageSel {
    fn stages(self) -> Vec<StageSel> {
        match self {
            StageSel::All => vec![StageSel::Base, StageSel::Associate, StageSel::Discriminate],
            s => vec![s],
        }
    }

    fn name(self) -> &'static str {
        match self {
            StageSel::Base => "base",
            StageSel::Associate => "associate",
            StageSel::Discriminate => "discriminate",
            StageSel::Tfa => "tfa",
            StageSel::All => "all",
        }
    }
}

struct RunPaths {
    dir: PathBuf,
}

impl RunPaths {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn checkpoint(&self, stage: StageSel) -> PathBuf {
        match stage {
            StageSel::Base => self.file("checkpoint_base.json"),
            StageSel::Associate => self.file("checkpoint_assoc.json"),
            StageSel::Discriminate => self.file("checkpoint_discrim.json"),
            StageSel::Tfa => self.file("checkpoint_tfa.json"),
            StageSel::All => unreachable!("no checkpoint for the all selector"),
        }
    }

    fn loss_csv(&self, stage: StageSel) -> PathBuf {
        self.file(&format!("loss_{}.csv", stage.name()))
    }
}

fn write_loss_csv(path: &Path, result: &StageResult) -> Result<(), CliError> {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in result.losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!(
            "missing upstream checkpoint {}; run the earlier stage first",
            path.display()
        )));
    }
    Ok(Checkpoint::from_json(&std::fs::read_to_string(path)?)?)
}

fn similarity_for(cfg: &RunConfig, world: &World) -> Result<SimilarityMatrix, CliError> {
    match cfg.similarity_source {
        SimilaritySource::Affinity => Ok(world.episode.ground_truth_affinity.clone()),
        SimilaritySource::Taxonomy => Ok(world
            .taxonomy
            .build_similarity_matrix(&world.episode.novel_names(), &world.episode.base_names())?),
    }
}

fn log_stage(result: &StageResult) {
    let last = result.losses.last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "[{}] {} iterations in {:.2?}, final loss {:.6}",
        result.stage,
        result.losses.len(),
        result.wall,
        last
    );
}

/// Runs the selected stage(s). Returns the path of the final report when
/// one was produced.
pub fn cmd_run(
    cfg: &RunConfig,
    sel: StageSel,
    out_override: Option<&Path>,
) -> Result<Option<PathBuf>, CliError> {
    let paths = RunPaths {
        dir: out_override.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.out_dir)),
    };
    std::fs::create_dir_all(&paths.dir)?;

    let stages = sel.stages();
    let mut outputs = BTreeMap::new();
    outputs.insert("manifest".to_string(), paths.file("manifest.json").display().to_string());
    outputs.insert("taxonomy".to_string(), paths.file("taxonomy.tsv").display().to_string());
    for &s in &stages {
        outputs.insert(
            format!("checkpoint_{}", s.name()),
            paths.checkpoint(s).display().to_string(),
        );
        outputs.insert(format!("loss_{}", s.name()), paths.loss_csv(s).display().to_string());
    }
    if stages.contains(&StageSel::Associate) {
        outputs.insert("association".to_string(), paths.file("association.json").display().to_string());
    }
    if stages.contains(&StageSel::Discriminate) {
        outputs.insert("report".to_string(), paths.file("report.json").display().to_string());
    }
    if stages.contains(&StageSel::Tfa) {
        outputs.insert("report_tfa".to_string(), paths.file("report_tfa.json").display().to_string());
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        stages: stages.iter().map(|s| s.name().to_string()).collect(),
        outputs,
        config: cfg.clone(),
    };
    std::fs::write(paths.file("manifest.json"), manifest.to_json())?;

    let world = generate_world(&cfg.resolved_world())?;
    std::fs::write(paths.file("taxonomy.tsv"), &world.taxonomy_text)?;

    let mut report_path = None;
    for &stage in &stages {
        match stage {
            StageSel::Base => {
                let (head, result) =
                    base_train(&world.episode, cfg.hidden_dim, cfg.tau, &cfg.stage_sgd(StageKind::BaseTrain))?;
                std::fs::write(paths.checkpoint(stage), Checkpoint::from_pretrained(&head).to_json())?;
                write_loss_csv(&paths.loss_csv(stage), &result)?;
                log_stage(&result);
            }
            StageSel::Associate => {
                let pre = load_checkpoint(&paths.checkpoint(StageSel::Base))?.to_pretrained()?;
                let sim = similarity_for(cfg, &world)?;
                let policy: AssignPolicy = cfg.policy.parse().map_err(
                    |e: crate::association::AssociationError| {
                        CliError::data(format!("config policy: {e}"))
                    },
                )?;
                let map = assign(&sim, &policy)?;
                let (w_asso, result) = association_step(
                    &pre,
                    &world.episode,
                    &map,
                    &cfg.stage_sgd(StageKind::Associate),
                    cfg.assoc_warm_start,
                )?;
                std::fs::write(paths.file("association.json"), map.to_json())?;
                std::fs::write(
                    paths.checkpoint(stage),
                    Checkpoint::from_association(&pre, &w_asso, &map).to_json(),
                )?;
                write_loss_csv(&paths.loss_csv(stage), &result)?;
                log_stage(&result);
            }
            StageSel::Discriminate => {
                let pre = load_checkpoint(&paths.checkpoint(StageSel::Base))?.to_pretrained()?;
                let (w_asso, map): (LinearLayer, AssociationMap) =
                    load_checkpoint(&paths.checkpoint(StageSel::Associate))?.to_association()?;
                let (head, regressor, result) = discrimination_step(
                    &pre,
                    &w_asso,
                    &map,
                    &world.episode,
                    &cfg.margin_config(),
                    &cfg.stage_sgd(StageKind::Discriminate),
                    &cfg.discrimination_options(),
                )?;
                std::fs::write(
                    paths.checkpoint(stage),
                    Checkpoint::from_dual(&head, regressor.as_ref(), &pre.class_names, &map).to_json(),
                )?;
                write_loss_csv(&paths.loss_csv(stage), &result)?;
                log_stage(&result);
                let report = evaluate(&DualModel { head: &head }, &world.episode)?;
                let path = paths.file("report.json");
                write_report(&path, &report)?;
                report_path = Some(path);
            }
            StageSel::Tfa => {
                let pre = load_checkpoint(&paths.checkpoint(StageSel::Base))?.to_pretrained()?;
                let (head, result) =
                    tfa_baseline_finetune(&pre, &world.episode, &cfg.stage_sgd(StageKind::TfaFinetune))?;
                std::fs::write(paths.checkpoint(stage), Checkpoint::from_tfa(&head).to_json())?;
                write_loss_csv(&paths.loss_csv(stage), &result)?;
                log_stage(&result);
                let report = evaluate(&head, &world.episode)?;
                let path = paths.file("report_tfa.json");
                write_report(&path, &report)?;
                report_path = Some(path);
            }
            StageSel::All => unreachable!(),
        }
    }

    Ok(report_path)
}
