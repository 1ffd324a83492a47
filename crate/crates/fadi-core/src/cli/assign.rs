//! `fadi assign`: association JSON from a similarity CSV or a taxonomy
//! file plus class-name lists.

use std::path::PathBuf;

use crate::association::{assign, AssignPolicy};
use crate::cli::CliError;
use crate::taxonomy::{SimilarityMatrix, Taxonomy};

#[derive(Clone, Debug)]
pub struct AssignArgs {
    pub sim: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub novel: Option<String>,
    pub base: Option<String>,
    pub policy: String,
}

fn split_names(arg: &str) -> Vec<String> {
    arg.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Resolves the similarity source, applies the policy, and returns the
/// association JSON.
pub fn cmd_assign(args: &AssignArgs) -> Result<String, CliError> {
    let policy: AssignPolicy = args.policy.parse()?;
    let sim = match (&args.sim, &args.taxonomy) {
        (Some(csv), None) => {
            let text = std::fs::read_to_string(csv)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", csv.display())))?;
            SimilarityMatrix::from_csv(&text)?
        }
        (None, Some(tax)) => {
            let (novel, base) = match (&args.novel, &args.base) {
                (Some(n), Some(b)) => (split_names(n), split_names(b)),
                _ => {
                    return Err(CliError::usage(
                        "--taxonomy requires --novel and --base name lists",
                    ))
                }
            };
            if novel.is_empty() || base.is_empty() {
                return Err(CliError::usage("--novel and --base must name at least one class"));
            }
            let text = std::fs::read_to_string(tax)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", tax.display())))?;
            Taxonomy::parse(&text)?.build_similarity_matrix(&novel, &base)?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::usage("--sim and --taxonomy are mutually exclusive"))
        }
        (None, None) => {
            return Err(CliError::usage("one of --sim or --taxonomy is required"))
        }
    };
    let map = assign(&sim, &policy)?;
    Ok(map.to_json())
}
