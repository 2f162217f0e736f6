//! Library side of the `forge` binary: config resolution, review service
//! setup and the review HTTP router.

pub mod server;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use forge_core::pipeline::{files, PipelineConfig};
use forge_core::record::TaskRecord;
use forge_core::review::{
    build_report, pair_by_document, Judgment, PairwiseJudgment, ReviewConfig, ReviewMode,
    ReviewReport, ReviewService, JUDGMENTS_FILE, PAIRWISE_FILE,
};
use forge_core::util::read_jsonl;

/// Config file looked up inside a run directory when `--config` is absent.
pub const RUN_CONFIG: &str = "config.toml";

/// Loads the pipeline config and the directory its relative paths resolve
/// against: `explicit` if given, else `<run>/config.toml`, else defaults.
pub fn resolve_config(run: &Path, explicit: Option<&Path>) -> Result<(PipelineConfig, PathBuf)> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => Some(run.join(RUN_CONFIG)).filter(|p| p.exists()),
    };
    match path {
        Some(p) => {
            let config = PipelineConfig::load(&p)?;
            let base = p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            Ok((config, base))
        }
        None => Ok((PipelineConfig::default(), run.to_path_buf())),
    }
}

fn load_records(path: &Path) -> Result<Vec<TaskRecord>> {
    read_jsonl(path).with_context(|| format!("cannot read dataset {}", path.display()))
}

/// Single-judgment service over a dataset, `<run>/retained.jsonl` by default.
pub fn single_service(dataset: &Path, config: ReviewConfig) -> Result<ReviewService> {
    let records = load_records(dataset)?;
    if records.is_empty() {
        bail!("{} holds no records", dataset.display());
    }
    Ok(ReviewService::single(records, config)?)
}

/// Pairwise service over two systems' datasets joined on source document.
pub fn pairwise_service(
    (name_a, path_a): (&str, &Path),
    (name_b, path_b): (&str, &Path),
    config: ReviewConfig,
) -> Result<ReviewService> {
    if name_a == name_b {
        bail!("the two systems need distinct names");
    }
    let (a, b) = (load_records(path_a)?, load_records(path_b)?);
    let pairs = pair_by_document(name_a, &a, name_b, &b);
    if pairs.is_empty() {
        bail!(
            "{} and {} share no source documents",
            path_a.display(),
            path_b.display()
        );
    }
    Ok(ReviewService::pairwise(pairs, config)?)
}

/// Default dataset for single-judgment review.
pub fn default_dataset(run: &Path) -> PathBuf {
    run.join(files::RETAINED)
}

/// Default judgment store for a run.
pub fn default_store(run: &Path) -> PathBuf {
    run.join("review")
}

/// Rebuilds the report from a judgment store on disk.
pub fn report_from_store(store: &Path) -> Result<ReviewReport> {
    let read = |name: &str| -> Result<Option<PathBuf>> {
        let p = store.join(name);
        Ok(p.exists().then_some(p))
    };
    let judgments: Vec<Judgment> = match read(JUDGMENTS_FILE)? {
        Some(p) => read_jsonl(&p).with_context(|| format!("cannot read {}", p.display()))?,
        None => Vec::new(),
    };
    let pairwise: Vec<PairwiseJudgment> = match read(PAIRWISE_FILE)? {
        Some(p) => read_jsonl(&p).with_context(|| format!("cannot read {}", p.display()))?,
        None => Vec::new(),
    };
    if judgments.is_empty() && pairwise.is_empty() {
        bail!("no judgments under {}", store.display());
    }
    let mut systems: Vec<String> = pairwise
        .iter()
        .flat_map(|j| [j.left_system.clone(), j.right_system.clone()])
        .flatten()
        .collect();
    systems.sort();
    systems.dedup();
    let mode = if judgments.is_empty() {
        ReviewMode::Pairwise
    } else {
        ReviewMode::Single
    };
    Ok(build_report(mode, &judgments, &pairwise, &systems))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_run_config_falls_back_to_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let (config, base) = resolve_config(dir.path(), None).unwrap();
        assert_eq!(config, PipelineConfig::default());
        assert_eq!(base, dir.path());
    }

    #[test]
    fn run_config_is_picked_up() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(RUN_CONFIG), "seed = 7\n").unwrap();
        let (config, _) = resolve_config(dir.path(), None).unwrap();
        assert_eq!(config.seed, 7);
    }

    #[test]
    fn empty_store_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report_from_store(dir.path()).is_err());
    }
}
