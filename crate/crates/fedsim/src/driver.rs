//! Orchestration: run one experiment, a sweep grid, or a landscape
//! probe, and lay the artifacts out on disk.
//!
//! Directory resolution: an explicit override wins, otherwise the
//! config's `output_dir` is joined onto the `FEDSIM_OUT` root (current
//! directory when unset). Sweeps give each cell a subdirectory named by
//! its label plus a top-level table.

use std::path::{Path, PathBuf};

use crate::config::{serialize_config, ExperimentConfig, SweepSpec};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, ExperimentOutcome, FederationState, RunStatus};
use crate::metrics::landscape_slice;
use crate::numkit::{RngStream, StreamPurpose};
use crate::report;

pub const OUTPUT_ROOT_ENV: &str = "FEDSIM_OUT";

/// `override > $FEDSIM_OUT/<output_dir> > ./<output_dir>`.
pub fn resolve_out_dir(cfg_output_dir: &str, explicit: Option<&Path>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    root.join(cfg_output_dir)
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub outcome: ExperimentOutcome,
}

/// Runs the experiment and writes `rounds.csv`, `summary.csv`, a
/// normalized `config.toml`, and optionally `model.bin` into `dir`.
/// A diverged run still returns `Ok` with everything it produced; the
/// caller decides whether that is fatal.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    report::write_text(&dir.join("config.toml"), &serialize_config(cfg)?)?;

    let outcome = run_experiment(cfg)?;
    report::write_text(&dir.join("rounds.csv"), &report::rounds_csv(&outcome.records))?;
    let summary = report::summarize(&outcome.records, &outcome.status);
    report::write_text(&dir.join("summary.csv"), &report::summary_csv(&summary))?;
    if cfg.output.save_model {
        report::write_model(&dir.join("model.bin"), &outcome.final_model)?;
    }
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        outcome,
    })
}

pub struct SweepArtifacts {
    pub dir: PathBuf,
    /// (label, result) per cell, in expansion order.
    pub cells: Vec<(String, report::CellResult)>,
}

/// Runs every cell, one subdirectory each, then writes `sweep.csv`.
/// A failing cell is recorded in the table and the sweep continues.
pub fn sweep_to_dir(spec: &SweepSpec, dir: &Path) -> Result<SweepArtifacts> {
    let cells = spec.cells()?;
    std::fs::create_dir_all(dir)?;
    let mut results = Vec::with_capacity(cells.len());
    for cell in &cells {
        let cell_dir = dir.join(&cell.label);
        let result = match run_to_dir(&cell.config, &cell_dir) {
            Ok(artifacts) => report::CellResult::Finished(report::summarize(
                &artifacts.outcome.records,
                &artifacts.outcome.status,
            )),
            Err(e) => report::CellResult::Failed(e.to_string()),
        };
        results.push((cell.label.clone(), result));
    }
    report::write_text(&dir.join("sweep.csv"), &report::sweep_csv(&results))?;
    Ok(SweepArtifacts {
        dir: dir.to_path_buf(),
        cells: results,
    })
}

/// Probes the loss surface around a model and writes `landscape.csv`.
/// `center` is a model dump from a previous run; without one the slice
/// is taken at the config's initial parameters.
pub fn landscape_to_dir(
    cfg: &ExperimentConfig,
    center: Option<&Path>,
    dir: &Path,
) -> Result<PathBuf> {
    let state = FederationState::from_config(cfg)?;
    let w = match center {
        Some(path) => {
            let w = report::read_model(path)?;
            if w.len() != state.model().param_count() {
                return Err(Error::DimensionMismatch {
                    context: "landscape center",
                    expected: state.model().param_count(),
                    got: w.len(),
                });
            }
            w
        }
        None => state.global_model().clone(),
    };
    let slice = landscape_slice(
        state.model(),
        &w,
        state.train_data(),
        cfg.landscape.mode,
        cfg.landscape.extent,
        cfg.landscape.resolution,
        &RngStream::global(cfg.seed, StreamPurpose::Landscape),
    )?;
    std::fs::create_dir_all(dir)?;
    let path = dir.join("landscape.csv");
    report::write_text(&path, &report::landscape_csv(&slice))?;
    Ok(path)
}

/// Exit code contract: 0 success, 2 config problem, 3 divergence,
/// 1 anything else.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::ConfigParse(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

pub fn status_exit_code(status: &RunStatus) -> i32 {
    match status {
        RunStatus::Completed => 0,
        RunStatus::Diverged { .. } => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config_str, parse_sweep_str};

    fn tiny_cfg() -> ExperimentConfig {
        parse_config_str(
            r#"
            rounds = 2
            num_clients = 3

            [dataset]
            num_classes = 3
            per_class_train = 24
            per_class_test = 9
            input_dim = 4

            [model]
            kind = "logistic"

            [hyper]
            local_steps = 2
            batch_size = 8
        "#,
        )
        .unwrap()
    }

    #[test]
    fn run_writes_the_expected_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.output.save_model = true;
        let artifacts = run_to_dir(&cfg, dir.path()).unwrap();
        assert_eq!(artifacts.outcome.records.len(), 2);
        for name in ["rounds.csv", "summary.csv", "config.toml", "model.bin"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let w = report::read_model(&dir.path().join("model.bin")).unwrap();
        assert_eq!(w, artifacts.outcome.final_model);
        // The normalized config reproduces the run settings.
        let reread = crate::config::parse_config(&dir.path().join("config.toml")).unwrap();
        assert_eq!(reread, cfg);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = tiny_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_to_dir(&cfg, a.path()).unwrap();
        run_to_dir(&cfg, b.path()).unwrap();
        for name in ["rounds.csv", "summary.csv", "config.toml"] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
    }

    #[test]
    fn zero_round_run_yields_header_only_csv() {
        let mut cfg = tiny_cfg();
        cfg.rounds = 0;
        let dir = tempfile::tempdir().unwrap();
        let artifacts = run_to_dir(&cfg, dir.path()).unwrap();
        assert_eq!(artifacts.outcome.status, RunStatus::Completed);
        let text = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn sweep_lays_out_cells_and_table() {
        let mut spec = parse_sweep_str("[axes]\nseed = [0, 1]").unwrap();
        spec.base = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let artifacts = sweep_to_dir(&spec, dir.path()).unwrap();
        assert_eq!(artifacts.cells.len(), 2);
        assert!(dir.path().join("sweep.csv").exists());
        for label in ["seed=0", "seed=1"] {
            assert!(dir.path().join(label).join("rounds.csv").exists());
        }
        let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(table.lines().count(), 4);

        // Table content is reconstructible from the per-cell summaries.
        for (label, result) in &artifacts.cells {
            let cell_summary =
                std::fs::read_to_string(dir.path().join(label).join("summary.csv")).unwrap();
            let row = cell_summary.lines().nth(2).unwrap();
            match result {
                report::CellResult::Finished(_) => {
                    assert!(table.contains(&format!("{label},{row}")));
                }
                report::CellResult::Failed(_) => panic!("cell should finish"),
            }
        }
    }

    #[test]
    fn sweep_records_failed_cells_and_continues() {
        // Point one cell at a missing IDX file via a bad base override:
        // axes keep the good cell alive.
        let mut spec = parse_sweep_str("[axes]\nseed = [0]").unwrap();
        spec.base = tiny_cfg();
        let mut bad = spec.clone();
        bad.base.dataset.source = crate::config::DataSource::Idx;
        bad.base.dataset.train_images = Some("/nonexistent/images".into());
        bad.base.dataset.train_labels = Some("/nonexistent/labels".into());
        bad.base.dataset.test_images = Some("/nonexistent/images".into());
        bad.base.dataset.test_labels = Some("/nonexistent/labels".into());
        let dir = tempfile::tempdir().unwrap();
        let artifacts = sweep_to_dir(&bad, dir.path()).unwrap();
        assert_eq!(artifacts.cells.len(), 1);
        assert!(matches!(artifacts.cells[0].1, report::CellResult::Failed(_)));
        let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(table.contains("error"));
    }

    #[test]
    fn landscape_probes_a_saved_center() {
        let mut cfg = tiny_cfg();
        cfg.output.save_model = true;
        cfg.landscape.resolution = 3;
        cfg.landscape.extent = 0.5;
        cfg.landscape.mode = crate::metrics::SliceMode::OneD;
        let run_dir = tempfile::tempdir().unwrap();
        run_to_dir(&cfg, run_dir.path()).unwrap();

        let land_dir = tempfile::tempdir().unwrap();
        let path = landscape_to_dir(
            &cfg,
            Some(&run_dir.path().join("model.bin")),
            land_dir.path(),
        )
        .unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("# schema: fedsim-landscape-v1\n"));
        assert_eq!(text.lines().count(), 5 + 3);

        // Center defaults to the config's initial parameters.
        let fresh = tempfile::tempdir().unwrap();
        landscape_to_dir(&cfg, None, fresh.path()).unwrap();
        assert!(fresh.path().join("landscape.csv").exists());
    }

    #[test]
    fn landscape_rejects_mismatched_centers() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("wrong.bin");
        report::write_model(&bad, &crate::numkit::ParamVec::zeros(3)).unwrap();
        let err = landscape_to_dir(&cfg, Some(&bad), dir.path()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn out_dir_resolution_precedence() {
        // No env manipulation here (tests share a process); explicit
        // override and bare default are enough to pin the contract.
        let explicit = resolve_out_dir("runs", Some(Path::new("/tmp/x")));
        assert_eq!(explicit, PathBuf::from("/tmp/x"));
        if std::env::var_os(OUTPUT_ROOT_ENV).is_none() {
            assert_eq!(resolve_out_dir("runs", None), PathBuf::from("./runs"));
        }
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code_for(&Error::ConfigParse("x".into())), 2);
        assert_eq!(
            exit_code_for(&Error::Config {
                key: "hyper.rho".into(),
                reason: "bad".into()
            }),
            2
        );
        assert_eq!(
            exit_code_for(&Error::Divergence {
                round: 3,
                reason: "boom".into()
            }),
            3
        );
        assert_eq!(exit_code_for(&Error::Empty("x")), 1);
        assert_eq!(status_exit_code(&RunStatus::Completed), 0);
        assert_eq!(
            status_exit_code(&RunStatus::Diverged {
                round: 0,
                reason: String::new()
            }),
            3
        );
    }
}
