use std::fs;
use std::path::Path;

use cdrloc::eval::Variant;
use cdrloc::pipeline::{self, EstimateOptions, PathsConfig, PipelineConfig, PipelineError};

fn small_config(dir: &Path, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        paths: PathsConfig::under(dir.join("data"), dir.join("out")),
        ..PipelineConfig::default()
    };
    cfg.sim.seed = seed;
    cfg.sim.n_users = 3;
    cfg.sim.duration_s = 20_000.0;
    cfg.sim.n_observations = 800;
    cfg
}

fn output_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = ["data", "out"]
        .iter()
        .flat_map(|sub| fs::read_dir(dir.join(sub)).unwrap())
        .map(|e| e.unwrap().path())
        .map(|p| {
            let name = p.strip_prefix(dir).unwrap().display().to_string();
            (name, fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_all_is_byte_identical_across_runs_and_job_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = small_config(a.path(), 5);
    let mut cfg_b = small_config(b.path(), 5);
    cfg_b.jobs = 1;
    let report = pipeline::run_all(&cfg_a, EstimateOptions::default()).unwrap();
    pipeline::run_all(&cfg_b, EstimateOptions::default()).unwrap();
    let fa = output_files(a.path());
    assert_eq!(fa.len(), 14);
    assert_eq!(fa, output_files(b.path()));
    assert_eq!(report.variants.len(), 4);
    assert_eq!(report.rmse.iter().map(|r| r.variant).collect::<Vec<_>>(), Variant::ALL.to_vec());
}

#[test]
fn different_seeds_differ() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::cmd_simulate(&small_config(a.path(), 1)).unwrap();
    pipeline::cmd_simulate(&small_config(b.path(), 2)).unwrap();
    assert_ne!(
        fs::read(a.path().join("data/cdr.csv")).unwrap(),
        fs::read(b.path().join("data/cdr.csv")).unwrap()
    );
}

#[test]
fn estimate_needs_extensions_unless_no_opt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    pipeline::cmd_simulate(&cfg).unwrap();
    let err = pipeline::cmd_estimate(&cfg, EstimateOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingInput(_)));
    assert_eq!(err.exit_code(), 1);
    let n = pipeline::cmd_estimate(&cfg, EstimateOptions { no_opt: true, filtered: false }).unwrap();
    assert!(n > 0);
}

#[test]
fn no_opt_ignores_extensions_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    pipeline::cmd_simulate(&cfg).unwrap();
    let est = cfg.paths.output(pipeline::ESTIMATES_FILE);
    let opts = EstimateOptions { no_opt: true, filtered: false };
    pipeline::cmd_estimate(&cfg, opts).unwrap();
    let bare = fs::read(&est).unwrap();
    pipeline::cmd_optimize(&cfg).unwrap();
    pipeline::cmd_estimate(&cfg, opts).unwrap();
    assert_eq!(bare, fs::read(&est).unwrap());
    pipeline::cmd_estimate(&cfg, EstimateOptions::default()).unwrap();
    assert_ne!(bare, fs::read(&est).unwrap());
}

#[test]
fn filtered_flag_switches_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 4);
    pipeline::cmd_simulate(&cfg).unwrap();
    let est = cfg.paths.output(pipeline::ESTIMATES_FILE);
    pipeline::cmd_estimate(&cfg, EstimateOptions { no_opt: true, filtered: false }).unwrap();
    let smoothed = pipeline::parse_estimates(fs::File::open(&est).unwrap()).unwrap();
    pipeline::cmd_estimate(&cfg, EstimateOptions { no_opt: true, filtered: true }).unwrap();
    let filtered = pipeline::parse_estimates(fs::File::open(&est).unwrap()).unwrap();
    assert_eq!(smoothed.len(), filtered.len());
    // probabilities are written either way; positions and labels follow the flag
    assert!(smoothed.iter().zip(&filtered).all(|(s, f)| s.p_stay_filtered == f.p_stay_filtered));
    assert!(smoothed.iter().zip(&filtered).any(|(s, f)| s.position != f.position));
    let last = |rows: &[pipeline::EstimateRow]| rows.iter().rev().find(|r| r.imsi == rows[0].imsi).cloned().unwrap();
    assert_eq!(last(&smoothed).position, last(&filtered).position);
}

#[test]
fn empty_cdr_gives_empty_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 6);
    pipeline::cmd_simulate(&cfg).unwrap();
    let opts = EstimateOptions { no_opt: true, filtered: false };
    for content in ["imsi,imei,cell_id,timestamp,event\n", ""] {
        fs::write(&cfg.paths.cdr, content).unwrap();
        assert_eq!(pipeline::cmd_estimate(&cfg, opts).unwrap(), 0);
        let out = cfg.paths.output(pipeline::ESTIMATES_FILE);
        assert!(pipeline::parse_estimates(fs::File::open(out).unwrap()).unwrap().is_empty());
    }
}

#[test]
fn missing_observations_mean_zero_extensions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 7);
    pipeline::cmd_simulate(&cfg).unwrap();
    fs::remove_file(&cfg.paths.observations).unwrap();
    let report = pipeline::cmd_optimize(&cfg).unwrap();
    assert_eq!(report.final_penalty, 0.0);
    let ext = pipeline::parse_extensions(fs::File::open(cfg.paths.output(pipeline::EXTENSIONS_FILE)).unwrap()).unwrap();
    assert!(ext.values.iter().all(|v| *v == 0.0));
}

#[test]
fn matching_leaves_stay_rows_unmatched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 8);
    pipeline::cmd_simulate(&cfg).unwrap();
    pipeline::cmd_estimate(&cfg, EstimateOptions { no_opt: true, filtered: false }).unwrap();
    let rows = pipeline::parse_estimates(fs::File::open(cfg.paths.output(pipeline::ESTIMATES_FILE)).unwrap()).unwrap();
    let matches = pipeline::cmd_match(&cfg).unwrap();
    assert_eq!(rows.len(), matches.len());
    for (r, m) in rows.iter().zip(&matches) {
        if r.label == cdrloc::ingest::EpisodeLabel::Stay {
            assert_eq!(m.status, cdrloc::mapmatch::MatchStatus::Unmatched);
        }
    }
    let text = fs::read_to_string(cfg.paths.output(pipeline::MATCHED_FILE)).unwrap();
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn evaluate_reports_all_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 9);
    let report = pipeline::run_all(&cfg, EstimateOptions::default()).unwrap();
    for v in Variant::ALL {
        let r = report.variant(v).unwrap();
        assert!(r.pairs > 0);
        if let Some(s) = &r.move_error {
            assert!(((s.rmse_m.powi(2) - (s.mean_m.powi(2) + s.std_m.powi(2))) / s.rmse_m.powi(2)).abs() < 1e-9);
        }
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.paths.output(pipeline::EVAL_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(json["rmse"][2]["variant"], "No-opt+MM");
}

#[test]
fn config_errors_name_the_field() {
    let err = pipeline::load_config(None, &["sim.cell_pitch_m=\"wide\"".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("sim.cell_pitch_m"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"skf": {"threshold": 0.7}, "jobs": 2}"#).unwrap();
    let cfg = pipeline::load_config(Some(&path), &["jobs=3".into()]).unwrap();
    assert_eq!(cfg.skf.threshold, 0.7);
    assert_eq!(cfg.jobs, 3);
    assert_eq!(cfg.coverage.weight, 10.0);
}
