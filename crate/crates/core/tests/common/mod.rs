#![allow(dead_code)]

use std::path::{Path, PathBuf};

use personaeval::backends::{BackendSuite, BackendsConfig};
use personaeval::config::EvalConfig;
use personaeval::data::{load_manifest, Manifest};
use personaeval::eval::run_eval;
use personaeval::report::MetricReport;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

pub fn golden_manifest() -> Manifest {
    load_manifest(golden_dir().join("manifest.jsonl")).unwrap()
}

pub fn golden_config() -> EvalConfig {
    EvalConfig::load(golden_dir().join("config.toml")).unwrap()
}

pub fn golden_suite() -> BackendSuite {
    BackendsConfig::load_suite(golden_dir().join("backends.toml")).unwrap()
}

pub fn golden_text() -> String {
    std::fs::read_to_string(golden_dir().join("report.json")).unwrap()
}

pub fn run_golden(workers: usize) -> MetricReport {
    run_eval(&golden_manifest(), &golden_config(), &golden_suite(), workers).unwrap()
}

pub fn binary() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_personaeval"))
}

/// Expected per-sample values, worked out by hand from fixture.toml.
/// Rows are samples x1..x6; `None` marks not applicable.
pub struct HandTable {
    pub method: &'static str,
    pub ips: [f64; 6],
    pub sis_fast: [Option<f64>; 6],
    pub sis: [Option<f64>; 6],
    pub goa: [Option<f64>; 6],
    pub rfs: [Option<f64>; 6],
    pub clip_t: [f64; 6],
    pub aps_included: [bool; 6],
    pub penalized: [bool; 6],
    /// Mean per-attribute AUC over included samples, before coverage.
    pub aps_mean_auc: f64,
}

pub fn hand_tables() -> [HandTable; 2] {
    [
        HandTable {
            method: "alpha",
            // x1 cos(0.6,0.8,0)·(1,0,0); x2 (1,0,0)·(0.8,0.6,0); x3 only the 0.85 face is
            // admissible; x4 fails the margin 0.38 < 0.3 + 2(0.05); x5 input has no face;
            // x6 output has no face.
            ips: [0.6, 0.8, 0.8, 0.0, 0.0, 0.0],
            sis_fast: [Some(0.96), Some(1.0), Some(1.0), Some(0.0), None, Some(0.0)],
            sis: [Some(0.98), Some(0.98), Some(0.5), Some(0.5), None, None],
            goa: [Some(0.8), Some(0.3), Some(0.65), Some(0.0), None, None],
            rfs: [Some(0.7), Some(0.0), Some(0.6), Some(0.0), None, None],
            clip_t: [0.35, 0.32, 0.45, 0.38, 0.5, 0.6],
            aps_included: [true, true, true, false, true, false],
            penalized: [false, false, false, true, false, false],
            // Smiling AUC 1, Eyeglasses AUC 3/4.
            aps_mean_auc: 0.875,
        },
        HandTable {
            method: "beta",
            ips: [0.0, 0.48, 0.8, 0.0, 0.0, 1.0],
            sis_fast: [Some(0.0), Some(0.6), Some(0.28), Some(0.0), None, Some(0.8)],
            sis: [Some(0.3), Some(0.3), Some(0.14), Some(0.14), None, None],
            // detector floor 0.3 drops Saturn at 0.2 in x4.
            goa: [Some(0.25), Some(0.8), Some(0.475), Some(0.3), None, None],
            rfs: [Some(0.4), Some(0.0), Some(0.8), Some(0.0), None, None],
            clip_t: [0.25, 0.5, 0.55, 0.7, 0.1, 0.45],
            aps_included: [false, true, true, true, false, true],
            penalized: [true, false, false, false, true, false],
            // Smiling AUC 1, Eyeglasses AUC 1.5/4.
            aps_mean_auc: 0.6875,
        },
    ]
}
