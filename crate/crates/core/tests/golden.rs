mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use common::*;
use personaeval::backends::{BackendSuite, BackendsConfig, MockBackend};
use personaeval::cache::CallCache;
use personaeval::config::{EvalConfig, Metric};
use personaeval::data::Manifest;
use personaeval::eval::{run_eval, EvalError};
use personaeval::report::{MetricReport, MetricValue};

fn value(report: &MetricReport, method: &str, sample: &str, metric: &str) -> MetricValue {
    report
        .samples
        .iter()
        .find(|s| s.method_id == method && s.sample_id == sample)
        .unwrap()
        .metrics[metric]
        .clone()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn golden_report_is_byte_identical_for_any_worker_count() {
    let golden = golden_text();
    for workers in [1, 2, 4] {
        assert_eq!(run_golden(workers).canonical_json(), golden, "workers = {workers}");
    }
}

#[test]
fn golden_report_matches_hand_computation() {
    let report = MetricReport::from_json(&golden_text()).unwrap();
    let sigma = report.config_snapshot["penalty"]["sigma"].as_f64().unwrap();
    assert!((sigma - 0.05).abs() < 1e-12);
    for t in hand_tables() {
        for (i, sample) in ["x1", "x2", "x3", "x4", "x5", "x6"].iter().enumerate() {
            let check = |metric: &str, expected: Option<f64>| match (value(&report, t.method, sample, metric), expected) {
                (MetricValue::Value(v), Some(e)) => {
                    assert!((v - e).abs() < 1e-12, "{} {sample} {metric}: {v} vs {e}", t.method)
                }
                (MetricValue::NotApplicable(_), None) => {}
                (got, want) => panic!("{} {sample} {metric}: {got:?} vs {want:?}", t.method),
            };
            check("ips", Some(t.ips[i]));
            check("sis_fast", t.sis_fast[i]);
            check("sis", t.sis[i]);
            check("goa", t.goa[i]);
            check("rfs", t.rfs[i]);
            check("clip_t", Some(t.clip_t[i]));
            assert_eq!(
                value(&report, t.method, sample, "aps"),
                MetricValue::Pooled { included: t.aps_included[i] }
            );
            let s = report
                .samples
                .iter()
                .find(|s| s.method_id == t.method && s.sample_id == *sample)
                .unwrap();
            assert_eq!(s.penalized, Some(t.penalized[i]));
        }

        let agg = |metric: &str| report.aggregate(t.method, metric).unwrap();
        let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        close(agg("ips"), mean(t.ips));
        close(agg("clip_t"), mean(t.clip_t));
        close(agg("sis_fast"), mean(t.sis_fast.iter().flatten().copied()));
        close(agg("goa"), mean(t.goa.iter().flatten().copied()));
        close(agg("rfs"), mean(t.rfs.iter().flatten().copied()));
        // Two complete groups, each listed twice.
        close(agg("sis"), mean([t.sis[0].unwrap(), t.sis[2].unwrap()]));
        let coverage = t.aps_included.iter().filter(|b| **b).count() as f64 / 6.0;
        close(agg("aps"), t.aps_mean_auc * coverage);
        let n_penalized = t.penalized.iter().filter(|b| **b).count();
        assert_eq!(report.aggregates[t.method]["ips"].n_penalized, n_penalized);
    }
}

fn cache_files(root: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn rerun_after_deleting_half_the_cache_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let cache = Arc::new(CallCache::open(dir.path()).unwrap());
        let suite = golden_suite().with_cache(cache.clone());
        let text = run_eval(&golden_manifest(), &golden_config(), &suite, 2)
            .unwrap()
            .canonical_json();
        (text, cache.hits(), cache.misses())
    };
    let (first, hits, misses) = run();
    assert_eq!(first, golden_text());
    assert!(misses > 0 && hits > 0, "{hits} hits, {misses} misses");
    let files = cache_files(dir.path());
    assert!(files.len() > 10);
    for f in files.iter().step_by(2) {
        std::fs::remove_file(f).unwrap();
    }
    let (second, hits2, misses2) = run();
    assert_eq!(second, first);
    assert!(misses2 > 0 && hits2 > 0);
    let (third, _, misses3) = run();
    assert_eq!(third, first);
    assert_eq!(misses3, 0);
}

#[test]
fn aggregates_do_not_depend_on_sample_order() {
    let text = std::fs::read_to_string(golden_dir().join("manifest.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[7..].reverse();
    let shuffled = Manifest::parse(&lines.join("\n")).unwrap();
    let report = run_eval(&shuffled, &golden_config(), &golden_suite(), 3).unwrap();
    let golden = MetricReport::from_json(&golden_text()).unwrap();
    assert_eq!(report.aggregates, golden.aggregates);
    assert_eq!(report.samples, golden.samples);
}

#[test]
fn goa_on_unannotated_prompts_is_not_applicable() {
    let text = std::fs::read_to_string(golden_dir().join("manifest.jsonl")).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| !l.contains("\"kind\":\"sample\"") || l.contains("\"prompt_id\":\"p3\""))
        .collect();
    let manifest = Manifest::parse(&kept.join("\n")).unwrap();
    let config = EvalConfig {
        metrics: vec![Metric::Goa],
        ..EvalConfig::default()
    };
    let report = run_eval(&manifest, &config, &golden_suite(), 1).unwrap();
    assert_eq!(report.samples.len(), 4);
    for s in &report.samples {
        assert!(matches!(s.metrics["goa"], MetricValue::NotApplicable(_)));
    }
    for method in ["alpha", "beta"] {
        let a = &report.aggregates[method]["goa"];
        assert_eq!(a.value, None);
        assert_eq!(a.n_applicable, 0);
    }
}

#[test]
fn missing_backend_is_an_upfront_error() {
    let mut suite = golden_suite();
    suite.object_detector = None;
    let config = EvalConfig {
        metrics: vec![Metric::Goa],
        ..EvalConfig::default()
    };
    let err = run_eval(&golden_manifest(), &config, &suite, 1).unwrap_err();
    assert!(matches!(err, EvalError::MissingBackend { role: "object_detector", .. }));
    assert!(err.is_backend());
}

#[test]
fn aps_without_bank_is_an_upfront_error() {
    let config = EvalConfig {
        metrics: vec![Metric::Aps],
        ..EvalConfig::default()
    };
    let err = run_eval(&golden_manifest(), &config, &golden_suite(), 1).unwrap_err();
    assert!(matches!(err, EvalError::MissingBank));
}

#[test]
fn backend_failure_marks_the_sample_and_continues() {
    // Drop one output image from the fixture so every call on it fails to decode.
    let mut fixture = personaeval::backends::Fixture::load(golden_dir().join("fixture.toml")).unwrap();
    fixture.images.remove("b_s2p2_0.png");
    let suite = BackendSuite::uniform(Arc::new(MockBackend::new(fixture).unwrap()));
    let report = run_eval(&golden_manifest(), &golden_config(), &suite, 2).unwrap();
    let mut failed: Vec<&str> = report
        .failures
        .iter()
        .filter(|f| f.method_id == "beta" && f.sample_id == "x3")
        .map(|f| f.metric.as_str())
        .collect();
    failed.sort();
    assert_eq!(failed, vec!["aps", "clip_t", "goa", "ips", "rfs", "sis", "sis_fast"]);
    assert!(report.failures.iter().all(|f| f.method_id == "beta"));
    assert_eq!(report.coverage["beta"].failed_samples, 2);
    // alpha is untouched.
    let golden = MetricReport::from_json(&golden_text()).unwrap();
    assert_eq!(report.aggregates["alpha"], golden.aggregates["alpha"]);
    assert_eq!(report.aggregates["beta"]["ips"].n_failed, 1);
}

#[test]
fn process_worker_scorer_reproduces_the_golden_report() {
    let fixture = personaeval::backends::Fixture::load(golden_dir().join("fixture.toml")).unwrap();
    let table: BTreeMap<&String, &BTreeMap<String, f64>> =
        fixture.images.iter().map(|(k, v)| (k, &v.scores)).collect();
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.json");
    std::fs::write(&scores, serde_json::to_string(&table).unwrap()).unwrap();
    let worker = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/score_worker.py");
    let backends = format!(
        "[default]\nkind = \"mock\"\nfixture = {:?}\n\n[text_image_scorer]\nkind = \"process\"\nidentity = \"mock-golden@1\"\ncommand = [\"python3\", {:?}, {:?}]\n",
        golden_dir().join("fixture.toml"),
        worker,
        scores
    );
    let suite = BackendsConfig::from_toml(&backends).unwrap().build(dir.path()).unwrap();
    let report = run_eval(&golden_manifest(), &golden_config(), &suite, 4).unwrap();
    assert_eq!(report.canonical_json(), golden_text());
}
