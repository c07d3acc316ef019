use std::collections::BTreeMap;

use personaeval::analysis::{correlate, CorrelationTable, HumanVoteRecord, PearsonMatrix, Study};
use personaeval::report::{MetricReport, MetricValue, SampleResult};

fn sample(method: &str, sample: &str, metrics: &[(&str, MetricValue)]) -> SampleResult {
    SampleResult {
        method_id: method.into(),
        sample_id: sample.into(),
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        penalized: None,
    }
}

fn vote(id: &str, study: Study, candidates: &[&str], votes: &[&str], sample_ref: &str) -> HumanVoteRecord {
    HumanVoteRecord {
        trial_id: id.into(),
        study,
        candidate_method_ids: candidates.iter().map(|s| s.to_string()).collect(),
        votes: votes.iter().map(|s| s.to_string()).collect(),
        sample_ref: sample_ref.into(),
    }
}

/// Three methods over four samples with hand-set scores; one ips value failed.
fn fixture() -> (MetricReport, Vec<HumanVoteRecord>) {
    use MetricValue::*;
    let scores: [(&str, &str, f64, f64); 12] = [
        ("a", "q1", 0.9, 0.1),
        ("b", "q1", 0.4, 0.2),
        ("c", "q1", 0.1, 0.3),
        ("a", "q2", 0.2, 0.5),
        ("b", "q2", 0.7, 0.5),
        ("c", "q2", 0.3, 0.9),
        ("a", "q3", 0.5, 0.4),
        ("b", "q3", 0.5, 0.8),
        ("c", "q3", 0.8, 0.1),
        ("a", "q4", 0.6, 0.7),
        ("b", "q4", 0.1, 0.3),
        ("c", "q4", 0.2, 0.2),
    ];
    let mut report = MetricReport::empty();
    report.metrics = vec!["goa".into(), "ips".into()];
    report.methods = vec!["a".into(), "b".into(), "c".into()];
    for (m, s, goa, ips) in scores {
        let ips = if (m, s) == ("c", "q4") {
            Failed("decode".into())
        } else {
            Value(ips)
        };
        report.samples.push(sample(m, s, &[("goa", Value(goa)), ("ips", ips)]));
    }
    let votes = vec![
        vote("t1", Study::Obj, &["a", "b"], &["a", "a", "b"], "q1"),
        vote("t2", Study::Obj, &["a", "b"], &["b", "b", "a"], "q2"),
        vote("t3", Study::Obj, &["b", "c"], &["c", "c", "c"], "q3"),
        vote("t4", Study::Rel, &["a", "c"], &["a", "c", "a"], "q4"),
        vote("t5", Study::Rel, &["b", "a"], &["b", "a", "b"], "q3"),
        vote("t6", Study::Overall, &["a", "b", "c"], &["a", "b", "c"], "q1"),
        vote("t7", Study::Overall, &["a", "b", "c"], &["c", "c", "a"], "q2"),
        vote("t8", Study::Overall, &["a", "b", "c"], &["a", "a", "b"], "q4"),
    ];
    (report, votes)
}

fn pair_count_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut c, mut d, mut tx, mut ty, mut n0) = (0i64, 0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            n0 += 1;
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx * dy > 0.0 {
                c += 1;
            } else if dx * dy < 0.0 {
                d += 1;
            }
        }
    }
    let denom = ((n0 - tx) as f64) * ((n0 - ty) as f64);
    (denom > 0.0).then(|| (c - d) as f64 / denom.sqrt())
}

fn score(report: &MetricReport, metric: &str, method: &str, sample: &str) -> Option<f64> {
    report
        .samples
        .iter()
        .find(|s| s.method_id == method && s.sample_id == sample)?
        .metrics
        .get(metric)?
        .value()
}

/// Independent restatement of the per-study preference vectors.
fn oracle(report: &MetricReport, votes: &[HumanVoteRecord], metric: &str, study: Study) -> Option<f64> {
    let (mut h, mut m) = (Vec::new(), Vec::new());
    for r in votes.iter().filter(|r| r.study == study) {
        let winner = r
            .candidate_method_ids
            .iter()
            .find(|c| 2 * r.votes.iter().filter(|v| v == c).count() > r.votes.len());
        let Some(winner) = winner else { continue };
        let scores: Vec<Option<f64>> =
            r.candidate_method_ids.iter().map(|c| score(report, metric, c, &r.sample_ref)).collect();
        if scores.iter().any(Option::is_none) {
            continue;
        }
        let scores: Vec<f64> = scores.into_iter().flatten().collect();
        if study == Study::Overall {
            let best = scores.iter().cloned().fold(f64::MIN, f64::max);
            for (c, s) in r.candidate_method_ids.iter().zip(&scores) {
                h.push(f64::from(c == winner));
                m.push(f64::from(*s == best));
            }
        } else {
            let human = if *winner == r.candidate_method_ids[0] { 1.0 } else { -1.0 };
            let diff = scores[0] - scores[1];
            let machine = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
            h.extend([human, -human]);
            m.extend([machine, -machine]);
        }
    }
    pair_count_tau(&h, &m)
}

#[test]
fn eight_trials_match_pair_count_oracle() {
    let (report, votes) = fixture();
    let table = correlate(&report, &votes).unwrap();
    assert_eq!(table.votes_total, 8);
    assert_eq!(table.votes_kept, 7);
    for metric in ["goa", "ips"] {
        for study in Study::ALL {
            let want = oracle(&report, &votes, metric, study);
            let got = table.get(metric, study);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "{metric} {study}: {g} vs {w}"),
                (None, None) => {}
                _ => panic!("{metric} {study}: {got:?} vs {want:?}"),
            }
        }
    }
    let defined = Study::ALL.iter().filter(|s| table.get("goa", **s).is_some()).count();
    assert_eq!(defined, 3);
    // t8 loses its ips trial to the failed sample; t6 has no majority.
    assert_eq!(table.trials["ips"]["overall"], 1);
    assert_eq!(table.trials["goa"]["overall"], 2);
    assert_eq!(table.pearson.observations[0][1], 11);
    assert!(table.config_snapshot["correlate"]["tau_variant"] == "tau-b");
}

#[test]
fn unresolved_sample_is_an_error() {
    let (report, mut votes) = fixture();
    votes.push(vote("t9", Study::Obj, &["a", "z"], &["a", "a", "z"], "q1"));
    assert!(correlate(&report, &votes).is_err());
}

#[test]
fn published_correlation_table_renders() {
    let rows: [(&str, [f64; 3]); 13] = [
        ("clip_t", [0.130, 0.089, 0.106]),
        ("hpsv2", [0.067, 0.004, 0.224]),
        ("pickscore", [0.139, 0.110, 0.246]),
        ("dreamsim", [0.031, 0.132, 0.270]),
        ("clip_i", [0.049, 0.011, 0.304]),
        ("hpsv1", [0.094, 0.103, 0.304]),
        ("image_reward", [0.040, 0.060, 0.320]),
        ("aesthetic", [0.049, 0.146, 0.359]),
        ("goa", [0.175, 0.110, 0.149]),
        ("rfs", [0.121, 0.163, 0.167]),
        ("aps", [0.013, 0.018, 0.389]),
        ("sis", [0.112, 0.011, 0.435]),
        ("ips", [0.094, 0.018, 0.455]),
    ];
    let mut values = BTreeMap::new();
    for (metric, taus) in rows {
        let row: BTreeMap<String, Option<f64>> =
            Study::ALL.iter().zip(taus).map(|(s, t)| (s.key().to_string(), Some(t))).collect();
        values.insert(metric.to_string(), row);
    }
    let table = CorrelationTable {
        rows: rows.iter().map(|(m, _)| m.to_string()).collect(),
        columns: Study::ALL.to_vec(),
        values,
        trials: BTreeMap::new(),
        pearson: PearsonMatrix {
            metrics: Vec::new(),
            values: Vec::new(),
            observations: Vec::new(),
        },
        votes_total: 0,
        votes_kept: 0,
        config_snapshot: serde_json::Value::Null,
    };
    let expected = "\
| Metric | Obj | Rel | Overall |
|---|---:|---:|---:|
| CLIP_T | 0.130 | 0.089 | 0.106 |
| HPSv2 | 0.067 | 0.004 | 0.224 |
| PickScore | 0.139 | 0.110 | 0.246 |
| DreamSim | 0.031 | 0.132 | 0.270 |
| CLIP_I | 0.049 | 0.011 | 0.304 |
| HPSv1 | 0.094 | 0.103 | 0.304 |
| ImageReward | 0.040 | 0.060 | 0.320 |
| Aesth | 0.049 | 0.146 | 0.359 |
| GoA | 0.175 | 0.110 | 0.149 |
| RFS | 0.121 | 0.163 | 0.167 |
| APS | 0.013 | 0.018 | 0.389 |
| SIS | 0.112 | 0.011 | 0.435 |
| IPS | 0.094 | 0.018 | 0.455 |
";
    assert_eq!(table.to_markdown(), expected);
}
