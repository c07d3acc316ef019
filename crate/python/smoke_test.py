"""Smoke test for the personaeval extension module.

Run from the repository root after building the module:

    python python/smoke_test.py
"""

import json
import pathlib
import sys

import personaeval as pe

ROOT = pathlib.Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "crates" / "core" / "tests" / "fixtures"
GOLDEN = FIXTURES / "golden"


def close(a, b, tol=1e-12):
    return a is not None and b is not None and abs(a - b) <= tol


def main():
    report = pe.run_eval(
        str(GOLDEN / "manifest.jsonl"),
        str(GOLDEN / "backends.toml"),
        config=str(GOLDEN / "config.toml"),
        workers=2,
    )
    assert report.to_json() == (GOLDEN / "report.json").read_text(), "golden report differs"
    assert report.methods == ["alpha", "beta"]
    assert report.to_markdown().startswith("| Metric | alpha | beta | Type |")
    assert pe.MetricReport.from_json(report.to_json()).to_json() == report.to_json()
    assert set(report.aggregates()) == {"alpha", "beta"}

    votes = (FIXTURES / "votes.jsonl").read_text()
    kept, discarded = pe.majority_filter(votes)
    assert (len(kept), discarded) == (19, 1)
    table = pe.correlate(report, votes)
    assert (table.votes_total, table.votes_kept) == (20, 19)
    assert table.to_markdown().startswith("| Metric | Obj | Rel | Overall |")
    json.loads(table.to_json())

    assert close(pe.kendall_tau([1, 2, 3], [1, 3, 2]), 1 / 3)
    assert pe.kendall_tau([1, 1], [1, 2]) is None
    assert close(pe.pearson([1, 2, 3], [2, 4, 6]), 1.0)
    assert close(pe.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), 0.75)
    assert pe.penalty_indicator(0.5, 0.7, 0.05) == 1
    assert pe.penalty_indicator(0.5, 0.6, 0.05) == 0
    assert pe.penalty_indicator(0.5, 0.2, 0.05, mode="literal-multiplicative") == 1
    assert pe.penalty_indicator(0.5, 0.04, 0.05, mode="literal-multiplicative") == 0

    points = [[1, 0], [0, 1], [1, 1], [-1, 0], [0.9, 0.1]]
    picks = pe.farthest_point_sample(points, 3, seed=7)
    assert picks == pe.farthest_point_sample(points, 3, seed=7, workers=3)
    assert len(set(picks)) == 3
    try:
        pe.farthest_point_sample(points, 6)
    except ValueError:
        pass
    else:
        raise AssertionError("k beyond the pool must fail")

    pairs = pe.pair_subjects_prompts(["s1", "s2"], ["p1", "p2", "p3", "p4"], 2, seed=3)
    assert sorted(p for ps in pairs.values() for p in ps) == ["p1", "p2", "p3", "p4"]

    grammar = (
        "[rule]\nid = riding_vehicle_space\n"
        "pattern = riding a [vehicle] near [space loc.]\n"
        "predicate = riding\nobjects = vehicle, space loc.\nrelations = vehicle\n"
        "[vocab:vehicle]\nskateboard\nboat\n"
        "[vocab:space loc.]\nSaturn\nthe Moon\nMars\n"
        "[theme:vehicle]\nvehicle\n[theme:space loc.]\nspace\n"
    )
    prompts = pe.expand_grammar(grammar)
    assert len(prompts) == pe.expansion_count(grammar) == 6
    assert prompts[0]["text"] == "riding a skateboard near Saturn"
    assert prompts[0]["themes"] == ["vehicle", "space"]

    print(f"personaeval {pe.__version__}: smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
