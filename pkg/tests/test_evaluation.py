import json

import numpy as np
import pytest

from saliencystrike import DimensionError, attack, evaluation, published, victim
from saliencystrike.defense import DefenseConfig
from saliencystrike.evaluation import EvalReport, GridCell


def test_asr_definition():
    labels = [0] * 10
    clean = [0] * 9 + [1]
    adv = [1] * 8 + [0, 1]
    assert evaluation.attack_success_rate(adv, clean, labels) == pytest.approx(8 / 9)
    assert evaluation.attack_success_rate(labels, clean, labels) == 0.0
    assert evaluation.attack_success_rate([1, 1], [1, 1], [0, 0]) is None
    with pytest.raises(DimensionError):
        evaluation.attack_success_rate([0], [0, 0], [0, 0])


def test_histogram_identity_is_empty(small_pointnet, small_dataset):
    c = small_dataset.test[0]
    h = evaluation.cost_contribution_histogram(small_pointnet, c, c, c.label)
    assert h.empty and len(h.bins) == 10 and all(b.count == 0 for b in h.bins)


def test_histogram_single_moved_point(small_pointnet, small_dataset):
    # find a single critical-point move whose restoration measurably helps the true class
    for c in small_dataset.test:
        _, cache = victim.forward(small_pointnet, c.points)
        found = None
        for i in sorted(set(int(v) for v in cache["routing"][0])):
            adv = c.points.copy()
            adv[i] = -2.0 * adv[i]
            gain = evaluation.restoration_gains(small_pointnet, c.points, adv, c.label, np.arange(len(adv)) == i)[i]
            if gain > 1e-6:
                found = adv
                break
        if found is not None:
            break
    assert found is not None
    adv = found
    h = evaluation.cost_contribution_histogram(small_pointnet, c, adv, c.label)
    top = h.bins[-1]
    assert top.count == 1
    assert top.count_share == top.cost_share == top.contribution_share == 1.0
    assert all(b.count == 0 for b in h.bins[:-1])
    assert h.unmoved == len(adv) - 1 and h.total == len(adv)
    assert h.fraction_below(0.3) == pytest.approx((len(adv) - 1) / len(adv))


def test_aggregate_keeps_point_totals(small_pointnet, small_dataset):
    c = small_dataset.test[0]
    adv = c.points.copy()
    adv[:3] += 0.01 * np.arange(1, 4)[:, None]
    one = evaluation.cost_contribution_histogram(small_pointnet, c, adv, c.label)
    none = evaluation.cost_contribution_histogram(small_pointnet, c, c, c.label)
    agg = evaluation.aggregate_histograms([one, none])
    assert agg.total == 2 * len(adv) and agg.unmoved == 2 * len(adv) - 3
    assert sum(b.count for b in agg.bins) == 3


def test_histogram_rejects_misaligned(small_pointnet, small_dataset):
    c = small_dataset.test[0]
    with pytest.raises(DimensionError):
        evaluation.cost_contribution_histogram(small_pointnet, c, c.points[:-1], c.label)


def test_restoration_gains_are_nonnegative(small_pointnet, small_dataset):
    c = small_dataset.test[1]
    r = attack.run_attack(small_pointnet, c, attack.AttackConfig(iters=30))
    moved = r.per_point_displacement > 0
    gains = evaluation.restoration_gains(small_pointnet, c.points, r.adversarial.points, c.label, moved)
    assert np.all(gains >= 0) and np.all(gains[~moved] == 0)


def test_single_cell_grid_has_one_row(small_pointnet, small_dataset):
    cfg = attack.AttackConfig(iters=20)
    rep = evaluation.run_grid(small_dataset, {"pn": small_pointnet}, [GridCell("l3a", cfg, "main")],
                              clouds=small_dataset.test[:3])
    assert len(rep.rows) == 1
    row = rep.rows[0]
    assert row["status"] == "ok" and row["n_examples"] == 3
    assert row["published_asr"] == published.MAIN_GRID["PointNet"][0.005]["l2"][0]


def test_failed_cell_does_not_sink_grid(small_pointnet, small_dataset):
    good = GridCell("l3a", attack.AttackConfig(iters=10), "main")
    bad = GridCell("l3a", attack.AttackConfig(iters=10, m=10_000), "main")
    rep = evaluation.run_grid(small_dataset, {"pn": small_pointnet}, [bad, good], clouds=small_dataset.test[:2])
    assert [r["status"] for r in rep.rows] == ["failed", "ok"]
    assert rep.rows[0]["asr"] is None


def test_defended_rows_never_exceed_undefended(small_pointnet, small_dataset):
    defenses = [DefenseConfig("none"), DefenseConfig("sor"), DefenseConfig("srs")]
    rep = evaluation.run_grid(small_dataset, {"pn": small_pointnet},
                              [GridCell("l3a", attack.AttackConfig(iters=40), "main")], defenses,
                              clouds=small_dataset.test[::3])
    by_def = {r["defense"]: r["asr"] for r in rep.rows}
    assert set(by_def) == {"none", "sor", "srs"}
    assert by_def["sor"] <= by_def["none"] and by_def["srs"] <= by_def["none"]


def test_published_references():
    assert published.reference_asr("sweep", "pointnet_mini", "l3a", m=50, n=50) == 0.968
    assert published.reference_proportion(50, 50) == 0.3953
    assert published.reference_asr("main", "pointnet_mini", "l3a", "l2", 0.001) == 0.997
    assert published.reference_asr("baselines", "dgcnn_mini", "rp") == 0.116
    assert published.reference_asr("ablation", "pointnet_mini", "group3") == 1.0


def test_grids_have_expected_shape():
    base = attack.AttackConfig()
    assert len(evaluation.main_grid(base)) == 9
    assert [c.variant for c in evaluation.ablation_grid(base)] == [f"group{g}" for g in range(1, 10)]
    assert {(c.config.m, c.config.n) for c in evaluation.sweep_grid(base)} == {
        (m, n) for m in (30, 40, 50) for n in (30, 40, 50)}
    assert [c.variant for c in evaluation.baseline_grid(base)] == ["l3a", "rp"]


def test_empty_grid_csv_is_header_only(tmp_path):
    path = evaluation.emit_report(EvalReport(), "csv", tmp_path / "r.csv")
    assert open(path, newline="").read() == ",".join(evaluation.ROW_FIELDS) + "\r\n"


def _sample_report():
    row = {f: None for f in evaluation.ROW_FIELDS}
    row.update(grid="main", victim="sphere, cube", variant="l3a", asr=0.5, budget=0.005, status="ok",
               config=json.dumps({"a": 1}))
    return EvalReport([row], [evaluation.HistogramBin(0.0, 0.1, 3.0)], {"toolkit_version": "x"})


def test_csv_quotes_commas(tmp_path):
    text = open(evaluation.emit_report(_sample_report(), "csv", tmp_path / "r.csv"), newline="").read()
    assert '"sphere, cube"' in text and text.endswith("\r\n")
    assert '"{""a"": 1}"' in text


def test_json_roundtrip_is_byte_identical(tmp_path):
    first = evaluation.emit_report(_sample_report(), "json", tmp_path / "a.json")
    again = evaluation.emit_report(evaluation.load_report(first), "json", tmp_path / "b.json")
    assert open(first, "rb").read() == open(again, "rb").read()


def test_json_rejects_nan(tmp_path):
    rep = _sample_report()
    rep.rows[0]["asr"] = float("nan")
    with pytest.raises(ValueError):
        evaluation.emit_report(rep, "json", tmp_path / "x.json")


def test_histogram_csv(tmp_path):
    text = open(evaluation.emit_report(_sample_report(), "histogram-csv", tmp_path / "h.csv"), newline="").read()
    lines = text.split("\r\n")
    assert lines[0].startswith("lo,hi,count") and lines[0].endswith("unmoved_points,total_points,toolkit_version")
    assert lines[1].startswith("0.0,0.1,3.0")
