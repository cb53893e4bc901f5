"""Success rates, displacement cost/contribution histograms, experiment grids and reports."""

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import DimensionError, __version__
from . import core, victim
from .attack import ABLATION_GROUPS, AttackConfig, attack_variant, example_seed, resolve_variant
from .defense import DefenseConfig, apply_defense
from .published import reference_asr, reference_proportion

log = logging.getLogger(__name__)

ROW_FIELDS = [
    "grid", "victim", "variant", "distance", "budget", "defense", "m", "n",
    "asr", "n_examples", "n_clean_correct", "mean_final_D", "mean_iterations",
    "perturbed_fraction", "status", "published_asr", "published_proportion",
    "toolkit_version", "seed", "config",
]

HIST_FIELDS = ["lo", "hi", "count", "cost", "contribution", "count_share", "cost_share", "contribution_share"]


def attack_success_rate(adv_preds, clean_preds, labels):
    """Fraction of clean-correct examples whose adversarial prediction is wrong.

    Returns None when no example is classified correctly before the attack.
    """
    adv_preds, clean_preds, labels = (np.asarray(v) for v in (adv_preds, clean_preds, labels))
    if not (len(adv_preds) == len(clean_preds) == len(labels)):
        raise DimensionError("prediction and label lists must be aligned")
    correct = clean_preds == labels
    if not correct.any():
        return None
    return float(np.mean(adv_preds[correct] != labels[correct]))


@dataclass
class HistogramBin:
    lo: float
    hi: float
    count: float = 0.0
    cost: float = 0.0
    contribution: float = 0.0
    count_share: float = 0.0
    cost_share: float = 0.0
    contribution_share: float = 0.0


@dataclass
class Histogram:
    """Bins cover moved points only; ``unmoved`` counts the points left exactly in place."""

    bins: list
    empty: bool = False
    unmoved: int = 0
    total: int = 0

    def shares(self, name):
        return [getattr(b, f"{name}_share") for b in self.bins]

    def fraction_below(self, edge):
        """Share of all points whose normalized displacement lies in [0, edge), unmoved ones included."""
        if self.total == 0:
            return 0.0
        moved = sum(b.count for b in self.bins if b.hi <= edge + 1e-12)
        return float((self.unmoved + moved) / self.total)


def _empty_bins(n_bins):
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return [HistogramBin(float(edges[i]), float(edges[i + 1])) for i in range(n_bins)]


def _finalize(bins):
    for attr in ("count", "cost", "contribution"):
        total = sum(getattr(b, attr) for b in bins)
        for b in bins:
            setattr(b, f"{attr}_share", getattr(b, attr) / total if total > 0 else 0.0)
    return bins


def restoration_gains(model, clean, adv, label, moved):
    """True-class probability gain from putting each moved point back, one at a time."""
    base = victim.predict_probs(model, adv)[label]
    idx = np.flatnonzero(moved)
    gains = np.zeros(len(adv))
    for s in range(0, len(idx), 64):
        chunk = idx[s:s + 64]
        probes = np.repeat(adv[None], len(chunk), axis=0)
        probes[np.arange(len(chunk)), chunk] = clean[chunk]
        logits, _ = victim.forward(model, probes)
        gains[chunk] = core.softmax(logits)[:, label] - base
    return np.maximum(gains, 0.0)


def cost_contribution_histogram(model, clean_cloud, adv_cloud, label, bins=10):
    """Per-cloud histogram over normalized displacement of count, cost and contribution."""
    clean = np.asarray(getattr(clean_cloud, "points", clean_cloud), dtype=np.float64)
    adv = np.asarray(getattr(adv_cloud, "points", adv_cloud), dtype=np.float64)
    if clean.shape != adv.shape:
        raise DimensionError(f"clouds are not index-aligned: {clean.shape} vs {adv.shape}")
    disp = np.sqrt(np.einsum("ij,ij->i", adv - clean, adv - clean))
    out = _empty_bins(bins)
    moved = disp > 0
    if not moved.any():
        return Histogram(out, empty=True, unmoved=len(disp), total=len(disp))
    norm = disp / disp.max()
    which = np.minimum((norm * bins).astype(int), bins - 1)
    gains = restoration_gains(model, clean, adv, label, moved)
    for i, b in enumerate(out):
        sel = (which == i) & moved
        b.count = float(sel.sum())
        b.cost = float(disp[sel].sum())
        b.contribution = float(gains[sel].sum())
    return Histogram(_finalize(out), unmoved=int((~moved).sum()), total=len(disp))


def aggregate_histograms(histograms):
    """Sum per-cloud bins (each already normalized per cloud) and recompute shares."""
    unmoved = sum(h.unmoved for h in histograms)
    total = sum(h.total for h in histograms)
    live = [h for h in histograms if not h.empty]
    if not live:
        n_bins = len(histograms[0].bins) if histograms else 10
        return Histogram(_empty_bins(n_bins), empty=True, unmoved=unmoved, total=total)
    out = _empty_bins(len(live[0].bins))
    for h in live:
        for acc, b in zip(out, h.bins):
            acc.count += b.count
            acc.cost += b.cost
            acc.contribution += b.contribution
    return Histogram(_finalize(out), unmoved=unmoved, total=total)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    histogram: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "rows": self.rows,
            "histogram": [asdict(b) if isinstance(b, HistogramBin) else b for b in self.histogram],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d.get("rows", [])), [HistogramBin(**b) for b in d.get("histogram", [])],
                   dict(d.get("provenance", {})))


@dataclass
class GridCell:
    """One attack configuration of a grid; ``variant`` selects the preset."""

    variant: str
    config: AttackConfig
    grid: str = "main"


def main_grid(base, budgets=(0.001, 0.0025, 0.005), distances=("l2", "chamfer", "hausdorff")):
    return [GridCell("l3a", replace(base, budget=b, distance=d), "main") for b in budgets for d in distances]


def ablation_grid(base):
    return [GridCell(f"group{g}", base, "ablation") for g in ABLATION_GROUPS]


def sweep_grid(base, m_values=(30, 40, 50), n_values=(30, 40, 50)):
    return [GridCell("l3a", replace(base, m=m, n=n), "sweep") for m in m_values for n in n_values]


def baseline_grid(base):
    return [GridCell("l3a", base, "baselines"), GridCell("rp", base, "baselines")]


def _fmt_budget(b):
    return f"{b:g}"


def cell_key(victim_name, distance, budget, defense, variant):
    return f"{victim_name}__{distance}__{_fmt_budget(budget)}__{defense}__{variant}"


def attack_cell(model, clouds, cell):
    """Run one cell's attack over ``clouds``; returns the list of AttackResults."""
    results = []
    for cloud in clouds:
        results.append(attack_variant(model, cloud, cell.variant, cell.config))
    return results


def defended_predictions(model, results, defense, seed):
    """Predictions after sanitizing each adversarial cloud."""
    preds = []
    for r in results:
        cleaned = apply_defense(r.adversarial, defense, example_seed(seed, r.adversarial.id))
        preds.append(int(np.argmax(victim.predict_probs(model, cleaned.points))))
    return preds


def rows_for_results(victim_name, model, cell, results, defenses, arch=None):
    """Report rows for one attacked cell under every defense.

    A defended example counts as a success only if the undefended attack
    already succeeded and the defended cloud is still misclassified, so a
    defended row can never exceed its undefended row.
    """
    cfg = cell.config
    labels = [r.label for r in results]
    clean_preds = [r.clean_pred for r in results]
    adv_preds = [r.adv_pred for r in results]
    arch = arch or getattr(model, "arch", victim_name)
    rows = []
    for defense in defenses:
        if defense.kind == "none":
            preds = adv_preds
        else:
            raw = defended_predictions(model, results, defense, cfg.seed)
            preds = [p if r.success else r.label for p, r in zip(raw, results)]
        asr = attack_success_rate(preds, clean_preds, labels) if results else None
        rows.append(_row(cell, victim_name, arch, defense.kind, asr, results, "ok"))
    return rows


def _row(cell, victim_name, arch, defense, asr, results, status):
    cfg = cell.config
    correct = [r for r in results if r.clean_pred == r.label]
    local = cell.variant != "rp" and resolve_variant(cell.variant, cfg).local
    frac = float(np.mean([r.mask.mean() for r in results])) if results else None
    return {
        "grid": cell.grid,
        "victim": victim_name,
        "variant": cell.variant,
        "distance": cfg.distance,
        "budget": cfg.budget,
        "defense": defense,
        "m": cfg.m if local else None,
        "n": cfg.n if local else None,
        "asr": asr,
        "n_examples": len(results),
        "n_clean_correct": len(correct),
        "mean_final_D": float(np.mean([r.final_D for r in results])) if results else None,
        "mean_iterations": float(np.mean([r.iterations_used for r in results])) if results else None,
        "perturbed_fraction": frac,
        "status": status,
        "published_asr": reference_asr(cell.grid, arch, cell.variant, cfg.distance, cfg.budget, defense,
                                         cfg.m if local else None, cfg.n if local else None),
        "published_proportion": reference_proportion(cfg.m, cfg.n) if cell.grid == "sweep" else None,
        "toolkit_version": __version__,
        "seed": cfg.seed,
        "config": json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")),
    }


def run_grid(dataset, victims, cells, defenses=(DefenseConfig("none"),), clouds=None, histogram_cell=None,
             keep_results=False):
    """Attack every test cloud for every (victim, cell) and score each defense.

    ``victims`` maps names to trained models. A cell that raises is
    reported with status ``failed`` and the grid carries on. When
    ``histogram_cell`` (an index into ``cells``) is given, the report's
    histogram aggregates that cell's results on the first victim.
    """
    clouds = list(dataset.test if clouds is None else clouds)
    defenses = list(defenses)
    report = EvalReport(provenance={
        "toolkit_version": __version__,
        "victims": {name: {"arch": m.arch, "layer_widths": m.layer_widths, "k_neighbors": m.k_neighbors,
                           "num_classes": m.num_classes} for name, m in victims.items()},
        "cells": [{"grid": c.grid, "variant": c.variant, "config": c.config.to_dict()} for c in cells],
        "defenses": [asdict(d) for d in defenses],
        "examples": [c.id for c in clouds],
        "seed": cells[0].config.seed if cells else None,
    })
    all_results = {}
    for vi, (name, model) in enumerate(victims.items()):
        for ci, cell in enumerate(cells):
            try:
                results = attack_cell(model, clouds, cell)
                report.rows.extend(rows_for_results(name, model, cell, results, defenses))
            except Exception as exc:  # a broken cell must not sink the grid
                log.warning("cell %s/%s failed: %s", name, cell.variant, exc)
                for d in defenses:
                    row = _row(cell, name, model.arch, d.kind, None, [], "failed")
                    report.rows.append(row)
                continue
            log.info("%s %s %s budget=%g done", name, cell.grid, cell.variant, cell.config.budget)
            if keep_results:
                all_results[(name, ci)] = results
            if histogram_cell == ci and vi == 0:
                hists = [cost_contribution_histogram(model, c, r.adversarial, c.label)
                         for c, r in zip(clouds, results)]
                agg = aggregate_histograms(hists)
                report.histogram = agg.bins
                report.provenance["histogram_points"] = {"unmoved": agg.unmoved, "total": agg.total}
    if keep_results:
        return report, all_results
    return report


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(ROW_FIELDS)
    for row in report.rows:
        writer.writerow([_csv_value(row.get(f)) for f in ROW_FIELDS])
    return buf.getvalue()


def histogram_csv(bins, provenance=None):
    """Bin rows plus the unmoved/total point counts and toolkit version on every row."""
    provenance = provenance or {}
    version = provenance.get("toolkit_version", __version__)
    points = provenance.get("histogram_points", {})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(HIST_FIELDS + ["unmoved_points", "total_points", "toolkit_version"])
    for b in bins:
        d = asdict(b) if isinstance(b, HistogramBin) else b
        writer.writerow([_csv_value(d[f]) for f in HIST_FIELDS]
                        + [_csv_value(points.get("unmoved")), _csv_value(points.get("total")), version])
    return buf.getvalue()


def report_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(report, fmt, path):
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report_json(report)
    elif fmt == "histogram-csv":
        text = histogram_csv(report.histogram, report.provenance)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))
