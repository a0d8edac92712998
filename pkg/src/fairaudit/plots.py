"""Matplotlib rendering of audit reports, stability curves, and model
comparisons to image files.

Figures follow the reporting conventions used throughout: boxes show the
metric posterior (whiskers at min/max, box at the quartiles), "X" marks
the posterior-predictive estimate, "O" marks the point estimate, and a
dotted line marks the 80%-rule constant on differential-fairness panels.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import AuditReport, StabilityCurve

__all__ = [
    "save_audit_figures",
    "save_stability_figure",
    "save_crossent_figure",
    "save_synth_figure",
]

_FAMILY_ORDER = ("EDF", "NB", "LR", "HLR", "DNN", "Ensemble")


def _panel_boxes(ax, entries, threshold=None, title=""):
    """One audit panel: per family, a box for the posterior, an X for the
    predictive point, an O for the point estimate."""
    stats = []
    positions = []
    labels = []
    xs, os_ = [], []
    pos = 0
    for label, box_summary, x_point, o_point in entries:
        pos += 1
        labels.append(label)
        positions.append(pos)
        if box_summary is not None and all(
            math.isfinite(box_summary[k])
            for k in ("min", "lower_quartile", "median", "upper_quartile", "max")
        ):
            stats.append(
                {
                    "label": label,
                    "whislo": box_summary["min"],
                    "q1": box_summary["lower_quartile"],
                    "med": box_summary["median"],
                    "q3": box_summary["upper_quartile"],
                    "whishi": box_summary["max"],
                    "fliers": [],
                    "pos": pos,
                }
            )
        if x_point is not None and math.isfinite(x_point):
            xs.append((pos, x_point))
        if o_point is not None and math.isfinite(o_point):
            os_.append((pos, o_point))
    if stats:
        ax.bxp(
            [{k: s[k] for k in ("label", "whislo", "q1", "med", "q3", "whishi", "fliers")}
             for s in stats],
            positions=[s["pos"] for s in stats],
            showfliers=False,
            widths=0.5,
        )
    if xs:
        ax.scatter(*zip(*xs), marker="x", s=70, color="tab:red", zorder=5,
                   label="posterior predictive")
    if os_:
        ax.scatter(*zip(*os_), marker="o", s=55, facecolors="none",
                   edgecolors="tab:blue", zorder=5, label="point estimate")
    if threshold is not None:
        ax.axhline(threshold, linestyle=":", color="gray", linewidth=1.2,
                   label=f"80% rule ({threshold:.4f})")
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)


def _family_entries(reports: dict, metric: str):
    """Collapse PE/FB estimator reports into per-family panel entries."""
    entries = []
    by_name = dict(reports)
    families = sorted(
        {n.rsplit("-", 1)[0] for n in by_name},
        key=lambda c: _FAMILY_ORDER.index(c) if c in _FAMILY_ORDER else 99,
    )
    for fam in families:
        fb = by_name.get(f"{fam}-FB")
        pe = by_name.get(f"{fam}-PE")
        box = x_pt = o_pt = None
        if fb is not None and getattr(fb, "error", None) is None:
            post = getattr(fb, metric)
            if post is not None:
                box = post.summary
                x_pt = post.predictive_point
        if pe is not None and getattr(pe, "error", None) is None:
            post = getattr(pe, metric)
            if post is not None:
                o_pt = post.predictive_point
        if box is not None or x_pt is not None or o_pt is not None:
            entries.append((fam, box, x_pt, o_pt))
    return entries


def _ensemble_entry(report, metric: str):
    post = getattr(report, metric, None)
    if post is None:
        return None
    return ("Ensemble", post.summary, post.predictive_point, None)


def save_audit_figures(report: AuditReport, out_prefix: str) -> list[str]:
    """Render one figure per metric (panels: data, mechanism, bias
    amplification as available).  Returns the written paths."""
    paths = []
    metrics = [("epsilon", "differential fairness", report.metadata["threshold"])]
    has_gamma = any(
        rep.gamma is not None
        for reports in report.targets.values()
        for rep in reports.values()
    )
    if has_gamma:
        metrics.append(("gamma", "subgroup fairness", None))
    for metric, label, threshold in metrics:
        panels = []
        for tgt in ("data", "mechanism"):
            if tgt not in report.targets:
                continue
            entries = _family_entries(report.targets[tgt], metric)
            ens = report.ensembles.get(tgt)
            if ens is not None:
                e = _ensemble_entry(ens, metric)
                if e is not None:
                    entries.append(e)
            panels.append((f"{label}: {tgt} labels", entries, threshold))
        if report.bias_amplification:
            entries = _family_entries(report.bias_amplification, metric)
            ens_delta = report.ensembles.get("bias_amplification")
            if ens_delta is not None:
                e = _ensemble_entry(ens_delta, metric)
                if e is not None:
                    entries.append(e)
            panels.append((f"{label}: bias amplification", entries, None))
        panels = [p for p in panels if p[1]]
        if not panels:
            continue
        fig, axes = plt.subplots(
            1, len(panels), figsize=(5.2 * len(panels), 4.2), squeeze=False
        )
        for ax, (title, entries, thr) in zip(axes[0], panels):
            _panel_boxes(ax, entries, threshold=thr, title=title)
        axes[0][0].set_ylabel(label)
        handles, labels_ = axes[0][0].get_legend_handles_labels()
        if handles:
            fig.legend(handles, labels_, loc="lower center", ncol=3,
                       frameon=False, fontsize=9)
        fig.tight_layout(rect=(0, 0.06, 1, 1))
        path = f"{out_prefix}_{'df' if metric == 'epsilon' else 'sf'}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths


def save_stability_figure(
    curve: StabilityCurve, path: str, truth: float | None = None
) -> str:
    """Mean metric versus replicate size, one line per estimator
    (solid = fully Bayesian, dashed = point estimate)."""
    means = curve.means()
    fig, ax = plt.subplots(figsize=(7.2, 4.4))
    for e, name in enumerate(curve.estimator_names):
        style = "-" if name.endswith("-FB") else "--"
        ax.plot(curve.grid, means[e], style, marker="o", markersize=3.5,
                label=name)
    if truth is not None and math.isfinite(truth):
        ax.axhline(truth, linestyle=":", color="gray", label="ground truth")
    ax.set_xscale("log")
    ax.set_xlabel("number of instances (bootstrap replicate size)")
    label = "differential fairness" if curve.metric == "df" else "subgroup fairness"
    ax.set_ylabel(label)
    ax.set_title(
        f"{label} vs. data size ({curve.target} labels, "
        f"{curve.values.shape[2]} bootstrap(s))"
    )
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_crossent_figure(scores: dict[str, float], path: str, title: str) -> str:
    """Horizontal bars of average negative cross-entropy (higher is
    better)."""
    names = list(scores)
    vals = [scores[n] for n in names]
    order = np.argsort(vals)
    fig, ax = plt.subplots(figsize=(6.8, 0.5 * len(names) + 1.6))
    ax.barh(
        [names[i] for i in order],
        [vals[i] for i in order],
        color="tab:blue",
        alpha=0.8,
    )
    ax.set_xlabel("negative cross-entropy per intersection (higher is better)")
    ax.set_title(title)
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_synth_figure(
    analytic: dict[str, float], empirical: dict[str, float], path: str
) -> str:
    """Analytic truth vs. empirical estimate for each metric."""
    keys = [k for k in analytic if k in empirical and math.isfinite(empirical[k])]
    x = np.arange(len(keys))
    fig, ax = plt.subplots(figsize=(5.4, 3.8))
    ax.bar(x - 0.18, [analytic[k] for k in keys], width=0.36, label="analytic")
    ax.bar(x + 0.18, [empirical[k] for k in keys], width=0.36, label="empirical")
    ax.set_xticks(x)
    ax.set_xticklabels(keys)
    ax.set_title("synthetic generator: analytic truth vs. empirical")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
