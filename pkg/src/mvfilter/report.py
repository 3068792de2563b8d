"""Report serialisation and static plot rendering.

Every number that appears in a rendered plot is also written to a
machine-readable delimited table; plots are static vector graphics.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .multiverse import Multiverse
from .pipeline import FilterReport, QoiRow, REPORT_SCHEMA_VERSION

log = logging.getLogger(__name__)

FAMILY_MARKERS = {"poisson": "o", "negative_binomial": "v", "normal": "s"}
RELIABLE_COLOUR = "black"
UNRELIABLE_COLOUR = "tab:red"


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return f"{x:.10g}"
    if x is None:
        return ""
    return str(x)


def write_tables(report: FilterReport, mv: Multiverse, out_dir: str | Path) -> None:
    """Write the manifest and all delimited tables for a report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    manifest = report.canonical_dict()
    manifest["created_at"] = report.provenance.get("created_at")
    manifest["runtime_s"] = report.provenance.get("runtime_s")
    manifest["labels"] = {mid: mv.label(mid) for mid in report.outcomes if mid in dict(mv.ordinals)}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (out / "multiverse.json").write_text(mv.to_json())

    model_rows = []
    for mid in sorted(report.outcomes):
        o = report.outcomes[mid]
        model_rows.append(
            [
                mid, o.ordinal, o.description, o.family, o.prior_scheme, o.status, o.drop_reason,
                o.verdict, _fmt(o.target_accept_used), o.divergences, _fmt(o.divergence_fraction),
                _fmt(o.max_rhat), _fmt(o.min_ess), _fmt(o.elpd), _fmt(o.delta), _fmt(o.se_delta),
                _fmt(o.diff_khat), _fmt(o.diff_min_ss), _fmt(o.normal_approx_valid),
                _fmt(o.small_diff), o.n_high_khat_direct, o.n_high_khat_final,
                _fmt(o.elpd_reliable), o.ppc_verdict, _fmt(o.ppc_violation),
                json.dumps(o.per_obs_method_counts, sort_keys=True), o.cache_key, o.from_cache,
                o.seed, "; ".join(o.escalations), o.error,
            ]
        )
    _write_csv(
        out / "models.csv",
        [
            "model_id", "ordinal", "description", "family", "prior_scheme", "status", "drop_reason",
            "verdict", "target_accept", "divergences", "divergence_fraction", "max_rhat", "min_ess",
            "elpd", "delta", "se_delta", "diff_khat", "diff_min_ss", "normal_approx_valid",
            "small_diff", "n_high_khat_direct", "n_high_khat_final", "elpd_reliable",
            "ppc_verdict", "ppc_violation", "per_obs_methods", "cache_key", "from_cache",
            "seed", "escalations", "error",
        ],
        model_rows,
    )

    if report.comparison is not None:
        rows = []
        for mid in sorted(report.comparison.rows):
            r = report.comparison.rows[mid]
            rows.append(
                [
                    mid, _fmt(r.elpd), _fmt(r.delta), _fmt(r.se_delta), r.n_pairs,
                    _fmt(r.diff_khat), _fmt(r.diff_min_ss), r.normal_approx_valid,
                    r.small_diff, mid in report.filtered_set,
                ]
            )
        _write_csv(
            out / "comparison.csv",
            ["model_id", "elpd", "delta", "se_delta", "n_pairs", "diff_khat", "diff_min_ss",
             "normal_approx_valid", "small_diff_flag", "in_filtered_set"],
            rows,
        )

    if report.diagnostics_rows:
        _write_csv(
            out / "diagnostics.csv",
            ["model_id", "parameter", "rhat", "ess_bulk", "ess_tail", "degenerate"],
            [
                [r["model_id"], r["parameter"], _fmt(r["rhat"]), _fmt(r["ess_bulk"]),
                 _fmt(r["ess_tail"]), r["degenerate"]]
                for r in report.diagnostics_rows
            ],
        )

    for mid, detail in report.cv_detail.items():
        ordinal = report.outcomes[mid].ordinal
        _write_csv(
            out / "cv" / f"cv_model{ordinal:03d}.csv",
            ["obs_id", "elpd_i", "khat_i", "method", "mc_se"],
            [
                [i + 1, _fmt(float(detail["pointwise"][i])), _fmt(float(detail["khat"][i])),
                 detail["method"][i], _fmt(float(detail["mc_se"][i]))]
                for i in range(len(detail["pointwise"]))
            ],
        )

    for mid, detail in report.ppc_detail.items():
        ordinal = report.outcomes[mid].ordinal
        _write_csv(
            out / "ppc" / f"pit_model{ordinal:03d}.csv",
            ["obs_id", "pit"],
            [[i + 1, _fmt(float(v))] for i, v in enumerate(detail["pit"])],
        )
        _write_csv(
            out / "ppc" / f"ecdf_model{ordinal:03d}.csv",
            ["grid", "ecdf", "lower", "upper"],
            [
                [_fmt(float(g)), _fmt(float(e)), _fmt(float(lo)), _fmt(float(hi))]
                for g, e, lo, hi in zip(detail["grid"], detail["ecdf"], detail["lower"], detail["upper"])
            ],
        )

    if report.extreme_observations:
        _write_csv(
            out / "extreme_observations.csv",
            ["obs_id", "response", "response_outlier", "max_abs_diff", "deficits"],
            [
                [e.obs_index + 1, _fmt(e.response), e.response_outlier, _fmt(e.max_abs_diff),
                 json.dumps({k: round(v, 6) for k, v in sorted(e.deficits.items())})]
                for e in report.extreme_observations
            ],
        )


def _elpd_panel(ax, rows, labels, k_se: float, title: str):
    rows = sorted(rows, key=lambda r: r.delta, reverse=True)
    ys = np.arange(len(rows))[::-1]
    for y, r in zip(ys, rows):
        colour = UNRELIABLE_COLOUR if r.any_high_khat else RELIABLE_COLOUR
        marker = FAMILY_MARKERS.get(labels[r.model_id][1], "D")
        ax.errorbar([r.delta], [y], xerr=[[k_se * r.se_delta], [k_se * r.se_delta]],
                    fmt=marker, color=colour, markersize=5, capsize=2, lw=1)
    ax.axvline(0.0, color="grey", lw=0.8, ls=":")
    ax.set_yticks(ys)
    ax.set_yticklabels([labels[r.model_id][0] for r in rows], fontsize=7)
    ax.set_xlabel(r"$\Delta$elpd $\pm$ %g se" % k_se)
    ax.set_title(title, fontsize=9)


def render_report(report: FilterReport, mv: Multiverse, qoi_rows: list[QoiRow] | None,
                  out_dir: str | Path, k_se: float = 2.0) -> list[str]:
    """Render the report plots as SVG; returns a list of notes for stdout.

    Panels: elpd differences for all compared models and for the filtered
    set, a quantity-of-interest interval plot when summaries are supplied,
    and one PIT-ECDF band plot per checked model.
    """
    out = Path(out_dir) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    notes: list[str] = []

    labels = {}
    for mid, o in report.outcomes.items():
        labels[mid] = (f"Model {o.ordinal}", o.family)

    if report.comparison is not None:
        rows = list(report.comparison.rows.values())
        fig, axes = plt.subplots(1, 2, figsize=(9, max(3.0, 0.22 * len(rows) + 1.2)))
        _elpd_panel(axes[0], rows, labels, k_se, f"all {len(rows)} compared models")
        kept = [r for r in rows if r.model_id in report.filtered_set]
        if kept:
            _elpd_panel(axes[1], kept, labels, k_se, f"filtered set ({len(kept)} models)")
        else:
            axes[1].text(0.5, 0.5, "EMPTY FILTERED SET", ha="center", va="center",
                         transform=axes[1].transAxes, color=UNRELIABLE_COLOUR, fontsize=14)
            axes[1].set_xticks([])
            axes[1].set_yticks([])
            notes.append("filtered set is empty")
        fig.tight_layout()
        fig.savefig(out / "elpd_differences.svg")
        plt.close(fig)
    else:
        notes.append("no comparison available (no model produced usable draws)")

    if qoi_rows:
        present = [r for r in qoi_rows if r.present]
        if present:
            fig, ax = plt.subplots(figsize=(7, max(3.0, 0.22 * len(present) + 1.0)))
            ys = np.arange(len(present))[::-1]
            for y, r in zip(ys, present):
                q = r.quantiles
                in_set = r.status == "retained"
                colour = "tab:blue" if in_set else "lightgrey"
                ax.plot([q["q2.5"], q["q97.5"]], [y, y], color=colour, lw=1)
                ax.plot([q["q25"], q["q75"]], [y, y], color=colour, lw=3)
                ax.plot([q["q50"]], [y], "o", color=colour, markersize=4)
            ax.set_yticks(ys)
            ax.set_yticklabels([f"Model {r.ordinal}" for r in present], fontsize=7)
            ax.axvline(0.0, color="grey", lw=0.8, ls=":")
            ax.set_title("quantity of interest: median, 50% and 95% intervals", fontsize=9)
            fig.tight_layout()
            fig.savefig(out / "qoi_intervals.svg")
            plt.close(fig)

    for mid, detail in sorted(report.ppc_detail.items(), key=lambda kv: report.outcomes[kv[0]].ordinal):
        o = report.outcomes[mid]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.fill_between(detail["grid"], detail["lower"], detail["upper"],
                        color="lightgrey", label="simultaneous band")
        ax.plot(detail["grid"], detail["ecdf"], color=RELIABLE_COLOUR, lw=1, label="PIT ECDF")
        ax.plot([0, 1], [0, 1], color="grey", lw=0.6, ls=":")
        ax.set_title(f"Model {o.ordinal}: PIT ECDF ({o.ppc_verdict})", fontsize=9)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(out / f"pit_ecdf_model{o.ordinal:03d}.svg")
        plt.close(fig)

    missing = [mid for mid in report.outcomes
               if mid not in report.ppc_detail and report.outcomes[mid].status == "retained"]
    for mid in missing:
        notes.append(f"plot omitted for {labels[mid][0]}: no draws available")
    return notes


def write_qoi_table(qoi_rows: list[QoiRow], qoi: str, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / f"qoi_{qoi}.csv",
        ["model_id", "ordinal", "status", "present", "q2.5", "q25", "q50", "q75", "q97.5"],
        [
            [r.model_id, r.ordinal, r.status, r.present]
            + [_fmt(r.quantiles.get(k)) for k in ("q2.5", "q25", "q50", "q75", "q97.5")]
            for r in qoi_rows
        ],
    )
