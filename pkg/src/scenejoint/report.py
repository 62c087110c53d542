"""Evaluation report serialization: JSON with a config header, per-scene CSV and a summary figure."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path

from scenejoint.harness import EvalResult

REPORT_FORMAT = "scenejoint-eval-v1"
CSV_FIELDS = ("method", "scenario_id", "avg_min_ade", "avg_min_fde", "avg_mr", "collided", "best_world_index", "mode_indices")
FIGURE_METRICS = (("avg_min_ade", "avgMinADE (m)"), ("avg_min_fde", "avgMinFDE (m)"), ("avg_mr", "avgMR"), ("avg_cr", "CR"))


def report_dict(result: EvalResult, dataset: str | None = None) -> dict:
    return {
        "format": REPORT_FORMAT,
        "header": {
            "metrics": asdict(result.metrics),
            "checkpoint_id": result.checkpoint_id,
            "dataset": dataset,
            "methods": list(result.reports),
            "num_scenes": len(result.items),
        },
        "methods": {
            m: {"aggregates": rep.aggregates, "rows": [r.as_dict() for r in rep.rows]} for m, rep in result.reports.items()
        },
    }


def report_json(result: EvalResult, dataset: str | None = None) -> bytes:
    return (json.dumps(report_dict(result, dataset), indent=2, sort_keys=True) + "\n").encode()


def report_csv(result: EvalResult) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for method, rep in result.reports.items():
        for r in rep.rows:
            writer.writerow(
                [
                    method,
                    r.scenario_id,
                    repr(r.avg_min_ade),
                    repr(r.avg_min_fde),
                    repr(r.avg_mr),
                    int(r.collided),
                    r.best_world_index,
                    ";".join(str(k) for k in r.mode_indices),
                ]
            )
    return buf.getvalue().encode()


def write_figure(path: str | Path, result: EvalResult) -> Path:
    """Bar chart of the aggregate metrics per method, rendered off-screen to PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    methods = list(result.reports)
    fig, axes = plt.subplots(1, len(FIGURE_METRICS), figsize=(3.2 * len(FIGURE_METRICS), 3.2))
    for ax, (key, label) in zip(axes, FIGURE_METRICS):
        values = [result.reports[m].aggregates[key] for m in methods]
        ax.bar(range(len(methods)), values, color=["#1f77b4", "#ff7f0e", "#2ca02c"][: len(methods)])
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels([m.replace("_", "\n") for m in methods], fontsize=8)
        ax.set_title(label, fontsize=10)
    fig.suptitle(f"{len(result.items)} scenes, dist_safe={result.metrics.dist_safe} m", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
