"""Usage log, cost table and report figures."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .gateway import UsageRecord

COST_COLUMNS = ("kind", "runs", "calls", "avg_input", "avg_output", "avg_cost", "avg_wall_s")


def append_usage(path: str | Path, kind: str, usage: UsageRecord, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {"kind": kind, **usage.to_dict(), **extra}
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")


def load_usage(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cost_table(entries: Iterable[Mapping]) -> list[dict]:
    """Per-run averages grouped by command kind, in first-seen order."""
    groups: dict[str, list[Mapping]] = defaultdict(list)
    for e in entries:
        groups[e["kind"]].append(e)
    rows = []
    for kind, runs in groups.items():
        n = len(runs)
        rows.append({
            "kind": kind,
            "runs": n,
            "calls": sum(r["call_count"] for r in runs),
            "avg_input": sum(r["total_input_tokens"] for r in runs) / n,
            "avg_output": sum(r["total_output_tokens"] for r in runs) / n,
            "avg_cost": sum(r["total_cost"] for r in runs) / n,
            "avg_wall_s": sum(r["total_wall_ms"] for r in runs) / n / 1000.0,
        })
    return rows


def format_table(rows: Sequence[Mapping], columns: Sequence[str] = COST_COLUMNS, sep: str = "\t") -> str:
    def fmt(col, value):
        if col == "avg_cost":
            return f"{value:.6f}"
        if isinstance(value, float):
            return f"{value:.2f}"
        return str(value)
    lines = [sep.join(columns)]
    lines += [sep.join(fmt(c, row[c]) for c in columns) for row in rows]
    return "\n".join(lines)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_cost_figure(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Grouped bars of average input/output tokens per run, cost on a twin axis."""
    plt = _pyplot()
    kinds = [r["kind"] for r in rows]
    xs = range(len(kinds))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.bar([x - width / 2 for x in xs], [r["avg_input"] for r in rows], width, label="avg input")
    ax.bar([x + width / 2 for x in xs], [r["avg_output"] for r in rows], width, label="avg output")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(kinds)
    ax.set_ylabel("tokens per run")
    ax2 = ax.twinx()
    ax2.plot(list(xs), [r["avg_cost"] for r in rows], "ko--", label="avg cost")
    ax2.set_ylabel("cost per run")
    handles = ax.get_legend_handles_labels()
    handles2 = ax2.get_legend_handles_labels()
    ax.legend(handles[0] + handles2[0], handles[1] + handles2[1], frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_score_figure(scores: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    """One histogram panel per metric."""
    plt = _pyplot()
    names = list(scores)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.0), squeeze=False)
    for ax, name in zip(axes[0], names):
        ax.hist(scores[name], bins=10, range=(0.0, 1.0), color="0.4", edgecolor="white")
        ax.set_title(name)
        ax.set_xlim(0, 1)
        ax.set_xlabel("score")
    axes[0][0].set_ylabel("pairs")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
