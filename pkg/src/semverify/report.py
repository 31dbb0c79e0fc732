"""Benchmark summaries: delimited output plus rendered figures.

Aggregates result records into (sat/unsat/timeout) table rows, writes them
as CSV, and renders the matching bar chart and a runtime histogram next to
the CSV.  ``sat_unrealized`` is folded into ``sat`` in the summaries
(three-outcome presentation) but kept intact in the jsonl detail.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .modelio import ResultRecord

SUMMARY_ORDER = ("sat", "unsat", "timeout", "unknown")


def fold_verdict(verdict: str) -> str:
    return "sat" if verdict == "sat_unrealized" else verdict


def summarize(records: List[ResultRecord]) -> List[Dict]:
    """One row per group (property batches tag their group in statistics)."""
    groups: Dict[str, Dict] = {}
    for rec in records:
        group = str(rec.statistics.get("group", "all"))
        row = groups.setdefault(
            group,
            {"group": group, "sat": 0, "unsat": 0, "timeout": 0, "unknown": 0,
             "properties": 0, "wall_time_s": 0.0},
        )
        row[fold_verdict(rec.verdict)] += 1
        row["properties"] += 1
        row["wall_time_s"] += float(rec.statistics.get("wall_time_s", 0.0))
    return [groups[k] for k in sorted(groups)]


def format_table(rows: List[Dict]) -> str:
    lines = [f"{'group':<24} {'sat/unsat/timeout':>20} {'props':>6} {'time[s]':>9}"]
    for row in rows:
        triple = f"{row['sat']}/{row['unsat']}/{row['timeout']}"
        lines.append(
            f"{row['group']:<24} {triple:>20} {row['properties']:>6} "
            f"{row['wall_time_s']:>9.2f}"
        )
    return "\n".join(lines)


def write_summary_csv(rows: List[Dict], path: Path) -> Path:
    path = Path(path)
    fields = ["group", "sat", "unsat", "timeout", "unknown", "properties", "wall_time_s"]
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
    return path


def render_figures(records: List[ResultRecord], rows: List[Dict], out_dir: Path) -> List[Path]:
    """Verdict-count bars per group and a runtime histogram, as PNG files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(rows) + 2), 3.2))
    x = range(len(rows))
    width = 0.27
    colors = {"sat": "#c0504d", "unsat": "#4f81bd", "timeout": "#9bbb59"}
    for i, verdict in enumerate(("sat", "unsat", "timeout")):
        ax.bar(
            [xi + (i - 1) * width for xi in x],
            [row[verdict] for row in rows],
            width=width, label=verdict, color=colors[verdict],
        )
    ax.set_xticks(list(x))
    ax.set_xticklabels([row["group"] for row in rows], rotation=20, ha="right")
    ax.set_ylabel("properties")
    ax.set_title("verdicts per group")
    ax.legend()
    fig.tight_layout()
    counts_path = out_dir / "verdict_counts.png"
    fig.savefig(counts_path, dpi=150)
    plt.close(fig)
    paths.append(counts_path)

    times = [float(r.statistics.get("wall_time_s", 0.0)) for r in records]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist(times, bins=min(30, max(5, len(times) // 3 + 1)), color="#4f81bd")
    ax.set_xlabel("wall time per property [s]")
    ax.set_ylabel("count")
    ax.set_title("runtime distribution")
    fig.tight_layout()
    runtime_path = out_dir / "runtime_hist.png"
    fig.savefig(runtime_path, dpi=150)
    plt.close(fig)
    paths.append(runtime_path)
    return paths
