"""Delimited and plain-text report rendering, with matplotlib figures saved
next to the tabular output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .diffusion import FusionWeights  # noqa: E402
from .evaluation import EvalReport  # noqa: E402
from .pipeline import SweepTable  # noqa: E402


def format_param(value) -> str:
    if value is None:
        return "inf"
    if isinstance(value, FusionWeights):
        return ",".join(format(w, "g") for w in
                        (value.text, value.visual, value.diffusion_tv, value.diffusion_vt))
    if isinstance(value, float):
        return format(value, "g")
    return str(value)


def _param_display(name: str, value) -> str:
    # k=None means "use all l candidates", iterations=None means "to convergence"
    if name == "k" and value is None:
        return "l"
    return format_param(value)


def render_text_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(header))).rstrip(),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def sweep_rows(table: SweepTable) -> tuple[list[str], list[list[str]]]:
    header = [*table.dimensions, "map", "t_stat", "significant", "status", "query_failures"]
    rows = []
    for cell in table.cells:
        row = [_param_display(dim, cell.params[dim]) for dim in table.dimensions]
        row.append(f"{cell.map_score:.6f}" if cell.map_score is not None else "")
        if cell.ttest is None:
            row.extend(["", ""])
        else:
            row.append(f"{cell.ttest.statistic:.4f}")
            row.append("yes" if cell.ttest.significant else "no")
        row.append(cell.status)
        row.append(str(cell.query_failures))
        rows.append(row)
    return header, rows


def write_sweep_outputs(table: SweepTable, out_dir) -> list[Path]:
    """Write sweep.tsv, an aligned sweep.txt, and MAP figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header, rows = sweep_rows(table)
    written = []

    tsv_path = out / "sweep.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")
    written.append(tsv_path)

    txt_path = out / "sweep.txt"
    banner = (f"baseline ({table.baseline_label}): MAP {table.baseline_map:.6f}\n\n")
    txt_path.write_text(banner + render_text_table(header, rows), encoding="utf-8")
    written.append(txt_path)

    written.extend(_sweep_figures(table, out))
    return written


def _sweep_figures(table: SweepTable, out: Path) -> list[Path]:
    scored = [c for c in table.cells if c.map_score is not None]
    if not scored:
        return []
    written = []

    labels = [
        " ".join(f"{d}={_param_display(d, c.params[d])}" for d in table.dimensions)
        for c in scored
    ]
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.35 * len(scored) + 1.5)))
    ypos = range(len(scored))
    ax.barh(list(ypos), [c.map_score for c in scored], color="#4878a8")
    ax.axvline(table.baseline_map, color="#b04a4a", linestyle="--",
               label=f"baseline ({table.baseline_label})")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("MAP")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = out / "sweep_map.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    varying = [d for d in table.dimensions
               if len({format_param(c.params[d]) for c in scored}) > 1]
    if len(varying) == 1:
        dim = varying[0]
        xs = [_param_display(dim, c.params[dim]) for c in scored]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(range(len(xs)), [c.map_score for c in scored], marker="o",
                color="#4878a8", label="sweep")
        ax.axhline(table.baseline_map, color="#b04a4a", linestyle="--",
                   label=f"baseline ({table.baseline_label})")
        ax.set_xticks(range(len(xs)))
        ax.set_xticklabels(xs)
        ax.set_xlabel(dim)
        ax.set_ylabel("MAP")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"map_vs_{dim}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_eval_outputs(report: EvalReport, out_dir, name: str = "eval") -> list[Path]:
    """Write per-query AP as TSV plus a bar figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    tsv_path = out / f"{name}.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("query_id\tap\n")
        for query_id in sorted(report.per_query_ap):
            fh.write(f"{query_id}\t{report.per_query_ap[query_id]:.6f}\n")
        fh.write(f"all\t{report.map_score:.6f}\n")
    written.append(tsv_path)

    if report.per_query_ap:
        queries = sorted(report.per_query_ap)
        fig, ax = plt.subplots(figsize=(8, max(2.5, 0.25 * len(queries) + 1.5)))
        ax.barh(range(len(queries)), [report.per_query_ap[q] for q in queries],
                color="#4878a8")
        ax.axvline(report.map_score, color="#b04a4a", linestyle="--",
                   label=f"MAP {report.map_score:.4f}")
        ax.set_yticks(range(len(queries)))
        ax.set_yticklabels(queries, fontsize=7)
        ax.invert_yaxis()
        ax.set_xlabel("average precision")
        ax.set_xlim(0, 1.05)
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        path = out / f"{name}_ap.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
