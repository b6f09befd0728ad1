"""Cross-run comparison: delimited tables plus rendered figures.

Consumes run directories produced by the train/evaluate commands (manifest,
training logs, eval reports) and emits a CSV + text table, a BLEU-vs-
similarity-search scatter (one point per run), and training loss curves.
Figures are rendered with matplotlib to SVG files next to the tables.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

log = logging.getLogger(__name__)

TABLE_COLUMNS = (
    "run", "pipeline", "seed", "split", "bleu_st", "bleu_mt", "bleu_asr",
    "simsearch", "src_vocab_rate", "tgt_vocab_rate", "reports",
)


class ReportError(ValueError):
    pass


def collect_run(run_dir: str | Path) -> dict:
    """Gather manifest, eval reports, and training logs from one run directory."""
    run_dir = Path(run_dir)
    info: dict = {"run": run_dir.name, "dir": str(run_dir), "reports": [],
                  "logs": {}, "manifest": None, "absent": []}
    manifest = run_dir / "manifest.json"
    if manifest.exists():
        try:
            info["manifest"] = json.loads(manifest.read_text())
        except json.JSONDecodeError as exc:
            info["absent"].append(f"manifest unreadable: {exc}")
    else:
        info["absent"].append("manifest.json missing")
    found = sorted(run_dir.rglob("report.json"))
    if not found:
        info["absent"].append("no eval reports")
    for path in found:
        try:
            info["reports"].append(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            info["absent"].append(f"{path.name} unreadable: {exc}")
    for log_path in sorted(run_dir.glob("*.log.csv")):
        try:
            with log_path.open() as fh:
                rows = list(csv.DictReader(fh))
            info["logs"][log_path.stem.replace(".log", "")] = rows
        except OSError as exc:
            info["absent"].append(f"{log_path.name} unreadable: {exc}")
    return info


def run_table_row(info: dict) -> dict:
    row = {c: "" for c in TABLE_COLUMNS}
    row["run"] = info["run"]
    m = info.get("manifest") or {}
    row["pipeline"] = m.get("pipeline", "")
    row["seed"] = m.get("seed", "")
    row["reports"] = len(info["reports"])
    best: dict[str, float] = {}
    for rep in info["reports"]:
        row["split"] = rep.get("split", row["split"])
        for task, score in rep.get("bleu", {}).items():
            best[task] = max(best.get(task, -1.0), float(score))
            members = rep.get("vocab_membership", {}).get(task, {})
            if task == "st" and members:
                row["src_vocab_rate"] = f"{members.get('src', 0):.4f}"
                row["tgt_vocab_rate"] = f"{members.get('tgt', 0):.4f}"
        acc = rep.get("simsearch_accuracy")
        if acc is not None:
            row["simsearch"] = f"{acc:.4f}"
    for task in ("st", "mt", "asr"):
        if task in best:
            row[f"bleu_{task}"] = f"{best[task]:.2f}"
    return row


def write_table(rows: list[dict], out_dir: Path) -> dict[str, str]:
    csv_path = out_dir / "comparison.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c)
              for c in TABLE_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in TABLE_COLUMNS)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in TABLE_COLUMNS))
    txt_path = out_dir / "comparison.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    return {"csv": str(csv_path), "txt": str(txt_path)}


def render_scatter(infos: list[dict], path: Path) -> int:
    """BLEU vs similarity-search accuracy, one point per run; returns point count."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs, ys, labels = [], [], []
    for info in infos:
        acc, bleu = None, None
        for rep in info["reports"]:
            if rep.get("simsearch_accuracy") is not None:
                acc = float(rep["simsearch_accuracy"])
            scores = rep.get("bleu", {})
            for task in ("st", "mt", "asr"):
                if task in scores:
                    bleu = float(scores[task]) if bleu is None else bleu
                    break
        if acc is not None and bleu is not None:
            xs.append(acc)
            ys.append(bleu)
            labels.append(info["run"])
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.scatter(xs, ys, s=42, zorder=3)
    for x, y, name in zip(xs, ys, labels):
        ax.annotate(name, (x, y), textcoords="offset points", xytext=(5, 4), fontsize=8)
    ax.set_xlabel("similarity search accuracy")
    ax.set_ylabel("BLEU")
    ax.set_title("Translation quality vs modality alignment")
    ax.grid(True, alpha=0.3, zorder=0)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return len(xs)


def render_loss_curves(infos: list[dict], path: Path) -> int:
    """Per-stage total-loss curves for every run; returns curve count."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    n = 0
    for info in infos:
        for stage, rows in info["logs"].items():
            steps = [int(r["step"]) for r in rows]
            totals = [float(r["total"]) for r in rows]
            if not steps:
                continue
            ax.plot(steps, totals, label=f"{info['run']}:{stage}", linewidth=1.0)
            n += 1
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    if n:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return n


def generate_report(run_dirs: list[str | Path], out_dir: str | Path) -> dict:
    """Aggregate many runs; absent pieces are reported, not fatal."""
    if not run_dirs:
        raise ReportError("no run directories given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    infos = [collect_run(d) for d in run_dirs]
    rows = [run_table_row(i) for i in infos]
    paths = write_table(rows, out_dir)
    paths["scatter_svg"] = str(out_dir / "bleu_vs_simsearch.svg")
    points = render_scatter(infos, Path(paths["scatter_svg"]))
    paths["loss_curves_svg"] = str(out_dir / "loss_curves.svg")
    curves = render_loss_curves(infos, Path(paths["loss_curves_svg"]))
    absent = {i["run"]: i["absent"] for i in infos if i["absent"]}
    summary = {
        "runs": len(infos),
        "scatter_points": points,
        "loss_curves": curves,
        "absent": absent,
        "paths": paths,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
