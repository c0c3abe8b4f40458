"""Report rendering for the experiment harness: delimited files for
machines, matplotlib figures for humans, written side by side."""

from __future__ import annotations

import csv
from importlib import resources
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .harness import BenchReport, ScenarioRunner, SweepRow  # noqa: E402


def builtin_scenarios() -> dict[str, str]:
    """Packaged scenario scripts by name (without the .scn suffix)."""
    scripts = {}
    root = resources.files("sovereign") / "scenarios"
    for entry in root.iterdir():
        if entry.name.endswith(".scn"):
            scripts[entry.name[:-4]] = entry.read_text(encoding="utf-8")
    return scripts


def load_scenario(ref: str) -> tuple[str, str]:
    """Resolve a path or builtin name to (name, script text)."""
    path = Path(ref)
    if path.is_file():
        return path.stem, path.read_text(encoding="utf-8")
    builtins = builtin_scenarios()
    if ref in builtins:
        return ref, builtins[ref]
    raise FileNotFoundError(
        f"no scenario file {ref!r}; builtins: {', '.join(sorted(builtins))}"
    )


def _ensure_dir(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def write_bench_report(report: BenchReport, out_dir) -> list[Path]:
    out = _ensure_dir(out_dir)
    csv_path = out / "bench.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "category", "median_us", "p10_us", "p90_us",
                         "payload_bytes", "iterations"])
        for row in report.rows:
            writer.writerow([row.path, row.category, f"{row.median_us:.2f}",
                             f"{row.p10_us:.2f}", f"{row.p90_us:.2f}",
                             report.payload_size, report.iterations])
    png_path = out / "bench.png"
    _bench_figure(report, png_path)
    return [csv_path, png_path]


def _bench_figure(report: BenchReport, path: Path) -> None:
    paths = ("publish", "receive", "keying")
    categories = sorted(report.categories())
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(paths)
    for offset, which in enumerate(paths):
        values = []
        for category in categories:
            try:
                values.append(report.row(which, category).median_us)
            except KeyError:
                values.append(0.0)
        positions = [i + offset * width for i in range(len(categories))]
        ax.bar(positions, values, width=width, label=which)
    ax.set_xticks([i + width for i in range(len(categories))])
    ax.set_xticklabels(categories, rotation=20)
    ax.set_ylabel("median µs per operation")
    ax.set_title(f"pipeline execution breakdown ({report.payload_size} B payload)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# loss sweep
# ---------------------------------------------------------------------------

def write_sweep_report(rows: list[SweepRow], out_dir) -> list[Path]:
    out = _ensure_dir(out_dir)
    csv_path = out / "loss_sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loss_probability", "kind", "delivered", "attempts",
                         "rate"])
        for row in rows:
            writer.writerow([row.loss_probability, row.kind, row.delivered,
                             row.attempts, f"{row.rate:.4f}"])
    png_path = out / "loss_sweep.png"
    _sweep_figure(rows, png_path)
    return [csv_path, png_path]


def _sweep_figure(rows: list[SweepRow], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in ("content", "command"):
        points = sorted((r.loss_probability, r.rate) for r in rows
                        if r.kind == kind)
        if points:
            ax.plot([p for p, _ in points], [r for _, r in points],
                    marker="o", label=kind)
    ax.set_xlabel("per-face loss probability")
    ax.set_ylabel("delivery rate")
    ax.set_ylim(-0.02, 1.02)
    ax.axhline(0.99, color="grey", linewidth=0.8, linestyle="--")
    ax.set_title("delivery under loss (retransmission + redundancy)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# scenario artifacts
# ---------------------------------------------------------------------------

def write_scenario_report(runner: ScenarioRunner, name: str, out_dir) -> list[Path]:
    out = _ensure_dir(out_dir)
    trace_path = out / f"{name}.trace"
    runner.bus.write_trace(trace_path)
    results_path = out / f"{name}.results.csv"
    with open(results_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expectation", "ok", "detail"])
        for text, ok, detail in runner.results:
            writer.writerow([text, ok, detail])
    return [trace_path, results_path]
