"""Report generation: markdown summary tables and figures from results files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402


def _fmt(value: str | float | None) -> str:
    if value is None or value == "":
        return "-"
    return f"{float(value) * 100:.1f}"


def summary_table(rows: list[dict], task: str = "zero_shot") -> str:
    """Markdown table of CA/ASR (percent) by attack x defense for one task."""
    picked = [r for r in rows if r["task"] == task]
    if not picked:
        return f"_no {task} results_\n"
    attacks = sorted({r["attack"] for r in picked})
    defenses = sorted({r["defense"] for r in picked})
    by_key = {(r["attack"], r["defense"]): r for r in picked}
    lines = [f"| attack | {' | '.join(f'{d} CA / ASR' for d in defenses)} |",
             f"|---|{'---|' * len(defenses)}"]
    for attack in attacks:
        cells = []
        for defense in defenses:
            row = by_key.get((attack, defense))
            if row is None:
                cells.append("-")
            else:
                cells.append(f"{_fmt(row['clean_accuracy'])} / "
                             f"{_fmt(row['attack_success_rate'])}")
        lines.append(f"| {attack} | {' | '.join(cells)} |")
    return "\n".join(lines) + "\n"


def plot_curve(xs: list[float], ys: list[float], xlabel: str, ylabel: str,
               title: str, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_image_grid(images: list[torch.Tensor], titles: list[str],
                    path: str | Path) -> None:
    """Save a row of images ([3,H,W] or [H,W] tensors in [0,1])."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6))
    if n == 1:
        axes = [axes]
    for ax, img, title in zip(axes, images, titles):
        arr = img.detach().cpu()
        if arr.dim() == 3:
            ax.imshow(arr.permute(1, 2, 0).clamp(0, 1).numpy())
        else:
            ax.imshow(arr.clamp(0, 1).numpy(), cmap="gray", vmin=0, vmax=1)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(results_rows: list[dict], out_dir: str | Path,
                  sweep_rows: list[dict] | None = None,
                  detection_rows: list[dict] | None = None) -> Path:
    """Write report.md (plus any sweep figures) under out_dir; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = ["# Experiment report", ""]
    for task in ("zero_shot", "linear_probe"):
        if any(r["task"] == task for r in results_rows):
            parts += [f"## {task.replace('_', ' ').title()} (CA / ASR, %)", "",
                      summary_table(results_rows, task), ""]

    if detection_rows:
        parts += ["## Trigger inversion", "",
                  "| model | normalized mask L1 | dispersion | verdict |",
                  "|---|---|---|---|"]
        for row in detection_rows:
            parts.append(f"| {row['model']} | {float(row['pl1_norm']):.4f} "
                         f"| {float(row.get('dispersion', 0)):.3f} | {row['verdict']} |")
        parts.append("")

    if sweep_rows:
        by_sweep: dict[str, list[dict]] = {}
        for row in sweep_rows:
            by_sweep.setdefault(row["sweep"], []).append(row)
        parts += ["## Sweeps", ""]
        for name, rows in sorted(by_sweep.items()):
            numeric = all(_is_number(r["value"]) for r in rows)
            if numeric:
                rows = sorted(rows, key=lambda r: float(r["value"]))
                fig_path = out_dir / f"sweep_{name}.png"
                plot_curve([float(r["value"]) for r in rows],
                           [float(r["attack_success_rate"]) for r in rows],
                           name, "attack success rate", f"ASR vs {name}", fig_path)
                parts.append(f"![{name}]({fig_path.name})")
                parts.append("")
            parts += [f"### {name}", "", "| value | CA | ASR |", "|---|---|---|"]
            for row in rows:
                parts.append(f"| {row['value']} | {_fmt(row['clean_accuracy'])} "
                             f"| {_fmt(row['attack_success_rate'])} |")
            parts.append("")

    report_path = out_dir / "report.md"
    report_path.write_text("\n".join(parts))
    return report_path


def _is_number(value) -> bool:
    try:
        float(value)
        return True
    except (TypeError, ValueError):
        return False
