"""Markdown report and figure rendering."""

import torch

from mclab.report import (_fmt, plot_curve, plot_image_grid, render_report,
                          summary_table)


def row(task, attack, defense, ca, asr):
    return {"task": task, "attack": attack, "defense": defense,
            "clean_accuracy": ca, "attack_success_rate": asr}


def test_fmt_renders_percent_and_placeholder():
    assert _fmt(0.8765) == "87.6"
    assert _fmt("0.5") == "50.0"
    assert _fmt(None) == "-"
    assert _fmt("") == "-"


def test_summary_table_layout():
    rows = [row("zero_shot", "badclip", "none", 0.9, 0.95),
            row("zero_shot", "badclip", "cleanclip", 0.88, 0.12),
            row("zero_shot", "none", "none", 0.92, ""),
            row("linear_probe", "badclip", "none", 0.8, 0.7)]
    table = summary_table(rows, "zero_shot")
    lines = table.strip().splitlines()
    assert lines[0] == "| attack | cleanclip CA / ASR | none CA / ASR |"
    assert "| badclip | 88.0 / 12.0 | 90.0 / 95.0 |" in lines
    assert "| none | - | 92.0 / - |" in lines
    # linear probe rows must not leak into the zero-shot table
    assert "80.0" not in table


def test_summary_table_empty_task():
    assert summary_table([], "zero_shot") == "_no zero_shot results_\n"


def test_plot_curve_writes_png(tmp_path):
    path = tmp_path / "figs" / "curve.png"
    plot_curve([1, 2, 4], [0.1, 0.5, 0.9], "x", "asr", "demo", path)
    assert path.exists()
    assert path.stat().st_size > 0


def test_plot_image_grid_accepts_rgb_and_gray(tmp_path):
    path = tmp_path / "grid.png"
    plot_image_grid([torch.rand(3, 8, 8), torch.rand(8, 8)],
                    ["rgb", "mask"], path)
    assert path.exists()


def test_render_report_full(tmp_path):
    results = [row("zero_shot", "badclip", "none", 0.9, 0.95),
               row("linear_probe", "badclip", "none", 0.85, 0.8)]
    sweeps = [{"sweep": "poison_count", "value": "2", "attack": "badclip",
               "clean_accuracy": "0.9", "attack_success_rate": "0.4"},
              {"sweep": "poison_count", "value": "8", "attack": "badclip",
               "clean_accuracy": "0.9", "attack_success_rate": "0.9"},
              {"sweep": "objective", "value": "full+pps", "attack": "badclip",
               "clean_accuracy": "0.9", "attack_success_rate": "0.95"}]
    detections = [{"model": "pretrained", "pl1_norm": 0.42, "dispersion": 0.1,
                   "verdict": "clean"},
                  {"model": "poisoned_badclip", "pl1_norm": 0.03,
                   "dispersion": 0.8, "verdict": "backdoored"}]
    path = render_report(results, tmp_path, sweep_rows=sweeps,
                         detection_rows=detections)
    text = path.read_text()
    assert "## Zero Shot" in text
    assert "## Linear Probe" in text
    assert "## Trigger inversion" in text
    assert "| poisoned_badclip | 0.0300 | 0.800 | backdoored |" in text
    assert "### poison_count" in text
    assert "### objective" in text
    assert (tmp_path / "sweep_poison_count.png").exists()
    # non-numeric sweep values get a table but no curve
    assert not (tmp_path / "sweep_objective.png").exists()


def test_render_report_without_extras(tmp_path):
    path = render_report([row("zero_shot", "none", "none", 1.0, "")], tmp_path)
    text = path.read_text()
    assert "## Zero Shot" in text
    assert "Trigger inversion" not in text
    assert "Sweeps" not in text
