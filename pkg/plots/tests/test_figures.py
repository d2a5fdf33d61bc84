import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ppcplots import figures
from ppcplots.cli import main as plots_main
from ppcplots.io import SchemaMismatch, read_rows


@pytest.fixture(scope="session")
def run_dir(tmp_path_factory):
    """A small but complete run produced through the primary package's CLI,
    touching every experiment the figures consume."""
    out = tmp_path_factory.mktemp("run")
    cmd = [
        sys.executable, "-m", "ppcnav.cli", "run", "all",
        "--T", "90", "--seeds", "0", "--N", "60", "--out", str(out),
        "--set", "exp3_budgets=10,50,100,200",
        "--set", "exp3_reference=2000",
        "--set", "exp3_eval_points=100",
        "--set", "exp4_obstacles=3,5",
        "--set", "exp5_speeds=0.5,1.0,2.0,4.0",
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.mark.parametrize("figure_id", sorted(figures.FIGURES))
def test_every_figure_renders(run_dir, tmp_path, figure_id):
    out = figures.render(figure_id, run_dir, tmp_path / f"{figure_id}.png")
    assert out.exists() and out.stat().st_size > 0


def test_figures_reproduce_byte_identically(run_dir, tmp_path):
    for figure_id in sorted(figures.FIGURES):
        a = figures.render(figure_id, run_dir, tmp_path / "a" / f"{figure_id}.png")
        b = figures.render(figure_id, run_dir, tmp_path / "b" / f"{figure_id}.png")
        assert a.read_bytes() == b.read_bytes(), figure_id


def test_sample_budget_slope_matches_csv_exponent(run_dir, tmp_path):
    rows = read_rows(run_dir / "exp3" / "summary.csv",
                     ["n_samples", "score_error", "fit_exponent"])
    csv_exponent = float(rows[0]["fit_exponent"])
    groups = {}
    for r in rows:
        groups.setdefault(float(r["n_samples"]), []).append(float(r["score_error"]))
    ns = np.array(sorted(groups))
    errs = np.array([np.mean(groups[n]) for n in ns])
    assert abs(figures.fit_slope(ns, errs) - csv_exponent) < 1e-6
    figures.render("sample_budget", run_dir, tmp_path / "fig7.png")


def test_missing_input_raises_schema_mismatch(tmp_path):
    with pytest.raises(SchemaMismatch):
        figures.render("stiffness", tmp_path, tmp_path / "x.png")


def test_empty_csv_rejected(tmp_path):
    exp2 = tmp_path / "exp2"
    exp2.mkdir(parents=True)
    (tmp_path / "manifest.txt").write_text("schema_version=1\n")
    (exp2 / "summary.csv").write_text("beta_ratio,seed,safety_rate,normalized_cost\n")
    with pytest.raises(SchemaMismatch, match="no data rows"):
        figures.render("stiffness", tmp_path, tmp_path / "x.png")


def test_missing_column_named(tmp_path):
    exp2 = tmp_path / "exp2"
    exp2.mkdir(parents=True)
    (tmp_path / "manifest.txt").write_text("schema_version=1\n")
    (exp2 / "summary.csv").write_text("beta_ratio,seed\n0.1,0\n")
    with pytest.raises(SchemaMismatch, match="safety_rate"):
        figures.render("stiffness", tmp_path, tmp_path / "x.png")


def test_cli_exit_codes(run_dir, tmp_path):
    assert plots_main(["stiffness", "--run-dir", str(run_dir),
                       "--out", str(tmp_path / "s.png")]) == 0
    assert plots_main(["stiffness", "--run-dir", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "s2.png")]) == 2


def test_cli_render_all(run_dir, tmp_path):
    assert plots_main(["all", "--run-dir", str(run_dir), "--out", str(tmp_path)]) == 0
    for figure_id in figures.FIGURES:
        assert (tmp_path / f"{figure_id}.png").exists()
