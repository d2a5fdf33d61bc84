import csv
import os
import subprocess
import sys
from pathlib import Path

import pytest

from ppcnav import cli


def run_cli(args, cwd, env_extra=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "ppcnav.cli", *args],
        capture_output=True, text=True, cwd=cwd, env=env,
    )


# the module has no __main__ guard; exercise main() in process instead
def test_main_show_config_defaults(capsys):
    code = cli.main(["show-config"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK
    assert "T=300" in out
    assert "seeds=0,1,2" in out
    assert "n_samples=300" in out


def test_flag_overrides_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("T=120\nseeds=5\n")
    code = cli.main(["--config", str(cfg), "show-config"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK and "T=120" in out and "seeds=5" in out
    code = cli.main(["--config", str(cfg), "show-config", "--set", "T=99"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK and "T=99" in out


def test_validate_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("T=100\nbanana=1\n")
    code = cli.main(["--config", str(cfg), "validate-config"])
    err = capsys.readouterr().err
    assert code == cli.EXIT_CONFIG_ERROR
    assert "banana" in err
    assert "bad.cfg:2" in err


def test_validate_config_rejects_zero_horizon(capsys):
    code = cli.main(["validate-config", "--set", "T=0"])
    assert code == cli.EXIT_CONFIG_ERROR
    assert "T must be" in capsys.readouterr().err


def test_env_var_out_dir_between_file_and_flags(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("out_dir=from_file\n")
    monkeypatch.setenv(cli.ENV_OUT_DIR, "from_env")
    code = cli.main(["--config", str(cfg), "show-config"])
    assert code == cli.EXIT_OK
    assert "out_dir=from_env" in capsys.readouterr().out
    code = cli.main(["--config", str(cfg), "show-config", "--set", "out_dir=from_flag"])
    assert "out_dir=from_flag" in capsys.readouterr().out
    assert code == cli.EXIT_OK


def test_config_round_trip(tmp_path):
    config = cli.RunConfig()
    text = config.to_file_text()
    path = tmp_path / "dump.cfg"
    path.write_text(text)
    parsed = cli.apply_overrides(cli.RunConfig(), cli.parse_config_file(path), "test")
    assert parsed.to_file_text() == text


def test_run_checks_exit_zero(capsys):
    code = cli.main(["run", "checks", "--set", "checks_seed=0"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK
    assert "[PASS]" in out and "[FAIL]" not in out


def test_run_exp2_writes_expected_rows(tmp_path, capsys):
    code = cli.main([
        "run", "exp2", "--T", "20", "--seeds", "1", "--N", "40", "--out", str(tmp_path),
    ])
    assert code == cli.EXIT_OK
    summary = tmp_path / "exp2" / "summary.csv"
    with summary.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7  # one per beta ratio with a single seed
    assert (tmp_path / "manifest.txt").exists()
    assert (tmp_path / "exp2" / "landscape.csv").exists()
    assert (tmp_path / "exp2" / "timing.csv").exists()


def test_run_writes_manifest_before_episodes(tmp_path):
    # an invalid controller name aborts mid-run; the manifest must already exist
    with pytest.raises(ValueError):
        cli.main([
            "run", "exp1", "--T", "5", "--seeds", "0", "--N", "20",
            "--out", str(tmp_path), "--controllers", "nope",
        ])
    assert (tmp_path / "manifest.txt").exists()


def test_subprocess_entry_point(tmp_path):
    proc = run_cli(["show-config"], cwd=tmp_path)
    assert proc.returncode == cli.EXIT_OK
    assert "T=300" in proc.stdout
