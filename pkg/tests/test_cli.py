import json

import numpy as np
import pytest

from conftest import small_config
from moeedit.cli import emit_plot_data, run_cli
from moeedit.config import config_hash, format_config, load_config, parse_config
from moeedit.container import load_container
from moeedit.harness import BenchRow, ExperimentConfig, SweepRow
from moeedit.moe_core import load_model


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(format_config(small_config()))
    return path


def _run(*argv):
    return run_cli([str(a) for a in argv])


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


# config files


def test_config_round_trip():
    cfg = small_config(edit_layers=[0, 2], projection=False, solver="both")
    assert parse_config(format_config(cfg)) == cfg


def test_config_parsing_rules():
    cfg = parse_config("# comment\nd_model = 16  # trailing\nedit_layers = 2,0\nprojection = off\nlam=0.5\n")
    assert (cfg.d_model, cfg.edit_layers, cfg.projection, cfg.lam) == (16, [0, 2], False, 0.5)
    for bad in ("nonsense = 1", "lam = 1\nlam = 2", "d_model = abc", "just text", "lam = -1"):
        with pytest.raises(ValueError):
            parse_config(bad)


def test_config_hash_tracks_content():
    assert config_hash(small_config()) == config_hash(small_config())
    assert config_hash(small_config()) != config_hash(small_config(seed=3))


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        load_config(tmp_path / "nope.cfg")


# invocation


def test_edit_run_contract(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert _run("edit", "--config", cfg_file, "--out", out, "--quiet") == 0
    man = _manifest(out)
    assert man["status"] == "complete" and man["subcommand"] == "edit"
    assert man["config_hash"] == config_hash(small_config())
    for name in ("outcomes.tsv", "batches.tsv", "routing_heldout.tsv", "summary.json", "final_model.npz"):
        assert name in man["files"] and (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert ExperimentConfig(**summary["config"]) == small_config()
    header = (out / "outcomes.tsv").read_text().splitlines()[0]
    assert header == "batch\tlayer\texample\tpre_residual\tpost_residual"
    load_model(out / "final_model.npz")


def test_missing_config_exits_1_with_path(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    assert _run("edit", "--config", missing, "--out", tmp_path / "o") == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag_exits_1(tmp_path, capsys):
    assert _run("edit", "--bogus", "--out", tmp_path) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_1(tmp_path):
    assert _run("frobnicate", "--out", tmp_path) == 1


def test_invalid_config_value_exits_1(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("batch_size = 0\n")
    assert _run("edit", "--config", bad, "--out", tmp_path / "o") == 1


def test_solver_failure_exits_2(cfg_file, tmp_path, monkeypatch):
    import moeedit.harness as harness
    from moeedit.solver import SolverError

    def broken(*a, **k):
        raise SolverError("factorization failed")

    monkeypatch.setattr(harness, "bcd_solve", broken)
    assert _run("edit", "--config", cfg_file, "--out", tmp_path / "o", "--quiet") == 2


def test_seed_override(cfg_file, tmp_path):
    out = tmp_path / "s"
    assert _run("gen", "--config", cfg_file, "--out", out, "--seed", 11, "--quiet") == 0
    assert _manifest(out)["seed"] == 11
    assert load_model(out / "model.npz").seed == 11
    arrays, meta = load_container(out / "prompts.npz")
    assert arrays["edit"].shape == (12, 12) and meta["seed"] == 11


def test_thread_env_is_validated(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("MOEEDIT_THREADS", "x")
    assert _run("gen", "--config", cfg_file, "--out", tmp_path / "t") == 1
    monkeypatch.setenv("MOEEDIT_THREADS", "1")
    assert _run("gen", "--config", cfg_file, "--out", tmp_path / "t", "--quiet") == 0


def test_analyze_after_edit(cfg_file, tmp_path):
    out = tmp_path / "a"
    assert _run("analyze", "--config", cfg_file, "--out", out, "--quiet") == 1
    assert _run("edit", "--config", cfg_file, "--out", out, "--quiet") == 0
    assert _run("analyze", "--config", cfg_file, "--out", out, "--quiet") == 0
    rows = (out / "analysis" / "analysis.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:4] == ["set", "layer", "mean_rs", "mean_kl"]
    pres = [r.split("\t") for r in rows[1:] if r.startswith("preservation")]
    assert all(float(r[2]) == 1.0 for r in pres)


def test_ablate_and_sweep_outputs(cfg_file, tmp_path):
    assert _run("ablate", "--config", cfg_file, "--out", tmp_path / "ab", "--quiet") == 0
    summary = json.loads((tmp_path / "ab" / "summary.json").read_text())
    assert "direction_violations" in summary
    assert _run("sweep", "--config", cfg_file, "--out", tmp_path / "sw", "--quiet") == 0
    lines = (tmp_path / "sw" / "plot_passes.csv").read_text().splitlines()
    assert lines[0] == "passes,mean_residual,preservation_drift"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2", "4"]


def test_bench_rerun_is_identical_apart_from_timing(cfg_file, tmp_path):
    outs = [tmp_path / "b1", tmp_path / "b2"]
    for out in outs:
        assert _run("bench", "--config", cfg_file, "--out", out, "--quiet") == 0
    tables = [(o / "bench.tsv").read_text().splitlines() for o in outs]
    assert tables[0][0].split("\t") == ["n_experts", "t_bcd_ms", "t_global_ms", "objective_bcd", "objective_global"]
    for a, b in zip(*tables):
        a, b = a.split("\t"), b.split("\t")
        assert (a[0], a[3], a[4]) == (b[0], b[3], b[4])
    assert (outs[0] / "summary.json").read_bytes() == (outs[1] / "summary.json").read_bytes()


# plot data


def test_plot_schemas(tmp_path):
    sweep = [SweepRow(2, 0.125, 1e-15), SweepRow(4, 1 / 3, 0.0)]
    bench = [BenchRow(8, 1.5, 2.0, 0.1, 0.1), BenchRow(64, 3.25, None, 0.2, None)]
    (p,) = emit_plot_data(sweep, tmp_path)
    assert p.read_text() == "passes,mean_residual,preservation_drift\n2,0.125,1e-15\n4,0.333333333,0\n"
    (q,) = emit_plot_data(bench, tmp_path)
    assert q.read_text().splitlines() == ["n_experts,t_bcd_ms,t_global_ms", "8,1.5,2", "64,3.25,"]
    first = q.read_bytes()
    emit_plot_data(bench, tmp_path)
    assert q.read_bytes() == first
    with pytest.raises(TypeError):
        emit_plot_data([object()], tmp_path)
    assert emit_plot_data([], tmp_path) == []
