"""End-to-end CLI tests: subcommands, exit codes, manifests, file formats.

Everything drives cli.main() in-process so exit codes and stderr text can be
asserted directly; a timed smoke-config run guards the CPU budget.
"""
import dataclasses
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from straightflow import cli
from straightflow.numerics import RngStream
from straightflow.metrics import measure_from_bundle
from straightflow.simulate import bundle_from_bytes, bundle_to_csv, integrate, one_step_sample
from straightflow.train import (
    TrainConfig,
    config_hash,
    init_state,
    load_checkpoint,
    save_checkpoint,
)

TINY = """\
run.seed = 5
data.d = 2
data.dataset = two_gaussians_fig1
model.interp_hidden = 8,8
model.field_hidden = 16,16
train.batch_n = 8
train.batch_m = 16
train.steps = 30
log.eval_every = 10
log.checkpoint_every = 0
log.probe_size = 16
log.probe_steps = 8
"""


def write_config(tmp_path, text=TINY) -> Path:
    path = tmp_path / "config.txt"
    path.write_text(text)
    return path


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


def trained_checkpoint(tmp_path, steps=30) -> Path:
    """Small trained run shared by sample/eval/plot tests."""
    cfg = write_config(tmp_path, TINY.replace("train.steps = 30", f"train.steps = {steps}"))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out / "ckpt_final.bin"


# train --------------------------------------------------------------------------

def test_train_writes_artifacts_and_manifest(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists() and (out / "ckpt_final.bin").exists()
    manifest = read_manifest(out / "manifest.txt")
    assert manifest["run.command"] == "train"
    assert manifest["run.steps"] == "30"
    assert len(manifest["config.hash"]) == 64
    assert manifest["file.ckpt_final.bin"].startswith("sha256:")
    assert manifest["file.metrics.csv"].startswith("sha256-nowall:")
    # manifest text is sorted canonical key-value
    lines = (out / "manifest.txt").read_text().splitlines()
    assert lines == sorted(lines)
    assert "30 steps" in capsys.readouterr().out


def test_train_reruns_reproduce_hashes(tmp_path):
    cfg = write_config(tmp_path)
    cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")])
    a = read_manifest(tmp_path / "a" / "manifest.txt")
    b = read_manifest(tmp_path / "b" / "manifest.txt")
    assert a["file.ckpt_final.bin"] == b["file.ckpt_final.bin"]
    assert a["file.metrics.csv"] == b["file.metrics.csv"]


def test_train_seed_override_changes_only_the_seed(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--seed", "99", "--out", str(out)]) == 0
    base = TrainConfig(
        seed=99, d=2, dataset="two_gaussians_fig1", interp_hidden=(8, 8),
        field_hidden=(16, 16), batch_n=8, batch_m=16, steps=30, eval_every=10,
        checkpoint_every=0, probe_size=16, probe_steps=8,
    )
    assert read_manifest(out / "manifest.txt")["config.hash"] == config_hash(base)


def test_train_bad_config_exits_1_with_diagnostic(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("run.seed = 1\nbogus.key = 2\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "bogus.key" in err


def test_train_missing_required_key_named(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("run.seed = 1\ndata.d = 2\ndata.dataset = gaussian\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "train.steps" in capsys.readouterr().err


def test_train_missing_config_file_exits_3(tmp_path, capsys):
    rc = cli.main(["train", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "x")])
    assert rc == 3
    assert "i/o failure" in capsys.readouterr().err


def test_smoke_config_trains_quickly(tmp_path):
    smoke = write_config(
        tmp_path,
        TINY.replace("train.batch_n = 8", "train.batch_n = 64")
        .replace("train.batch_m = 16", "train.batch_m = 128")
        .replace("train.steps = 30", "train.steps = 200")
        .replace("log.eval_every = 10", "log.eval_every = 50"),
    )
    start = time.monotonic()
    assert cli.main(["train", "--config", str(smoke), "--out", str(tmp_path / "run")]) == 0
    assert time.monotonic() - start < 60.0


# sample -------------------------------------------------------------------------

def test_sample_nfe1_uses_the_single_evaluation_sampler(tmp_path):
    ckpt = trained_checkpoint(tmp_path)
    out = tmp_path / "s1"
    assert cli.main(["sample", str(ckpt), "--out", str(out), "--n", "32",
                     "--nfe", "1", "--seed", "3"]) == 0
    state = load_checkpoint(ckpt)
    x0 = state.p0.sample(32, RngStream(3).substream("sample"))
    expect = one_step_sample(state.field, x0)
    rows = (out / "samples.csv").read_text().strip().splitlines()
    assert rows[0] == "x0,x1"
    got = np.array([[float(v) for v in row.split(",")] for row in rows[1:]])
    assert np.array_equal(got, expect)
    assert read_manifest(out / "manifest.txt")["sample.nfe"] == "1"


def test_sample_nfe_accounting_per_method(tmp_path):
    ckpt = trained_checkpoint(tmp_path)
    cli.main(["sample", str(ckpt), "--out", str(tmp_path / "e"), "--n", "8", "--nfe", "3"])
    cli.main(["sample", str(ckpt), "--out", str(tmp_path / "h"), "--n", "8",
              "--nfe", "3", "--method", "heun"])
    assert read_manifest(tmp_path / "e" / "manifest.txt")["sample.nfe"] == "3"
    assert read_manifest(tmp_path / "h" / "manifest.txt")["sample.nfe"] == "6"
    bundle = bundle_from_bytes((tmp_path / "h" / "bundle.bin").read_bytes())
    assert bundle.nfe == 6 and bundle.method == "heun" and bundle.steps == 3


def test_sample_fixed_seed_reproduces_file_hash(tmp_path):
    ckpt = trained_checkpoint(tmp_path)
    for name in ("a", "b"):
        cli.main(["sample", str(ckpt), "--out", str(tmp_path / name), "--n", "16",
                  "--nfe", "2", "--seed", "7"])
    cli.main(["sample", str(ckpt), "--out", str(tmp_path / "c"), "--n", "16",
              "--nfe", "2", "--seed", "8"])
    sha = lambda p: hashlib.sha256(Path(p, "samples.csv").read_bytes()).hexdigest()
    assert sha(tmp_path / "a") == sha(tmp_path / "b")
    assert sha(tmp_path / "a") != sha(tmp_path / "c")


def test_sample_rejects_non_checkpoint_exit_1(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a checkpoint at all")
    assert cli.main(["sample", str(junk), "--out", str(tmp_path / "x")]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_integration_blowup_exits_2(tmp_path, capsys):
    state = init_state(TrainConfig(steps=0, interp_hidden=(8, 8), field_hidden=(8, 8)))
    state.field.params = np.full_like(state.field.params, np.nan)
    ckpt = tmp_path / "hot.bin"
    save_checkpoint(state, ckpt)
    rc = cli.main(["sample", str(ckpt), "--out", str(tmp_path / "x"), "--nfe", "4"])
    assert rc == 2
    assert "numerical failure" in capsys.readouterr().err


# eval ---------------------------------------------------------------------------

def test_eval_rows_and_bitwise_straightness(tmp_path):
    ckpt = trained_checkpoint(tmp_path)
    out = tmp_path / "ev"
    assert cli.main(["eval", str(ckpt), "--out", str(out), "--n", "32",
                     "--nfe", "1,2,4,8", "--seed", "5"]) == 0
    lines = (out / "eval.csv").read_text().strip().splitlines()
    assert lines[0] == "nfe,w2,straightness_measure,curvature,residual_norm"
    rows = [line.split(",") for line in lines[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 4, 8]
    # curvature needs three steps; earlier rows carry nan placeholders
    assert rows[0][3] == "nan" and rows[1][3] == "nan"
    assert float(rows[2][3]) >= 0.0
    # straightness column equals a direct metrics call on the same bundle
    state = load_checkpoint(ckpt)
    x0 = state.p0.sample(32, RngStream(5).substream("eval-source"))
    bundle = integrate(state.field, x0, 4, "euler")
    assert float(rows[2][2]) == measure_from_bundle(state.field, bundle)


def test_eval_trained_beats_untrained_at_every_nfe(tmp_path):
    trained = trained_checkpoint(tmp_path, steps=600)
    fresh = init_state(
        TrainConfig(
            seed=5, dataset="two_gaussians_fig1", interp_hidden=(8, 8),
            field_hidden=(16, 16), batch_n=8, batch_m=16, steps=0,
            eval_every=10, checkpoint_every=0, probe_size=16, probe_steps=8,
        )
    )
    untrained = tmp_path / "fresh.bin"
    save_checkpoint(fresh, untrained)

    def w2_column(ckpt, out):
        assert cli.main(["eval", str(ckpt), "--out", str(out), "--n", "64",
                         "--nfe", "1,2,4,8", "--seed", "2"]) == 0
        lines = (out / "eval.csv").read_text().strip().splitlines()
        return [float(line.split(",")[1]) for line in lines[1:]]

    got = w2_column(trained, tmp_path / "ev_trained")
    ref = w2_column(untrained, tmp_path / "ev_fresh")
    assert all(g < r for g, r in zip(got, ref))


def test_eval_bad_nfe_list_exits_1(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    assert cli.main(["eval", str(ckpt), "--out", str(tmp_path / "x"), "--nfe", "2,zero"]) == 1
    assert "--nfe" in capsys.readouterr().err


# compare ------------------------------------------------------------------------

def test_compare_emits_report_plots_and_manifests(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out),
                     "--n", "32", "--nfe", "1,2,4"]) == 0
    lines = (out / "report.csv").read_text().strip().splitlines()
    assert lines[0] == "run,nfe,w2,straightness_measure,curvature,residual_norm"
    runs = [line.split(",")[0] for line in lines[1:]]
    assert runs == ["baseline"] * 3 + ["learned"] * 3
    assert (out / "baseline.svg").exists() and (out / "learned.svg").exists()
    top = read_manifest(out / "manifest.txt")
    assert "file.baseline/manifest.txt" in top and "file.learned/manifest.txt" in top
    base = read_manifest(out / "baseline" / "manifest.txt")
    learned = read_manifest(out / "learned" / "manifest.txt")
    assert base["config.hash"] != learned["config.hash"]
    # the two runs differ exactly in family and straightness weight
    from straightflow.train import config_from_text
    from straightflow.cli import compare_configs
    b_cfg, l_cfg = compare_configs(config_from_text(cfg.read_text()))
    assert b_cfg.family == "linear" and b_cfg.lam == 0.0
    assert l_cfg.family == "affine_plu" and l_cfg.lam > 0.0
    assert dataclasses.replace(b_cfg, family=l_cfg.family, lam=l_cfg.lam) == l_cfg


# plot ---------------------------------------------------------------------------

def test_plot_bundle_binary_and_csv(tmp_path):
    ckpt = trained_checkpoint(tmp_path)
    sdir = tmp_path / "s"
    cli.main(["sample", str(ckpt), "--out", str(sdir), "--n", "6", "--nfe", "5"])
    out_bin = tmp_path / "traj.svg"
    assert cli.main(["plot", str(sdir / "bundle.bin"), "--out", str(out_bin)]) == 0
    svg = out_bin.read_text()
    assert svg.count("<polyline") == 6
    # the long-format CSV round-trips to the same polyline structure
    bundle = bundle_from_bytes((sdir / "bundle.bin").read_bytes())
    csv_path = tmp_path / "traj.csv"
    csv_path.write_text(bundle_to_csv(bundle))
    out_csv = tmp_path / "traj2.svg"
    assert cli.main(["plot", str(csv_path), "--out", str(out_csv)]) == 0
    assert out_csv.read_text().count("<polyline") == 6


def test_plot_samples_csv_scatter_only(tmp_path):
    path = tmp_path / "pts.csv"
    path.write_text("x0,x1\n1.0,2.0\n3.0,4.0\n")
    out = tmp_path / "pts.svg"
    assert cli.main(["plot", str(path), "--out", str(out)]) == 0
    svg = out.read_text()
    assert svg.count("<circle") == 2 and "<polyline" not in svg


def test_plot_header_only_csv_gives_axes_only_svg(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("x0,x1\n")
    out = tmp_path / "empty.svg"
    assert cli.main(["plot", str(path), "--out", str(out)]) == 0
    svg = out.read_text()
    assert svg.startswith("<svg ") and "<circle" not in svg and "<polyline" not in svg


def test_plot_unrecognized_input_exits_1(tmp_path, capsys):
    path = tmp_path / "what.csv"
    path.write_text("a,b\n1,2\n")
    assert cli.main(["plot", str(path), "--out", str(tmp_path / "x.svg")]) == 1
    assert "unrecognized" in capsys.readouterr().err


# plumbing -----------------------------------------------------------------------

def test_unknown_subcommand_exits_1(capsys):
    assert cli.main(["nonsense"]) == 1
    capsys.readouterr()


def test_thread_cap_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("STRAIGHTFLOW_THREADS", "zero")
    assert cli.main(["plot", "x", "--out", "y"]) == 1
    assert "STRAIGHTFLOW_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("STRAIGHTFLOW_THREADS", "1")
    path = tmp_path / "pts.csv"
    path.write_text("x0,x1\n1.0,2.0\n")
    assert cli.main(["plot", str(path), "--out", str(tmp_path / "p.svg")]) == 0
