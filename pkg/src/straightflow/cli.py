"""Command-line surface: train, sample, eval, compare, plot.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 I/O
failure. Every command writes a manifest.txt listing the files it produced
with content hashes; identical inputs reproduce identical hashes (the
metrics CSV is hashed with its wall-clock column masked, everything else
byte-for-byte).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from .data import make_distribution
from .errors import NumericalError, OutputError, UsageError
from .metrics import measure_from_bundle, path_curvature, residual_rms, w2_distance
from .numerics import RngStream
from .simulate import (
    TrajectoryBundle,
    bundle_from_bytes,
    bundle_to_bytes,
    integrate,
    one_step_sample,
)
from .svgplot import bundle_figure, points_figure
from .train import (
    TrainConfig,
    config_from_text,
    config_hash,
    load_checkpoint,
    metrics_logical_digest,
    train,
)

# manifests --------------------------------------------------------------------


def file_digest(path: Path) -> str:
    """Content hash used in manifests. metrics.csv is hashed with the
    wall_ms column masked so reruns with identical seeds hash identically."""
    if path.name == "metrics.csv":
        return "sha256-nowall:" + metrics_logical_digest(path.read_text())
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, entries: dict, files) -> Path:
    lines = dict(entries)
    for f in files:
        f = Path(f)
        lines[f"file.{f.relative_to(out_dir).as_posix()}"] = file_digest(f)
    text = "".join(f"{key} = {lines[key]}\n" for key in sorted(lines))
    path = out_dir / "manifest.txt"
    _write_text(path, text)
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _write_bytes(path: Path, blob: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _read_config(path: str, seed_override) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OutputError(f"cannot read config {path}: {exc}") from exc
    config = config_from_text(text)
    if seed_override is not None:
        config = dataclasses.replace(config, seed=int(seed_override))
    return config


def _parse_nfe_list(text: str) -> list:
    try:
        values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"bad --nfe list {text!r} (want comma-separated ints)") from None
    if not values or any(v < 1 for v in values):
        raise UsageError("--nfe values must be >= 1")
    return values


# samples / bundles --------------------------------------------------------------


def _samples_csv(points: np.ndarray) -> str:
    header = ",".join(f"x{j}" for j in range(points.shape[1]))
    rows = [",".join(repr(float(c)) for c in row) for row in points]
    return header + "\n" + "\n".join(rows) + ("\n" if rows else "")


def _sample_bundle(field, x0, nfe: int, method: str) -> TrajectoryBundle:
    """nfe == 1 takes the dedicated single-evaluation sampler; otherwise a
    fixed-grid integration whose recorded nfe reflects the method's true
    evaluation count (euler: steps, heun: 2*steps)."""
    if nfe == 1:
        end = one_step_sample(field, x0)
        return TrajectoryBundle(
            times=np.array([0.0, 1.0]),
            states=np.stack([x0, end]),
            velocities=(end - x0)[None],
            nfe=1,
            method="euler",
        )
    return integrate(field, x0, nfe, method)


# subcommands --------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _read_config(args.config, args.seed)
    out = Path(args.out) if args.out else Path("runs") / config_hash(config)[:12]
    state = train(config, out)
    files = sorted(out.glob("ckpt_*.bin")) + [out / "metrics.csv"]
    write_manifest(
        out,
        {
            "run.command": "train",
            "config.path": str(args.config),
            "config.hash": config_hash(config),
            "output.dir": str(out),
            "run.steps": str(state.step),
            "run.rejected": str(state.rejected),
        },
        files,
    )
    print(f"train: {state.step} steps ({state.rejected} rejected) -> {out}")
    return 0


def cmd_sample(args) -> int:
    state = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    rng = RngStream(args.seed).substream("sample")
    x0 = state.p0.sample(args.n, rng)
    bundle = _sample_bundle(state.field, x0, args.nfe, args.method)
    _write_text(out / "samples.csv", _samples_csv(bundle.endpoints))
    _write_bytes(out / "bundle.bin", bundle_to_bytes(bundle))
    write_manifest(
        out,
        {
            "run.command": "sample",
            "config.hash": config_hash(state.config),
            "output.dir": str(out),
            "sample.checkpoint": str(args.checkpoint),
            "sample.n": str(args.n),
            "sample.nfe": str(bundle.nfe),
            "sample.method": bundle.method,
            "sample.seed": str(args.seed),
        },
        [out / "samples.csv", out / "bundle.bin"],
    )
    print(f"sample: {args.n} points at nfe={bundle.nfe} ({bundle.method}) -> {out}")
    return 0


EVAL_HEADER = "nfe,w2,straightness_measure,curvature,residual_norm"


def _eval_rows(state, target, nfe_list, method, n, seed):
    rng = RngStream(seed)
    x0 = state.p0.sample(n, rng.substream("eval-source"))
    x1 = target.sample(n, rng.substream("eval-target"))
    cand = target.sample(min(1024, 4 * n), rng.substream("eval-candidates"))
    t = rng.substream("eval-times").uniform(
        state.config.eps_t, 1.0 - state.config.eps_t, (n,)
    )
    xt = state.interp.forward(t, x0, x1)
    residual = residual_rms(state.field, state.interp, t, xt, cand, source=state.p0)
    rows = []
    for nfe in nfe_list:
        bundle = _sample_bundle(state.field, x0, nfe, method)
        w2 = w2_distance(bundle.endpoints, x1)
        straight = measure_from_bundle(state.field, bundle)
        curv = path_curvature(bundle) if bundle.steps >= 3 else float("nan")
        rows.append((bundle.nfe, w2, straight, curv, residual))
    return rows


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    target = (
        make_distribution(args.dataset, state.config.d) if args.dataset else state.p1
    )
    nfe_list = _parse_nfe_list(args.nfe)
    rows = _eval_rows(state, target, nfe_list, args.method, args.n, args.seed)
    out = Path(args.out)
    text = EVAL_HEADER + "\n" + "".join(
        f"{nfe},{w2!r},{s!r},{c!r},{r!r}\n" for nfe, w2, s, c, r in rows
    )
    _write_text(out / "eval.csv", text)
    write_manifest(
        out,
        {
            "run.command": "eval",
            "config.hash": config_hash(state.config),
            "output.dir": str(out),
            "eval.checkpoint": str(args.checkpoint),
            "eval.n": str(args.n),
            "eval.nfe": ",".join(str(v) for v in nfe_list),
            "eval.method": args.method,
            "eval.seed": str(args.seed),
        },
        [out / "eval.csv"],
    )
    print(EVAL_HEADER)
    for nfe, w2, s, c, r in rows:
        print(f"{nfe},{w2:.6g},{s:.6g},{c:.6g},{r:.6g}")
    return 0


def compare_configs(config: TrainConfig):
    """The two runs a comparison trains: a linear/lam=0 baseline and the
    configured family with a positive straightness weight."""
    baseline = dataclasses.replace(config, family="linear", lam=0.0)
    family = config.family if config.family != "linear" else "affine_plu"
    lam = config.lam if config.lam > 0 else 0.1
    learned = dataclasses.replace(config, family=family, lam=lam)
    return baseline, learned


def cmd_compare(args) -> int:
    config = _read_config(args.config, args.seed)
    out = Path(args.out) if args.out else Path("runs") / f"compare_{config_hash(config)[:12]}"
    nfe_list = _parse_nfe_list(args.nfe)
    runs = dict(zip(("baseline", "learned"), compare_configs(config)))
    report_rows = []
    manifest_files = []
    for name, cfg in runs.items():
        run_dir = out / name
        state = train(cfg, run_dir)
        files = sorted(run_dir.glob("ckpt_*.bin")) + [run_dir / "metrics.csv"]
        manifest_files.append(
            write_manifest(
                run_dir,
                {
                    "run.command": "train",
                    "config.path": str(args.config),
                    "config.hash": config_hash(cfg),
                    "output.dir": str(run_dir),
                    "run.steps": str(state.step),
                    "run.rejected": str(state.rejected),
                },
                files,
            )
        )
        rows = _eval_rows(state, state.p1, nfe_list, args.method, args.n, config.seed)
        report_rows.extend((name, *row) for row in rows)
        probe = RngStream(config.seed).substream("compare-plot")
        x0 = state.p0.sample(64, probe)
        x1 = state.p1.sample(64, probe)
        bundle = integrate(state.field, x0, 16, "heun")
        fig = bundle_figure(bundle, target_points=x1, title=name)
        _write_text(out / f"{name}.svg", fig.render())
    text = "run," + EVAL_HEADER + "\n" + "".join(
        f"{name},{nfe},{w2!r},{s!r},{c!r},{r!r}\n"
        for name, nfe, w2, s, c, r in report_rows
    )
    _write_text(out / "report.csv", text)
    write_manifest(
        out,
        {
            "run.command": "compare",
            "config.path": str(args.config),
            "config.hash": config_hash(config),
            "output.dir": str(out),
        },
        [out / "report.csv", out / "baseline.svg", out / "learned.svg", *manifest_files],
    )
    print("run," + EVAL_HEADER)
    for name, nfe, w2, s, c, r in report_rows:
        print(f"{name},{nfe},{w2:.6g},{s:.6g},{c:.6g},{r:.6g}")
    return 0


def _load_plot_input(path: Path):
    """Returns ('bundle', TrajectoryBundle) or ('points', array)."""
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    if blob[:4] == b"SFTB":
        return "bundle", bundle_from_bytes(blob)
    try:
        text = blob.decode()
    except UnicodeDecodeError:
        raise UsageError(f"{path}: neither a trajectory blob nor CSV text") from None
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise UsageError(f"{path}: empty input")
    header = lines[0].split(",")
    if header[:3] == ["step", "time", "sample"]:
        d = len(header) - 3
        cells = [line.split(",") for line in lines[1:]]
        if not cells:
            return "points", np.zeros((0, max(d, 1)))
        steps = max(int(c[0]) for c in cells) + 1
        n = max(int(c[2]) for c in cells) + 1
        states = np.zeros((steps, n, d))
        times = np.zeros(steps)
        for c in cells:
            k, i = int(c[0]), int(c[2])
            times[k] = float(c[1])
            states[k, i] = [float(v) for v in c[3:]]
        bundle = TrajectoryBundle(times, states, np.zeros((steps - 1, n, d)), 0, "euler")
        return "bundle", bundle
    if all(col.startswith("x") for col in header):
        pts = [[float(v) for v in line.split(",")] for line in lines[1:]]
        d = len(header)
        return "points", np.array(pts, dtype=np.float64).reshape(-1, d)
    raise UsageError(f"{path}: unrecognized CSV header {lines[0]!r}")


def cmd_plot(args) -> int:
    kind, payload = _load_plot_input(Path(args.input))
    if kind == "bundle":
        fig = bundle_figure(payload, title=Path(args.input).name)
    else:
        fig = points_figure(payload, title=Path(args.input).name)
    out = Path(args.out)
    _write_text(out, fig.render())
    print(f"plot: {args.input} -> {out}")
    return 0


# entry point --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is exit 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="straightflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override run.seed")
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="draw samples from a checkpoint")
    p_sample.add_argument("checkpoint")
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--n", type=int, default=512)
    p_sample.add_argument("--nfe", type=int, default=8)
    p_sample.add_argument("--method", choices=("euler", "heun"), default="euler")
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="NFE sweep of quality metrics")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--dataset", default=None, help="target override")
    p_eval.add_argument("--nfe", default="1,2,4,8")
    p_eval.add_argument("--n", type=int, default=256)
    p_eval.add_argument("--method", choices=("euler", "heun"), default="euler")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare", help="train learned vs linear baseline")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--nfe", default="1,2,4,8")
    p_cmp.add_argument("--n", type=int, default=256)
    p_cmp.add_argument("--method", choices=("euler", "heun"), default="euler")
    p_cmp.set_defaults(func=cmd_compare)

    p_plot = sub.add_parser("plot", help="render a bundle or sample CSV to SVG")
    p_plot.add_argument("input")
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=cmd_plot)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("STRAIGHTFLOW_THREADS")
    if not cap:
        return
    try:
        limit = int(cap)
    except ValueError:
        raise UsageError(f"STRAIGHTFLOW_THREADS must be an integer, got {cap!r}") from None
    if limit < 1:
        raise UsageError("STRAIGHTFLOW_THREADS must be >= 1")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=limit)
    except ImportError:  # pragma: no cover - shipped with scikit-learn
        pass


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (OutputError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
