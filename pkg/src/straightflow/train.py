"""Joint training of the velocity field (theta) and the interpolant (psi).

One step: draw times and independent (x0, x1) pairs, extend the candidate
pool to M target samples, form x_t, estimate the posterior-mean velocity,
take the combined loss, and apply one Adam update to each parameter set.
Everything is driven by named RNG substreams so runs are bitwise
reproducible and resumable from checkpoints.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datamod
from .errors import NumericalError, OutputError, UsageError
from .field import VelocityField
from .interpolants import Interpolant, interp_from_bytes, interp_to_bytes, make_interpolant
from .metrics import measure_from_bundle, w2_distance
from .numerics import RngStream
from .objective import GradRouting, LossBreakdown, combined_loss
from .simulate import integrate

METRICS_HEADER = "step,cfm,straightness,total,ess_mean,straightness_measure,w2_probe,wall_ms"

# config ----------------------------------------------------------------------

# (attr, file key, kind, required); kind in {int, float, bool, str, ints}
_CONFIG_FIELDS = [
    ("seed", "run.seed", "int", True),
    ("d", "data.d", "int", True),
    ("dataset", "data.dataset", "str", True),
    ("sigma0", "data.sigma0", "float", False),
    ("pairing", "data.pairing", "str", False),
    ("family", "model.family", "str", False),
    ("interp_hidden", "model.interp_hidden", "ints", False),
    ("field_hidden", "model.field_hidden", "ints", False),
    ("field_activation", "model.field_activation", "str", False),
    ("batch_n", "train.batch_n", "int", False),
    ("batch_m", "train.batch_m", "int", False),
    ("steps", "train.steps", "int", True),
    ("lr_theta", "train.lr_theta", "float", False),
    ("lr_psi", "train.lr_psi", "float", False),
    ("beta1", "train.beta1", "float", False),
    ("beta2", "train.beta2", "float", False),
    ("eps_adam", "train.eps_adam", "float", False),
    ("eps_t", "train.eps_t", "float", False),
    ("lam", "loss.lam", "float", False),
    ("warmup_start_frac", "loss.warmup_start_frac", "float", False),
    ("warmup_end_frac", "loss.warmup_end_frac", "float", False),
    ("surrogate", "loss.surrogate", "str", False),
    ("fd_delta", "loss.fd_delta", "float", False),
    ("stop_grad_xt_in_cfm", "routing.stop_grad_xt_in_cfm", "bool", False),
    ("stop_grad_xt_in_straightness", "routing.stop_grad_xt_in_straightness", "bool", False),
    ("grad_through_vstar", "routing.grad_through_vstar", "bool", False),
    ("eval_every", "log.eval_every", "int", False),
    ("checkpoint_every", "log.checkpoint_every", "int", False),
    ("probe_size", "log.probe_size", "int", False),
    ("probe_steps", "log.probe_steps", "int", False),
]


@dataclass
class TrainConfig:
    seed: int = 0
    d: int = 2
    dataset: str = "two_gaussians_fig1"
    sigma0: float = 1.0
    pairing: str = "independent"
    family: str = "affine_plu"
    interp_hidden: tuple = ()
    field_hidden: tuple = (128, 128, 128)
    field_activation: str = "tanh"
    batch_n: int = 256
    batch_m: int = 1024
    steps: int = 20000
    lr_theta: float = 1e-3
    lr_psi: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    eps_t: float = 1e-3
    lam: float = 0.1
    warmup_start_frac: float = 0.1
    warmup_end_frac: float = 0.3
    surrogate: str = "jvp"
    fd_delta: float = 1e-2
    stop_grad_xt_in_cfm: bool = True
    stop_grad_xt_in_straightness: bool = True
    grad_through_vstar: bool = True
    eval_every: int = 500
    checkpoint_every: int = 5000
    probe_size: int = 512
    probe_steps: int = 128

    def __post_init__(self):
        if self.batch_m < self.batch_n or self.batch_n < 1:
            raise UsageError("need batch_m >= batch_n >= 1")
        if self.lr_theta <= 0 or self.lr_psi <= 0:
            raise UsageError("learning rates must be positive")
        if self.steps < 0:
            raise UsageError("steps must be >= 0")
        if self.pairing not in datamod.PAIRINGS:
            raise UsageError(f"unknown pairing {self.pairing!r}")
        if not 0.0 <= self.warmup_start_frac <= self.warmup_end_frac <= 1.0:
            raise UsageError("need 0 <= warmup_start_frac <= warmup_end_frac <= 1")

    def routing(self) -> GradRouting:
        return GradRouting(
            stop_grad_xt_in_cfm=self.stop_grad_xt_in_cfm,
            stop_grad_xt_in_straightness=self.stop_grad_xt_in_straightness,
            grad_through_vstar=self.grad_through_vstar,
        )


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "ints":
        return ",".join(str(int(v)) for v in value)
    return str(value)


def _parse_value(kind: str, text: str, key: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text in ("true", "false"):
                return text == "true"
            raise ValueError(text)
        if kind == "ints":
            if not text:
                return ()
            return tuple(int(p) for p in text.split(","))
        return text
    except ValueError:
        raise UsageError(f"bad value {text!r} for key {key!r}") from None


def config_to_text(config: TrainConfig) -> str:
    """Canonical flat key-value form: sorted keys, one per line."""
    lines = []
    for attr, key, kind, _ in _CONFIG_FIELDS:
        lines.append(f"{key} = {_format_value(kind, getattr(config, attr))}")
    return "\n".join(sorted(lines)) + "\n"


def config_from_text(text: str) -> TrainConfig:
    by_key = {key: (attr, kind, req) for attr, key, kind, req in _CONFIG_FIELDS}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in by_key:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        attr, kind, _ = by_key[key]
        if attr in values:
            raise UsageError(f"line {lineno}: duplicate key {key!r}")
        values[attr] = _parse_value(kind, val, key)
    for attr, key, _, required in _CONFIG_FIELDS:
        if required and attr not in values:
            raise UsageError(f"missing required key {key!r}")
    return TrainConfig(**values)


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode()).hexdigest()


def resolve_distributions(config: TrainConfig):
    """(p0, p1) for the configured dataset. Presets fix both ends; a plain
    dataset string names the target, with a N(0, sigma0^2 I) source."""
    if config.dataset in datamod.PRESETS:
        p0, p1 = datamod.PRESETS[config.dataset]()
        if p0.d != config.d:
            raise UsageError(
                f"preset {config.dataset!r} is {p0.d}-dimensional, config says d={config.d}"
            )
        return p0, p1
    p1 = datamod.make_distribution(config.dataset, config.d)
    p0 = datamod.Gaussian(config.d, 0.0, config.sigma0)
    return p0, p1


# Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(params, grad, state: AdamState, lr, beta1, beta2, eps):
    """One bias-corrected Adam step. Returns the new parameter vector and a
    new moment state; inputs are left untouched."""
    count = state.count + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**count)
    v_hat = v / (1.0 - beta2**count)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, count)


def lam_at(config: TrainConfig, step: int) -> float:
    """Warmup schedule: 0 until warmup_start_frac*T, linear ramp to lam by
    warmup_end_frac*T. The straightness signal is meaningless while the
    field is far from the oracle, so it is phased in. The same ramp factor
    scales lr_psi inside train_step: the interpolant's only learning signal
    is the straightness term, and it must not move at full speed while that
    signal is still noise."""
    if config.lam == 0.0 or config.steps == 0:
        return config.lam
    start = config.warmup_start_frac * config.steps
    end = config.warmup_end_frac * config.steps
    if step <= start:
        return 0.0
    if step >= end or end <= start:
        return config.lam
    return config.lam * (step - start) / (end - start)


# state ------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    field: VelocityField
    interp: Interpolant
    adam_theta: AdamState
    adam_psi: AdamState
    rng_time: RngStream
    rng_data: RngStream
    p0: datamod.Distribution
    p1: datamod.Distribution
    step: int = 0
    rejected: int = 0
    ess_warnings: int = 0


def init_state(config: TrainConfig) -> TrainState:
    root = RngStream(config.seed)
    p0, p1 = resolve_distributions(config)
    field = VelocityField(
        config.d,
        root.substream("init"),
        hidden=config.field_hidden,
        activation=config.field_activation,
    )
    interp = make_interpolant(
        config.family,
        config.d,
        root.substream("interp"),
        eps_t=config.eps_t,
        hidden=config.interp_hidden or None,
    )
    return TrainState(
        config=config,
        field=field,
        interp=interp,
        adam_theta=AdamState.zeros(field.params.size),
        adam_psi=AdamState.zeros(interp.psi_dim),
        rng_time=root.substream("time"),
        rng_data=root.substream("data"),
        p0=p0,
        p1=p1,
    )


def train_step(state: TrainState, force_diagnostics: bool = False) -> LossBreakdown | None:
    """Executes one step; on a non-finite loss the draw is consumed but all
    parameters and moments stay untouched and None is returned."""
    cfg = state.config
    n, m = cfg.batch_n, cfg.batch_m
    step_index = state.step + 1
    lam = lam_at(cfg, step_index)
    t = state.rng_time.uniform(cfg.eps_t, 1.0 - cfg.eps_t, (n,))
    x0 = state.p0.sample(n, state.rng_data)
    x1 = state.p1.sample(n, state.rng_data)
    x0, x1 = datamod.PAIRINGS[cfg.pairing](x0, x1)
    if m > n:
        extra = state.p1.sample(m - n, state.rng_data)
        candidates = np.concatenate([x1, extra], axis=0)
    else:
        candidates = x1
    try:
        breakdown, theta_grad, psi_grad = combined_loss(
            state.field,
            state.interp,
            t,
            x0,
            x1,
            candidates,
            lam,
            routing=cfg.routing(),
            source=state.p0,
            surrogate=cfg.surrogate,
            fd_delta=cfg.fd_delta,
            force_diagnostics=force_diagnostics,
        )
        if not (np.all(np.isfinite(theta_grad)) and np.all(np.isfinite(psi_grad))):
            raise NumericalError("non-finite gradient")
    except NumericalError:
        state.rejected += 1
        state.step = step_index
        return None
    new_theta, adam_theta = adam_update(
        state.field.params, theta_grad, state.adam_theta,
        cfg.lr_theta, cfg.beta1, cfg.beta2, cfg.eps_adam,
    )
    state.field.params = new_theta
    state.adam_theta = adam_theta
    # Adam normalizes gradient magnitudes away, so ramping lam alone would
    # not slow psi down at all early on; the warmup must gate psi's step
    # size directly. gate is lam_t/lam: 0 before the ramp, 1 after it.
    gate = lam / cfg.lam if cfg.lam > 0 else 1.0
    if state.interp.psi_dim and gate > 0.0:
        new_psi, adam_psi = adam_update(
            state.interp.psi, psi_grad, state.adam_psi,
            cfg.lr_psi * gate, cfg.beta1, cfg.beta2, cfg.eps_adam,
        )
        state.interp.psi = new_psi
        state.adam_psi = adam_psi
    state.step = step_index
    if np.isfinite(breakdown.ess_mean) and breakdown.ess_mean < 0.01 * m:
        state.ess_warnings += 1
    return breakdown


# checkpoint -------------------------------------------------------------------

_CKPT_MAGIC = b"SFCK"
_CKPT_VERSION = 1


def _blob(b: bytes) -> bytes:
    return len(b).to_bytes(4, "little") + b


def _floats(a: np.ndarray) -> bytes:
    raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return len(a).to_bytes(4, "little") + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        out = self.buf[self.off : self.off + n]
        if len(out) != n:
            raise UsageError("truncated checkpoint")
        self.off += n
        return out

    def blob(self) -> bytes:
        return self.take(int.from_bytes(self.take(4), "little"))

    def floats(self) -> np.ndarray:
        n = int.from_bytes(self.take(4), "little")
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "little")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")


def checkpoint_to_bytes(state: TrainState) -> bytes:
    out = bytearray()
    out += _CKPT_MAGIC
    out.append(_CKPT_VERSION)
    out += _blob(config_to_text(state.config).encode())
    out += state.step.to_bytes(8, "little")
    out += state.rejected.to_bytes(4, "little")
    out += state.ess_warnings.to_bytes(4, "little")
    out += _blob(state.field.to_bytes())
    out += _blob(interp_to_bytes(state.interp))
    for adam in (state.adam_theta, state.adam_psi):
        out += adam.count.to_bytes(8, "little")
        out += _floats(adam.m)
        out += _floats(adam.v)
    rng_json = json.dumps(
        {"time": state.rng_time.get_state(), "data": state.rng_data.get_state()},
        sort_keys=True,
    )
    out += _blob(rng_json.encode())
    return bytes(out)


def checkpoint_from_bytes(buf: bytes) -> TrainState:
    if buf[:4] != _CKPT_MAGIC:
        raise UsageError("not a checkpoint file")
    if buf[4] != _CKPT_VERSION:
        raise UsageError(f"unsupported checkpoint version {buf[4]}")
    r = _Reader(buf)
    r.take(5)
    config = config_from_text(r.blob().decode())
    step = r.u64()
    rejected = r.u32()
    ess_warnings = r.u32()
    field = VelocityField.from_bytes(r.blob())
    interp = interp_from_bytes(r.blob())
    adams = []
    for _ in range(2):
        count = r.u64()
        m = r.floats()
        v = r.floats()
        adams.append(AdamState(m, v, count))
    rng_states = json.loads(r.blob().decode())
    p0, p1 = resolve_distributions(config)
    root = RngStream(config.seed)
    rng_time = root.substream("time")
    rng_time.set_state(rng_states["time"])
    rng_data = root.substream("data")
    rng_data.set_state(rng_states["data"])
    return TrainState(
        config=config,
        field=field,
        interp=interp,
        adam_theta=adams[0],
        adam_psi=adams[1],
        rng_time=rng_time,
        rng_data=rng_data,
        p0=p0,
        p1=p1,
        step=step,
        rejected=rejected,
        ess_warnings=ess_warnings,
    )


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(checkpoint_to_bytes(state))
    except OSError as exc:
        raise OutputError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OutputError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(buf)


# metrics ----------------------------------------------------------------------


def metrics_row(step, breakdown: LossBreakdown, s_measure, w2_probe, wall_ms) -> str:
    return (
        f"{step},{breakdown.cfm_term!r},{breakdown.straightness_term!r},"
        f"{breakdown.total!r},{breakdown.ess_mean!r},{s_measure!r},{w2_probe!r},"
        f"{wall_ms:.3f}"
    )


def metrics_logical_digest(text: str) -> str:
    """sha256 of the metrics CSV with the wall_ms column blanked: wall time
    is the one legitimately run-dependent column."""
    lines = text.splitlines()
    if not lines:
        return hashlib.sha256(b"").hexdigest()
    header = lines[0].split(",")
    try:
        wall = header.index("wall_ms")
    except ValueError:
        wall = -1
    out = [lines[0]]
    for line in lines[1:]:
        cells = line.split(",")
        if wall >= 0 and len(cells) > wall:
            cells[wall] = ""
        out.append(",".join(cells))
    return hashlib.sha256("\n".join(out).encode()).hexdigest()


def _probe_sets(state: TrainState):
    probe = RngStream(state.config.seed).substream("probe")
    x0 = state.p0.sample(state.config.probe_size, probe)
    x1 = state.p1.sample(state.config.probe_size, probe)
    return x0, x1


def probe_metrics(state: TrainState, probe_x0, probe_x1):
    """Held-out straightness measure plus W2 between pushed-forward probe
    source points and probe target points; one integration serves both."""
    bundle = integrate(state.field, probe_x0, state.config.probe_steps, "heun")
    s = measure_from_bundle(state.field, bundle)
    w2 = w2_distance(bundle.endpoints, probe_x1)
    return s, w2


# loop -------------------------------------------------------------------------


def train(config: TrainConfig, out_dir, state: TrainState | None = None):
    """Runs (or resumes) training, writing metrics.csv and checkpoints into
    out_dir. Returns the final state.

    Resume contract: passing a checkpointed state continues the exact
    uninterrupted trajectory, including the metric log's remaining rows
    (wall_ms excepted).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc}") from exc
    if state is None:
        state = init_state(config)
    elif config_to_text(state.config) != config_to_text(config):
        raise UsageError("resume state was built from a different config")
    probe_x0, probe_x1 = _probe_sets(state)
    metrics_path = out / "metrics.csv"
    mode = "a" if state.step > 0 and metrics_path.exists() else "w"
    try:
        handle = open(metrics_path, mode)
    except OSError as exc:
        raise OutputError(f"cannot open metrics log {metrics_path}: {exc}") from exc
    with handle:
        if mode == "w":
            handle.write(METRICS_HEADER + "\n")
        last_wall = time.perf_counter()
        while state.step < config.steps:
            step_index = state.step + 1
            will_log = (
                config.eval_every > 0 and step_index % config.eval_every == 0
            ) or step_index == config.steps
            breakdown = train_step(state, force_diagnostics=will_log)
            if will_log and breakdown is not None:
                s_measure, w2_probe = probe_metrics(state, probe_x0, probe_x1)
                now = time.perf_counter()
                wall_ms = (now - last_wall) * 1000.0
                last_wall = now
                handle.write(
                    metrics_row(state.step, breakdown, s_measure, w2_probe, wall_ms) + "\n"
                )
                handle.flush()
            if (
                config.checkpoint_every > 0
                and state.step % config.checkpoint_every == 0
                and state.step < config.steps
            ):
                save_checkpoint(state, out / f"ckpt_{state.step:07d}.bin")
    save_checkpoint(state, out / "ckpt_final.bin")
    return state
