"""Fixed-grid ODE integration of a velocity field on t in [0, 1].

Only fixed grids: evaluation counts must be exact for NFE-vs-quality
comparisons, which adaptive steppers would blur.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError, UsageError
from .field import VelocityField
from .numerics import as_point_batch

METHODS = ("euler", "heun")


@dataclass
class TrajectoryBundle:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, N, d)
    velocities: np.ndarray  # (K, N, d), field at (t_k, states[k])
    nfe: int
    method: str

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def endpoints(self) -> np.ndarray:
        return self.states[-1]


def integrate(field: VelocityField, x0, steps: int, method: str = "euler") -> TrajectoryBundle:
    """Integrate dx/dt = v(t, x) from 0 to 1, recording every state.

    velocities[k] is the field at the k-th grid point of the trajectory
    itself (Heun's corrector stage is counted in nfe but not recorded).
    """
    x0 = as_point_batch(x0, field.d, "x0")
    steps = int(steps)
    if steps < 1:
        raise UsageError("steps must be >= 1")
    if method not in METHODS:
        raise UsageError(f"method must be one of {METHODS}, got {method!r}")
    n, d = x0.shape
    h = 1.0 / steps
    times = np.linspace(0.0, 1.0, steps + 1)
    states = np.empty((steps + 1, n, d))
    velocities = np.empty((steps, n, d))
    states[0] = x0
    nfe = 0
    x = x0
    for k in range(steps):
        v1 = field.eval(times[k], x)
        nfe += 1
        velocities[k] = v1
        if method == "euler":
            x = x + h * v1
        else:
            pred = x + h * v1
            v2 = field.eval(times[k + 1], pred)
            nfe += 1
            x = x + 0.5 * h * (v1 + v2)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state after step {k} (t={times[k + 1]:.6g})")
        states[k + 1] = x
    return TrajectoryBundle(times, states, velocities, nfe, method)


def one_step_sample(field: VelocityField, x0) -> np.ndarray:
    """x0 + v(0, x0): the single-evaluation sampler straight flows admit."""
    x0 = as_point_batch(x0, field.d, "x0")
    return x0 + field.eval(0.0, x0)


# export ------------------------------------------------------------------


def bundle_to_csv(bundle: TrajectoryBundle) -> str:
    """Long-format CSV: one row per (step, sample), coordinates as columns."""
    d = bundle.states.shape[2]
    buf = io.StringIO()
    cols = ",".join(f"x{j}" for j in range(d))
    buf.write(f"step,time,sample,{cols}\n")
    for k in range(bundle.states.shape[0]):
        t = float(bundle.times[k])
        for i in range(bundle.states.shape[1]):
            coords = ",".join(repr(float(c)) for c in bundle.states[k, i])
            buf.write(f"{k},{t!r},{i},{coords}\n")
    return buf.getvalue()


_MAGIC = b"SFTB"
_VERSION = 1


def bundle_to_bytes(bundle: TrajectoryBundle) -> bytes:
    kp1, n, d = bundle.states.shape
    head = _MAGIC + bytes([_VERSION])
    head += (kp1 - 1).to_bytes(4, "little") + n.to_bytes(4, "little") + d.to_bytes(4, "little")
    head += bundle.nfe.to_bytes(4, "little")
    head += bytes([METHODS.index(bundle.method)])
    body = (
        np.ascontiguousarray(bundle.times, dtype="<f8").tobytes()
        + np.ascontiguousarray(bundle.states, dtype="<f8").tobytes()
        + np.ascontiguousarray(bundle.velocities, dtype="<f8").tobytes()
    )
    return head + body


def bundle_from_bytes(blob: bytes) -> TrajectoryBundle:
    if blob[:4] != _MAGIC or blob[4] != _VERSION:
        raise UsageError("not a trajectory blob")
    k = int.from_bytes(blob[5:9], "little")
    n = int.from_bytes(blob[9:13], "little")
    d = int.from_bytes(blob[13:17], "little")
    nfe = int.from_bytes(blob[17:21], "little")
    method = METHODS[blob[21]]
    off = 22
    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += 8 * count
        return arr.astype(np.float64)
    times = take(k + 1)
    states = take((k + 1) * n * d).reshape(k + 1, n, d)
    velocities = take(k * n * d).reshape(k, n, d)
    return TrajectoryBundle(times, states, velocities, nfe, method)
