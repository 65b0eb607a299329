"""Deterministic numerical primitives: densities, reductions, solves, RNG streams.

Everything here is float64 and pure numpy. Reduction orders are fixed (numpy's
deterministic pairwise sums on contiguous arrays), so identical inputs give
bitwise-identical outputs on a given platform.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .errors import SingularMatrixError, UsageError

LOG_2PI = float(np.log(2.0 * np.pi))


def as_point_batch(x, d: int | None = None, name: str = "x") -> np.ndarray:
    """Validate and coerce to a float64 (n, d) point batch.

    Accepts (n, d) arrays or a single (d,) point (promoted to (1, d)).
    Rejects non-finite entries. Returns a C-contiguous float64 copy/view.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise UsageError(f"{name} must be a (n, d) array, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise UsageError(f"{name} has dimension {arr.shape[1]}, expected {d}")
    if not np.isfinite(arr).all():
        raise UsageError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def gaussian_log_density(x, mean=0.0, sigma: float = 1.0) -> np.ndarray | float:
    """Log density of an isotropic Gaussian N(mean, sigma^2 I), evaluated rowwise.

    x: (..., d) array (last axis is the point dimension). mean: scalar or (d,).
    Returns an array of shape x.shape[:-1] (a python float for a single point).
    """
    if sigma <= 0.0 or not np.isfinite(sigma):
        raise UsageError(f"sigma must be positive and finite, got {sigma}")
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise UsageError("x must have at least one axis (the point dimension)")
    d = arr.shape[-1]
    diff = arr - np.asarray(mean, dtype=np.float64)
    sq = np.sum(diff * diff, axis=-1)
    out = -0.5 * sq / (sigma * sigma) - d * (0.5 * LOG_2PI + np.log(sigma))
    if out.ndim == 0:
        return float(out)
    return out


def log_sum_exp(v, axis: int | None = None) -> np.ndarray | float:
    """log(sum(exp(v))) via max-subtraction; exact for single-element inputs.

    -inf entries are allowed and contribute zero weight, but a reduction whose
    entries are all -inf has no meaningful value and raises NumericalError
    (callers treat that as a degenerate-posterior condition).
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise UsageError("log_sum_exp of an empty array")
    m = np.max(arr, axis=axis, keepdims=True)
    if not np.all(m > -np.inf):
        from .errors import NumericalError

        raise NumericalError("log_sum_exp: all entries are -inf along the reduction axis")
    out = np.log(np.sum(np.exp(arr - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax_weights(log_w, axis: int = -1) -> np.ndarray:
    """Normalized weights exp(log_w - LSE(log_w)) along `axis`. Rows sum to 1."""
    lse = log_sum_exp(log_w, axis=axis)
    w = np.exp(np.asarray(log_w, dtype=np.float64) - np.expand_dims(np.asarray(lse), axis))
    return w


def effective_sample_size(log_w, axis: int = -1) -> np.ndarray | float:
    """ESS = 1 / sum(w_tilde^2) of the self-normalized weights. In [1, M]."""
    w = softmax_weights(log_w, axis=axis)
    out = 1.0 / np.sum(w * w, axis=axis)
    if np.ndim(out) == 0:
        return float(out)
    return out


def triangular_solve(a, b, lower: bool, unit_diagonal: bool = False) -> np.ndarray:
    """Solve a x = b for triangular a ((d, d)), b (d,) or (d, k), by substitution.

    Raises SingularMatrixError on a zero or non-finite pivot. Written out rather
    than delegated so the exact operation order is pinned (and testable against
    scipy's solve_triangular).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise UsageError(f"a must be square, got {a.shape}")
    d = a.shape[0]
    vec = b.ndim == 1
    x = (b[:, None] if vec else b).astype(np.float64).copy()
    if x.shape[0] != d:
        raise UsageError("b has incompatible leading dimension")
    order = range(d) if lower else range(d - 1, -1, -1)
    for i in order:
        if lower:
            if i > 0:
                x[i] -= a[i, :i] @ x[:i]
        else:
            if i < d - 1:
                x[i] -= a[i, i + 1 :] @ x[i + 1 :]
        if not unit_diagonal:
            piv = a[i, i]
            if piv == 0.0 or not np.isfinite(piv):
                raise SingularMatrixError(f"zero or non-finite pivot at index {i}")
            x[i] /= piv
    return x[:, 0] if vec else x


def _key_from(seed: int, path: Sequence[str]) -> np.ndarray:
    material = repr(int(seed)).encode() + b"\x00" + b"/".join(p.encode() for p in path)
    digest = hashlib.sha256(material).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class RngStream:
    """Named, hierarchical deterministic random stream.

    Each (seed, path) pair maps to an independent Philox keystream via sha256,
    so adding draws to one substream never shifts another. State is exportable
    as a JSON-friendly dict for exact checkpoint/resume.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_key_from(self.seed, self.path)))

    def substream(self, name: str) -> "RngStream":
        if not name or "/" in name:
            raise UsageError(f"invalid substream name {name!r}")
        return RngStream(self.seed, self.path + (name,))

    # draw methods ---------------------------------------------------------
    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def categorical(self, probs, n: int) -> np.ndarray:
        """n iid draws from a finite distribution given by `probs` (sums to 1)."""
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0):
            raise UsageError("probs must be a nonnegative vector")
        p = p / p.sum()
        # inverse-CDF on uniforms keeps the draw count predictable (one per sample)
        u = self._gen.uniform(0.0, 1.0, n)
        edges = np.cumsum(p)
        return np.searchsorted(edges, u, side="right").clip(0, p.size - 1)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # state ----------------------------------------------------------------
    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(c) for c in st["state"]["counter"]],
            "key": [int(k) for k in st["state"]["key"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        if tuple(state["path"]) != self.path or int(state["seed"]) != self.seed:
            raise UsageError("RNG state does not belong to this stream")
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = int(state["buffer_pos"])
        st["has_uint32"] = int(state["has_uint32"])
        st["uinteger"] = int(state["uinteger"])
        self._gen.bit_generator.state = st
