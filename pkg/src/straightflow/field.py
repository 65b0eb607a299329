"""The learnable velocity field v_theta(t, x).

A plain MLP over [time_embedding(t), x]. The embedding uses 8 geometric
frequencies (2^k * pi, k = 0..7), sine and cosine, so the input width is
d + 16 by default. directional_derivative computes the full convective
derivative dt_v + grad_x(v) . u as a single JVP along (1, u), chaining
through the time embedding analytically.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .numerics import RngStream


def time_embedding(t: np.ndarray, n_freq: int = 8) -> np.ndarray:
    """t (n,) -> (n, 2*n_freq): [sin(2^k pi t), cos(2^k pi t)] per frequency."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.size, 2 * n_freq))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def time_embedding_dt(t: np.ndarray, n_freq: int = 8) -> np.ndarray:
    """Derivative of time_embedding wrt t, same layout."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.size, 2 * n_freq))
    out[:, 0::2] = np.cos(ang) * freqs
    out[:, 1::2] = -np.sin(ang) * freqs
    return out


class VelocityField:
    """Holds architecture + flat parameters; the trainer rebinds `params`."""

    def __init__(
        self,
        d: int,
        rng: RngStream | None = None,
        hidden=(128, 128, 128),
        activation: str = "tanh",
        n_freq: int = 8,
    ):
        if d < 1:
            raise UsageError("d must be >= 1")
        self.d = int(d)
        self.n_freq = int(n_freq)
        self.spec = ad.MlpSpec((d + 2 * n_freq, *hidden, d), activation)
        if rng is None:
            self.params = np.zeros(self.spec.n_params, dtype=np.float64)
        else:
            self.params = ad.init_params(self.spec, rng.substream("field"))

    def _embed(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise UsageError(f"x must be (n, {self.d}), got {x.shape}")
        n = x.shape[0]
        t_arr = np.asarray(t, dtype=np.float64).reshape(-1)
        if t_arr.size == 1:
            t_arr = np.full(n, float(t_arr[0]))
        if t_arr.size != n:
            raise UsageError("t must be scalar or one value per row")
        emb = time_embedding(t_arr, self.n_freq)
        return t_arr, np.concatenate([emb, x], axis=1)

    def eval(self, t, x) -> np.ndarray:
        _, inp = self._embed(t, x)
        return ad.forward(self.spec, self.params, inp)

    def eval_cached(self, t, x):
        _, inp = self._embed(t, x)
        return ad.forward_cached(self.spec, self.params, inp)

    def eval_vjp(self, cache, y_bar):
        """Reverse pass for eval: returns (theta_grad, x_bar). The embedding
        columns' cotangent is dropped (t is never trained through)."""
        grad, in_bar = ad.grad_params(self.spec, self.params, cache, y_bar)
        return grad, in_bar[:, 2 * self.n_freq :]

    def directional_derivative(self, t, x, u, t_dot: float = 1.0) -> np.ndarray:
        """dt_v * t_dot + grad_x(v) . u, one forward-tangent pass."""
        _, dv, _ = self.value_and_dirderiv(t, x, u, t_dot)
        return dv

    def value_and_dirderiv(self, t, x, u, t_dot: float = 1.0):
        """Returns (v, directional derivative, cache). The primal v is the
        same array the JVP computes, so both losses can share one pass."""
        t_arr, inp = self._embed(t, x)
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (inp.shape[0], self.d):
            raise UsageError("u shape must match x")
        demb = time_embedding_dt(t_arr, self.n_freq) * float(t_dot)
        tangent = np.concatenate([demb, u], axis=1)
        v, dv, cache = ad.jvp(self.spec, self.params, inp, tangent)
        return v, dv, cache

    def dirderiv_vjp(self, cache, dv_bar, v_bar=None):
        """Reverse through value_and_dirderiv. Returns (theta_grad, x_bar, u_bar)."""
        grad, in_bar, tan_bar = ad.grad_of_jvp(self.spec, self.params, cache, dv_bar, y_bar=v_bar)
        k = 2 * self.n_freq
        return grad, in_bar[:, k:], tan_bar[:, k:]

    # persistence -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        head = b"SFVF" + int(self.d).to_bytes(4, "little") + int(self.n_freq).to_bytes(4, "little")
        return head + ad.params_to_bytes(self.spec, self.params)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "VelocityField":
        if blob[:4] != b"SFVF":
            raise UsageError("not a velocity-field blob")
        d = int.from_bytes(blob[4:8], "little")
        n_freq = int.from_bytes(blob[8:12], "little")
        spec, params = ad.params_from_bytes(blob[12:])
        vf = cls(d, None, tuple(spec.widths[1:-1]), spec.activation, n_freq)
        vf.params = params
        return vf
