"""Hand-derived derivatives for a fixed MLP vocabulary.

The networks in this package are plain MLPs (Linear -> activation -> ... ->
Linear) with tanh or SiLU activations, parameters flattened into one float64
vector. For that closed vocabulary we write the three derivative passes by
hand instead of pulling in an autograd framework:

  forward        y = f(params, x)
  grad_params    reverse mode: cotangent on y -> gradient wrt params (and x)
  jvp            forward mode: tangent on x -> tangent on y
  grad_of_jvp    reverse through the jvp: cotangents on (y, y_dot) ->
                 gradient wrt params plus cotangents on (x, x_dot)

grad_of_jvp is the forward-over-reverse pass needed to differentiate losses
that contain directional derivatives of the network. All passes share the
fused-cache layout below, batch over rows, and accumulate in a fixed order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import UsageError
from .numerics import RngStream

_ACTIVATIONS = ("tanh", "silu")
_PARAM_MAGIC = b"SFMLP"
_PARAM_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: layer widths (input first) and activation name."""

    widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise UsageError(f"widths must be >=2 positive ints, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise UsageError(f"activation must be one of {_ACTIVATIONS}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """(weight_slice, bias_slice) into the flat parameter vector, per layer."""
        out, pos = [], 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            b = slice(pos, pos + fan_out)
            pos += fan_out
            out.append((w, b))
        return out


def init_params(spec: MlpSpec, rng: RngStream, final_zero: bool = False) -> np.ndarray:
    """W ~ N(0, 1/fan_in), b = 0. final_zero makes the network identically zero
    at initialization (used where zero output must recover a known baseline)."""
    params = np.zeros(spec.n_params, dtype=np.float64)
    slices = spec.layer_slices()
    for layer, (ws, _) in enumerate(slices):
        fan_in = spec.widths[layer]
        fan_out = spec.widths[layer + 1]
        if final_zero and layer == spec.n_layers - 1:
            continue
        params[ws] = rng.standard_normal((fan_out, fan_in)).ravel() / np.sqrt(fan_in)
    return params


def _unpack(spec: MlpSpec, params: np.ndarray):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise UsageError(f"params must have shape ({spec.n_params},), got {params.shape}")
    out = []
    for layer, (ws, bs) in enumerate(spec.layer_slices()):
        fan_in, fan_out = spec.widths[layer], spec.widths[layer + 1]
        out.append((params[ws].reshape(fan_out, fan_in), params[bs]))
    return out


def _act(name: str, a: np.ndarray):
    """Returns (value, first, second) derivatives of the activation at a."""
    if name == "tanh":
        y = np.tanh(a)
        d1 = 1.0 - y * y
        d2 = -2.0 * y * d1
    else:  # silu
        s = 1.0 / (1.0 + np.exp(-a))
        y = a * s
        d1 = s * (1.0 + a * (1.0 - s))
        d2 = s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))
    return y, d1, d2


class MlpCache(NamedTuple):
    """Saved forward state: per layer the input h and preactivation a.
    For jvp passes the input tangent u and preactivation tangent a_dot too."""

    inputs: list
    preacts: list
    in_tangents: list | None
    pre_tangents: list | None


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    y, _ = forward_cached(spec, params, x)
    return y


def forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    layers = _unpack(spec, params)
    h = np.asarray(x, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.shape[1] != spec.widths[0]:
        raise UsageError(f"input width {h.shape[1]} != spec input {spec.widths[0]}")
    inputs, preacts = [], []
    n_layers = len(layers)
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        a = h @ w.T + b
        preacts.append(a)
        h = _act(spec.activation, a)[0] if i < n_layers - 1 else a
    y = h[0] if squeeze else h
    return y, MlpCache(inputs, preacts, None, None)


def grad_params(spec: MlpSpec, params: np.ndarray, cache: MlpCache, y_bar: np.ndarray):
    """Reverse pass. y_bar matches the forward output shape. Returns
    (param_grad, x_bar)."""
    layers = _unpack(spec, params)
    g = np.asarray(y_bar, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    grad = np.zeros(spec.n_params, dtype=np.float64)
    slices = spec.layer_slices()
    a_bar = g
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        ws, bs = slices[i]
        h_in = cache.inputs[i]
        grad[ws] += (a_bar.T @ h_in).ravel()
        grad[bs] += a_bar.sum(axis=0)
        h_bar = a_bar @ w
        if i > 0:
            _, d1, _ = _act(spec.activation, cache.preacts[i - 1])
            a_bar = h_bar * d1
    x_bar = h_bar
    if np.asarray(y_bar).ndim == 1:
        x_bar = x_bar[0]
    return grad, x_bar


def jvp(spec: MlpSpec, params: np.ndarray, x: np.ndarray, x_dot: np.ndarray):
    """Forward-mode pass. Returns (y, y_dot, cache); cache supports grad_of_jvp."""
    layers = _unpack(spec, params)
    h = np.asarray(x, dtype=np.float64)
    u = np.asarray(x_dot, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h, u = h[None, :], u[None, :]
    if h.shape != u.shape:
        raise UsageError("x and x_dot must have identical shapes")
    inputs, preacts, in_tans, pre_tans = [], [], [], []
    n_layers = len(layers)
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        in_tans.append(u)
        a = h @ w.T + b
        a_dot = u @ w.T
        preacts.append(a)
        pre_tans.append(a_dot)
        if i < n_layers - 1:
            y, d1, _ = _act(spec.activation, a)
            h = y
            u = d1 * a_dot
        else:
            h, u = a, a_dot
    if squeeze:
        h, u = h[0], u[0]
    return h, u, MlpCache(inputs, preacts, in_tans, pre_tans)


def grad_of_jvp(
    spec: MlpSpec,
    params: np.ndarray,
    cache: MlpCache,
    y_dot_bar: np.ndarray,
    y_bar: np.ndarray | None = None,
):
    """Reverse through the jvp: cotangents on (y, y_dot) jointly.

    Returns (param_grad, x_bar, x_dot_bar). The rule per activation layer,
    with (a_bar, adot_bar) the incoming preactivation cotangents:

        a_bar_below    = h_bar * act'(a) + u_bar * act''(a) * a_dot
        adot_bar_below = u_bar * act'(a)

    and per linear layer the weight picks up both h- and tangent-path terms:
    W_bar += a_bar^T h_in + adot_bar^T u_in.
    """
    if cache.in_tangents is None:
        raise UsageError("cache does not carry tangents; use jvp() to build it")
    layers = _unpack(spec, params)
    adot_bar = np.asarray(y_dot_bar, dtype=np.float64)
    squeeze = adot_bar.ndim == 1
    if squeeze:
        adot_bar = adot_bar[None, :]
    if y_bar is None:
        a_bar = np.zeros_like(adot_bar)
    else:
        a_bar = np.asarray(y_bar, dtype=np.float64)
        if a_bar.ndim == 1:
            a_bar = a_bar[None, :]
    grad = np.zeros(spec.n_params, dtype=np.float64)
    slices = spec.layer_slices()
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        ws, bs = slices[i]
        grad[ws] += (a_bar.T @ cache.inputs[i] + adot_bar.T @ cache.in_tangents[i]).ravel()
        grad[bs] += a_bar.sum(axis=0)
        h_bar = a_bar @ w
        u_bar = adot_bar @ w
        if i > 0:
            _, d1, d2 = _act(spec.activation, cache.preacts[i - 1])
            a_dot = cache.pre_tangents[i - 1]
            a_bar = h_bar * d1 + u_bar * d2 * a_dot
            adot_bar = u_bar * d1
    x_bar, xdot_bar = h_bar, u_bar
    if squeeze:
        x_bar, xdot_bar = x_bar[0], xdot_bar[0]
    return grad, x_bar, xdot_bar


# serialization -------------------------------------------------------------

def params_to_bytes(spec: MlpSpec, params: np.ndarray) -> bytes:
    """Versioned little-endian blob: header describes the architecture, then
    the flat float64 parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise UsageError("params shape does not match spec")
    head = bytearray()
    head += _PARAM_MAGIC
    head += int(_PARAM_VERSION).to_bytes(4, "little")
    head += bytes([_ACTIVATIONS.index(spec.activation)])
    head += len(spec.widths).to_bytes(4, "little")
    for w in spec.widths:
        head += int(w).to_bytes(4, "little")
    head += int(params.size).to_bytes(8, "little")
    return bytes(head) + params.astype("<f8").tobytes()


def params_from_bytes(blob: bytes) -> tuple[MlpSpec, np.ndarray]:
    if blob[:5] != _PARAM_MAGIC:
        raise UsageError("not an MLP parameter blob")
    pos = 5
    version = int.from_bytes(blob[pos : pos + 4], "little")
    pos += 4
    if version != _PARAM_VERSION:
        raise UsageError(f"unsupported parameter blob version {version}")
    act = _ACTIVATIONS[blob[pos]]
    pos += 1
    n_widths = int.from_bytes(blob[pos : pos + 4], "little")
    pos += 4
    widths = []
    for _ in range(n_widths):
        widths.append(int.from_bytes(blob[pos : pos + 4], "little"))
        pos += 4
    count = int.from_bytes(blob[pos : pos + 8], "little")
    pos += 8
    spec = MlpSpec(tuple(widths), act)
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    if params.size != spec.n_params:
        raise UsageError("parameter count does not match architecture header")
    return spec, params
