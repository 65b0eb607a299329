"""Synthetic source/target distributions and batch couplings.

Distributions are deterministic given an RngStream. Gaussian kinds expose
closed-form log densities (and their gradients), which the posterior-velocity
estimator needs for the source; shape-only kinds (moons, checkerboard,
spiral) are sampling-only targets.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import UsageError
from .numerics import RngStream, as_point_batch, gaussian_log_density, log_sum_exp


class Distribution:
    """Base: d-dimensional sampling; optional closed-form log density."""

    kind = "abstract"

    def __init__(self, d: int):
        if d < 1:
            raise UsageError("d must be >= 1")
        self.d = int(d)

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    @property
    def has_density(self) -> bool:
        return False

    def log_density(self, x: np.ndarray) -> np.ndarray:
        raise UsageError(f"{self.kind} has no closed-form density")

    def log_density_grad(self, x: np.ndarray) -> np.ndarray:
        raise UsageError(f"{self.kind} has no closed-form density gradient")


class Gaussian(Distribution):
    def __init__(self, d: int, mean=0.0, sigma: float = 1.0):
        super().__init__(d)
        self.mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (d,)).copy()
        if sigma <= 0:
            raise UsageError("sigma must be positive")
        self.sigma = float(sigma)

    kind = "gaussian"

    def sample(self, n, rng):
        return self.mean + self.sigma * rng.standard_normal((n, self.d))

    @property
    def has_density(self):
        return True

    def log_density(self, x):
        return gaussian_log_density(x, self.mean, self.sigma)

    def log_density_grad(self, x):
        return -(np.asarray(x, dtype=np.float64) - self.mean) / (self.sigma**2)


class GaussianMixture(Distribution):
    def __init__(self, d: int, means, sigmas, weights=None):
        super().__init__(d)
        self.means = as_point_batch(means, d, "means")
        k = self.means.shape[0]
        self.sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (k,)).copy()
        if np.any(self.sigmas <= 0):
            raise UsageError("component sigmas must be positive")
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (k,) or np.any(w < 0) or w.sum() <= 0:
            raise UsageError("weights must be a nonnegative length-k vector")
        self.weights = w / w.sum()

    kind = "gaussian_mixture"

    def sample(self, n, rng):
        comp = rng.categorical(self.weights, n)
        eps = rng.standard_normal((n, self.d))
        return self.means[comp] + self.sigmas[comp][:, None] * eps

    @property
    def has_density(self):
        return True

    def _component_logps(self, x):
        x = np.asarray(x, dtype=np.float64)
        parts = [
            gaussian_log_density(x, self.means[c], self.sigmas[c]) + np.log(self.weights[c])
            for c in range(self.means.shape[0])
        ]
        return np.stack(parts, axis=-1)  # (..., k)

    def log_density(self, x):
        return log_sum_exp(self._component_logps(x), axis=-1)

    def log_density_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        lp = self._component_logps(x)
        resp = np.exp(lp - np.expand_dims(np.asarray(log_sum_exp(lp, axis=-1)), -1))
        grads = np.stack(
            [-(x - self.means[c]) / self.sigmas[c] ** 2 for c in range(self.means.shape[0])],
            axis=-1,
        )  # (..., d, k)
        return np.einsum("...dk,...k->...d", grads, resp)


class Moons(Distribution):
    """Two interleaved half-circles with Gaussian jitter (2-D only)."""

    kind = "moons"

    def __init__(self, noise: float = 0.08, scale: float = 2.0):
        super().__init__(2)
        self.noise = float(noise)
        self.scale = float(scale)

    def sample(self, n, rng):
        which = rng.integers(0, 2, n)
        theta = rng.uniform(0.0, np.pi, n)
        x = np.where(which == 0, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(which == 0, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x - 0.5, y - 0.25], axis=1) * self.scale
        return pts + self.noise * rng.standard_normal((n, 2))


class Checkerboard(Distribution):
    """Uniform mass on alternating unit cells of a 4x4 board, scaled."""

    kind = "checkerboard"

    def __init__(self, scale: float = 2.0):
        super().__init__(2)
        self.scale = float(scale)

    def sample(self, n, rng):
        x = rng.uniform(-2.0, 2.0, n)
        offset = rng.integers(0, 2, n) * 2.0
        y = rng.uniform(0.0, 1.0, n) + offset - 2.0 + np.floor(x) % 2
        return np.stack([x, y], axis=1) * (self.scale / 2.0)


class Spiral(Distribution):
    """Single Archimedean spiral arm with radial noise (2-D)."""

    kind = "spiral"

    def __init__(self, noise: float = 0.1, turns: float = 2.0, scale: float = 2.0):
        super().__init__(2)
        self.noise = float(noise)
        self.turns = float(turns)
        self.scale = float(scale)

    def sample(self, n, rng):
        u = rng.uniform(0.0, 1.0, n)
        theta = 2.0 * np.pi * self.turns * np.sqrt(u)
        r = self.scale * np.sqrt(u)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        return pts + self.noise * rng.standard_normal((n, 2))


class Empirical(Distribution):
    """Resamples rows of a fixed point set with replacement (estimator use)."""

    kind = "empirical"

    def __init__(self, points):
        points = as_point_batch(points, name="points")
        super().__init__(points.shape[1])
        self.points = points

    def sample(self, n, rng):
        idx = rng.integers(0, self.points.shape[0], n)
        return self.points[idx]


# couplings ------------------------------------------------------------------

def independent_pair(x0: np.ndarray, x1: np.ndarray):
    """Identity pairing of two already-independent batches."""
    x0 = as_point_batch(x0, name="x0")
    x1 = as_point_batch(x1, d=x0.shape[1], name="x1")
    if x0.shape[0] != x1.shape[0]:
        raise UsageError("x0 and x1 must have equal counts")
    return x0, x1


def minibatch_ot_pair(x0: np.ndarray, x1: np.ndarray):
    """Reorders x1 by the exact optimal assignment under squared Euclidean
    cost. Marginals are preserved (it is a permutation)."""
    x0, x1 = independent_pair(x0, x1)
    diff = x0[:, None, :] - x1[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    order = np.empty(len(rows), dtype=np.int64)
    order[rows] = cols
    return x0, x1[order]


PAIRINGS = {"independent": independent_pair, "minibatch_ot": minibatch_ot_pair}


# named presets and spec strings ----------------------------------------------

def two_gaussians_fig1() -> tuple[Distribution, Distribution]:
    """Frozen two-Gaussian-to-two-Gaussian configuration: source modes on the
    left, target modes on the right, equal weights, sigma 0.8."""
    source = GaussianMixture(2, [[-6.0, -4.0], [-6.0, 4.0]], [0.8, 0.8])
    target = GaussianMixture(2, [[6.0, -4.0], [6.0, 4.0]], [0.8, 0.8])
    return source, target


PRESETS = {"two_gaussians_fig1": two_gaussians_fig1}


def _parse_args(argstr: str) -> dict:
    out = {}
    if not argstr:
        return out
    for item in argstr.split(";"):
        if "=" not in item:
            raise UsageError(f"bad distribution argument {item!r} (want key=value)")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v != ""]


def make_distribution(spec: str, d: int = 2) -> Distribution:
    """Builds a distribution from a compact string, e.g.:

        "gaussian"                          standard normal
        "gaussian:mean=3,0;sigma=0.5"
        "gaussian_mixture:means=1,1|-1,-1;sigma=0.3"
        "moons:noise=0.05"  "checkerboard"  "spiral:turns=3"
    """
    name, _, argstr = spec.partition(":")
    name = name.strip()
    args = _parse_args(argstr)
    if name == "gaussian":
        mean = np.array(_floats(args["mean"])) if "mean" in args else 0.0
        return Gaussian(d, mean, float(args.get("sigma", 1.0)))
    if name == "gaussian_mixture":
        if "means" not in args:
            raise UsageError("gaussian_mixture needs means=ROW|ROW|...")
        means = [_floats(row) for row in args["means"].split("|")]
        k = len(means)
        sigmas = _floats(args["sigma"]) if "sigma" in args else [1.0]
        if len(sigmas) == 1:
            sigmas = sigmas * k
        weights = np.array(_floats(args["weights"])) if "weights" in args else None
        return GaussianMixture(len(means[0]), means, sigmas, weights)
    if name == "moons":
        return Moons(float(args.get("noise", 0.08)), float(args.get("scale", 2.0)))
    if name == "checkerboard":
        return Checkerboard(float(args.get("scale", 2.0)))
    if name == "spiral":
        return Spiral(
            float(args.get("noise", 0.1)),
            float(args.get("turns", 2.0)),
            float(args.get("scale", 2.0)),
        )
    raise UsageError(f"unknown distribution {name!r}")
