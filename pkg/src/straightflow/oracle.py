"""Optimal velocity under a given interpolant, estimated from candidates.

For an invertible interpolant the ideal field at (t, x_t) is a posterior
average over plausible endpoints x1:

    v*(t, x_t) = sum_j w_j * dphi/dt(t, phi^{-1}(x_t; x1_j); x1_j),
    w_j  proportional to  p0(phi^{-1}(x_t; x1_j)) * |det J_inv| * p1(x1_j)

With candidates drawn from p1, the p1 factor is absorbed by self-normalized
importance weighting: log-weights are source log-density plus inverse-Jacobian
log-determinant, normalized by log_sum_exp. The estimator is biased but
consistent; the effective sample size 1/sum(w^2) makes collapse observable.

The whole N-by-M computation goes through the interpolant's fused grid path,
so gradients with respect to the interpolant parameters (the softmax chain
included) come from one structured backward pass.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import _plu2
from .data import Distribution, Gaussian
from .errors import DegeneratePosteriorError, UsageError
from .interpolants import Interpolant, OracleInternals, _as_t
from .numerics import as_point_batch, log_sum_exp


class VStarResult(NamedTuple):
    v_star: np.ndarray  # (N, d)
    log_normalizer: np.ndarray  # (N,) log of the unnormalized weight sum
    ess: np.ndarray  # (N,) effective sample size, in [1, M]


class VStarContext(NamedTuple):
    """Saved forward state for v_star_vjp."""

    internals: OracleInternals
    weights: np.ndarray  # (N, M) normalized
    result: VStarResult
    source: Distribution


def _source_for(source, d: int) -> Distribution:
    """Accepts a Distribution with a closed-form density, or a bare positive
    scalar meaning N(0, scalar^2 I)."""
    if isinstance(source, Distribution):
        if not source.has_density:
            raise UsageError(
                f"source {source.kind!r} has no closed-form density; "
                "the posterior weights need one"
            )
        if source.d != d:
            raise UsageError(f"source dimension {source.d} != {d}")
        return source
    return Gaussian(d, 0.0, float(source))


def posterior_log_weights(interp: Interpolant, t: float, x_t, candidates, source=1.0) -> np.ndarray:
    """Unnormalized log posterior weights of M candidates for one query row."""
    x_t = as_point_batch(x_t, interp.d, "x_t")
    candidates = as_point_batch(candidates, interp.d, "candidates")
    if x_t.shape[0] != 1:
        raise UsageError("posterior_log_weights takes a single row")
    dist = _source_for(source, interp.d)
    out = interp.oracle_forward(np.array([float(t)]), x_t, candidates)
    lw = dist.log_density(out.z) + out.logdet
    return lw[0]


def v_star_with_ctx(interp: Interpolant, t, x_t, candidates, source=1.0) -> tuple[VStarResult, VStarContext]:
    x_t = as_point_batch(x_t, interp.d, "x_t")
    candidates = as_point_batch(candidates, interp.d, "candidates")
    n = x_t.shape[0]
    t_arr = np.asarray(t, dtype=np.float64).reshape(-1)
    if t_arr.size == 1:
        t_arr = np.full(n, float(t_arr[0]))
    dist = _source_for(source, interp.d)
    if _plu2.supported(interp, dist):
        t_arr = _as_t(t_arr, "oracle_forward", interp.eps_t, need_inverse=True)
        v, log_z, ess, bad, w, fast = _plu2.forward(interp, t_arr, x_t, candidates, dist)
        if bad >= 0:
            raise DegeneratePosteriorError(
                f"all candidate weights vanished for row {bad} (t={t_arr[bad]:.6g}, "
                f"x_t={x_t[bad].tolist()})"
            )
        if not np.all(np.isfinite(v)):
            raise DegeneratePosteriorError("non-finite posterior velocity")
        result = VStarResult(v, log_z, ess)
        return result, VStarContext(fast, w, result, dist)
    internals = interp.oracle_forward(t_arr, x_t, candidates)
    log_w = dist.log_density(internals.z) + internals.logdet  # (N, M)
    finite_rows = np.max(log_w, axis=1) > -np.inf
    if not finite_rows.all():
        bad = int(np.argmin(finite_rows))
        raise DegeneratePosteriorError(
            f"all candidate weights vanished for row {bad} (t={t_arr[bad]:.6g}, "
            f"x_t={x_t[bad].tolist()})"
        )
    log_z = log_sum_exp(log_w, axis=1)
    w = np.exp(log_w - log_z[:, None])
    v = np.einsum("nm,nmd->nd", w, internals.dtv)
    ess = 1.0 / np.einsum("nm,nm->n", w, w)
    if not np.all(np.isfinite(v)):
        raise DegeneratePosteriorError("non-finite posterior velocity")
    result = VStarResult(v, log_z, ess)
    return result, VStarContext(internals, w, result, dist)


def v_star(interp: Interpolant, t, x_t, candidates, source=1.0) -> VStarResult:
    """Posterior-mean velocity at each (t_i, x_t_i) over M shared candidates."""
    result, _ = v_star_with_ctx(interp, t, x_t, candidates, source)
    return result


def v_star_vjp(interp: Interpolant, ctx: VStarContext, cotangent) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of <v*, cotangent> wrt psi, plus the x_t cotangent.

    Softmax chain: with s_j the log weight and vbar = <c, dtv_j> - <c, v*>,
    the weight branch contributes alpha_j = w_j * vbar_j as cotangent on s_j,
    which splits into the log-density term (pulled to z via the source score)
    and the log-determinant term; the mean branch puts w_j * c on dtv_j.
    """
    c = np.asarray(cotangent, dtype=np.float64)
    internals, w, result, dist = ctx.internals, ctx.weights, ctx.result, ctx.source
    if isinstance(internals, _plu2.FastInternals):
        return _plu2.vjp(interp, internals, w, result.v_star, c)
    proj = np.einsum("nd,nmd->nm", c, internals.dtv)
    mean_proj = np.einsum("nd,nd->n", c, result.v_star)
    alpha = w * (proj - mean_proj[:, None])  # (N, M)
    dtv_bar = w[:, :, None] * c[:, None, :]
    z_bar = alpha[:, :, None] * dist.log_density_grad(internals.z)
    psi_grad, xt_bar = interp.oracle_vjp(internals, z_bar, alpha, dtv_bar)
    return psi_grad, xt_bar


def v_star_grad_psi(interp: Interpolant, t, x_t, candidates, source, cotangent) -> np.ndarray:
    """One-call form: recomputes the forward pass, then applies v_star_vjp."""
    _, ctx = v_star_with_ctx(interp, t, x_t, candidates, source)
    psi_grad, _ = v_star_vjp(interp, ctx, cotangent)
    return psi_grad
