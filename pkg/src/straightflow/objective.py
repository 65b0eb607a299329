"""Training objectives: flow-matching loss, straightness penalty, combined.

The combined objective is

    L = mean ||v_theta(t, x_t) - sg(dphi/dt)||^2
      + lambda * mean ||d/dt v_theta(t, x_t) + grad_x v_theta(t, x_t) . v*||^2

where v* is the posterior-mean velocity estimate. The second term is the
convective derivative of the field along (1, v*); it vanishes exactly when
trajectories are straight with constant speed, so its gradient pushes the
interpolant parameters psi (through v*) and the field parameters theta toward
a straight flow. The target dphi/dt is never differentiated.

Gradient routing is explicit: by default the x_t argument is treated as a
constant in both terms (psi learns only through v*), and each of those three
choices is one flag away for ablations. When both terms stop gradients at
x_t, the network needs a single joint forward-tangent pass and a single
reverse pass for both losses, because the flow-matching value is the primal
of the same JVP the straightness term differentiates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, UsageError
from .field import VelocityField
from .interpolants import Interpolant
from .oracle import v_star_vjp, v_star_with_ctx


@dataclass(frozen=True)
class GradRouting:
    stop_grad_xt_in_cfm: bool = True
    stop_grad_xt_in_straightness: bool = True
    grad_through_vstar: bool = True

    @property
    def stop_grad_target(self) -> bool:
        # the regression target is always treated as a constant
        return True


DEFAULT_ROUTING = GradRouting()


@dataclass
class LossBreakdown:
    cfm_term: float
    straightness_term: float
    total: float
    lam: float
    ess_mean: float

    def require_finite(self, context: str = "") -> None:
        if not (np.isfinite(self.cfm_term) and np.isfinite(self.total)):
            raise NumericalError(f"non-finite loss{context}")


def cfm_loss(
    field: VelocityField,
    interp: Interpolant,
    t,
    x0,
    x1,
    routing: GradRouting = DEFAULT_ROUTING,
):
    """Flow-matching term alone. Returns (loss, theta_grad, psi_grad)."""
    t = np.asarray(t, dtype=np.float64)
    xt = interp.forward(t, x0, x1)
    target = interp.dt(t, x0, x1)
    n = xt.shape[0]
    v, cache = field.eval_cached(t, xt)
    diff = v - target
    loss = float(np.sum(diff * diff)) / n
    theta_grad, x_bar = field.eval_vjp(cache, (2.0 / n) * diff)
    if routing.stop_grad_xt_in_cfm or interp.psi_dim == 0:
        psi_grad = np.zeros(interp.psi_dim)
    else:
        psi_grad = interp.forward_vjp_psi(t, x0, x1, x_bar)
    return loss, theta_grad, psi_grad


def straightness_residual(
    field: VelocityField,
    interp: Interpolant,
    t,
    x,
    candidates,
    source=1.0,
):
    """r = d/dt v + grad_x v . v*, evaluated at (t, x). Zero for straight,
    constant-speed flows."""
    res, _ = v_star_with_ctx(interp, t, x, candidates, source)
    return field.directional_derivative(t, x, res.v_star)


def fd_straightness_residual(field: VelocityField, t, x, u, delta: float = 1e-2):
    """Finite-difference surrogate (v(t+d, x+d*u) - v(t, x))/d; cross-checks
    the JVP path and is available as a training option."""
    t = np.asarray(t, dtype=np.float64)
    v0 = field.eval(t, x)
    v1 = field.eval(t + delta, x + delta * np.asarray(u))
    return (v1 - v0) / delta


def combined_loss(
    field: VelocityField,
    interp: Interpolant,
    t,
    x0,
    x1,
    candidates,
    lam: float,
    routing: GradRouting = DEFAULT_ROUTING,
    source=1.0,
    surrogate: str = "jvp",
    fd_delta: float = 1e-2,
    force_diagnostics: bool = False,
):
    """Full objective. Returns (LossBreakdown, theta_grad, psi_grad).

    When lam == 0 the straightness machinery only runs if force_diagnostics
    is set (the trainer sets it on logging steps); otherwise the breakdown
    reports straightness_term 0.0 and ess_mean nan, and the result reduces
    exactly to cfm_loss.
    """
    if lam < 0:
        raise NumericalError("lam must be >= 0")
    t = np.asarray(t, dtype=np.float64)
    xt = interp.forward(t, x0, x1)
    target = interp.dt(t, x0, x1)
    n = xt.shape[0]
    need_straightness = lam > 0 or force_diagnostics

    if not need_straightness:
        v, cache = field.eval_cached(t, xt)
        diff = v - target
        cfm = float(np.sum(diff * diff)) / n
        theta_grad, x_bar = field.eval_vjp(cache, (2.0 / n) * diff)
        psi_grad = np.zeros(interp.psi_dim)
        if not routing.stop_grad_xt_in_cfm and interp.psi_dim:
            psi_grad = interp.forward_vjp_psi(t, x0, x1, x_bar)
        breakdown = LossBreakdown(cfm, 0.0, cfm, float(lam), float("nan"))
        breakdown.require_finite(_loss_context(t, None))
        return breakdown, theta_grad, psi_grad

    vres, vctx = v_star_with_ctx(interp, t, xt, candidates, source)
    if surrogate == "fd":
        if not (routing.stop_grad_xt_in_cfm and routing.stop_grad_xt_in_straightness):
            raise UsageError("fd surrogate supports only the default x_t routing")
        return _combined_fd(
            field, interp, t, x0, x1, xt, target, vres, vctx, lam, routing, fd_delta
        )
    if surrogate != "jvp":
        raise NumericalError(f"unknown straightness surrogate {surrogate!r}")

    v, dv, cache = field.value_and_dirderiv(t, xt, vres.v_star)
    diff = v - target
    cfm = float(np.sum(diff * diff)) / n
    straight = float(np.sum(dv * dv)) / n
    total = cfm + lam * straight
    y_bar = (2.0 / n) * diff
    dv_bar = (2.0 * lam / n) * dv

    same_xt_routing = routing.stop_grad_xt_in_cfm == routing.stop_grad_xt_in_straightness
    if same_xt_routing:
        theta_grad, x_bar_joint, u_bar = field.dirderiv_vjp(cache, dv_bar, v_bar=y_bar)
    else:
        # flags differ: the terms need separate input cotangents; the jvp
        # cache also carries everything eval_vjp needs for the primal pass
        theta_grad, x_bar_str, u_bar = field.dirderiv_vjp(cache, dv_bar, v_bar=None)
        g2, x_bar_cfm = field.eval_vjp(cache, y_bar)
        theta_grad = theta_grad + g2

    psi_grad = np.zeros(interp.psi_dim)
    if interp.psi_dim:
        xt_bar = np.zeros_like(xt)
        want_xt = False
        if same_xt_routing:
            if not routing.stop_grad_xt_in_cfm:
                xt_bar += x_bar_joint  # joint cotangent already sums both terms
                want_xt = True
        else:
            if not routing.stop_grad_xt_in_cfm:
                xt_bar += x_bar_cfm
            if not routing.stop_grad_xt_in_straightness:
                xt_bar += x_bar_str
            want_xt = True
        if routing.grad_through_vstar and lam > 0:
            pg, xt_bar_vstar = v_star_vjp(interp, vctx, u_bar)
            psi_grad = psi_grad + pg
            if not routing.stop_grad_xt_in_straightness:
                xt_bar += xt_bar_vstar
                want_xt = True
        if want_xt:
            psi_grad = psi_grad + interp.forward_vjp_psi(t, x0, x1, xt_bar)
    breakdown = LossBreakdown(cfm, straight, total, float(lam), float(np.mean(vres.ess)))
    breakdown.require_finite(_loss_context(t, vctx))
    return breakdown, theta_grad, psi_grad


def _combined_fd(field, interp, t, x0, x1, xt, target, vres, vctx, lam, routing, delta):
    """Finite-difference straightness surrogate path (diagnostic option)."""
    n = xt.shape[0]
    u = vres.v_star
    v0, cache0 = field.eval_cached(t, xt)
    v1, cache1 = field.eval_cached(t + delta, xt + delta * u)
    diff = v0 - target
    r = (v1 - v0) / delta
    cfm = float(np.sum(diff * diff)) / n
    straight = float(np.sum(r * r)) / n
    total = cfm + lam * straight
    r_bar = (2.0 * lam / n) * r
    g1, x1_bar = field.eval_vjp(cache1, r_bar / delta)
    g0, x0_bar = field.eval_vjp(cache0, (2.0 / n) * diff - r_bar / delta)
    theta_grad = g0 + g1
    psi_grad = np.zeros(interp.psi_dim)
    if interp.psi_dim and routing.grad_through_vstar and lam > 0:
        # x1 input of the shifted evaluation depends on u = v* via x + delta*u
        pg, _ = v_star_vjp(interp, vctx, delta * x1_bar)
        psi_grad = psi_grad + pg
    breakdown = LossBreakdown(cfm, straight, total, float(lam), float(np.mean(vres.ess)))
    breakdown.require_finite(_loss_context(t, vctx))
    return breakdown, theta_grad, psi_grad


def _loss_context(t, vctx) -> str:
    t = np.asarray(t)
    msg = f" (t range [{float(t.min()):.6g}, {float(t.max()):.6g}]"
    if vctx is not None:
        w = vctx.weights
        msg += (
            f", ess mean {float(np.mean(vctx.result.ess)):.3g}"
            f", weight range [{float(w.min()):.3g}, {float(w.max()):.3g}]"
        )
    return msg + ")"
