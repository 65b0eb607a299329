"""Objective tests.

Gradient checks use finite differences of a hand-assembled loss in which the
regression target is always frozen at the base parameters (the target branch
never carries gradients); which other branches move is chosen per test to
mirror the routing flags under test.
"""
import numpy as np
import pytest

from straightflow.errors import NumericalError, UsageError
from straightflow.field import VelocityField
from straightflow.interpolants import make_interpolant
from straightflow.numerics import RngStream
from straightflow.objective import (
    DEFAULT_ROUTING,
    GradRouting,
    cfm_loss,
    combined_loss,
    fd_straightness_residual,
    straightness_residual,
)
from straightflow.oracle import v_star

from conftest import single_layer_field


def small_field(d, seed=7):
    return VelocityField(d, RngStream(seed), hidden=(16,))


def make_batch(rng, n, d):
    t = 0.15 + 0.7 * rng.uniform(0.0, 1.0, (n,))
    x0 = rng.standard_normal((n, d))
    x1 = rng.standard_normal((n, d)) + 1.5
    return t, x0, x1


def randomized_interp(family, d, seed=3, scale=0.3):
    interp = make_interpolant(family, d)
    if interp.psi_dim:
        interp.psi = interp.psi + scale * RngStream(seed).standard_normal((interp.psi_dim,))
    return interp


# cfm_loss ---------------------------------------------------------------


def test_field_matching_target_gives_zero_loss():
    # pair x1 = x0 + c so the linear-path target is the constant c; dyadic
    # x0 keeps x1 - x0 == c exact in floats
    d, c = 1, 3.0
    rng = RngStream(0)
    x0 = rng.integers(-8, 8, (40, d)) * 0.25
    x1 = x0 + c
    t = 0.1 + 0.8 * rng.uniform(0.0, 1.0, (40,))
    field = single_layer_field(d, np.zeros((d, d)), np.full(d, c))
    interp = make_interpolant("linear", d)
    loss, theta_grad, psi_grad = cfm_loss(field, interp, t, x0, x1)
    assert loss == 0.0
    assert np.all(theta_grad == 0.0)
    assert psi_grad.shape == (0,)


def test_zero_field_constant_gap_loss_is_four():
    d = 1
    field = VelocityField(d, rng=None)
    interp = make_interpolant("linear", d)
    t = np.array([0.2, 0.5, 0.9])
    x0 = np.zeros((3, d))
    x1 = np.full((3, d), 2.0)
    loss, _, _ = cfm_loss(field, interp, t, x0, x1)
    assert loss == pytest.approx(4.0, abs=1e-12)


def test_cfm_theta_grad_matches_fd():
    d = 2
    rng = RngStream(11)
    field = small_field(d)
    interp = make_interpolant("linear", d)
    t, x0, x1 = make_batch(rng, 12, d)

    _, theta_grad, _ = cfm_loss(field, interp, t, x0, x1)

    def loss_at(params):
        saved = field.params
        field.params = params
        try:
            return cfm_loss(field, interp, t, x0, x1)[0]
        finally:
            field.params = saved

    h = 1e-5
    idx = rng.integers(0, field.params.size, (20,))
    for i in idx:
        e = np.zeros_like(field.params)
        e[i] = h
        fd = (loss_at(field.params + e) - loss_at(field.params - e)) / (2 * h)
        assert abs(theta_grad[i] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_cfm_psi_grad_zero_when_xt_stopped():
    d = 2
    rng = RngStream(5)
    interp = randomized_interp("scalar_schedule", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 10, d)
    _, _, psi_grad = cfm_loss(field, interp, t, x0, x1, DEFAULT_ROUTING)
    assert np.all(psi_grad == 0.0)


def test_cfm_psi_grad_through_xt_matches_frozen_target_fd():
    d = 2
    rng = RngStream(6)
    interp = randomized_interp("scalar_schedule", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 10, d)
    routing = GradRouting(stop_grad_xt_in_cfm=False)
    _, _, psi_grad = cfm_loss(field, interp, t, x0, x1, routing)
    target = interp.dt(t, x0, x1)

    def loss_at(psi):
        saved = interp.psi
        interp.psi = psi
        try:
            xt = interp.forward(t, x0, x1)
        finally:
            interp.psi = saved
        diff = field.eval(t, xt) - target
        return float(np.sum(diff * diff)) / xt.shape[0]

    h = 1e-5
    idx = rng.integers(0, interp.psi_dim, (10,))
    for i in idx:
        e = np.zeros(interp.psi_dim)
        e[i] = h
        fd = (loss_at(interp.psi + e) - loss_at(interp.psi - e)) / (2 * h)
        assert abs(psi_grad[i] - fd) <= 1e-4 * max(1e-6, abs(fd))


# straightness residual ---------------------------------------------------


def test_constant_field_residual_zero():
    d = 2
    rng = RngStream(1)
    field = single_layer_field(d, np.zeros((d, d)), np.array([0.7, -0.2]))
    interp = make_interpolant("linear", d)
    x = rng.standard_normal((6, d))
    cands = rng.standard_normal((32, d))
    r = straightness_residual(field, interp, np.full(6, 0.4), x, cands)
    assert np.all(r == 0.0)


def test_identity_field_residual_equals_vstar():
    # v(t,x) = x has zero time derivative and identity Jacobian, so the
    # convective derivative along (1, u) is exactly u
    d = 2
    rng = RngStream(2)
    field = single_layer_field(d, np.eye(d), np.zeros(d))
    interp = make_interpolant("linear", d)
    x = rng.standard_normal((5, d))
    cands = rng.standard_normal((64, d))
    t = np.full(5, 0.3)
    r = straightness_residual(field, interp, t, x, cands)
    xt = x
    expected = v_star(interp, t, xt, cands).v_star
    np.testing.assert_allclose(r, expected, rtol=1e-12, atol=1e-14)


def test_fd_residual_converges_first_order_to_jvp():
    # the one-sided difference carries O(delta) truncation with a large
    # constant from the high-frequency time embedding; check the order
    d = 2
    rng = RngStream(3)
    field = small_field(d)
    x = rng.standard_normal((8, d))
    u = rng.standard_normal((8, d))
    t = np.full(8, 0.45)
    exact = field.directional_derivative(t, x, u)
    errs = [
        np.max(np.abs(fd_straightness_residual(field, t, x, u, delta=dlt) - exact))
        for dlt in (1e-4, 1e-5, 1e-6)
    ]
    assert errs[2] <= 1e-3 * np.max(np.abs(exact))
    assert 0.05 <= errs[1] / errs[0] <= 0.2
    assert 0.05 <= errs[2] / errs[1] <= 0.2


# combined loss -----------------------------------------------------------


def test_lambda_zero_reduces_to_cfm():
    d = 2
    rng = RngStream(8)
    interp = randomized_interp("scalar_schedule", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 10, d)
    cands = rng.standard_normal((64, d))
    breakdown, tg, pg = combined_loss(field, interp, t, x0, x1, cands, lam=0.0)
    loss, tg_ref, pg_ref = cfm_loss(field, interp, t, x0, x1)
    assert breakdown.cfm_term == loss
    assert breakdown.total == loss
    assert breakdown.straightness_term == 0.0
    assert np.isnan(breakdown.ess_mean)
    np.testing.assert_array_equal(tg, tg_ref)
    assert np.all(pg == 0.0) and np.all(pg_ref == 0.0)


def test_lambda_zero_with_diagnostics_reports_straightness():
    d = 2
    rng = RngStream(9)
    interp = randomized_interp("scalar_schedule", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 10, d)
    cands = rng.standard_normal((64, d))
    bd, tg, pg = combined_loss(
        field, interp, t, x0, x1, cands, lam=0.0, force_diagnostics=True
    )
    bd0, tg0, _ = combined_loss(field, interp, t, x0, x1, cands, lam=0.0)
    assert bd.straightness_term > 0.0 and np.isfinite(bd.straightness_term)
    assert 1.0 <= bd.ess_mean <= 64.0
    assert bd.total == bd.cfm_term == bd0.cfm_term
    np.testing.assert_allclose(tg, tg0, rtol=1e-14)
    assert np.all(pg == 0.0)


def test_linear_interp_theta_grad_matches_fd():
    # psi is empty, so the full total is a function of theta alone
    d = 2
    rng = RngStream(10)
    interp = make_interpolant("linear", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 8, d)
    cands = rng.standard_normal((48, d))
    lam = 0.5
    _, theta_grad, psi_grad = combined_loss(field, interp, t, x0, x1, cands, lam)
    assert psi_grad.shape == (0,)

    def total_at(params):
        saved = field.params
        field.params = params
        try:
            return combined_loss(field, interp, t, x0, x1, cands, lam)[0].total
        finally:
            field.params = saved

    h = 1e-5
    idx = rng.integers(0, field.params.size, (20,))
    for i in idx:
        e = np.zeros_like(field.params)
        e[i] = h
        fd = (total_at(field.params + e) - total_at(field.params - e)) / (2 * h)
        assert abs(theta_grad[i] - fd) <= 1e-4 * max(1.0, abs(fd))


def _default_routing_psi_fd(field, interp, t, x0, x1, cands, lam, psi, source=1.0):
    """Straightness term with x_t and the target frozen at the base psi;
    only v* moves. Matches the default routing's psi dependence."""
    saved = interp.psi
    xt = interp.forward(t, x0, x1)
    interp.psi = psi
    try:
        res = v_star(interp, t, xt, cands, source)
    finally:
        interp.psi = saved
    dv = field.directional_derivative(t, xt, res.v_star)
    return lam * float(np.sum(dv * dv)) / xt.shape[0]


@pytest.mark.parametrize("family", ["scalar_schedule", "affine_plu"])
def test_default_routing_psi_grad_matches_fd(family):
    d = 2
    rng = RngStream(21)
    interp = randomized_interp(family, d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 6, d)
    cands = rng.standard_normal((32, d))
    lam = 0.3
    _, _, psi_grad = combined_loss(field, interp, t, x0, x1, cands, lam)
    assert np.count_nonzero(psi_grad) >= 10

    h = 1e-5
    idx = rng.integers(0, interp.psi_dim, (10,))
    for i in idx:
        e = np.zeros(interp.psi_dim)
        e[i] = h
        up = _default_routing_psi_fd(field, interp, t, x0, x1, cands, lam, interp.psi + e)
        dn = _default_routing_psi_fd(field, interp, t, x0, x1, cands, lam, interp.psi - e)
        fd = (up - dn) / (2 * h)
        assert abs(psi_grad[i] - fd) <= 1e-3 * max(1e-5, abs(fd), abs(psi_grad[i]))


def _full_flow_psi_total(field, interp, t, x0, x1, cands, lam, psi, target):
    """Total with x_t moving everywhere and the target frozen: the psi
    dependence under routing with both x_t stops disabled."""
    saved = interp.psi
    interp.psi = psi
    try:
        xt = interp.forward(t, x0, x1)
        res = v_star(interp, t, xt, cands)
    finally:
        interp.psi = saved
    v, dv, _ = field.value_and_dirderiv(t, xt, res.v_star)
    n = xt.shape[0]
    diff = v - target
    return float(np.sum(diff * diff)) / n + lam * float(np.sum(dv * dv)) / n


@pytest.mark.parametrize("family", ["scalar_schedule", "affine_plu"])
def test_full_flow_routing_psi_grad_matches_fd(family):
    d = 2
    rng = RngStream(22)
    interp = randomized_interp(family, d, seed=4)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 6, d)
    cands = rng.standard_normal((32, d))
    lam = 0.3
    routing = GradRouting(stop_grad_xt_in_cfm=False, stop_grad_xt_in_straightness=False)
    _, _, psi_grad = combined_loss(field, interp, t, x0, x1, cands, lam, routing)
    target = interp.dt(t, x0, x1)

    h = 1e-5
    idx = rng.integers(0, interp.psi_dim, (10,))
    for i in idx:
        e = np.zeros(interp.psi_dim)
        e[i] = h
        up = _full_flow_psi_total(field, interp, t, x0, x1, cands, lam, interp.psi + e, target)
        dn = _full_flow_psi_total(field, interp, t, x0, x1, cands, lam, interp.psi - e, target)
        fd = (up - dn) / (2 * h)
        assert abs(psi_grad[i] - fd) <= 1e-3 * max(1e-5, abs(fd), abs(psi_grad[i]))


def test_mixed_routing_psi_grad_matches_fd():
    # flags differ: cfm stops x_t, straightness does not
    d = 2
    rng = RngStream(23)
    interp = randomized_interp("scalar_schedule", d, seed=5)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 6, d)
    cands = rng.standard_normal((32, d))
    lam = 0.3
    routing = GradRouting(stop_grad_xt_in_cfm=True, stop_grad_xt_in_straightness=False)
    _, _, psi_grad = combined_loss(field, interp, t, x0, x1, cands, lam, routing)

    def total_at(psi):
        saved = interp.psi
        interp.psi = psi
        try:
            xt = interp.forward(t, x0, x1)
            res = v_star(interp, t, xt, cands)
        finally:
            interp.psi = saved
        dv = field.directional_derivative(t, xt, res.v_star)
        return lam * float(np.sum(dv * dv)) / xt.shape[0]

    h = 1e-5
    idx = rng.integers(0, interp.psi_dim, (10,))
    for i in idx:
        e = np.zeros(interp.psi_dim)
        e[i] = h
        fd = (total_at(interp.psi + e) - total_at(interp.psi - e)) / (2 * h)
        assert abs(psi_grad[i] - fd) <= 1e-3 * max(1e-5, abs(fd), abs(psi_grad[i]))


def test_grad_through_vstar_off_gives_zero_psi_grad():
    d = 2
    rng = RngStream(24)
    interp = randomized_interp("scalar_schedule", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 6, d)
    cands = rng.standard_normal((32, d))
    routing = GradRouting(grad_through_vstar=False)
    _, _, psi_grad = combined_loss(field, interp, t, x0, x1, cands, 0.3, routing)
    assert np.all(psi_grad == 0.0)


def test_target_branch_carries_no_gradient():
    # with x_t flowing in the cfm term and lam=0, the analytic psi-grad must
    # match the frozen-target FD, and differ from an FD that lets the target
    # move: stop_grad on the target is structural, not incidental
    d = 2
    rng = RngStream(25)
    interp = randomized_interp("scalar_schedule", d, seed=6)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 8, d)
    routing = GradRouting(stop_grad_xt_in_cfm=False)
    _, _, psi_grad = combined_loss(
        field, interp, t, x0, x1, candidates=None, lam=0.0, routing=routing
    )
    target = interp.dt(t, x0, x1)

    def loss_at(psi, frozen):
        saved = interp.psi
        interp.psi = psi
        try:
            xt = interp.forward(t, x0, x1)
            tgt = target if frozen else interp.dt(t, x0, x1)
        finally:
            interp.psi = saved
        diff = field.eval(t, xt) - tgt
        return float(np.sum(diff * diff)) / xt.shape[0]

    h = 1e-5
    idx = rng.integers(0, interp.psi_dim, (8,))
    moving_diffs = []
    for i in idx:
        e = np.zeros(interp.psi_dim)
        e[i] = h
        fd_frozen = (loss_at(interp.psi + e, True) - loss_at(interp.psi - e, True)) / (2 * h)
        fd_moving = (loss_at(interp.psi + e, False) - loss_at(interp.psi - e, False)) / (2 * h)
        assert abs(psi_grad[i] - fd_frozen) <= 1e-4 * max(1e-6, abs(fd_frozen))
        moving_diffs.append(abs(psi_grad[i] - fd_moving))
    # at least somewhere the target branch is a real contribution
    assert max(moving_diffs) > 1e-6


def test_total_invariant_to_row_permutation():
    d = 2
    rng = RngStream(26)
    interp = randomized_interp("affine_plu", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 12, d)
    cands = rng.standard_normal((32, d))
    bd, _, _ = combined_loss(field, interp, t, x0, x1, cands, 0.2)
    perm = rng.permutation(12)
    bd_p, _, _ = combined_loss(field, interp, t[perm], x0[perm], x1[perm], cands, 0.2)
    assert abs(bd.total - bd_p.total) <= 1e-12 * max(1.0, abs(bd.total))


def test_fd_surrogate_matches_jvp_term_and_gradients():
    d = 2
    rng = RngStream(27)
    interp = randomized_interp("scalar_schedule", d, seed=9)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 6, d)
    cands = rng.standard_normal((32, d))
    lam, delta = 0.4, 1e-4
    bd_jvp, _, _ = combined_loss(field, interp, t, x0, x1, cands, lam)
    bd_fd, _, psi_grad = combined_loss(
        field, interp, t, x0, x1, cands, lam, surrogate="fd", fd_delta=delta
    )
    assert bd_fd.cfm_term == bd_jvp.cfm_term
    assert bd_fd.straightness_term == pytest.approx(bd_jvp.straightness_term, rel=0.1)
    bd_fd2, _, _ = combined_loss(
        field, interp, t, x0, x1, cands, lam, surrogate="fd", fd_delta=delta / 10
    )
    gap = abs(bd_fd.straightness_term - bd_jvp.straightness_term)
    gap2 = abs(bd_fd2.straightness_term - bd_jvp.straightness_term)
    assert gap2 < 0.25 * gap

    # gradient check at the training default delta, where the v* path
    # carries a stronger signal against the FD oracle's noise floor
    delta = 1e-2
    _, _, psi_grad = combined_loss(
        field, interp, t, x0, x1, cands, lam, surrogate="fd", fd_delta=delta
    )
    xt = interp.forward(t, x0, x1)
    v0 = field.eval(t, xt)

    def total_at(psi):
        saved = interp.psi
        interp.psi = psi
        try:
            res = v_star(interp, t, xt, cands)
        finally:
            interp.psi = saved
        r = (field.eval(t + delta, xt + delta * res.v_star) - v0) / delta
        return lam * float(np.sum(r * r)) / xt.shape[0]

    h = 1e-4
    idx = rng.integers(0, interp.psi_dim, (8,))
    for i in idx:
        e = np.zeros(interp.psi_dim)
        e[i] = h
        fd = (total_at(interp.psi + e) - total_at(interp.psi - e)) / (2 * h)
        assert abs(psi_grad[i] - fd) <= 1e-3 * max(1e-5, abs(fd), abs(psi_grad[i]))


def test_fd_surrogate_rejects_nondefault_routing():
    d = 2
    rng = RngStream(28)
    interp = make_interpolant("linear", d)
    field = small_field(d)
    t, x0, x1 = make_batch(rng, 4, d)
    cands = rng.standard_normal((16, d))
    routing = GradRouting(stop_grad_xt_in_straightness=False)
    with pytest.raises(UsageError):
        combined_loss(field, interp, t, x0, x1, cands, 0.1, routing, surrogate="fd")


def test_nonfinite_loss_raises_with_diagnostics():
    d = 1
    field = single_layer_field(d, np.array([[1e200]]), np.zeros(d))
    interp = make_interpolant("linear", d)
    t = np.array([0.3, 0.6])
    x0 = np.zeros((2, d))
    x1 = np.ones((2, d))
    cands = np.linspace(-1, 1, 8).reshape(-1, 1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError, match="t range"):
            combined_loss(field, interp, t, x0, x1, cands, 0.0)
        with pytest.raises(NumericalError, match="ess"):
            combined_loss(field, interp, t, x0, x1, cands, 0.1)


def test_negative_lambda_rejected():
    d = 1
    field = small_field(d)
    interp = make_interpolant("linear", d)
    with pytest.raises(NumericalError):
        combined_loss(field, interp, np.array([0.5]), np.zeros((1, 1)), np.ones((1, 1)), np.ones((4, 1)), -0.1)
