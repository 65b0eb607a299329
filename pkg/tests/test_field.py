import numpy as np
import pytest

from straightflow import autodiff as ad
from straightflow.errors import UsageError
from straightflow.field import VelocityField, time_embedding, time_embedding_dt
from straightflow.numerics import RngStream


class TestTimeEmbedding:
    def test_shape_and_frequencies(self):
        emb = time_embedding(np.array([0.0, 0.25]), n_freq=8)
        assert emb.shape == (2, 16)
        # at t=0: sin=0, cos=1 for every frequency
        np.testing.assert_allclose(emb[0, 0::2], 0.0, atol=0)
        np.testing.assert_allclose(emb[0, 1::2], 1.0, atol=0)
        # k-th frequency is 2^k pi
        np.testing.assert_allclose(emb[1, 0], np.sin(np.pi * 0.25), atol=1e-15)
        np.testing.assert_allclose(emb[1, 2], np.sin(2 * np.pi * 0.25), atol=1e-15)

    def test_derivative_matches_finite_difference(self):
        t = np.array([0.3, 0.71])
        h = 1e-7
        fd = (time_embedding(t + h) - time_embedding(t - h)) / (2 * h)
        np.testing.assert_allclose(time_embedding_dt(t), fd, rtol=1e-6, atol=1e-5)


class TestEval:
    def test_zero_params_zero_field(self):
        vf = VelocityField(2)
        out = vf.eval(0.5, np.ones((4, 2)))
        np.testing.assert_array_equal(out, np.zeros((4, 2)))

    def test_matches_raw_forward_on_embedded_input(self):
        vf = VelocityField(2, RngStream(0), hidden=(16, 16))
        r = RngStream(1)
        x = r.standard_normal((5, 2))
        t = r.uniform(0.0, 1.0, 5)
        inp = np.concatenate([time_embedding(t), x], axis=1)
        np.testing.assert_array_equal(vf.eval(t, x), ad.forward(vf.spec, vf.params, inp))

    def test_scalar_t_broadcasts(self):
        vf = VelocityField(2, RngStream(0), hidden=(8,))
        x = RngStream(2).standard_normal((3, 2))
        a = vf.eval(0.4, x)
        b = vf.eval(np.full(3, 0.4), x)
        np.testing.assert_array_equal(a, b)

    def test_shape_checks(self):
        vf = VelocityField(2)
        with pytest.raises(UsageError):
            vf.eval(0.5, np.ones((4, 3)))
        with pytest.raises(UsageError):
            vf.eval(np.ones(3), np.ones((4, 2)))


class TestDirectionalDerivative:
    def test_pure_time_derivative_central_difference(self):
        vf = VelocityField(2, RngStream(3), hidden=(32, 32))
        r = RngStream(4)
        x = r.standard_normal((6, 2))
        t = r.uniform(0.1, 0.9, 6)
        got = vf.directional_derivative(t, x, np.zeros((6, 2)))
        h = 1e-5
        fd = (vf.eval(t + h, x) - vf.eval(t - h, x)) / (2 * h)
        denom = max(np.max(np.abs(fd)), 1e-8)
        assert np.max(np.abs(got - fd)) / denom < 1e-4

    def test_linear_in_u(self):
        vf = VelocityField(2, RngStream(5), hidden=(16,))
        r = RngStream(6)
        x = r.standard_normal((4, 2))
        u, w = r.standard_normal((4, 2)), r.standard_normal((4, 2))
        t = np.full(4, 0.3)
        base = vf.directional_derivative(t, x, np.zeros((4, 2)))
        du = vf.directional_derivative(t, x, u) - base
        dw = vf.directional_derivative(t, x, w) - base
        dboth = vf.directional_derivative(t, x, 2.0 * u - 3.0 * w) - base
        np.testing.assert_allclose(dboth, 2.0 * du - 3.0 * dw, atol=1e-12)

    def test_full_direction_central_difference_100_cases(self):
        vf = VelocityField(2, RngStream(7), hidden=(32, 32))
        r = RngStream(8)
        h = 1e-5
        for _ in range(10):  # 10 batches of 10 rows = 100 cases
            x = r.standard_normal((10, 2))
            t = r.uniform(0.1, 0.9, 10)
            u = r.standard_normal((10, 2))
            got = vf.directional_derivative(t, x, u)
            fd = (vf.eval(t + h, x + h * u) - vf.eval(t - h, x - h * u)) / (2 * h)
            denom = max(np.max(np.abs(fd)), 1e-8)
            assert np.max(np.abs(got - fd)) / denom < 1e-4

    def test_jvp_primal_equals_eval_bitwise(self):
        vf = VelocityField(2, RngStream(9), hidden=(16, 16))
        r = RngStream(10)
        x = r.standard_normal((5, 2))
        t = r.uniform(0.0, 1.0, 5)
        u = r.standard_normal((5, 2))
        v, dv, _ = vf.value_and_dirderiv(t, x, u)
        np.testing.assert_array_equal(v, vf.eval(t, x))


class TestPersistence:
    def test_roundtrip_bitwise(self):
        vf = VelocityField(3, RngStream(11), hidden=(8, 8), activation="silu", n_freq=4)
        blob = vf.to_bytes()
        back = VelocityField.from_bytes(blob)
        assert back.d == 3 and back.n_freq == 4 and back.spec == vf.spec
        np.testing.assert_array_equal(back.params, vf.params)
        x = RngStream(12).standard_normal((4, 3))
        np.testing.assert_array_equal(back.eval(0.5, x), vf.eval(0.5, x))
