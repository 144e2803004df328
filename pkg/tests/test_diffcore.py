import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikefield import diffcore as dc
from spikefield.errors import ContractViolation


def make_params(**tensors):
    p = dc.FlatParams()
    for name, value in tensors.items():
        p.add(name, value)
    return p


class TestBackwardBasics:
    def test_square(self):
        p = make_params(x=3.0)
        t = dc.Tape(p)
        x = t.param("x")
        grad = t.backward(x * x)
        assert grad[0] == pytest.approx(6.0)

    def test_identity(self):
        p = make_params(x=5.0)
        t = dc.Tape(p)
        x = t.param("x")
        grad = t.backward(x * 1.0)
        assert grad[0] == pytest.approx(1.0)

    def test_product_plus_linear(self):
        # f(x, y) = x*y + x at (2, 3) -> grads (4, 2)
        p = make_params(x=2.0, y=3.0)
        t = dc.Tape(p)
        x, y = t.param("x"), t.param("y")
        grad = t.backward(x * y + x)
        assert grad[p.slice_of("x")][0] == pytest.approx(4.0)
        assert grad[p.slice_of("y")][0] == pytest.approx(2.0)

    def test_non_scalar_loss_rejected(self):
        p = make_params(x=np.array([1.0, 2.0]))
        t = dc.Tape(p)
        x = t.param("x")
        with pytest.raises(ContractViolation):
            t.backward(x * x)

    def test_unreachable_parameter_gets_zero(self):
        p = make_params(x=2.0, unused=np.array([1.0, 1.0]))
        t = dc.Tape(p)
        x = t.param("x")
        grad = t.backward(x * x)
        assert np.all(grad[p.slice_of("unused")] == 0.0)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(0)
        p = make_params(w=rng.standard_normal((4, 4)), x=rng.standard_normal(4))

        def run():
            t = dc.Tape(p)
            w, x = t.param("w"), t.param("x")
            h = dc.relu(dc.matmul(dc.reshape(x, (1, 4)), w))
            return t.backward(dc.sum(h * h))

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_frozen_leaf_excluded_but_forward_identical(self):
        rng = np.random.default_rng(1)
        p = make_params(w=rng.standard_normal((3, 3)), x=rng.standard_normal(3))

        def loss_on(tape):
            w, x = tape.param("w"), tape.param("x")
            return dc.sum(dc.matmul(dc.reshape(x, (1, 3)), w))

        t_live = dc.Tape(p)
        t_frozen = dc.Tape(p, frozen=["w"])
        l_live, l_frozen = loss_on(t_live), loss_on(t_frozen)
        assert np.array_equal(l_live.value, l_frozen.value)
        g = t_frozen.backward(l_frozen)
        assert np.all(g[p.slice_of("w")] == 0.0)
        assert np.any(g[p.slice_of("x")] != 0.0)


class TestCustomGrad:
    def test_heaviside_gate_passes_above_threshold(self):
        theta = 1.0
        p = make_params(u=2.0)
        t = dc.Tape(p)
        u = t.param("u")
        out = dc.custom_grad(u, lambda v: np.where(v >= theta, v, 0.0),
                             lambda v, o: (v >= theta).astype(float))
        grad = t.backward(out * 1.0)
        assert out.value == pytest.approx(2.0)
        assert grad[0] == pytest.approx(1.0)

    def test_heaviside_gate_blocks_below_threshold(self):
        theta = 1.0
        p = make_params(u=0.5)
        t = dc.Tape(p)
        u = t.param("u")
        out = dc.custom_grad(u, lambda v: np.where(v >= theta, v, 0.0),
                             lambda v, o: (v >= theta).astype(float))
        grad = t.backward(out * 1.0)
        assert out.value == pytest.approx(0.0)
        assert grad[0] == pytest.approx(0.0)

    def test_clamp_at_zero_indicator(self):
        p = make_params(u=-1.0)
        t = dc.Tape(p)
        u = t.param("u")
        out = dc.custom_grad(u, lambda v: np.maximum(v, 0.0),
                             lambda v, o: (v > 0).astype(float))
        grad = t.backward(out * 1.0)
        assert grad[0] == pytest.approx(0.0)


class TestGradCheck:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(7)
        p = make_params(x=rng.standard_normal(12))

        def f(params):
            t = dc.Tape(params)
            x = t.param("x")
            return dc.sum(x * x)

        report = dc.grad_check(f, p, eps=1e-4)
        assert report.max_rel_err < 1e-6

    def test_constant_function(self):
        p = make_params(x=np.array([1.0, -2.0]))

        def f(params):
            t = dc.Tape(params)
            t.param("x")
            return t.constant(3.0) * 1.0

        report = dc.grad_check(f, p)
        assert np.all(report.ad == 0.0)
        assert np.all(np.abs(report.fd) < 1e-9)

    def test_surrogate_site_flagged_not_failed(self):
        # gate with surrogate grad 1 everywhere disagrees with the true
        # derivative (0) below the threshold
        p = make_params(u=0.5)

        def f(params):
            t = dc.Tape(params)
            u = t.param("u")
            out = dc.custom_grad(u, lambda v: np.where(v >= 1.0, v, 0.0),
                                 lambda v, o: np.ones_like(v))
            return out * 1.0

        report = dc.grad_check(f, p)
        assert report.surrogate_sites.size == 1
        assert report.max_rel_err < 1e-6  # clean sites only

    def test_nan_forward_flagged(self):
        p = make_params(x=0.0)

        def f(params):
            t = dc.Tape(params)
            x = t.param("x")
            return dc.log(x + 0.5e-5)  # x - eps goes negative -> NaN

        report = dc.grad_check(f, p, eps=1e-5)
        assert report.nan_sites.size == 1


def _fd_gradient(f, params, eps=1e-5):
    base = params.vector.copy()
    out = np.zeros_like(base)
    for i in range(base.size):
        params.vector[i] = base[i] + eps
        fp = float(f(params).value)
        params.vector[i] = base[i] - eps
        fm = float(f(params).value)
        params.vector[i] = base[i]
        out[i] = (fp - fm) / (2 * eps)
    return out


OPS = {
    "add": lambda t, a, b: dc.sum((a + b) * (a + b)),
    "mul": lambda t, a, b: dc.sum(a * b * a),
    "div": lambda t, a, b: dc.sum(a / (b * b + 2.0)),
    "exp": lambda t, a, b: dc.sum(dc.exp(a * 0.3) * b),
    "log": lambda t, a, b: dc.sum(dc.log(a * a + 1.5)),
    "sqrt": lambda t, a, b: dc.sum(dc.sqrt(a * a + 0.7)),
    "abs": lambda t, a, b: dc.sum(dc.absolute(a + 0.05)),
    "relu": lambda t, a, b: dc.sum(dc.relu(a) * b),
    "sigmoid": lambda t, a, b: dc.sum(dc.sigmoid(a * 2.0)),
    "softplus": lambda t, a, b: dc.sum(dc.softplus(a * 3.0)),
    "matmul": lambda t, a, b: dc.sum(
        m := dc.matmul(dc.reshape(a, (2, 3)), dc.reshape(b, (3, 2))),
    ) + dc.sum(m * m),
    "dot": lambda t, a, b: dc.dot(a, b) * dc.dot(a, a),
    "norm": lambda t, a, b: dc.norm(a) * 2.0 + dc.norm(b),
    "mean": lambda t, a, b: dc.mean(a * a * b),
    "concat": lambda t, a, b: dc.sum(
        c := dc.concat([dc.reshape(a, (6, 1)), dc.reshape(b, (6, 1))])) + dc.sum(c * c),
    "slice": lambda t, a, b: dc.sum(dc.slice_last(dc.reshape(a * b, (2, 3)), 1, 3) ** 2),
    "take": lambda t, a, b: dc.sum(dc.take(a * a, np.array([0, 2, 2, 5]))),
    "clip": lambda t, a, b: dc.sum(dc.clip(a, -0.6, 0.6) * b),
    "pow": lambda t, a, b: dc.sum((a * a + 1.0) ** 3),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_builtin_op_matches_central_differences(name):
    # 100 random points per op, relative error < 1e-4 in double precision
    import zlib
    build = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100):
        a0 = rng.standard_normal(6)
        b0 = rng.standard_normal(6)
        if name in ("relu", "abs", "clip"):
            # keep away from the kink where FD is one-sided
            a0 = np.where(np.abs(a0) < 1e-2, a0 + 0.05, a0)
            b0 = np.where(np.abs(b0 - 0.6) < 1e-2, b0 + 0.05, b0)
        p = make_params(a=a0, b=b0)

        def f(params):
            t = dc.Tape(params)
            return build(t, t.param("a"), t.param("b"))

        t = dc.Tape(p)
        ad = t.backward(build(t, t.param("a"), t.param("b")))
        fd = _fd_gradient(f, p)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-6)
        assert np.max(np.abs(ad - fd) / denom) < 1e-4, name


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31 - 1))
def test_gradient_linearity(alpha, beta, seed):
    # grad(alpha*f + beta*g) == alpha*grad(f) + beta*grad(g)
    rng = np.random.default_rng(seed)
    p = make_params(x=rng.standard_normal(5))

    def build(t):
        x = t.param("x")
        f = dc.sum(dc.exp(x * 0.2) * x)
        g = dc.sum(dc.sigmoid(x) * x * x)
        return f, g

    t = dc.Tape(p)
    f, g = build(t)
    gf = t.backward(f)
    t2 = dc.Tape(p)
    f2, g2 = build(t2)
    gg = t2.backward(g2)
    t3 = dc.Tape(p)
    f3, g3 = build(t3)
    gc = t3.backward(f3 * alpha + g3 * beta)
    np.testing.assert_allclose(gc, alpha * gf + beta * gg, rtol=1e-10, atol=1e-12)
