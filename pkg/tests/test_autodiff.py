import numpy as np
import pytest

from qalaskit.autodiff import Tape, backward
from qalaskit.errors import NumericError, ShapeError
from qalaskit.optim import Adam
from qalaskit.signal_model import SequenceTiming, TissueParams, simulate


def numeric_gradient(build, arrays, h_rel=1e-6):
    """Central-difference gradient of a scalar tape function.

    ``build(*arrays) -> loss value`` re-evaluates the forward pass; every
    element of every input is perturbed individually.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            h = h_rel * max(1.0, abs(a[idx]))
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[i][idx] += h
            lo[i][idx] -= h
            g[idx] = (build(*hi) - build(*lo)) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(make_graph, arrays, tol=1e-7):
    """make_graph(tape, *leaves) -> loss node; leaves are trainable."""
    tape = Tape()
    leaves = [tape.leaf(a, trainable=True) for a in arrays]
    loss = make_graph(tape, *leaves)
    backward(tape, loss)

    def forward_value(*arrs):
        t = Tape()
        ls = [t.leaf(a, trainable=True) for a in arrs]
        return float(make_graph(t, *ls).value)

    fd = numeric_gradient(forward_value, arrays)
    for leaf, g_fd in zip(leaves, fd):
        scale = max(np.max(np.abs(g_fd)), np.max(np.abs(leaf.grad)), 1e-8)
        err = np.max(np.abs(leaf.grad - g_fd)) / scale
        assert err < tol, f"gradient mismatch: {err:.3e}"


class TestPointValues:
    def test_sigmoid_at_zero(self):
        tape = Tape()
        x = tape.leaf(np.array(0.0), trainable=True)
        y = tape.sigmoid(x)
        assert float(y.value) == 0.5
        loss = tape.sum(y)
        backward(tape, loss)
        assert float(x.grad) == 0.25

    def test_leaky_relu_negative(self):
        tape = Tape()
        x = tape.leaf(np.array([-2.0]))
        y = tape.leaky_relu(x, slope=0.01)
        assert y.value[0] == pytest.approx(-0.02)

    def test_abs_subgradient_zero_at_kink(self):
        tape = Tape()
        x = tape.leaf(np.array([0.0, -3.0, 2.0]), trainable=True)
        loss = tape.sum(tape.abs_smoothless(x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [0.0, -1.0, 1.0])


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        w = tape.leaf(np.arange(6.0).reshape(2, 3), trainable=True)
        loss = tape.sum(w)
        backward(tape, loss)
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_squared_norm_gradient(self):
        tape = Tape()
        w = tape.leaf(np.array([1.0, -2.0, 3.0]), trainable=True)
        loss = tape.sum(tape.square(w))
        backward(tape, loss)
        np.testing.assert_allclose(w.grad, 2 * w.value, rtol=1e-15)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        w = tape.leaf(np.ones(3), trainable=True)
        with pytest.raises(NumericError):
            backward(tape, w)

    def test_deterministic_and_replayable(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(4, 5))

        def run():
            tape = Tape()
            x = tape.leaf(a, trainable=True)
            y = tape.leaf(b, trainable=True)
            z = tape.mul(tape.add(x, y), tape.sigmoid(y))
            loss = tape.mean(tape.square(z))
            grads = backward(tape, loss)
            return float(loss.value), {k: v.copy() for k, v in grads.items()}

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])

    def test_diamond_graph_accumulates(self):
        # x used twice: d(x*x + x)/dx = 2x + 1
        tape = Tape()
        x = tape.leaf(np.array([3.0]), trainable=True)
        loss = tape.sum(tape.add(tape.mul(x, x), x))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [7.0])


class TestShapeContracts:
    def test_elementwise_mismatch(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        y = tape.leaf(np.ones(4))
        with pytest.raises(ShapeError):
            tape.add(x, y)

    def test_scalar_constant_broadcasts(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]), trainable=True)
        c = tape.constant(3.0)
        loss = tape.sum(tape.mul(x, c))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_matmul_shape_checks(self):
        tape = Tape()
        w = tape.leaf(np.ones((2, 3)))
        b = tape.leaf(np.ones(2))
        x = tape.leaf(np.ones((4, 5)))
        with pytest.raises(ShapeError):
            tape.matmul_channels(w, b, x)

    def test_instance_norm_single_voxel(self):
        tape = Tape()
        x = tape.leaf(np.ones((3, 1)))
        with pytest.raises(NumericError):
            tape.instance_norm(x)


class TestPrimitiveGradients:
    """Every primitive against central finite differences (h = 1e-6 relative)."""

    def test_arithmetic(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0.5, 2.0, (3, 4))
        b = rng.uniform(0.5, 2.0, (3, 4))
        check_gradients(
            lambda t, x, y: t.mean(tape_mix(t, x, y)), [a, b]
        )

    def test_unary_chain(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0.2, 1.5, (2, 5))
        check_gradients(
            lambda t, x: t.mean(t.exp(t.neg(t.square(x)))), [a]
        )

    def test_power(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.5, 2.0, (6,))
        check_gradients(lambda t, x: t.sum(t.power(x, 2.7)), [a])

    def test_trig_consts(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(-1.0, 1.0, (7,))
        check_gradients(lambda t, x: t.sum(t.sin_const(x, 1.3)), [a])
        check_gradients(lambda t, x: t.sum(t.cos_const(x, 0.7)), [a])

    def test_sigmoid_and_leaky_relu(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-3.0, 3.0, (4, 4))
        a[np.abs(a) < 0.05] = 0.5  # keep the FD stencil off the relu kink
        check_gradients(lambda t, x: t.mean(t.sigmoid(x)), [a])
        check_gradients(lambda t, x: t.mean(t.leaky_relu(x, 0.01)), [a])

    def test_abs(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0.2, 2.0, (5,)) * rng.choice([-1.0, 1.0], 5)
        check_gradients(lambda t, x: t.mean(t.abs_smoothless(x)), [a])

    def test_matmul_channels(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=(3,))
        x = rng.normal(size=(4, 6))
        check_gradients(
            lambda t, wn, bn, xn: t.mean(t.square(t.matmul_channels(wn, bn, xn))),
            [w, b, x],
        )

    def test_conv3x3(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(2, 3, 3, 3)) * 0.5
        b = rng.normal(size=(2,))
        x = rng.normal(size=(3, 2, 4, 5))
        check_gradients(
            lambda t, wn, bn, xn: t.mean(t.square(t.conv3x3(wn, bn, xn))),
            [w, b, x],
        )

    def test_instance_norm(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 11))
        check_gradients(
            lambda t, xn: t.mean(t.mul(t.instance_norm(xn), t.sigmoid(xn))), [x]
        )

    def test_instance_norm_4d(self):
        # weight the normalized output by a fixed template: a bare
        # mean-of-squares is invariant under normalization and its gradient
        # is O(eps), leaving nothing for finite differences to resolve
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 2, 3, 4))
        template = rng.normal(size=(2, 2, 3, 4))
        check_gradients(
            lambda t, xn: t.mean(t.mul(t.instance_norm(xn), t.constant(template))), [x]
        )

    def test_tv_aniso(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 4, 5))
        check_gradients(lambda t, xn: t.tv_aniso(xn), [x])

    def test_reshape_take_row(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 6))
        check_gradients(
            lambda t, xn: t.sum(t.square(t.take_row(t.reshape(xn, (2, 12)), 1))), [x]
        )


def tape_mix(t, x, y):
    return t.div(t.sub(t.mul(x, y), y), t.add(t.square(y), t.exp(t.neg(t.square(x)))))


class TestSignalModelNode:
    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(13)
        timing = SequenceTiming()
        n = 6
        t1 = rng.uniform(400, 3000, n)
        t2 = rng.uniform(40, 400, n)
        pd = rng.uniform(0.5, 1.5, n)
        ie = rng.uniform(0.55, 0.95, n)
        b1 = rng.uniform(0.8, 1.2, n)
        y = simulate(timing, TissueParams(t1 * 1.1, t2 * 0.9, pd, ie), b1)

        def make(t, t1n, t2n, pdn, ien):
            s = t.signal_model(t1n, t2n, pdn, ien, b1, timing)
            return t.mean(t.square(t.sub(s, t.constant(y))))

        # relative steps appropriate to each parameter's scale
        tape = Tape()
        leaves = [tape.leaf(a, trainable=True) for a in (t1, t2, pd, ie)]
        loss = make(tape, *leaves)
        backward(tape, loss)

        def forward_value(*arrs):
            tp = Tape()
            ls = [tp.leaf(a, trainable=True) for a in arrs]
            return float(make(tp, *ls).value)

        fd = numeric_gradient(forward_value, [t1, t2, pd, ie], h_rel=1e-4)
        for leaf, g_fd in zip(leaves, fd):
            scale = max(np.max(np.abs(g_fd)), 1e-12)
            assert np.max(np.abs(leaf.grad - g_fd)) / scale < 1e-6

    def test_t2_gradient_sign_on_first_acquisition(self):
        # acquisition 1 grows with T2 (weaker T2-prep attenuation), so with
        # loss = s1 alone the T2 gradient must be positive
        timing = SequenceTiming()
        tape = Tape()
        t1 = tape.leaf(np.array([900.0]), trainable=True)
        t2 = tape.leaf(np.array([80.0]), trainable=True)
        pd = tape.leaf(np.array([1.0]), trainable=True)
        ie = tape.leaf(np.array([0.9]), trainable=True)
        s = tape.signal_model(t1, t2, pd, ie, np.array([1.0]), timing)
        loss = tape.sum(tape.take_row(s, 0))
        backward(tape, loss)
        assert t2.grad[0] > 0

    def test_pd_gradient_linearity(self):
        timing = SequenceTiming()

        def grad_pd(pd_val):
            tape = Tape()
            t1 = tape.leaf(np.array([1200.0]))
            t2 = tape.leaf(np.array([90.0]))
            pd = tape.leaf(np.array([pd_val]), trainable=True)
            ie = tape.leaf(np.array([0.85]))
            s = tape.signal_model(t1, t2, pd, ie, np.array([1.0]), timing)
            backward(tape, tape.sum(s))
            return pd.grad[0]

        # d(sum s)/d pd is pd-independent: s is linear in pd
        assert grad_pd(0.5) == pytest.approx(grad_pd(2.0), rel=1e-12)


class TestAdam:
    def test_quadratic_convergence(self):
        w = np.array([5.0, -3.0])
        opt = Adam([w], lr=0.1)
        for _ in range(500):
            opt.step([2 * w])
        assert np.max(np.abs(w)) < 1e-4

    def test_matches_reference_formula(self):
        w = np.array([1.0])
        opt = Adam([w], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        g = np.array([0.5])
        opt.step([g])
        m = 0.1 * 0.5
        v = 0.001 * 0.25
        want = 1.0 - 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        assert w[0] == pytest.approx(want, rel=1e-12)
