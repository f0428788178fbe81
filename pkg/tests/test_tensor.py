import numpy as np
import numpy.testing as npt
import pytest

from graspforge.errors import ConfigurationError, ContractViolation, NonFiniteGradientError
from graspforge.tensor import (
    Adam,
    AdamConfig,
    ConvSpec,
    Tensor,
    conv2d,
    conv_transpose2d,
    he_uniform,
    maxpool2d,
    relu,
)

import oracles


def t(data, grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = t(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        w = t(np.ones((1, 1, 1, 1)))
        b = t(np.zeros(1))
        spec = ConvSpec(1, 1, kernel_size=1)
        out = conv2d(x, w, b, spec)
        npt.assert_array_equal(out.data, x.data)

    def test_zero_input_gives_bias_map(self):
        rng = np.random.default_rng(0)
        x = t(np.zeros((2, 3, 5, 5)))
        w = t(rng.standard_normal((4, 3, 3, 3)))
        b = t([1.0, -2.0, 0.5, 3.0])
        out = conv2d(x, w, b, ConvSpec(3, 4, kernel_size=3, padding=1))
        for o in range(4):
            npt.assert_allclose(out.data[:, o], b.data[o], rtol=1e-6)

    def test_dilated_ramp_matches_loop_oracle(self):
        # 5x5 ramp through a dilated 3x3 kernel, frozen against the
        # quadruple-loop summation in oracles.py
        x64 = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
        rng = np.random.default_rng(7)
        w64 = rng.standard_normal((1, 1, 3, 3))
        b64 = np.array([0.25])
        expected = oracles.conv2d_loops(x64, w64, b64, stride=1, padding=2, dilation=2)
        out = conv2d(t(x64, dtype=np.float64), t(w64, dtype=np.float64),
                     t(b64, dtype=np.float64), ConvSpec(1, 1, 3, padding=2, dilation=2))
        npt.assert_allclose(out.data, expected, rtol=1e-12)

    @pytest.mark.parametrize("stride,padding,dilation,k", [
        (1, 0, 1, 3), (1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3),
        (1, 4, 4, 3), (2, 2, 1, 5), (1, 2, 1, 5), (3, 0, 1, 2),
    ])
    def test_random_matches_loop_oracle(self, stride, padding, dilation, k):
        rng = np.random.default_rng(hash((stride, padding, dilation, k)) % 2 ** 31)
        x = rng.standard_normal((2, 3, 11, 13))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        expected = oracles.conv2d_loops(x, w, b, stride, padding, dilation)
        spec = ConvSpec(3, 4, k, stride=stride, padding=padding, dilation=dilation)
        out = conv2d(t(x, dtype=np.float64), t(w, dtype=np.float64),
                     t(b, dtype=np.float64), spec)
        assert out.data.shape == expected.shape
        npt.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        x = t(np.zeros((1, 3, 8, 8)))
        w = t(np.zeros((4, 2, 3, 3)))
        b = t(np.zeros(4))
        with pytest.raises(ConfigurationError) as e:
            conv2d(x, w, b, ConvSpec(2, 4, 3))
        assert "(1, 3, 8, 8)" in str(e.value)
        w_ok_spec = ConvSpec(3, 4, 3)
        with pytest.raises(ConfigurationError) as e:
            conv2d(x, w, b, w_ok_spec)
        assert "(4, 2, 3, 3)" in str(e.value) and "(4, 3, 3, 3)" in str(e.value)

    def test_output_size_formula(self):
        for n, k, s, p, d in [(300, 3, 1, 1, 1), (75, 5, 1, 8, 4), (10, 2, 2, 0, 1)]:
            spec = ConvSpec(1, 1, k, stride=s, padding=p, dilation=d)
            assert spec.out_size(n) == (n + 2 * p - d * (k - 1) - 1) // s + 1


class TestConvTranspose2d:
    def test_single_pixel_broadcast(self):
        x = t(np.full((1, 1, 1, 1), 3.5))
        w = t(np.ones((1, 1, 2, 2)))
        b = t(np.zeros(1))
        out = conv_transpose2d(x, w, b, ConvSpec(1, 1, 2, stride=2))
        npt.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.5))

    def test_zero_input_gives_bias(self):
        x = t(np.zeros((1, 2, 4, 4)))
        w = t(np.random.default_rng(1).standard_normal((2, 3, 4, 4)))
        b = t([1.0, 2.0, -1.0])
        out = conv_transpose2d(x, w, b, ConvSpec(2, 3, 4, stride=2, padding=1))
        assert out.data.shape == (1, 3, 8, 8)
        for o in range(3):
            npt.assert_allclose(out.data[:, o], b.data[o], rtol=1e-6)

    @pytest.mark.parametrize("stride,padding,k", [(2, 1, 4), (2, 0, 2), (1, 1, 3), (3, 3, 5)])
    def test_adjoint_identity(self, stride, padding, k):
        # <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> with zero bias
        rng = np.random.default_rng(42 + stride + k)
        cin, cout = 3, 5
        x = rng.standard_normal((2, cin, 8, 8)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        spec = ConvSpec(cin, cout, k, stride=stride, padding=padding)
        fwd = conv2d(t(x), t(w), t(np.zeros(cout)), spec)
        y = rng.standard_normal(fwd.data.shape).astype(np.float32)
        tspec = ConvSpec(cout, cin, k, stride=stride, padding=padding)
        back = conv_transpose2d(t(y), Tensor(w.transpose(0, 1, 2, 3)),
                                t(np.zeros(cin)), tspec)
        lhs = np.vdot(fwd.data.astype(np.float64), y.astype(np.float64))
        rhs = np.vdot(x.astype(np.float64), back.data.astype(np.float64))
        npt.assert_allclose(lhs, rhs, rtol=1e-6)

    def test_output_size_formula(self):
        spec = ConvSpec(16, 16, 4, stride=2, padding=1)
        assert spec.transpose_out_size(75) == 150
        assert spec.transpose_out_size(150) == 300


class TestMaxPool:
    def test_constant(self):
        x = t(np.full((1, 2, 6, 6), 2.5))
        out = maxpool2d(x, 2)
        npt.assert_array_equal(out.data, np.full((1, 2, 3, 3), 2.5))

    def test_2x2(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert maxpool2d(x, 2).item() == 4.0

    def test_random_matches_scan(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        out = maxpool2d(t(x), 2, 2)
        npt.assert_array_equal(out.data, oracles.maxpool2d_loops(x, 2, 2))

    def test_overlapping_windows_match_scan(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 7, 7)).astype(np.float32)
        out = maxpool2d(t(x), 3, 2)
        npt.assert_array_equal(out.data, oracles.maxpool2d_loops(x, 3, 2))

    def test_gradient_routes_to_first_argmax(self):
        # ties broken row-major: only the first maximal element gets gradient
        x = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]]]], dtype=np.float32), requires_grad=True)
        out = maxpool2d(x, 2)
        out.sum().backward()
        npt.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_window_too_large(self):
        with pytest.raises(ConfigurationError):
            maxpool2d(t(np.zeros((1, 1, 2, 2))), 3)


class TestRelu:
    def test_basic(self):
        out = relu(t([-1.0, 0.0, 2.0]))
        npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_grad(self):
        x = Tensor(-np.abs(np.random.default_rng(5).standard_normal(10)) - 0.1,
                   requires_grad=True)
        out = relu(x)
        npt.assert_array_equal(out.data, np.zeros(10))
        out.sum().backward()
        npt.assert_array_equal(x.grad, np.zeros(10))

    def test_gradient_near_zero_is_zero_at_zero(self):
        x = Tensor(np.array([0.0, -0.5, 0.5]), requires_grad=True)
        relu(x).sum().backward()
        npt.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_finite_difference_away_from_zero(self):
        rng = np.random.default_rng(6)
        x64 = rng.standard_normal(32)
        x64[np.abs(x64) < 0.05] = 0.5  # keep away from the kink
        x = Tensor(x64.copy(), requires_grad=True, dtype=np.float64)
        loss = (relu(x) * relu(x)).sum()
        loss.backward()

        def f():
            return float((np.maximum(x64, 0.0) ** 2).sum())

        (fd,) = oracles.finite_difference(f, [x64])
        npt.assert_allclose(x.grad, fd, rtol=1e-5)


class TestBackward:
    def test_sum_of_squares_gradient_exact(self):
        rng = np.random.default_rng(8)
        w = Tensor(rng.standard_normal((4, 5)).astype(np.float32), requires_grad=True)
        (w * w).sum().backward()
        npt.assert_array_equal(w.grad, 2.0 * w.data)

    def test_disconnected_parameter_stays_zero(self):
        w = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        (w * w).sum().backward()
        assert unused.grad is None  # exact zero by convention

    def test_backward_requires_scalar(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractViolation):
            (w * w).backward()

    def test_grad_accumulates_through_shared_node(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        (y + y).sum().backward()
        npt.assert_allclose(x.grad, [6.0])

    def test_conv_chain_finite_difference(self):
        rng = np.random.default_rng(9)
        x64 = rng.standard_normal((1, 2, 8, 8))
        w1 = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b1 = rng.standard_normal(3) * 0.1
        w2 = rng.standard_normal((2, 3, 3, 3)) * 0.5
        b2 = rng.standard_normal(2) * 0.1
        s1 = ConvSpec(2, 3, 3, padding=1)
        s2 = ConvSpec(3, 2, 3, padding=1)

        def run(with_graph):
            xt = Tensor(x64, dtype=np.float64)
            wt1 = Tensor(w1, requires_grad=with_graph, dtype=np.float64)
            bt1 = Tensor(b1, requires_grad=with_graph, dtype=np.float64)
            wt2 = Tensor(w2, requires_grad=with_graph, dtype=np.float64)
            bt2 = Tensor(b2, requires_grad=with_graph, dtype=np.float64)
            h = relu(conv2d(xt, wt1, bt1, s1))
            h = maxpool2d(h, 2)
            out = conv2d(h, wt2, bt2, s2)
            loss = (out * out).sum()
            return loss, [wt1, bt1, wt2, bt2]

        loss, params = run(True)
        loss.backward()

        def f():
            return run(False)[0].item()

        fds = oracles.finite_difference(f, [w1, b1, w2, b2], rel_step=1e-6, abs_step=1e-7)
        for p, fd in zip(params, fds):
            npt.assert_allclose(p.grad, fd, rtol=1e-5, atol=1e-7)

    def test_forward_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
            w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
            out = relu(conv2d(x, w, b, ConvSpec(3, 4, 3, padding=1)))
            loss = (out * out).sum()
            loss.backward()
            return out.data.copy(), w.grad.copy()

        o1, g1 = run()
        o2, g2 = run()
        npt.assert_array_equal(o1, o2)
        npt.assert_array_equal(g1, g2)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.zeros(3)
        opt = Adam([("p", p)])
        opt.step()
        npt.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_first_step_moves_by_lr(self):
        # m_hat = g, v_hat = g^2 on the first step, so the move is ~lr*sign(g)
        p = Tensor(np.array([5.0]), requires_grad=True)
        p.grad = np.array([1.0])
        Adam([("p", p)], AdamConfig(lr=1e-3)).step()
        npt.assert_allclose(p.data, [5.0 - 1e-3], rtol=1e-6)

    def test_two_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(12)
            p = Tensor(rng.standard_normal(16).astype(np.float32), requires_grad=True)
            opt = Adam([("p", p)], AdamConfig(lr=3e-3))
            for _ in range(25):
                p.grad = (p.data * 0.5 + 0.1).astype(np.float32)
                opt.step()
            return p.data.copy()

        npt.assert_array_equal(run(), run())

    def test_non_finite_gradient_aborts_without_mutation(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        q = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.array([0.1, 0.2])
        q.grad = np.array([np.nan])
        opt = Adam([("p", p), ("q", q)])
        with pytest.raises(NonFiniteGradientError) as e:
            opt.step()
        assert "q" in str(e.value)
        npt.assert_array_equal(p.data, [1.0, 2.0])
        npt.assert_array_equal(q.data, [3.0])

    def test_weight_decay_moves_params_with_zero_grad(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        p.grad = np.array([0.0])
        Adam([("p", p)], AdamConfig(lr=1e-2, weight_decay=1e-2)).step()
        assert p.data[0] != 10.0


class TestInit:
    def test_he_uniform_seeded(self):
        a = he_uniform((4, 4), fan_in=16, rng=np.random.default_rng(1))
        b = he_uniform((4, 4), fan_in=16, rng=np.random.default_rng(1))
        npt.assert_array_equal(a, b)
        bound = np.sqrt(6.0 / 16)
        assert np.all(np.abs(a) <= bound)
