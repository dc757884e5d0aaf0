import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttas import tensor as T
from ttas.tensor import ComputationGraph, EmptyReductionError, ShapeError, Tensor


def fd_gradient(fn, arr, step=1e-5):
    """Central-difference gradient of scalar fn at arr (independent of autodiff)."""
    arr = np.array(arr, dtype=np.float64)
    out = np.empty_like(arr)
    for idx in np.ndindex(arr.shape):
        up, down = arr.copy(), arr.copy()
        up[idx] += step
        down[idx] -= step
        out[idx] = (fn(up) - fn(down)) / (2 * step)
    return out


def conv_oracle(x, k, b, padding):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    kk, _, kh, kw = k.shape
    if padding == "same":
        x = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    oh, ow = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    out = np.zeros((n, kk, oh, ow))
    for i in range(n):
        for o in range(kk):
            for r in range(oh):
                for s in range(ow):
                    out[i, o, r, s] = np.sum(x[i, :, r:r + kh, s:s + kw] * k[o]) + b[o]
    return out


class TestConv:
    def test_ones_valid(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1), padding="valid")
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out.data == 4.0)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 5, 4))
        out = T.conv2d(x, np.zeros((2, 3, 3, 3)), np.zeros(2))
        assert out.shape == (2, 2, 5, 4)
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_matches_loop_oracle(self, padding):
        rng = np.random.default_rng(2)
        x, k, b = rng.normal(size=(2, 2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out = T.conv2d(x, k, b, padding=padding)
        np.testing.assert_allclose(out.data, conv_oracle(x, k, b, padding), rtol=1e-12, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x0, k0, b0 = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        params = {"x": Tensor(x0, True), "k": Tensor(k0, True), "b": Tensor(b0, True)}
        report = T.grad_check(lambda p: T.sum_(T.conv2d(p["x"], p["k"], p["b"])), params)
        assert report.passed, report.per_param
        assert report.max_rel_error < 1e-4

    def test_input_gradient_against_independent_fd(self):
        rng = np.random.default_rng(4)
        k, b = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
        x = Tensor(rng.normal(size=(1, 1, 4, 4)), True)
        weights = rng.normal(size=(1, 2, 4, 4))
        T.backward(T.sum_(T.conv2d(x, k, b) * weights))
        fd = fd_gradient(lambda a: float(np.sum(conv_oracle(a, k, b, "same") * weights)), x.data)
        np.testing.assert_allclose(x.grad, fd, rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("xs,ks,bs", [
        ((1, 2, 4, 4), (1, 3, 3, 3), (1,)),
        ((1, 1, 4, 4), (1, 1, 3, 3), (2,)),
        ((1, 1, 2, 2), (1, 1, 3, 3), (1,)),
        ((1, 4, 4), (1, 1, 3, 3), (1,)),
    ])
    def test_shape_errors(self, xs, ks, bs):
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros(xs), np.zeros(ks), np.zeros(bs))

    def test_same_padding_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1), padding="same")


class TestActivation:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_relu_values(self):
        out = T.relu(Tensor([-1.0, 2.5]))
        assert out.data.tolist() == [0.0, 2.5]

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(0.0, True)
        T.backward(T.sigmoid(x))
        assert x.grad == pytest.approx(0.25, abs=1e-15)
        fd = fd_gradient(lambda a: 1.0 / (1.0 + np.exp(-a[0])), [0.0])
        assert x.grad == pytest.approx(fd[0], rel=1e-9)

    def test_sigmoid_clamped_in_open_interval(self):
        out = T.sigmoid(Tensor([-1e3, -40.0, 0.0, 40.0, 1e3]))
        assert np.all(out.data > 0) and np.all(out.data < 1)
        assert out.data[0] == T.EPS and out.data[-1] == 1 - T.EPS

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(Tensor(1.0), "tanh")


class TestReduce:
    def test_sum(self):
        assert T.sum_(Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_masked_mean(self):
        out = T.mean(Tensor([1.0, 2.0, 3.0, 4.0]), mask=[True, False, False, True])
        assert out.item() == 2.5

    def test_sum_gradient_is_one(self):
        x = Tensor(np.arange(5.0), True)
        T.backward(T.sum_(x))
        assert np.all(x.grad == 1.0)

    def test_masked_gradient(self):
        x = Tensor(np.arange(4.0), True)
        T.backward(T.mean(x, mask=[True, False, True, False]))
        assert x.grad.tolist() == [0.5, 0.0, 0.5, 0.0]

    def test_empty_mean_raises(self):
        with pytest.raises(EmptyReductionError):
            T.mean(Tensor([1.0, 2.0]), mask=[False, False])

    def test_mask_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.sum_(Tensor([1.0, 2.0]), mask=[True])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)),
           st.data())
    def test_masked_reduction_equals_filtered(self, values, data):
        mask = np.array(data.draw(st.lists(st.booleans(), min_size=values.size, max_size=values.size)))
        s = T.sum_(Tensor(values), mask=mask).item()
        assert s == float(np.sum(values[mask]))
        if mask.any():
            m = T.mean(Tensor(values), mask=mask).item()
            assert m == float(np.sum(values[mask]) / mask.sum())


class TestBackward:
    def test_square(self):
        w = Tensor(3.0, True)
        T.backward(w ** 2)
        assert w.grad == 6.0

    def test_accumulation_from_reuse(self):
        w = Tensor(1.0, True)
        T.backward(w + w)
        assert w.grad == 2.0

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(Tensor([1.0, 2.0], True) * 2.0)

    def test_graph_order(self):
        a = Tensor(2.0, True)
        b = a * 3.0
        c = T.log(b) + a
        graph = ComputationGraph.from_root(c)
        ids = [n.node_id for n in graph.nodes]
        assert ids == sorted(ids)
        for node in graph.nodes:
            for parent in node._parents:
                assert parent.node_id < node.node_id

    def test_three_layer_network(self):
        rng = np.random.default_rng(5)
        params = {
            "k1": Tensor(rng.normal(size=(3, 1, 3, 3)), True), "b1": Tensor(rng.normal(size=3), True),
            "k2": Tensor(rng.normal(size=(2, 3, 3, 3)), True), "b2": Tensor(rng.normal(size=2), True),
            "k3": Tensor(rng.normal(size=(1, 2, 3, 3)), True), "b3": Tensor(rng.normal(size=1), True),
        }
        x = rng.normal(size=(2, 1, 5, 5))

        def net(p):
            h = T.relu(T.conv2d(x, p["k1"], p["b1"]))
            h = T.relu(T.conv2d(h, p["k2"], p["b2"]))
            return T.mean(T.sigmoid(T.conv2d(h, p["k3"], p["b3"])))

        assert T.grad_check(net, params).max_rel_error < 1e-4

    def test_elementwise_ops_against_fd(self):
        rng = np.random.default_rng(6)
        a0, b0 = rng.uniform(0.5, 2.0, size=(2, 3)), rng.uniform(0.5, 2.0, size=(3,))
        params = {"a": Tensor(a0, True), "b": Tensor(b0, True)}

        def f(p):
            a, b = p["a"], p["b"]
            return T.sum_(T.log(a * b + 1.0) / (a - b * 0.1) - (a ** 3) * 0.2 + T.clamp(a, 0.7, 1.5))

        assert T.grad_check(f, params).passed

    def test_no_grad(self):
        w = Tensor(2.0, True)
        with T.no_grad():
            y = w * w
        assert not y.requires_grad and y._parents == ()
        assert (w * w).requires_grad


class TestGradCheck:
    def test_quadratic_is_tight(self):
        params = {"w": Tensor(np.array([0.3, -1.2, 2.0]), True)}
        report = T.grad_check(lambda p: T.sum_(p["w"] ** 2 * 1.5), params)
        assert report.max_rel_error < 1e-6

    def test_constant_parameter_reports_zero(self):
        params = {"w": Tensor(1.0, True), "unused": Tensor(2.0, True)}
        report = T.grad_check(lambda p: p["w"] * 4.0, params)
        assert report.per_param["unused"] == 0.0

    def test_flags_wrong_gradient(self):
        def bad_op(p):
            x = p["x"]
            # forward doubles, backward claims a factor of 3
            return T.sum_(T._make(x.data * 2.0, (x,), "bad", lambda g: (g * 3.0,)))

        report = T.grad_check(bad_op, {"x": Tensor([1.0, 2.0], True)})
        assert report.failed == ["x"] and not report.passed

    def test_relative_error_convention(self):
        assert T.relative_error(0.0, 0.0) == 0.0
        assert T.relative_error(1e-9, 0.0) == pytest.approx(0.1)
        assert T.relative_error(2.0, 1.0) == pytest.approx(0.5)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda p: p["w"], {"w": Tensor(1.0, True)}, step=0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-50, 50)))
def test_finite_inputs_give_finite_outputs_and_grads(values):
    x = Tensor(values, True)
    y = T.mean(T.log(T.sigmoid(x)) + T.relu(x) * T.sigmoid(x))
    T.backward(y)
    assert np.isfinite(y.item())
    assert np.all(np.isfinite(x.grad))


def test_determinism():
    rng = np.random.default_rng(7)
    x, k, b = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    grads = []
    for _ in range(2):
        kt = Tensor(k, True)
        out = T.sum_(T.sigmoid(T.conv2d(x, kt, b)))
        T.backward(out)
        grads.append((out.data.copy(), kt.grad.copy()))
    assert np.array_equal(grads[0][0], grads[1][0])
    assert np.array_equal(grads[0][1], grads[1][1])
