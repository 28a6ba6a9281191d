"""Tensor engine: forward values, gradient checks, Adam, checkpoints."""

import numpy as np
import pytest

from conftest import assert_grad_close, finite_difference

import visattr.autodiff as ad
from visattr.autodiff import Tensor
from visattr.checkpoint import load_tensors, save_tensors
from visattr.errors import ContractError, DegeneracyWarning, DimensionError
from visattr.optim import Adam


def grad_of(fn, arrays, wrt=None):
    """Analytic gradients of scalar fn over Tensors built from `arrays`."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    loss.backward()
    targets = tensors if wrt is None else [tensors[i] for i in wrt]
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in targets]


def check_gradients(fn, arrays, tol=1e-4):
    analytic = grad_of(fn, arrays)
    numeric = finite_difference(lambda *a: fn(*[Tensor(x) for x in a]).item(), list(arrays))
    for a, n in zip(analytic, numeric):
        assert_grad_close(a, n, tol)


# -- conv2d ---------------------------------------------------------------------


class TestConv2d:
    def test_zero_input_gives_zero_output(self, rng):
        x = Tensor(np.zeros((1, 3, 3)))
        w = Tensor(rng.standard_normal((2, 1, 2, 2)))
        out = ad.conv2d(x, w)
        assert np.all(out.data == 0.0)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, w, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_sliding_window_sums(self):
        x = Tensor(np.arange(1.0, 10.0).reshape(1, 3, 3))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = ad.conv2d(x, w)
        np.testing.assert_allclose(out.data, [[[12.0, 16.0], [24.0, 28.0]]])

    def test_matches_scalar_loop_oracle(self, rng):
        def conv_oracle(x, w, stride, padding):
            c_out, c_in, k, _ = w.shape
            xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
            h_out = (x.shape[1] + 2 * padding - k) // stride + 1
            w_out = (x.shape[2] + 2 * padding - k) // stride + 1
            out = np.zeros((c_out, h_out, w_out))
            for o in range(c_out):
                for i in range(h_out):
                    for j in range(w_out):
                        patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                        out[o, i, j] = np.sum(patch * w[o])
            return out

        for stride, padding in [(1, 0), (1, 1), (2, 0), (2, 1)]:
            x = rng.standard_normal((3, 7, 6))
            w = rng.standard_normal((4, 3, 3, 3))
            got = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
            np.testing.assert_allclose(got, conv_oracle(x, w, stride, padding), atol=1e-12)

    def test_output_shape_formula(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 11, 9)))
        w = Tensor(rng.standard_normal((5, 3, 3, 3)))
        out = ad.conv2d(x, w, stride=2, padding=1)
        assert out.shape == (2, 5, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(rng.standard_normal((2, 4, 4))),
                      Tensor(rng.standard_normal((1, 3, 2, 2))))

    def test_linearity_without_bias(self, rng):
        x = rng.standard_normal((3, 6, 6))
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        lhs = ad.conv2d(Tensor(2.5 * x), w).data
        rhs = 2.5 * ad.conv2d(Tensor(x), w).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    def test_gradients(self, rng):
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        check_gradients(lambda a, b: ad.sum_(ad.conv2d(a, b, stride=2, padding=1) ** 2.0),
                        [x, w])


# -- fully connected ----------------------------------------------------------------


class TestFullyConnected:
    def test_identity_weight(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]))
        out = ad.fully_connected(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_gives_bias(self):
        b = np.array([0.5, -1.5])
        out = ad.fully_connected(Tensor(np.ones(3)), Tensor(np.zeros((2, 3))), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_matrix_vector_oracle(self):
        out = ad.fully_connected(Tensor(np.array([1.0, 1.0])),
                                 Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])),
                                 Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [3.0, 7.0])

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            ad.fully_connected(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.ones(2)))
        with pytest.raises(DimensionError):
            ad.fully_connected(Tensor(np.ones(4)), Tensor(np.ones((2, 4))), Tensor(np.ones(3)))

    def test_batched_matches_rowwise(self, rng):
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        batched = ad.fully_connected(Tensor(x), Tensor(w), Tensor(b)).data
        for row in range(5):
            single = ad.fully_connected(Tensor(x[row]), Tensor(w), Tensor(b)).data
            np.testing.assert_allclose(batched[row], single, rtol=1e-12)

    def test_gradients(self, rng):
        x, w, b = rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
        check_gradients(lambda a, ww, bb: ad.sum_(ad.relu(ad.fully_connected(a, ww, bb))),
                        [x + 0.3, w, b])


# -- activations and normalizations ----------------------------------------------------


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data,
                                   [1 / 3, 1 / 3, 1 / 3])

    def test_softmax_rows_positive_sum_one(self, rng):
        z = rng.standard_normal((20, 7)) * 30
        out = ad.softmax(Tensor(z)).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)

    def test_l2_normalize_345(self):
        np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])

    def test_l2_normalize_zero_vector_flags(self):
        with pytest.warns(DegeneracyWarning):
            out = ad.l2_normalize(Tensor(np.zeros(4)))
        assert np.all(np.isfinite(out.data))

    def test_log_softmax_matches_log_of_softmax(self, rng):
        z = rng.standard_normal((4, 6)) * 5
        np.testing.assert_allclose(ad.log_softmax(Tensor(z)).data,
                                   np.log(ad.softmax(Tensor(z)).data), atol=1e-12)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ContractError):
            ad.log(Tensor([1.0, 0.0]))


# -- pooling --------------------------------------------------------------------------


class TestPooling:
    def test_max_pool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = ad.max_pool2d(Tensor(x))
        np.testing.assert_array_equal(out.data, [[[[5.0, 7.0], [13.0, 15.0]]]])

    def test_max_pool_odd_size_raises(self):
        with pytest.raises(DimensionError):
            ad.max_pool2d(Tensor(np.zeros((1, 1, 3, 4))))

    def test_mean_pool(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out = ad.mean_pool(Tensor(x))
        np.testing.assert_allclose(out.data, x.mean(axis=(2, 3)), rtol=1e-12)


# -- backward contract -------------------------------------------------------------------


class TestBackward:
    def test_identity_gradient(self):
        x = Tensor(np.asarray(4.0), requires_grad=True)
        y = x * 1.0
        y.backward()
        assert x.grad == 1.0

    def test_square_at_three(self):
        x = Tensor(np.asarray(3.0), requires_grad=True)
        (x ** 2.0).backward()
        assert abs(float(x.grad) - 6.0) < 1e-12

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_backward_twice_rejected(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        y = x ** 2.0
        y.backward()
        with pytest.raises(ContractError):
            y.backward()

    def test_composite_matches_finite_differences(self, rng):
        def fn(a, b):
            h = ad.relu(ad.matmul(a, b))
            return ad.sum_(ad.softmax(h) * h)

        for _ in range(5):
            check_gradients(fn, [rng.standard_normal((3, 4)) + 0.2,
                                 rng.standard_normal((4, 5)) + 0.1])

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        ((x * 3.0) + (x * 4.0)).backward()
        assert float(x.grad) == 7.0

    def test_deterministic_replay(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            loss = ad.sum_(ad.softmax(ad.matmul(x, w)) ** 2.0)
            loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


# -- elementwise / selection gradients --------------------------------------------------


OPS = {
    "add_broadcast": (lambda a, b: ad.sum_((a + b) ** 2.0), ((3, 4), (4,))),
    "mul_broadcast": (lambda a, b: ad.sum_((a * b) ** 2.0), ((2, 3), (3,))),
    "matmul": (lambda a, b: ad.sum_(ad.matmul(a, b) ** 2.0), ((3, 4), (4, 2))),
    "matmul_batched": (lambda a, b: ad.sum_(ad.matmul(a, b) ** 2.0), ((2, 3, 4), (2, 4, 2))),
    "exp": (lambda a: ad.sum_(ad.exp(a)), ((3, 3),)),
    "softmax": (lambda a: ad.sum_(ad.softmax(a) ** 2.0), ((3, 5),)),
    "log_softmax": (lambda a: ad.sum_(ad.log_softmax(a) * 0.5), ((3, 5),)),
    "mean_axis": (lambda a: ad.sum_(ad.mean(a, axis=1) ** 2.0), ((3, 4),)),
    "transpose": (lambda a: ad.sum_(ad.transpose2d(a) ** 3.0), ((3, 4),)),
    "reshape": (lambda a: ad.sum_(ad.reshape(a, (6,)) ** 2.0), ((2, 3),)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    fn, shapes = OPS[name]
    for _ in range(3):
        check_gradients(fn, [rng.standard_normal(s) for s in shapes])


def test_pick_gradients(rng):
    x = rng.standard_normal(6)
    check_gradients(lambda a: ad.pick(a, 2) ** 2.0, [x])
    m = rng.standard_normal((3, 5))
    check_gradients(lambda a: ad.sum_(ad.pick_rows(a, np.array([1, 0, 4])) ** 2.0), [m])


def test_l2_normalize_gradients(rng):
    x = rng.standard_normal((3, 4)) + 0.5
    check_gradients(lambda a: ad.sum_(ad.l2_normalize(a) * np.arange(4.0)), [x])


def test_relu_gradients_away_from_kink(rng):
    x = rng.standard_normal((4, 4))
    x[np.abs(x) < 0.05] = 0.2
    check_gradients(lambda a: ad.sum_(ad.relu(a) ** 2.0), [x])


def test_max_pool_gradients(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    check_gradients(lambda a: ad.sum_(ad.max_pool2d(a) ** 2.0), [x])


# -- Adam -----------------------------------------------------------------------------


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_single_step_unit_gradient(self):
        p = Tensor(np.asarray(1.0), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.asarray(1.0)
        opt.step()
        # bias-corrected m_hat = 1, v_hat = 1 -> step of lr / (1 + eps)
        assert abs(float(p.data) - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12

    def test_matches_scalar_recurrence_oracle(self, rng):
        grads = rng.standard_normal(25)
        p = Tensor(np.asarray(0.7), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)

        theta, m, v = 0.7, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            p.grad = np.asarray(g)
            opt.step()
        assert abs(float(p.data) - theta) < 1e-12

    def test_identical_params_stay_identical(self, rng):
        a = Tensor(np.full(3, 0.5), requires_grad=True)
        b = Tensor(np.full(3, 0.5), requires_grad=True)
        opt = Adam({"a": a, "b": b}, lr=0.05)
        for _ in range(10):
            g = rng.standard_normal(3)
            a.grad, b.grad = g.copy(), g.copy()
            opt.step()
        np.testing.assert_array_equal(a.data, b.data)

    def test_shape_mismatch_raises(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.ones(4)
        with pytest.raises(DimensionError):
            opt.step()

    def test_state_roundtrip(self, rng):
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        opt = Adam({"p": p}, lr=0.02)
        for _ in range(3):
            p.grad = rng.standard_normal(4)
            opt.step()
        arrays = opt.state_arrays()
        fresh = Adam({"p": p}, lr=0.02)
        fresh.load_state_arrays(arrays)
        assert fresh.step_count == opt.step_count
        np.testing.assert_array_equal(fresh.state["p"]["m"], opt.state["p"]["m"])


# -- checkpoint format ---------------------------------------------------------------------


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        tensors = {
            "trunk/conv0/w": rng.standard_normal((4, 3, 3, 3)),
            "meta/epochs": np.asarray([5.0]),
            "unicode/nameé": rng.standard_normal(7),
        }
        path = tmp_path / "model.ckpt"
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert np.array_equal(loaded[name], tensors[name])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_tensors(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_tensors(path, {"a": np.ones(2)})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(ValueError, match="trailing"):
            load_tensors(path)
