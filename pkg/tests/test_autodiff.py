import math

import numpy as np
import pytest

from easing import autodiff as ad
from easing.autodiff import (
    AdamState,
    CheckpointError,
    GradResult,
    NumericsError,
    ParamStore,
    Tensor,
    adam_init,
    adam_step,
    backward,
    concat_cols,
    dropout,
    elu,
    frobenius,
    gather_rows,
    grad,
    layer_norm,
    load_params,
    matmul,
    mean_all,
    no_grad,
    outer,
    relu,
    save_params,
    segment_sum,
    softmax_rows,
    sum_all,
    sum_axis,
    transpose,
)

from fd_oracle import max_rel_error, numeric_grad


class TestForwardSemantics:
    def test_matmul_identity(self):
        a = np.arange(4.0).reshape(2, 2)
        out = matmul(np.eye(2), a)
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_hand_case(self):
        out = matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        want = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(a, b).data, want, atol=1e-12)

    def test_matmul_shape_error(self):
        with pytest.raises(NumericsError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_softmax_symmetry(self):
        out = softmax_rows([[1.0, 1.0, 1.0]])
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_softmax_analytic(self):
        out = softmax_rows([[0.0, math.log(2.0)]])
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_softmax_large_values_match_shifted_reference(self):
        row = np.array([[1000.0, 1000.1]])
        out = softmax_rows(row)
        shifted = np.exp(row - 1000.1)
        shifted /= shifted.sum()
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, shifted, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = softmax_rows(rng.normal(size=(7, 9)) * 10)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data > 0).all() and (out.data <= 1.0).all()

    def test_layer_norm_constant_row(self):
        out = layer_norm(np.full((1, 4), 3.25), np.ones(4), np.zeros(4))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_layer_norm_unit_variance_row(self):
        out = layer_norm([[1.0, -1.0]], np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_layer_norm_zero_mean(self):
        rng = np.random.default_rng(4)
        out = layer_norm(rng.normal(size=(4, 8)), np.ones(8), np.zeros(8))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-10

    def test_layer_norm_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 8))
        c = rng.normal(size=(4, 1))
        a = layer_norm(x, np.ones(8), np.zeros(8)).data
        b = layer_norm(x + c, np.ones(8), np.zeros(8)).data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_relu_and_elu_values(self):
        assert relu(np.array(-3.0)).data == 0.0
        assert relu(np.array(3.0)).data == 3.0
        assert elu(np.array(0.0)).data == 0.0
        np.testing.assert_allclose(elu(np.array(-1.0)).data,
                                   math.exp(-1.0) - 1.0, atol=1e-15)

    def test_elu_is_c1_at_zero(self):
        h = 1e-7
        left = (elu(np.array(0.0)).data - elu(np.array(-h)).data) / h
        right = (elu(np.array(h)).data - elu(np.array(0.0)).data) / h
        assert abs(left - right) < 1e-6

    def test_concat_outer_frobenius(self):
        a = np.ones((2, 2))
        out = concat_cols(a, 2 * a)
        assert out.data.shape == (2, 4)
        np.testing.assert_array_equal(outer([1.0, 2.0], [3.0, 4.0]).data,
                                      [[3.0, 4.0], [6.0, 8.0]])
        assert frobenius(a, np.zeros((2, 2))).data == 0.0
        rng = np.random.default_rng(6)
        m = rng.normal(size=(3, 3))
        want = sum(m[i, j] ** 2 for i in range(3) for j in range(3))
        np.testing.assert_allclose(frobenius(m, m).data, want, atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericsError):
            Tensor([np.inf])
        with pytest.raises(NumericsError):
            ad.log(np.array([0.0]))


class TestDropout:
    def test_ratio_zero_identity_every_mode(self):
        x = np.arange(6.0).reshape(2, 3)
        for mode in ("train", "mc-infer", "off"):
            out = dropout(x, 0.0, np.random.default_rng(0), mode)
            np.testing.assert_array_equal(out.data, x)

    def test_off_mode_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out = dropout(x, 0.3, None, "off")
        np.testing.assert_array_equal(out.data, x)

    def test_inverted_scaling_preserves_mean(self):
        x = np.ones(100_000)
        out = dropout(x, 0.5, np.random.default_rng(7), "train")
        assert abs(out.data.mean() - 1.0) < 0.01

    def test_fixed_rng_is_deterministic(self):
        x = np.ones((13, 17))
        a = dropout(x, 0.4, np.random.default_rng(11), "train").data
        b = dropout(x, 0.4, np.random.default_rng(11), "mc-infer").data
        np.testing.assert_array_equal(a, b)

    def test_mode_validation(self):
        with pytest.raises(NumericsError):
            dropout(np.ones(3), 0.5, np.random.default_rng(0), "test")
        with pytest.raises(NumericsError):
            dropout(np.ones(3), 1.0, np.random.default_rng(0), "train")


class TestGrad:
    def test_frobenius_self_gradient(self):
        store = ParamStore()
        w = store.add("w", np.random.default_rng(8).normal(size=(2, 2)))
        res = grad(frobenius(w, w), store)
        np.testing.assert_allclose(res.grads["w"], 2 * w.data, atol=1e-12)

    def test_softmax_sum_gradient_is_zero(self):
        store = ParamStore()
        w = store.add("w", np.random.default_rng(9).normal(size=(1, 5)))
        res = grad(sum_all(softmax_rows(w)), store)
        np.testing.assert_allclose(res.grads["w"], 0.0, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        store = ParamStore()
        w = store.add("w", np.ones((2, 2)))
        with pytest.raises(NumericsError):
            grad(mul_identity(w), store)

    def test_unreachable_param_gets_zeros(self):
        store = ParamStore()
        a = store.add("a", np.ones(3))
        store.add("b", np.ones(4))
        res = grad(sum_all(a), store)
        np.testing.assert_array_equal(res.grads["b"], np.zeros(4))

    def test_grad_reused_params_not_stale(self):
        store = ParamStore()
        a = store.add("a", np.array([2.0]))
        grad(sum_all(ad.square(a)), store)
        res = grad(sum_all(a), store)
        np.testing.assert_allclose(res.grads["a"], [1.0])


def mul_identity(t):
    return ad.mul(t, 1.0)


def _random_op_case(seed: int):
    """One randomized composite expression exercising every op's backward."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    a = store.add("a", rng.normal(size=(3, 4)))
    b = store.add("b", rng.normal(size=(4, 3)))
    c = store.add("c", rng.normal(size=(3, 3)))
    gain = store.add("gain", rng.normal(size=(3,)) * 0.5 + 1.0)
    bias = store.add("bias", rng.normal(size=(3,)) * 0.1)
    u = store.add("u", rng.normal(size=(3,)))
    v = store.add("v", rng.normal(size=(5,)))
    batch = store.add("batch", rng.normal(size=(2, 3, 4)))
    # keep relu inputs away from the kink so finite differences are valid
    shift = store.add("shift", rng.normal(size=(3, 3)) + np.where(
        rng.random((3, 3)) > 0.5, 2.0, -2.0))
    seg_ids = np.array([0, 0, 1, 2, 2])
    idx = np.array([1, 0, 2, 1])

    def forward():
        m = matmul(a, b)
        ln = layer_norm(m, gain, bias)
        soft = softmax_rows(ad.add(ln, c))
        act = ad.add(relu(shift), elu(ad.mul(c, 0.7)))
        cat = concat_cols(soft, act)
        op = outer(u, v)
        gathered = gather_rows(op, idx)
        seg = segment_sum(gathered, seg_ids[: gathered.data.shape[0]], 3)
        bm = matmul(batch, b)
        hd = ad.rowwise_head_dot(cat, ad.add(cat, 0.5), 2)
        sl = ad.slice_cols(cat, 1, 4)
        pieces = [
            frobenius(cat, cat),
            sum_all(ad.log(ad.add(ad.square(seg), 0.5))),
            sum_all(ad.exp(ad.mul(ad.div(m, 4.0), 0.3))),
            mean_all(bm),
            sum_all(sum_axis(transpose(bm), -1)),
            sum_all(gather_rows(ad.reshape(op, (15,)), np.array([0, 7, 14]))),
            mean_all(hd),
            sum_all(ad.square(sl)),
        ]
        total = pieces[0]
        for p in pieces[1:]:
            total = ad.add(total, p)
        return total

    return store, forward


@pytest.mark.parametrize("seed", range(50))
def test_every_op_gradient_matches_finite_differences(seed):
    store, forward = _random_op_case(seed)
    res = grad(forward(), store)
    num = numeric_grad(forward, store)
    err, name = max_rel_error(res.grads, num)
    assert err <= 1e-4, f"worst mismatch {err:.3e} at {name}"


def test_dropout_gradient_with_fixed_mask():
    store = ParamStore()
    x = store.add("x", np.random.default_rng(21).normal(size=(4, 6)))

    def forward():
        out = dropout(x, 0.4, np.random.default_rng(99), "train")
        return sum_all(ad.square(out))

    res = grad(forward(), store)
    num = numeric_grad(forward, store)
    err, name = max_rel_error(res.grads, num)
    assert err <= 1e-4, f"worst mismatch {err:.3e} at {name}"


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        store = ParamStore()
        store.add("w", np.arange(4.0))
        state = adam_init(store)
        adam_step(store, {"w": np.zeros(4)}, state, lr=0.1)
        np.testing.assert_array_equal(store["w"].data, np.arange(4.0))

    def test_first_step_matches_scalar_oracle(self):
        # hand Adam: m=(1-b1)g, v=(1-b2)g^2, mhat=g, vhat=g^2,
        # update = -lr * g / (|g| + eps)
        g = 0.37
        lr = 0.05
        store = ParamStore()
        store.add("w", np.array([1.0]))
        state = adam_init(store)
        adam_step(store, {"w": np.array([g])}, state, lr=lr)
        want = 1.0 - lr * g / (abs(g) + 1e-8)
        np.testing.assert_allclose(store["w"].data, [want], atol=1e-12)

    def test_two_runs_identical(self):
        def run():
            store = ParamStore()
            store.add("w", np.ones(3))
            state = adam_init(store)
            for i in range(5):
                adam_step(store, {"w": np.full(3, 0.1 * (i + 1))}, state,
                          lr=0.01)
            return store["w"].data

        np.testing.assert_array_equal(run(), run())

    def test_shape_mismatch_rejected(self):
        store = ParamStore()
        store.add("w", np.ones(3))
        state = adam_init(store)
        with pytest.raises(NumericsError):
            adam_step(store, {"w": np.ones(4)}, state, lr=0.01)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", np.ones(1))
        with pytest.raises(NumericsError):
            store.add("w", np.ones(1))

    def test_iteration_order_is_insertion_order(self):
        store = ParamStore()
        for name in ("z", "a", "m"):
            store.add(name, np.ones(1))
        assert store.names() == ["z", "a", "m"]


class TestCheckpoint:
    def test_round_trip_byte_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        store = ParamStore()
        store.add("enc.w", rng.normal(size=(3, 5)))
        store.add("dec.v", rng.normal(size=(7,)))
        store.add("scalar", np.asarray(rng.normal()))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_params(store, p1)
        reloaded = load_params(p1)
        assert reloaded.names() == store.names()
        for name, t in store.items():
            np.testing.assert_array_equal(reloaded[name].data, t.data)
        save_params(reloaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_truncated_rejected(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones((4, 4)))
        path = tmp_path / "t.ckpt"
        save_params(store, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(CheckpointError):
            load_params(path)


def test_no_grad_blocks_tape():
    store = ParamStore()
    w = store.add("w", np.ones(2))
    with no_grad():
        out = sum_all(ad.square(w))
    assert out._parents == ()
    res = grad(sum_all(ad.square(w)), store)
    np.testing.assert_allclose(res.grads["w"], 2 * np.ones(2))
