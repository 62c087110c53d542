import math

import numpy as np
import pytest

from gradcheck import assert_grad_close, numeric_grad
from scenejoint.tensor_ad import (
    AttentionParams,
    DenseLayer,
    Param,
    ParamStore,
    Tape,
    adam_step,
    load_into,
    mlp_forward,
    multihead_attention,
    ops,
    save_checkpoint,
)
from scenejoint.tensor_ad import layer_norm as ad_layer_norm

F64 = np.float64


def _check(build, arrays, rtol=1e-4):
    """Compare tape gradients of ``build(tape, leaves)`` against finite differences for each array."""
    tape = Tape(F64)
    leaves = [tape.leaf(a) for a in arrays]
    loss = build(tape, leaves)
    tape.backward(loss)
    for arr, leaf in zip(arrays, leaves):

        def f():
            t = Tape(F64)
            return float(build(t, [t.leaf(a) for a in arrays]).value)

        assert_grad_close(tape.grad(leaf), numeric_grad(f, arr), rtol)


def _weighted_sum(x, seed=99):
    w = np.random.default_rng(seed).normal(size=x.shape)
    return ops.sum(ops.mul(x, w))


class TestMLP:
    def test_identity_weights(self):
        store = ParamStore(dtype=F64)
        w = store.add("w", np.eye(3))
        b = store.add("b", np.zeros(3))
        tape = Tape(F64)
        x = np.array([[1.0, -2.0, 3.0]])
        y = mlp_forward(tape, tape.constant(x), [DenseLayer(w, b, "none")])
        np.testing.assert_array_equal(y.value, x)

    def test_relu_single_layer(self):
        store = ParamStore(dtype=F64)
        layer = DenseLayer(store.add("w", np.eye(2)), store.add("b", np.zeros(2)), "relu")
        tape = Tape(F64)
        y = mlp_forward(tape, tape.constant([[-1.0, 2.0]]), [layer])
        np.testing.assert_array_equal(y.value, [[0.0, 2.0]])

    def test_shape_mismatch(self):
        store = ParamStore(dtype=F64)
        layers = store.mlp("m", [3, 4])
        tape = Tape(F64)
        with pytest.raises(ValueError):
            mlp_forward(tape, tape.constant(np.zeros((2, 5))), layers)

    def test_two_layer_gradient(self):
        store = ParamStore(seed=3, dtype=F64)
        layers = store.mlp("m", [4, 6, 3])
        x = np.random.default_rng(0).normal(size=(5, 4))

        def loss(tape):
            return _weighted_sum(mlp_forward(tape, tape.constant(x), layers))

        tape = Tape(F64)
        tape.backward(loss(tape))
        for p in store:
            num = numeric_grad(lambda: float(loss(Tape(F64)).value), p.value)
            assert_grad_close(p.gradient, num, 1e-4)


class TestPrimitives:
    def test_sum_gradient_is_ones(self):
        tape = Tape(F64)
        x = tape.leaf(np.arange(6.0).reshape(2, 3))
        tape.backward(ops.sum(x))
        np.testing.assert_array_equal(tape.grad(x), np.ones((2, 3)))

    def test_disconnected_param_zero_grad(self):
        store = ParamStore(dtype=F64)
        used, unused = store.add("a", [1.0, 2.0]), store.add("b", [3.0])
        tape = Tape(F64)
        unused_t = tape.watch(unused)
        tape.backward(ops.sum(tape.watch(used)))
        np.testing.assert_array_equal(unused.gradient, [0.0])
        np.testing.assert_array_equal(tape.grad(unused_t), [0.0])
        np.testing.assert_array_equal(used.gradient, [1.0, 1.0])

    def test_backward_needs_scalar(self):
        tape = Tape(F64)
        x = tape.leaf(np.ones(3))
        with pytest.raises(ValueError):
            tape.backward(ops.relu(x))

    def test_no_implicit_broadcast(self):
        tape = Tape(F64)
        with pytest.raises(ValueError):
            ops.add(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones(3)))

    @pytest.mark.parametrize(
        "name",
        ["matmul_batched", "softmax", "max", "concat_pad", "take", "repeat_transpose", "index", "mean"],
    )
    def test_primitive_gradients(self, name):
        rng = np.random.default_rng(7)
        if name == "matmul_batched":
            arrays = [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))]
            build = lambda t, l: _weighted_sum(ops.matmul(l[0], l[1]))  # noqa: E731
        elif name == "softmax":
            arrays = [rng.normal(size=(3, 5))]
            build = lambda t, l: _weighted_sum(ops.softmax(l[0]))  # noqa: E731
        elif name == "max":
            arrays = [rng.normal(size=(3, 6, 2))]
            build = lambda t, l: _weighted_sum(ops.max(l[0], axis=1))  # noqa: E731
        elif name == "concat_pad":
            arrays = [rng.normal(size=(2, 3)), rng.normal(size=(2, 1))]
            build = lambda t, l: _weighted_sum(ops.pad(ops.concat([l[0], l[1]], axis=1), 1, 1, 2))  # noqa: E731
        elif name == "take":
            arrays = [rng.normal(size=(3, 4, 2))]
            idx = np.array([[1], [3], [1]])[:, :, None]
            build = lambda t, l: _weighted_sum(ops.take(l[0], np.broadcast_to(idx, (3, 1, 2)), axis=1))  # noqa: E731
        elif name == "repeat_transpose":
            arrays = [rng.normal(size=(2, 1, 3))]
            build = lambda t, l: _weighted_sum(ops.transpose(ops.repeat(l[0], 4, axis=1), (2, 0, 1)))  # noqa: E731
        elif name == "index":
            arrays = [rng.normal(size=(4, 3))]
            build = lambda t, l: _weighted_sum(ops.index(l[0], (np.array([0, 2, 2]), slice(None))))  # noqa: E731
        else:
            arrays = [rng.normal(size=(4, 3))]
            build = lambda t, l: ops.mean(ops.mul(ops.relu(l[0]), l[0]))  # noqa: E731
        _check(build, arrays)


class TestLayerNorm:
    def test_constant_row_normalizes_to_zero(self):
        store = ParamStore(dtype=F64)
        g, s = store.layer_norm("ln", 4)
        tape = Tape(F64)
        y = ad_layer_norm(tape, tape.constant(np.full((2, 4), 3.5)), g, s)
        np.testing.assert_allclose(y.value, 0.0, atol=1e-12)

    def test_unit_variance(self):
        store = ParamStore(dtype=F64)
        g, s = store.layer_norm("ln", 16)
        tape = Tape(F64)
        x = np.random.default_rng(1).normal(3.0, 5.0, size=(3, 16))
        y = ad_layer_norm(tape, tape.constant(x), g, s).value
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        arrays = [rng.normal(size=(3, 5)), 1.0 + 0.1 * rng.normal(size=5), rng.normal(size=5)]
        _check(lambda t, l: _weighted_sum(ops.layer_norm(l[0], l[1], l[2])), arrays)


class TestAttention:
    def _params(self, d, seed=0):
        store = ParamStore(seed=seed, dtype=F64)
        return store, AttentionParams.create(store, "att", d)

    def test_single_key_ignores_query(self):
        store, params = self._params(8)
        rng = np.random.default_rng(0)
        kv = rng.normal(size=(1, 8))
        outs = []
        for _ in range(2):
            tape = Tape(F64)
            q = tape.constant(rng.normal(size=(3, 8)))
            outs.append(multihead_attention(tape, q, tape.constant(kv), tape.constant(kv), 2, params).value)
        # every query row gets the same projected value row
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
        np.testing.assert_allclose(outs[0], np.repeat(outs[0][:1], 3, axis=0), atol=1e-12)

    def test_weights_normalized(self):
        store, params = self._params(8)
        rng = np.random.default_rng(1)
        tape = Tape(F64)
        kv = tape.constant(rng.normal(size=(4, 8)))
        _, w = multihead_attention(tape, tape.constant(rng.normal(size=(3, 8))), kv, kv, 2, params, return_weights=True)
        np.testing.assert_allclose(w.value.sum(axis=-1), 1.0, atol=1e-6)

    def test_heads_must_divide(self):
        store, params = self._params(6)
        tape = Tape(F64)
        x = tape.constant(np.zeros((2, 6)))
        with pytest.raises(ValueError):
            multihead_attention(tape, x, x, x, 4, params)

    def test_key_mask_hides_keys(self):
        store, params = self._params(8)
        rng = np.random.default_rng(4)
        q, kv = rng.normal(size=(2, 8)), rng.normal(size=(3, 8))
        tape = Tape(F64)
        masked = multihead_attention(
            tape, tape.constant(q), tape.constant(kv), tape.constant(kv), 2, params, key_mask=np.array([True, True, False])
        )
        short = multihead_attention(tape, tape.constant(q), tape.constant(kv[:2]), tape.constant(kv[:2]), 2, params)
        np.testing.assert_allclose(masked.value, short.value, atol=1e-12)

    def test_gradient(self):
        store, params = self._params(8, seed=5)
        rng = np.random.default_rng(5)
        arrays = [rng.normal(size=(3, 8)), rng.normal(size=(4, 8))]

        def build(tape, leaves):
            return _weighted_sum(multihead_attention(tape, leaves[0], leaves[1], leaves[1], 2, params))

        _check(build, arrays)
        for p in store:
            p.zero_grad()
        tape = Tape(F64)
        tape.backward(build(tape, [tape.constant(a) for a in arrays]))

        def f():
            t = Tape(F64)
            return float(build(t, [t.constant(a) for a in arrays]).value)

        for p in store:
            assert_grad_close(p.gradient, numeric_grad(f, p.value), 1e-4)


class TestLosses:
    def test_smooth_l1_values(self):
        tape = Tape(F64)
        x = tape.leaf([1.0, 2.0])
        assert float(ops.smooth_l1(x, [1.0, 2.0], [1, 1]).value) == 0.0
        assert float(ops.smooth_l1(tape.leaf([2.0]), [0.0], [1]).value) == pytest.approx(1.5)
        assert float(ops.smooth_l1(tape.leaf([0.5, 7.0]), [0.0, 0.0], [1, 0]).value) == pytest.approx(0.125)

    def test_smooth_l1_empty_mask(self):
        tape = Tape(F64)
        with pytest.raises(ValueError):
            ops.smooth_l1(tape.leaf([1.0]), [0.0], [0])

    def test_smooth_l1_gradient(self):
        rng = np.random.default_rng(8)
        target = rng.normal(size=(4, 3)) * 2
        mask = rng.random((4, 3)) > 0.3
        _check(lambda t, l: ops.smooth_l1(l[0], target, mask), [rng.normal(size=(4, 3)) * 2])

    def test_cross_entropy_values(self):
        tape = Tape(F64)
        assert float(ops.softmax_cross_entropy(tape.leaf(np.zeros(6)), 2).value) == pytest.approx(math.log(6), abs=1e-12)
        big = np.zeros(6)
        big[3] = 60.0
        assert float(ops.softmax_cross_entropy(tape.leaf(big), 3).value) < 1e-20
        with pytest.raises(IndexError):
            ops.softmax_cross_entropy(tape.leaf(np.zeros(6)), 6)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(9)
        _check(lambda t, l: ops.softmax_cross_entropy(l[0], 4), [rng.normal(size=6)])
        _check(lambda t, l: ops.softmax_cross_entropy(l[0], [1, 0, 5]), [rng.normal(size=(3, 6))])


class TestBackwardProperties:
    def test_sum_of_sublosses_is_sum_of_gradients(self):
        store = ParamStore(seed=11, dtype=F64)
        layers = store.mlp("m", [3, 5, 2])
        rng = np.random.default_rng(11)
        xa, xb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))

        def grads(use_a, use_b):
            tape = Tape(F64)
            parts = []
            if use_a:
                parts.append(_weighted_sum(mlp_forward(tape, tape.constant(xa), layers), 1))
            if use_b:
                parts.append(_weighted_sum(mlp_forward(tape, tape.constant(xb), layers), 2))
            loss = parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])
            tape.backward(loss)
            out = [p.gradient.copy() for p in store]
            for p in store:
                p.zero_grad()
            return out

        both = grads(True, True)
        for g, ga, gb in zip(both, grads(True, False), grads(False, True)):
            np.testing.assert_allclose(g, ga + gb, atol=1e-7)

    def test_forward_bit_deterministic(self):
        store = ParamStore(seed=1)
        layers = store.mlp("m", [8, 16, 4])
        x = np.random.default_rng(0).normal(size=(10, 8)).astype(np.float32)
        t1, t2 = Tape(), Tape()
        y1 = mlp_forward(t1, t1.constant(x), layers).value
        y2 = mlp_forward(t2, t2.constant(x), layers).value
        assert y1.dtype == np.float32
        assert y1.tobytes() == y2.tobytes()


class TestAdam:
    def test_zero_gradient_keeps_value(self):
        p = Param("x", np.array([1.5, -2.0]))
        adam_step([p], lr=0.1)
        np.testing.assert_array_equal(p.value, [1.5, -2.0])

    def test_constant_gradient_step_size(self):
        p = Param("x", np.array([0.0, 0.0]))
        prev = p.value.copy()
        for _ in range(50):
            p.gradient[...] = [3.0, -0.2]
            adam_step([p], lr=0.01)
            step = p.value - prev
            prev = p.value.copy()
        np.testing.assert_allclose(step, [-0.01, 0.01], rtol=1e-5)
        np.testing.assert_array_equal(p.gradient, 0.0)

    def test_quadratic_converges(self):
        # scalar oracle: minimize (x - 3)^2 from x = 0
        p = Param("x", np.array([0.0]))
        for _ in range(200):
            p.gradient[...] = 2 * (p.value - 3.0)
            adam_step([p], lr=0.1)
        assert abs(p.value[0] - 3.0) < 0.05


def test_checkpoint_round_trip_bit_exact(tmp_path):
    store = ParamStore(seed=4)
    store.mlp("a", [3, 7, 2])
    store.layer_norm("ln", 5)
    save_checkpoint(tmp_path / "ck", store)
    manifest = (tmp_path / "ck" / "manifest.json").read_text()
    assert '"name": "a.0.weight"' in manifest
    other = ParamStore(seed=99)
    other.mlp("a", [3, 7, 2])
    other.layer_norm("ln", 5)
    load_into(other, tmp_path / "ck")
    for p, q in zip(store, other):
        assert p.value.tobytes() == q.value.tobytes()
    raw = (tmp_path / "ck" / "params.bin").read_bytes()
    assert len(raw) == 4 * sum(p.value.size for p in store)
