import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from qfl import tensor as T
from qfl.tensor import Tensor

finite = st.floats(-3, 3, allow_nan=False, width=64)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestBasics:
    def test_sum_gradient_is_ones(self):
        x = leaf([1.0, -2.0, 3.0])
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_dot_gradient(self):
        x = leaf([0.5, -1.5, 2.0])
        T.backward(x @ x)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            T.backward(x * 2)

    def test_gradients_accumulate_on_reuse(self):
        x = leaf([1.0, 2.0])
        T.backward((x * x + x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_diamond_graph_visits_each_node_once(self):
        x = leaf([0.3])
        a = T.exp(x)
        b = a * a + a
        T.backward(b.sum())
        np.testing.assert_allclose(x.grad, 2 * np.exp(0.6) + np.exp(0.3))
        order = T.topological_order(b.sum())
        assert len(order) == len({id(n) for n in order})

    def test_suffix_broadcast_only(self):
        a = leaf(np.ones((2, 3)))
        T.add(a, leaf(np.ones(3)))
        with pytest.raises(ValueError):
            T.add(a, leaf(np.ones((2, 1))))

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["inner"] = T.grad_enabled()

        with T.no_grad():
            th = threading.Thread(target=worker)
            th.start()
            th.join()
            assert not T.grad_enabled()
        assert seen["inner"]

    def test_float32_grad_keeps_dtype(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        T.backward((x * x).sum())
        assert x.grad.dtype == np.float32


class TestGradCheck:
    def test_sum_of_squares(self):
        assert T.grad_check(lambda x: (x * x).sum(), [1.0, 2.0]) < 1e-8

    def test_softmax_cross_entropy(self):
        f = lambda z: -T.getitem(T.log_softmax(z), 1)
        assert T.grad_check(f, [0.2, -1.0, 0.7]) < 1e-6

    def test_constant(self):
        assert T.grad_check(lambda x: Tensor(np.asarray(3.0)) + 0 * x.sum(), [1.0, 2.0]) == 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            T.grad_check(lambda x: T.log(x).sum(), [-1.0])


_rng = np.random.default_rng(0)
C4, C42, C43 = _rng.normal(size=4), _rng.normal(size=(4, 2)), _rng.normal(size=(4, 3))
_OPS = {
    "add": lambda x: T.add(x, Tensor(C4)).sum(),
    "sub": lambda x: T.sub(Tensor(np.arange(4.0)), x * x).sum(),
    "mul": lambda x: (x * x * 1.7).sum(),
    "div": lambda x: (x / (x * x + 1.0)).sum(),
    "neg": lambda x: (-x * x).sum(),
    "exp": lambda x: T.exp(x).sum(),
    "log": lambda x: T.log(x * x + 0.5).sum(),
    "tanh": lambda x: T.tanh(x).sum(),
    "sigmoid": lambda x: (T.sigmoid(x) * x).sum(),
    "softplus": lambda x: (T.softplus(x) * x).sum(),
    "gelu": lambda x: (T.gelu(x) * x).sum(),
    "mean": lambda x: T.mean(x * x),
    "max": lambda x: (T.tmax(T.reshape(x, (2, 2)), axis=1) * Tensor([1.0, 3.0])).sum(),
    "reshape": lambda x: (T.reshape(x, (2, 2)) @ Tensor(np.eye(2) + 1)).sum(),
    "transpose": lambda x: (T.transpose(T.reshape(x, (2, 2))) * Tensor([[1.0, 2.0], [3.0, 4.0]])).sum(),
    "getitem": lambda x: (T.getitem(x, np.array([0, 0, 3])) * Tensor([1.0, 2.0, 3.0])).sum(),
    "slice": lambda x: (T.getitem(x, slice(1, 3)) * T.getitem(x, slice(2, 4))).sum(),
    "concat": lambda x: (T.concat([x, x * x]) * Tensor(np.arange(8.0))).sum(),
    "stack": lambda x: (T.stack([x, T.exp(x)], axis=1) * Tensor(C42)).sum(),
    "matmul": lambda x: (T.reshape(x, (2, 2)) @ T.reshape(x, (2, 2))).sum(),
    "linear": lambda x: T.linear(T.reshape(x, (1, 4)), Tensor(C43), Tensor(np.ones(3))).sum(),
    "log_softmax": lambda x: (T.log_softmax(x) * Tensor([1.0, 0.0, 2.0, -1.0])).sum(),
    "softmax": lambda x: (T.softmax(x) * Tensor([1.0, 0.0, 2.0, -1.0])).sum(),
    "layer_norm": lambda x: (T.layer_norm(x, Tensor([1.0, 2.0, 0.5, 1.0]), Tensor(np.zeros(4))) * Tensor([1.0, -2.0, 3.0, 0.5])).sum(),
    "l2_normalize": lambda x: (T.l2_normalize(x) * Tensor([1.0, -2.0, 3.0, 0.5])).sum(),
}


@pytest.mark.parametrize("name", sorted(_OPS))
def test_operation_gradients(name):
    point = np.random.default_rng(zlib.crc32(name.encode())).normal(size=4)
    assert T.grad_check(_OPS[name], point) < 1e-4


def test_attention_gradient_all_inputs():
    r = np.random.default_rng(3)
    q, k, v = r.normal(size=(2, 3, 2)), r.normal(size=(2, 4, 2)), r.normal(size=(2, 4, 2))
    mask = r.random((2, 3, 4)) < 0.7
    mask[..., 0] = True
    r_out = r.normal(size=(2, 3, 2))
    for which in range(3):
        def f(x):
            args = [Tensor(q), Tensor(k), Tensor(v)]
            args[which] = x
            return (T.scaled_dot_attention(*args, mask) * Tensor(r_out)).sum()
        assert T.grad_check(f, [q, k, v][which]) < 1e-4


def test_batched_matmul_gradient():
    r = np.random.default_rng(4)
    b = r.normal(size=(2, 3, 2))
    assert T.grad_check(lambda a: (a @ Tensor(b)).sum(), r.normal(size=(2, 2, 3))) < 1e-4
    a = r.normal(size=(2, 5, 3))
    assert T.grad_check(lambda w: (Tensor(a) @ w).sum(), r.normal(size=(3, 2))) < 1e-4


class TestAttention:
    def test_single_key_returns_value(self):
        v = np.array([[2.0, -1.0]])
        out = T.scaled_dot_attention(Tensor([[0.3, 0.1]]), Tensor([[1.0, 1.0]]), Tensor(v), np.ones((1, 1), bool))
        np.testing.assert_array_equal(out.data, v)

    def test_single_allowed_column(self):
        r = np.random.default_rng(1)
        v = r.normal(size=(4, 2))
        mask = np.zeros((3, 4), bool)
        mask[:, 2] = True
        out = T.scaled_dot_attention(Tensor(r.normal(size=(3, 2))), Tensor(r.normal(size=(4, 2))), Tensor(v), mask)
        np.testing.assert_array_equal(out.data, np.repeat(v[2:3], 3, axis=0))

    def test_matches_loop_oracle(self):
        r = np.random.default_rng(2)
        q, k, v = r.normal(size=(3, 2)), r.normal(size=(4, 2)), r.normal(size=(4, 2))
        mask = np.array([[1, 0, 1, 1], [0, 1, 0, 0], [1, 1, 1, 1]], bool)
        out = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), mask)
        np.testing.assert_allclose(out.data, oracles.attention(q, k, v, mask), atol=1e-12)

    def test_fully_masked_row_is_error(self):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ValueError):
            T.scaled_dot_attention(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), mask)

    def test_shape_mismatch_is_error(self):
        with pytest.raises(ValueError):
            T.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_masked_values_have_no_influence(self, n, m, seed):
        r = np.random.default_rng(seed)
        q, k, v = r.normal(size=(n, 3)), r.normal(size=(m, 3)), r.normal(size=(m, 3))
        mask = r.random((n, m)) < 0.5
        mask[np.arange(n), r.integers(0, m, size=n)] = True
        base = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
        v2, k2 = v.copy(), k.copy()
        blocked = ~mask.any(axis=0)
        v2[blocked] += 100.0
        k2[blocked] -= 50.0
        moved = T.scaled_dot_attention(Tensor(q), Tensor(k2), Tensor(v2), mask).data
        np.testing.assert_allclose(moved, base, atol=1e-12)
        # rows of the weight matrix sum to one: attending to ones yields ones
        ones = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(np.ones((m, 1))), mask).data
        np.testing.assert_allclose(ones, 1.0, atol=1e-6)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])

    def test_idempotent_on_unit(self):
        u = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(T.l2_normalize(Tensor(u)).data, u)

    def test_zero_vector_is_error(self):
        with pytest.raises(ValueError):
            T.l2_normalize(Tensor(np.zeros((2, 3))))

    @given(hnp.arrays(np.float64, 5, elements=finite).filter(lambda a: np.linalg.norm(a) > 1e-3))
    def test_unit_norm(self, a):
        assert abs(np.linalg.norm(T.l2_normalize(Tensor(a)).data) - 1) < 1e-12


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5)), elements=finite))
def test_log_softmax_normalises(a):
    lp = T.log_softmax(Tensor(a)).data
    np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(a)).data, np.exp(lp), atol=1e-12)


def test_determinism():
    r = np.random.default_rng(9)
    q, k, v = r.normal(size=(4, 3)), r.normal(size=(5, 3)), r.normal(size=(5, 3))
    a = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    b = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert a.tobytes() == b.tobytes()
