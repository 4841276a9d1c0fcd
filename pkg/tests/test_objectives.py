import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qfl import objectives as O
from qfl import tensor as T
from qfl.tensor import Tensor


def unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def tau(value=0.07):
    return Tensor(np.asarray(value))


class TestSimilarity:
    def test_single_query_is_cosine(self):
        r = np.random.default_rng(0)
        x, y = unit(r.normal(size=(3, 1, 4))), unit(r.normal(size=(5, 4)))
        np.testing.assert_allclose(O.pairwise_similarity(Tensor(x), Tensor(y)).data, x[:, 0] @ y.T, atol=1e-15)

    def test_text_equal_to_a_query(self):
        r = np.random.default_rng(1)
        x = unit(r.normal(size=(2, 3, 4)))
        y = np.stack([x[0, 2], x[1, 0]])
        sim = O.pairwise_similarity(Tensor(x), Tensor(y)).data
        assert sim[0, 0] == pytest.approx(1.0) and sim[1, 1] == pytest.approx(1.0)

    def test_matches_triple_loop(self):
        r = np.random.default_rng(2)
        x, y = unit(r.normal(size=(3, 2, 5))), unit(r.normal(size=(4, 5)))
        np.testing.assert_allclose(O.pairwise_similarity(Tensor(x), Tensor(y)).data, oracles.similarity(x, y), rtol=0, atol=1e-15)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            O.pairwise_similarity(Tensor(np.ones((2, 1, 3))), Tensor(np.ones((2, 4))))

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
    def test_bounded(self, n, nq, seed):
        r = np.random.default_rng(seed)
        sim = O.pairwise_similarity(Tensor(unit(r.normal(size=(n, nq, 3)))), Tensor(unit(r.normal(size=(n, 3))))).data
        assert (np.abs(sim) <= 1 + 1e-12).all()


class TestItc:
    def test_single_pair_is_zero(self):
        assert O.itc_loss_from_similarity(Tensor([[0.3]]), tau()).item() == 0.0

    def test_equal_sims_give_log_two(self):
        assert O.itc_loss_from_similarity(Tensor(np.full((2, 2), 0.4)), tau()).item() == pytest.approx(math.log(2))

    def test_oracle(self):
        r = np.random.default_rng(3)
        x, y = unit(r.normal(size=(3, 2, 4))), unit(r.normal(size=(3, 4)))
        loss = O.itc_loss(Tensor(x), Tensor(y), tau(), 0.9).item()
        assert loss == pytest.approx(oracles.itc(oracles.similarity(x, y), 0.07, 0.9), abs=1e-10)

    def test_targets_rows_sum_to_one(self):
        t = O.smoothed_targets(5, 0.9)
        np.testing.assert_allclose(t.sum(axis=1), 1.0)
        assert t[0, 0] == 0.9 and t[0, 1] == pytest.approx(0.025)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31))
    def test_permutation_and_transpose_invariance(self, n, seed):
        r = np.random.default_rng(seed)
        sim = np.tanh(r.normal(size=(n, n)))
        base = O.itc_loss_from_similarity(Tensor(sim), tau()).item()
        p = r.permutation(n)
        assert O.itc_loss_from_similarity(Tensor(sim[p][:, p]), tau()).item() == pytest.approx(base, abs=1e-10)
        assert O.itc_loss_from_similarity(Tensor(sim.T), tau()).item() == pytest.approx(base, abs=1e-10)

    def test_temperature_gradient(self):
        sim = np.tanh(np.random.default_rng(4).normal(size=(4, 4)))
        f = lambda lt: O.itc_loss_from_similarity(Tensor(sim), T.exp(lt))
        assert T.grad_check(f, np.asarray(math.log(0.07))) < 1e-4

    def test_empty_is_error(self):
        with pytest.raises(ValueError):
            O.itc_loss(Tensor(np.ones((0, 1, 2))), Tensor(np.ones((0, 2))), tau())


class TestMining:
    def test_two_items(self):
        rng = np.random.default_rng(0)
        sim = np.array([[1.0, 0.2], [0.1, 1.0]])
        for _ in range(20):
            assert list(O.mine_hard_negatives(sim, "text_for_image", rng)) == [1, 0]

    def test_too_small(self):
        with pytest.raises(ValueError):
            O.mine_hard_negatives(np.ones((1, 1)), "text_for_image", np.random.default_rng(0))

    def test_dominant_candidate(self):
        sim = np.zeros((3, 3))
        sim[0, 2] = 10.0
        rng = np.random.default_rng(1)
        draws = np.array([O.mine_hard_negatives(sim, "text_for_image", rng, 1.0)[0] for _ in range(100_000)])
        expected = math.exp(10) / (math.exp(10) + 1)
        freq = (draws == 2).mean()
        assert freq >= 0.999 and abs(freq - expected) < 0.01

    def test_uniform_candidates(self):
        rng = np.random.default_rng(2)
        sim = np.full((4, 4), 0.3)
        draws = np.concatenate([O.mine_hard_negatives(sim, "image_for_text", rng) for _ in range(25_000)])
        for i in range(4):
            col = draws[i::4]
            for j in set(range(4)) - {i}:
                assert abs((col == j).mean() - 1 / 3) < 0.01

    def test_direction_uses_columns(self):
        sim = np.zeros((3, 3))
        sim[2, 0] = 50.0  # text 0 is most similar to image 2
        rng = np.random.default_rng(3)
        assert O.mine_hard_negatives(sim, "image_for_text", rng, 1.0)[0] == 2
        assert O.hardest_negatives(sim, "image_for_text")[0] == 2
        assert O.hardest_negatives(sim, "text_for_image")[2] == 0

    @given(st.integers(2, 8), st.integers(0, 2**31), st.sampled_from(list(O.Direction)))
    def test_never_diagonal(self, n, seed, direction):
        r = np.random.default_rng(seed)
        sim = r.normal(size=(n, n)) * 5
        np.fill_diagonal(sim, 100.0)
        neg = O.mine_hard_negatives(sim, direction, r)
        assert (neg != np.arange(n)).all()
        assert (O.hardest_negatives(sim, direction) != np.arange(n)).all()


class TestItm:
    def test_batch_layout(self):
        b = O.ItmBatch.from_negatives(np.array([1, 0, 0]), np.array([2, 2, 1]))
        assert len(b.labels) == 9 and b.labels.sum() == 3
        assert list(b.image_index) == [0, 1, 2, 0, 1, 2, 2, 2, 1]
        assert list(b.text_index) == [0, 1, 2, 1, 0, 0, 0, 1, 2]

    def test_zero_logits(self):
        states = Tensor(np.zeros((3, 2, 4)))
        loss = O.itm_loss(states, [1, 0, 0], Tensor(np.zeros((4, 1))), Tensor(np.zeros(1)))
        assert loss.item() == pytest.approx(math.log(2))

    def test_saturated(self):
        states = Tensor(np.ones((3, 2, 1)) * np.array([20.0, -20.0, -20.0])[:, None, None])
        loss = O.itm_loss(states, [1, 0, 0], Tensor(np.ones((1, 1))), Tensor(np.zeros(1)))
        assert loss.item() < 1e-8

    def test_oracle(self):
        r = np.random.default_rng(5)
        s, w, b = r.normal(size=(6, 3, 4)), r.normal(size=(4, 1)), r.normal(size=1)
        labels = np.array([1, 1, 0, 0, 0, 0])
        got = O.itm_loss(Tensor(s), labels, Tensor(w), Tensor(b)).item()
        assert got == pytest.approx(oracles.itm(s, labels, w, b), abs=1e-10)

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError):
            O.itm_loss(Tensor(np.zeros((3, 1, 2))), [1, 0], Tensor(np.zeros((2, 1))), Tensor(np.zeros(1)))


class TestItg:
    def test_target_layout(self):
        t = O.ItgTarget.build([[7, 8], [9]], bos_id=2, eos_id=3)
        np.testing.assert_array_equal(t.inputs, [[2, 7, 8], [2, 9, 0]])
        np.testing.assert_array_equal(t.labels, [[7, 8, 3], [9, 3, 0]])
        np.testing.assert_array_equal(t.valid, [[1, 1, 1], [1, 1, 0]])

    def test_uniform_logits(self):
        assert O.itg_loss(Tensor(np.zeros((4, 9))), [1, 2, 3, 4]).item() == pytest.approx(math.log(9))

    def test_one_hot_margin(self):
        logits = np.zeros((3, 5))
        labels = [4, 0, 2]
        logits[np.arange(3), labels] = 30.0
        assert O.itg_loss(Tensor(logits), labels).item() < 1e-8

    def test_padding_is_ignored(self):
        r = np.random.default_rng(6)
        logits = r.normal(size=(2, 3, 5))
        labels = np.array([[1, 2, 3], [4, 0, 0]])
        valid = np.array([[1, 1, 1], [1, 0, 0]], bool)
        got = O.itg_loss(Tensor(logits), labels, valid).item()
        assert got == pytest.approx(oracles.itg(logits, labels, valid), abs=1e-12)
        logits[1, 1:] += 100
        assert O.itg_loss(Tensor(logits), labels, valid).item() == pytest.approx(got, abs=1e-12)

    def test_no_targets(self):
        with pytest.raises(ValueError):
            O.itg_loss(Tensor(np.zeros((1, 2, 3))), [[0, 0]], [[False, False]])
