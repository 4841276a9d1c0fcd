"""Training losses: image-text contrastive, image-text matching, image-grounded generation."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Direction(str, enum.Enum):
    TEXT_FOR_IMAGE = "text_for_image"
    IMAGE_FOR_TEXT = "image_for_text"


def pairwise_similarity(query_embs: Tensor, text_cls: Tensor) -> Tensor:
    """sim[i, j] = max over image i's queries of (query · text_j)."""
    if query_embs.ndim != 3 or text_cls.ndim != 2:
        raise ValueError("pairwise_similarity: expected [N, n_queries, d] and [M, d]")
    if query_embs.shape[-1] != text_cls.shape[-1]:
        raise ValueError(f"pairwise_similarity: width {query_embs.shape[-1]} vs {text_cls.shape[-1]}")
    per_query = T.matmul(query_embs, T.transpose(text_cls))  # [N, nq, M]
    return T.tmax(per_query, axis=1)


def smoothed_targets(n: int, smoothing: float, dtype=np.float64) -> np.ndarray:
    """Probability ``smoothing`` on the diagonal, the rest spread over the other n-1 entries."""
    if n == 1:
        return np.ones((1, 1), dtype=dtype)
    off = (1.0 - smoothing) / (n - 1)
    t = np.full((n, n), off, dtype=dtype)
    np.fill_diagonal(t, smoothing)
    return t


def itc_loss_from_similarity(sim: Tensor, temperature: Tensor, smoothing: float = 0.9) -> Tensor:
    n = sim.shape[0]
    if n == 0 or sim.shape != (n, n):
        raise ValueError("itc_loss: need a non-empty square similarity matrix")
    if not 0 < smoothing <= 1:
        raise ValueError("itc_loss: smoothing must lie in (0, 1]")
    logits = T.div(sim, temperature)
    targets = Tensor(smoothed_targets(n, smoothing, sim.dtype))
    image_to_text = T.tsum(T.mul(targets, T.log_softmax(logits, axis=-1)))
    text_to_image = T.tsum(T.mul(targets, T.log_softmax(T.transpose(logits), axis=-1)))
    return T.mul(T.add(image_to_text, text_to_image), -1.0 / (2 * n))


def itc_loss(query_embs: Tensor, text_cls: Tensor, temperature: Tensor, smoothing: float = 0.9) -> Tensor:
    """Symmetric contrastive loss with label smoothing over in-batch pairs.

    ``query_embs`` [N, n_queries, d] and ``text_cls`` [N, d] must already be
    L2-normalized; pair i is the match of image i.
    """
    if query_embs.shape[0] == 0:
        raise ValueError("itc_loss: empty batch")
    return itc_loss_from_similarity(pairwise_similarity(query_embs, text_cls), temperature, smoothing)


def _candidates(sim: np.ndarray, direction: Direction | str) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise ValueError("hard negatives: similarity must be square")
    if n < 2:
        raise ValueError("hard negatives: need at least 2 pairs")
    return sim if Direction(direction) is Direction.TEXT_FOR_IMAGE else sim.T


def mine_hard_negatives(sim, direction: Direction | str, rng: np.random.Generator,
                        temperature: float = 0.07) -> np.ndarray:
    """Sample one non-matching partner per item, favouring similar ones.

    For ``text_for_image`` row i of ``sim`` is scored; for ``image_for_text``
    column i. The candidate j != i is drawn with probability softmax(sim/temperature)
    restricted to the off-diagonal entries.
    """
    scores = _candidates(sim, direction)
    n = scores.shape[0]
    off = ~np.eye(n, dtype=bool)
    cand = np.broadcast_to(np.arange(n), (n, n))[off].reshape(n, n - 1)
    logits = scores[off].reshape(n, n - 1) / temperature
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    u = rng.random(n)
    pick = np.array([np.searchsorted(cdf[i], u[i], side="right") for i in range(n)])
    return cand[np.arange(n), np.minimum(pick, n - 2)]


def hardest_negatives(sim, direction: Direction | str) -> np.ndarray:
    """Deterministic variant: the most similar off-diagonal partner (first on ties)."""
    scores = _candidates(sim, direction).copy()
    np.fill_diagonal(scores, -np.inf)
    return scores.argmax(axis=1)


@dataclass
class ItmBatch:
    image_index: np.ndarray
    text_index: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_negatives(cls, neg_text_for_image: np.ndarray, neg_image_for_text: np.ndarray) -> ItmBatch:
        """Matched pairs, then (image, negative text), then (negative image, text)."""
        n = len(neg_text_for_image)
        ar = np.arange(n)
        return cls(
            image_index=np.concatenate([ar, ar, np.asarray(neg_image_for_text)]),
            text_index=np.concatenate([ar, np.asarray(neg_text_for_image), ar]),
            labels=np.concatenate([np.ones(n), np.zeros(2 * n)]),
        )


def itm_logits(query_states: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Per-pair logit: the head applied to every output query, averaged."""
    per_query = T.linear(query_states, head_w, head_b)  # [B, nq, 1]
    return T.mean(T.reshape(per_query, per_query.shape[:2]), axis=1)


def itm_loss(query_states: Tensor, labels, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Mean binary cross-entropy of the matching classifier over all 3N pairs."""
    labels = np.asarray(labels, dtype=query_states.dtype)
    rows = query_states.shape[0]
    if labels.shape != (rows,):
        raise ValueError(f"itm_loss: {labels.shape[0] if labels.ndim else 0} labels for {rows} pairs")
    if rows == 0 or rows % 3:
        raise ValueError("itm_loss: batch must hold 3N pairs")
    z = itm_logits(query_states, head_w, head_b)
    pos = T.mul(Tensor(labels), T.softplus(T.neg(z)))
    neg = T.mul(Tensor(1.0 - labels), T.softplus(z))
    return T.mean(T.add(pos, neg))


@dataclass
class ItgTarget:
    """Teacher-forcing inputs and labels for ``[BOS] body [EOS]`` sequences (padded)."""
    inputs: np.ndarray
    labels: np.ndarray
    valid: np.ndarray

    @classmethod
    def build(cls, bodies: list, bos_id: int, eos_id: int, pad_id: int = 0) -> ItgTarget:
        seqs = [[bos_id, *list(b), eos_id] for b in bodies]
        n = max(len(s) for s in seqs) - 1
        inputs = np.full((len(seqs), n), pad_id, dtype=np.int64)
        labels = np.full((len(seqs), n), pad_id, dtype=np.int64)
        valid = np.zeros((len(seqs), n), dtype=bool)
        for i, s in enumerate(seqs):
            inputs[i, :len(s) - 1] = s[:-1]
            labels[i, :len(s) - 1] = s[1:]
            valid[i, :len(s) - 1] = True
        return cls(inputs, labels, valid)


def itg_loss(text_logits: Tensor, labels, valid=None) -> Tensor:
    """Token-averaged next-token cross-entropy over non-pad positions.

    ``text_logits`` is [..., T, V] computed with ground-truth prefixes;
    ``labels`` and ``valid`` are [..., T]. Over a batch the mean runs over all
    non-pad tokens.
    """
    labels = np.asarray(labels)
    valid = np.ones(labels.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("itg_loss: no target positions")
    vocab = text_logits.shape[-1]
    lp = T.reshape(T.log_softmax(text_logits, axis=-1), (-1, vocab))
    picked = T.getitem(lp, (np.arange(lp.shape[0]), labels.reshape(-1)))
    w = Tensor(valid.reshape(-1).astype(text_logits.dtype))
    return T.mul(T.tsum(T.mul(picked, w)), -1.0 / count)
