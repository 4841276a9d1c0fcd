"""Cross-modal retrieval metrics, fixed-gallery percentile bootstrap, hallucination proxy."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import objectives as O
from . import qformer as Q
from . import tensor as T
from .checkpoint import Checkpoint
from .corpus import Case, Variant, filter_report
from .seeding import derive_seed

DIRECTIONS = ("image_to_text", "text_to_image")
VARIANT_ORDER = ("he_only", "full")
KS = (1, 5, 10)


def _scores(sim, direction: str) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError("similarity matrix must be square")
    if direction == "image_to_text":
        return sim
    if direction == "text_to_image":
        return sim.T
    raise ValueError(f"unknown direction {direction!r}")


def match_ranks(sim, direction: str) -> np.ndarray:
    """1-based rank of each query's match; ties go to the smaller candidate index."""
    s = _scores(sim, direction)
    n = s.shape[0]
    diag = np.diag(s)[:, None]
    better = (s > diag).sum(axis=1)
    tied_before = ((s == diag) & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return 1 + better + tied_before


def recall_at_k(sim, k: int, direction: str) -> float:
    n = np.asarray(sim).shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    return float(np.mean(match_ranks(sim, direction) <= k))


def rank_stats(sim, direction: str) -> tuple[float, float]:
    ranks = match_ranks(sim, direction)
    return float(ranks.mean()), float(np.median(ranks))


def bootstrap_ci(metric: Callable[[np.ndarray, np.ndarray], float], sim, n_resamples: int = 1000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of ``metric(sim, query_indices)`` over query resamples.

    Only the N queries are resampled with replacement; ``sim`` (the full
    gallery) is passed unchanged to every replicate. Replicate r draws its
    indices from a generator seeded by hash(seed, r), so the result does not
    depend on evaluation order.
    """
    sim = np.asarray(sim)
    n = sim.shape[0]
    if n < 1 or n_resamples < 1:
        raise ValueError("need N >= 1 and n_resamples >= 1")
    values = np.empty(n_resamples)
    for r in range(n_resamples):
        idx = np.random.default_rng(derive_seed(seed, "bootstrap", r)).integers(0, n, size=n)
        values[r] = metric(sim, idx)
    tail = (1.0 - level) / 2 * 100
    lo, hi = np.percentile(values, [tail, 100 - tail])
    return float(lo), float(hi)


@dataclass
class MetricRow:
    direction: str
    training: str
    retrieval: str
    values: dict[str, float]
    ci: dict[str, tuple[float, float]]


def retrieval_metrics(sim, direction: str, n_resamples: int = 1000, seed: int = 0) -> tuple[dict, dict]:
    ranks = match_ranks(sim, direction).astype(np.float64)
    n = len(ranks)
    # ranks are computed once against the full gallery; replicates only reselect queries
    metrics: dict[str, Callable] = {
        f"R@{k}": (lambda _, idx, k=k: float(np.mean(ranks[idx] <= k))) for k in KS
    }
    metrics["MeanRank"] = lambda _, idx: float(np.mean(ranks[idx]))
    metrics["MedianRank"] = lambda _, idx: float(np.median(ranks[idx]))
    values, ci = {}, {}
    for name, fn in metrics.items():
        values[name] = fn(sim, np.arange(n))
        ci[name] = bootstrap_ci(fn, sim, n_resamples, 0.95, seed)
    return values, ci


COLUMNS = ("R@1", "R@5", "R@10", "MeanRank", "MedianRank")


@dataclass
class RetrievalTable:
    rows: list[MetricRow] = field(default_factory=list)

    def cell(self, direction: str, training: str, retrieval: str) -> MetricRow:
        for r in self.rows:
            if (r.direction, r.training, r.retrieval) == (direction, training, retrieval):
                return r
        raise KeyError((direction, training, retrieval))

    def to_json(self) -> str:
        obj = [{"direction": r.direction, "training": r.training, "retrieval": r.retrieval,
                "values": r.values, "ci": {k: list(v) for k, v in r.ci.items()}} for r in self.rows]
        return json.dumps({"rows": obj}, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RetrievalTable:
        rows = json.loads(text)["rows"]
        return cls([MetricRow(r["direction"], r["training"], r["retrieval"], r["values"],
                              {k: tuple(v) for k, v in r["ci"].items()}) for r in rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["Direction", "Training", "Retrieval"]
        for c in COLUMNS:
            header += [c, f"{c}_lo", f"{c}_hi"]
        w.writerow(header)
        for r in self.rows:
            line = [r.direction, r.training, r.retrieval]
            for c in COLUMNS:
                line += [repr(r.values[c]), repr(r.ci[c][0]), repr(r.ci[c][1])]
            w.writerow(line)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> RetrievalTable:
        reader = csv.DictReader(io.StringIO(text))
        rows = []
        for rec in reader:
            values = {c: float(rec[c]) for c in COLUMNS}
            ci = {c: (float(rec[f"{c}_lo"]), float(rec[f"{c}_hi"])) for c in COLUMNS}
            rows.append(MetricRow(rec["Direction"], rec["Training"], rec["Retrieval"], values, ci))
        return cls(rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, RetrievalTable) and self.to_json() == other.to_json()


# -- model-side evaluation ----------------------------------------------------------------

def embed_test_set(ckpt: Checkpoint, cases: list[Case], retrieval_variant: Variant | str, tokenizer,
                   max_tiles: int | None = None, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalised query embeddings [N, nq, D] and text CLS embeddings [N, D].

    Tile selection is deterministic: the first ``max_tiles`` tiles of a case.
    """
    if not cases:
        raise ValueError("embed_test_set: empty split")
    qcfg = Q.QFormerConfig(**ckpt.config["qformer"])
    if max_tiles is None:
        max_tiles = ckpt.config.get("train", {}).get("max_tiles_per_case", 256)
    img, txt = [], []
    with T.no_grad():
        P = Q.as_leaves(ckpt.params)
        for s in range(0, len(cases), batch_size):
            chunk = cases[s:s + batch_size]
            texts = [filter_report(c, retrieval_variant, tokenizer) for c in chunk]
            if any(len(t) < 2 for t in texts):
                raise ValueError("embed_test_set: empty report variant")
            tiles, tvalid = Q.pad_bags([c.tiles for c in chunk], max_tiles, dtype=P["query_embeddings"].dtype)
            ids, valid = Q.pad_sequences(texts)
            img.append(T.l2_normalize(Q.encode_image_batch(P, qcfg, tiles, tvalid)).data)
            txt.append(T.l2_normalize(Q.encode_text_batch(P, qcfg, ids, valid)).data)
    return np.concatenate(img), np.concatenate(txt)


def similarity_matrix(image_embs: np.ndarray, text_embs: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return O.pairwise_similarity(T.Tensor(image_embs), T.Tensor(text_embs)).data.astype(np.float64)


def cross_eval(ckpt_he: Checkpoint, ckpt_full: Checkpoint, cases: list[Case], tokenizer,
               n_resamples: int = 1000, seed: int = 0) -> RetrievalTable:
    """All direction x training-variant x retrieval-variant cells, in table order."""
    sims = {}
    for training, ckpt in (("he_only", ckpt_he), ("full", ckpt_full)):
        for retrieval in VARIANT_ORDER:
            sims[training, retrieval] = similarity_matrix(*embed_test_set(ckpt, cases, retrieval, tokenizer))
    table = RetrievalTable()
    for direction in DIRECTIONS:
        for training in VARIANT_ORDER:
            for retrieval in VARIANT_ORDER:
                values, ci = retrieval_metrics(sims[training, retrieval], direction, n_resamples, seed)
                table.rows.append(MetricRow(direction, training, retrieval, values, ci))
    return table


# -- hallucination proxy --------------------------------------------------------------------

def count_marker_tokens(ids, marker_ids) -> int:
    marker_ids = set(int(m) for m in marker_ids)
    return sum(int(i) in marker_ids for i in ids)


@dataclass
class HallucinationReport:
    model: str
    case_ids: list[str]
    counts: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.counts)) if self.counts else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.counts)) if self.counts else 0.0

    @property
    def fraction_zero(self) -> float:
        return float(np.mean([c == 0 for c in self.counts])) if self.counts else 0.0

    def to_dict(self) -> dict:
        return {"model": self.model, "per_case": dict(zip(self.case_ids, self.counts)),
                "mean": self.mean, "std": self.std, "fraction_zero": self.fraction_zero}

    @classmethod
    def from_dict(cls, d: dict) -> HallucinationReport:
        ids = list(d["per_case"])
        return cls(d["model"], ids, [int(d["per_case"][k]) for k in ids])


def hallucination_report(model: str, case_ids: list[str], generated: list[list[int]], marker_ids) -> HallucinationReport:
    return HallucinationReport(model, list(case_ids), [count_marker_tokens(g, marker_ids) for g in generated])
