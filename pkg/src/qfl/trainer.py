"""Two-stage training and report decoding.

Stage 1 trains the Q-Former on the sum of the contrastive, matching and
generation losses. Stage 2 expands the query set, projects the query
outputs into the embedding space of a frozen decoder LM and trains the
Q-Former, the projection and the LM output head on the generation loss.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import objectives as O
from . import qformer as Q
from . import tensor as T
from .checkpoint import Checkpoint
from .corpus import Case, Variant, filter_report, report_body
from .dataset import Dataset
from .lm import HEAD, LmConfig, StubLm, init_lm, lm_forward
from .optim import OptimizerState, adamw_step, clip_grad_norm, lr_at
from .seeding import derive_rng
from .tokenizer import BOS, EOS, SPECIALS

log = logging.getLogger(__name__)

BOS_ID = SPECIALS.index(BOS)
EOS_ID = SPECIALS.index(EOS)


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 25
    batch_size: int = 20
    peak_lr: float = 1e-4
    warmup_steps: int = 1000
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    smoothing: float = 0.9
    n_queries: int = 16
    seed: int = 0
    max_tiles_per_case: int = 256
    loss_weights: tuple = (1.0, 1.0, 1.0)
    grad_clip: float | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.loss_weights = tuple(self.loss_weights)
        if self.warmup_steps < 0 or self.peak_lr <= 0:
            raise ValueError("need warmup_steps >= 0 and peak_lr > 0")
        if self.stage == 1 and self.batch_size < 2:
            raise ValueError("stage 1 needs batch_size >= 2 for in-batch negatives")

    @classmethod
    def stage1(cls, **overrides) -> TrainConfig:
        return cls(**{**dict(stage=1, epochs=25, batch_size=20, peak_lr=1e-4, n_queries=16), **overrides})

    @classmethod
    def stage2(cls, **overrides) -> TrainConfig:
        return cls(**{**dict(stage=2, epochs=21, batch_size=36, peak_lr=1e-3, n_queries=64), **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["loss_weights"] = list(self.betas), list(self.loss_weights)
        return d


def _select_tiles(case: Case, limit: int, rng: np.random.Generator | None) -> np.ndarray:
    """Random subset while training, the first ``limit`` tiles (manifest order) otherwise."""
    tiles = case.tiles
    if len(tiles) <= limit:
        return tiles
    if rng is None:
        return tiles[:limit]
    return tiles[np.sort(rng.choice(len(tiles), size=limit, replace=False))]


def _batches(n: int, size: int, order: np.ndarray | None = None) -> list[np.ndarray]:
    idx = np.arange(n) if order is None else order
    out = [idx[i:i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


# -- stage 1 -----------------------------------------------------------------------

def stage1_losses(P, qcfg: Q.QFormerConfig, tokenizer, cases: list[Case], variant, cfg: TrainConfig,
                  rng: np.random.Generator | None) -> dict[str, T.Tensor]:
    """ITC, ITM and ITG for one batch. ``rng=None`` selects the deterministic validation path."""
    dtype = P["query_embeddings"].dtype
    tiles, tvalid = Q.pad_bags([_select_tiles(c, cfg.max_tiles_per_case, rng) for c in cases], dtype=dtype)
    ids, valid = Q.pad_sequences([filter_report(c, variant, tokenizer) for c in cases])

    x = T.l2_normalize(Q.encode_image_batch(P, qcfg, tiles, tvalid))
    y = T.l2_normalize(Q.encode_text_batch(P, qcfg, ids, valid))
    sim = O.pairwise_similarity(x, y)
    tau = T.exp(P["log_temperature"])
    out = {"itc": O.itc_loss_from_similarity(sim, tau, cfg.smoothing)}

    n = len(cases)
    if n >= 2:
        if rng is None:
            neg_t = O.hardest_negatives(sim.data, O.Direction.TEXT_FOR_IMAGE)
            neg_i = O.hardest_negatives(sim.data, O.Direction.IMAGE_FOR_TEXT)
        else:
            t = float(tau.data)
            neg_t = O.mine_hard_negatives(sim.data, O.Direction.TEXT_FOR_IMAGE, rng, t)
            neg_i = O.mine_hard_negatives(sim.data, O.Direction.IMAGE_FOR_TEXT, rng, t)
        itm = O.ItmBatch.from_negatives(neg_t, neg_i)
        q_states, _ = Q.forward(P, qcfg, tiles=tiles[itm.image_index], tile_valid=tvalid[itm.image_index],
                                token_ids=ids[itm.text_index], token_valid=valid[itm.text_index],
                                mode=Q.MaskMode.BIDIRECTIONAL)
        out["itm"] = O.itm_loss(q_states, itm.labels, P["itm_head.w"], P["itm_head.b"])

    target = O.ItgTarget.build([report_body(c, variant, tokenizer) for c in cases], BOS_ID, EOS_ID)
    _, t_states = Q.forward(P, qcfg, tiles=tiles, tile_valid=tvalid, token_ids=target.inputs,
                            token_valid=target.valid, mode=Q.MaskMode.MULTIMODAL_CAUSAL)
    logits = T.linear(t_states, P["itg_head.w"], P["itg_head.b"])
    out["itg"] = O.itg_loss(logits, target.labels, target.valid)
    return out


def _weighted_total(parts: dict, weights) -> T.Tensor:
    total = None
    for w, key in zip(weights, ("itc", "itm", "itg")):
        if key in parts:
            term = T.mul(parts[key], float(w))
            total = term if total is None else T.add(total, term)
    return total


STAGE1_FROZEN = ("tok_emb",)


def qformer_config_for(dataset: Dataset, n_queries: int, **overrides) -> Q.QFormerConfig:
    base = dict(n_queries=n_queries, vocab_size=dataset.tokenizer.vocab_size,
                max_text_len=dataset.max_text_len(),
                image_feature_dim=dataset.corpus_config.feature_dim)
    return Q.QFormerConfig(**{**base, **overrides})


@dataclass
class FitResult:
    params: dict
    opt_state: OptimizerState
    best_epoch: int
    val_history: list
    train_history: list
    lr_trace: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)


def fit(params: dict[str, np.ndarray], trainable: list[str], batch_loss: Callable, train_cases: list,
        val_cases: list, cfg: TrainConfig, rng: np.random.Generator,
        on_epoch: Callable | None = None) -> FitResult:
    """Generic loop: AdamW + warmup/cosine, best-validation-epoch selection (earliest on ties).

    ``batch_loss(leaves, cases, rng_or_None)`` returns a scalar tensor; the
    validation pass calls it with ``None``.
    """
    if not train_cases or not val_cases:
        raise ValueError("training and validation splits must be non-empty")
    n_batches = len(_batches(len(train_cases), cfg.batch_size))
    total_steps = cfg.epochs * n_batches
    if total_steps and cfg.warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps ({cfg.warmup_steps}) must be below total steps ({total_steps})")
    state = OptimizerState()
    best = FitResult(dict(params), copy.deepcopy(state), 0, [], [], rng_state=rng.bit_generator.state)
    best_val = math.inf
    step = 0
    lr_trace, val_history, train_history = [], [], []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(train_cases), cfg.batch_size, rng.permutation(len(train_cases))):
            lr = lr_at(step, cfg.warmup_steps, total_steps, cfg.peak_lr)
            leaves = Q.as_leaves(params, trainable)
            loss = batch_loss(leaves, [train_cases[i] for i in idx], rng)
            T.backward(loss)
            grads = {k: leaves[k].grad for k in trainable}
            if cfg.grad_clip:
                clip_grad_norm(grads, cfg.grad_clip)
            params, state = adamw_step(params, grads, state, lr, cfg.betas, cfg.weight_decay)
            lr_trace.append(lr)
            losses.append(float(loss.data))
            step += 1
        train_history.append(float(np.mean(losses)))
        val_history.append(evaluate_loss(params, batch_loss, val_cases, cfg.batch_size))
        log.info("epoch %d train %.4f val %.4f", epoch, train_history[-1], val_history[-1])
        if on_epoch is not None:
            on_epoch(epoch, train_history[-1], val_history[-1])
        if val_history[-1] < best_val:
            best_val = val_history[-1]
            best = FitResult(dict(params), copy.deepcopy(state), epoch, [], [], rng_state=rng.bit_generator.state)
    best.val_history, best.train_history, best.lr_trace = val_history, train_history, lr_trace
    return best


def evaluate_loss(params, batch_loss: Callable, cases: list, batch_size: int) -> float:
    """Case-weighted mean of the deterministic batch loss."""
    total, count = 0.0, 0
    with T.no_grad():
        leaves = Q.as_leaves(params)
        for idx in _batches(len(cases), batch_size):
            total += float(batch_loss(leaves, [cases[i] for i in idx], None).data) * len(idx)
            count += len(idx)
    return total / count


def init_stage1(dataset: Dataset, cfg: TrainConfig, **model_overrides) -> tuple[Q.QFormerConfig, dict]:
    qcfg = qformer_config_for(dataset, cfg.n_queries, **model_overrides)
    return qcfg, Q.init_params(qcfg, derive_rng(cfg.seed, "stage1", "init"))


def train_stage1(cfg: TrainConfig, dataset: Dataset, variant: Variant | str,
                 on_epoch: Callable | None = None, **model_overrides) -> Checkpoint:
    variant = Variant(variant)
    qcfg, params = init_stage1(dataset, cfg, **model_overrides)
    trainable = [k for k in params if k not in STAGE1_FROZEN]

    def batch_loss(P, cases, rng):
        return _weighted_total(stage1_losses(P, qcfg, dataset.tokenizer, cases, variant, cfg, rng), cfg.loss_weights)

    res = fit(params, trainable, batch_loss, dataset["train"], dataset["val"], cfg,
              derive_rng(cfg.seed, "stage1", "loop"), on_epoch)
    return Checkpoint(
        params=res.params, opt_state=res.opt_state, epoch=res.best_epoch,
        val_history=res.val_history, train_history=res.train_history,
        config={"stage": 1, "variant": variant.value, "train": cfg.to_dict(), "qformer": qcfg.to_dict(),
                "lr_trace": res.lr_trace},
        rng_state=res.rng_state,
    )


# -- stub LM -------------------------------------------------------------------------

def lm_batch_loss(P, lmcfg: LmConfig, bodies: list, prefix=None) -> T.Tensor:
    target = O.ItgTarget.build(bodies, BOS_ID, EOS_ID)
    logits = lm_forward(P, lmcfg, target.inputs, target.valid, prefix)
    return O.itg_loss(logits, target.labels, target.valid)


def pretrain_stub_lm(sequences: list, lm_config: LmConfig, seed: int = 0, epochs: int = 10,
                     batch_size: int = 32, peak_lr: float = 3e-3, warmup_steps: int = 20,
                     weight_decay: float = 0.01) -> StubLm:
    """Next-token training on report token sequences only (no images)."""
    if not sequences:
        raise ValueError("pretrain_stub_lm: empty corpus")
    lm = init_lm(lm_config, derive_rng(seed, "lm", "init"))
    if epochs == 0:
        return lm
    rng = derive_rng(seed, "lm", "loop")
    params = lm.params
    n_batches = len(_batches(len(sequences), batch_size))
    total = epochs * n_batches
    warmup = min(warmup_steps, max(total - 1, 0))
    state = OptimizerState()
    step = 0
    names = list(params)
    for _ in range(epochs):
        for idx in _batches(len(sequences), batch_size, rng.permutation(len(sequences))):
            leaves = T.parameters_to_leaves(params, names)
            loss = lm_batch_loss(leaves, lm_config, [sequences[i] for i in idx])
            T.backward(loss)
            params, state = adamw_step(params, {k: leaves[k].grad for k in names}, state,
                                       lr_at(step, warmup, total, peak_lr), weight_decay=weight_decay)
            step += 1
    return StubLm(lm_config, params)


def lm_token_loss(lm: StubLm, sequences: list, batch_size: int = 64) -> float:
    """Mean per-token next-token loss of the LM (no image prefix)."""
    total, count = 0.0, 0
    with T.no_grad():
        P = T.parameters_to_leaves(lm.params)
        for idx in _batches(len(sequences), batch_size):
            bodies = [sequences[i] for i in idx]
            n_tok = sum(len(b) + 1 for b in bodies)
            total += float(lm_batch_loss(P, lm.config, bodies).data) * n_tok
            count += n_tok
    return total / count


def save_lm(lm: StubLm, path) -> None:
    Checkpoint(params=lm.params, config={"lm": lm.config.to_dict()}).save(path)


def load_lm(path) -> StubLm:
    ck = Checkpoint.load(path)
    return StubLm(LmConfig(**ck.config["lm"]), ck.params)


# -- stage 2 -------------------------------------------------------------------------

PROJECTION = ("stage2_projection.w", "stage2_projection.b")


def init_stage2(cfg: TrainConfig, stage1_ckpt: Checkpoint, lm: StubLm) -> tuple[Q.QFormerConfig, dict]:
    """Stage-1 weights with a freshly initialised query set of the stage-2 size and a new projection."""
    qcfg = replace(Q.QFormerConfig(**stage1_ckpt.config["qformer"]), n_queries=cfg.n_queries)
    rng = derive_rng(cfg.seed, "stage2", "init")
    params = {k: v for k, v in stage1_ckpt.params.items() if not k.startswith("stage2_projection")}
    dtype = params["query_embeddings"].dtype
    params["query_embeddings"] = (rng.standard_normal((qcfg.n_queries, qcfg.hidden_dim)) * qcfg.init_std).astype(dtype)
    existing = stage1_ckpt.params.get(PROJECTION[0])
    if existing is not None and existing.shape[1] != lm.config.dim:
        raise ValueError(f"projection width {existing.shape[1]} does not match lm dim {lm.config.dim}")
    params[PROJECTION[0]] = (rng.standard_normal((qcfg.hidden_dim, lm.config.dim)) * qcfg.init_std).astype(dtype)
    params[PROJECTION[1]] = np.zeros(lm.config.dim, dtype=dtype)
    if lm.config.vocab_size != qcfg.vocab_size:
        raise ValueError("lm vocabulary size differs from the Q-Former vocabulary size")
    return qcfg, params


def stage2_prefix(P, qcfg: Q.QFormerConfig, tiles, tvalid) -> T.Tensor:
    q = Q.encode_image_batch(P, qcfg, tiles, tvalid)
    return T.linear(q, P[PROJECTION[0]], P[PROJECTION[1]])


def train_stage2(cfg: TrainConfig, dataset: Dataset, variant: Variant | str, stage1_ckpt: Checkpoint,
                 lm: StubLm, on_epoch: Callable | None = None) -> Checkpoint:
    variant = Variant(variant)
    qcfg, qparams = init_stage2(cfg, stage1_ckpt, lm)
    params = {**qparams, **lm.params}
    trainable = [k for k in qparams if k not in STAGE1_FROZEN] + list(HEAD)
    lmcfg = lm.config

    def batch_loss(P, cases, rng):
        tiles, tvalid = Q.pad_bags([_select_tiles(c, cfg.max_tiles_per_case, rng) for c in cases],
                                   dtype=P["query_embeddings"].dtype)
        prefix = stage2_prefix(P, qcfg, tiles, tvalid)
        return lm_batch_loss(P, lmcfg, [report_body(c, variant, dataset.tokenizer) for c in cases], prefix)

    res = fit(params, trainable, batch_loss, dataset["train"], dataset["val"], cfg,
              derive_rng(cfg.seed, "stage2", "loop"), on_epoch)
    kept = {k: v for k, v in res.params.items() if not k.startswith("lm.") or k in HEAD}
    opt = res.opt_state
    return Checkpoint(
        params=kept, opt_state=opt, epoch=res.best_epoch, val_history=res.val_history,
        train_history=res.train_history,
        config={"stage": 2, "variant": variant.value, "train": cfg.to_dict(), "qformer": qcfg.to_dict(),
                "lm": lmcfg.to_dict(), "lr_trace": res.lr_trace},
        rng_state=res.rng_state,
    )


def stage2_val_loss(ckpt: Checkpoint, lm: StubLm, cases: list, variant, tokenizer, max_tiles: int,
                    batch_size: int = 36) -> float:
    qcfg = Q.QFormerConfig(**ckpt.config["qformer"])
    params = merged_stage2_params(ckpt, lm)

    def batch_loss(P, batch, rng):
        tiles, tvalid = Q.pad_bags([_select_tiles(c, max_tiles, None) for c in batch], dtype=P["query_embeddings"].dtype)
        return lm_batch_loss(P, lm.config, [report_body(c, variant, tokenizer) for c in batch],
                             stage2_prefix(P, qcfg, tiles, tvalid))

    return evaluate_loss(params, batch_loss, cases, batch_size)


def merged_stage2_params(ckpt: Checkpoint, lm: StubLm) -> dict[str, np.ndarray]:
    """LM body from ``lm``; Q-Former, projection and trained LM head from the checkpoint."""
    return {**lm.params, **ckpt.params}


# -- decoding ----------------------------------------------------------------------

def _next_logprobs(P, qcfg, lmcfg, prefix, seqs: np.ndarray) -> np.ndarray:
    logits = lm_forward(P, lmcfg, seqs, None, prefix).data[:, -1].astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def generate_batch(ckpt: Checkpoint, lm: StubLm, bags: list[np.ndarray], max_len: int,
                   max_tiles: int | None = None) -> list[list[int]]:
    """Greedy decoding for several cases at once; each output stops after EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    qcfg = Q.QFormerConfig(**ckpt.config["qformer"])
    lmcfg = lm.config
    max_len = min(max_len, lmcfg.max_len)
    if max_tiles is None:
        max_tiles = ckpt.config.get("train", {}).get("max_tiles_per_case", 256)
    with T.no_grad():
        P = T.parameters_to_leaves(merged_stage2_params(ckpt, lm))
        tiles, tvalid = Q.pad_bags([b[:max_tiles] for b in bags], dtype=P["query_embeddings"].dtype)
        prefix = stage2_prefix(P, qcfg, tiles, tvalid)
        seqs = np.full((len(bags), 1), BOS_ID, dtype=np.int64)
        done = np.zeros(len(bags), dtype=bool)
        outs: list[list[int]] = [[] for _ in bags]
        for _ in range(max_len):
            nxt = _next_logprobs(P, qcfg, lmcfg, prefix, seqs).argmax(axis=-1)
            for i in np.nonzero(~done)[0]:
                outs[i].append(int(nxt[i]))
            done |= nxt == EOS_ID
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return outs


def generate_report(ckpt: Checkpoint, lm: StubLm, tile_features: np.ndarray, max_len: int,
                    strategy: str = "greedy", beam_width: int = 1, max_tiles: int | None = None) -> list[int]:
    """Decode one report conditioned on a case's tiles (greedy or beam search)."""
    if strategy == "greedy":
        return generate_batch(ckpt, lm, [tile_features], max_len, max_tiles)[0]
    if strategy != "beam":
        raise ValueError(f"unknown decoding strategy {strategy!r}")
    return _beam_search(ckpt, lm, tile_features, max_len, beam_width, max_tiles)


def _beam_search(ckpt, lm, tile_features, max_len, width, max_tiles):
    if width < 1 or max_len < 1:
        raise ValueError("beam width and max_len must be >= 1")
    qcfg = Q.QFormerConfig(**ckpt.config["qformer"])
    lmcfg = lm.config
    max_len = min(max_len, lmcfg.max_len)
    if max_tiles is None:
        max_tiles = ckpt.config.get("train", {}).get("max_tiles_per_case", 256)
    with T.no_grad():
        P = T.parameters_to_leaves(merged_stage2_params(ckpt, lm))
        tiles, tvalid = Q.pad_bags([tile_features[:max_tiles]], dtype=P["query_embeddings"].dtype)
        prefix = stage2_prefix(P, qcfg, tiles, tvalid)
        beams = [([], 0.0, False)]  # (generated tokens, log-prob, finished)
        for _ in range(max_len):
            live = [b for b in beams if not b[2]]
            if not live:
                break
            seqs = np.array([[BOS_ID] + b[0] for b in live], dtype=np.int64)
            pre = T.Tensor(np.repeat(prefix.data, len(live), axis=0))
            lp = _next_logprobs(P, qcfg, lmcfg, pre, seqs)
            pool = [b for b in beams if b[2]]
            for k, (toks, score, _) in enumerate(live):
                top = np.argsort(-lp[k], kind="stable")[:width]
                pool.extend((toks + [int(t)], score + float(lp[k, t]), int(t) == EOS_ID) for t in top)
            order = sorted(range(len(pool)), key=lambda i: -pool[i][1])
            beams = [pool[i] for i in order[:width]]
        return max(beams, key=lambda b: b[1])[0]
