"""Small decoder-only language model standing in for a pretrained biomedical LM."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .qformer import feed_forward, init_array, multi_head_attention
from .tensor import Tensor

HEAD = ("lm.head.w", "lm.head.b")


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 128
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 80
    ffn_mult: int = 4
    init_std: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StubLm:
    config: LmConfig
    params: dict[str, np.ndarray]

    @property
    def trainable_in_stage2(self) -> tuple[str, ...]:
        return HEAD


def param_shapes(cfg: LmConfig) -> dict[str, tuple]:
    d = cfg.dim
    shapes = {"lm.tok_emb": (cfg.vocab_size, d), "lm.pos_emb": (cfg.max_len, d)}
    for b in range(cfg.n_layers):
        p = f"lm.blocks.{b}.attn"
        shapes.update({f"{p}.ln_g": (d,), f"{p}.ln_b": (d,), f"{p}.wq": (d, d), f"{p}.bq": (d,),
                       f"{p}.wk": (d, d), f"{p}.bk": (d,), f"{p}.wv": (d, d), f"{p}.bv": (d,),
                       f"{p}.wo": (d, d), f"{p}.bo": (d,)})
        p = f"lm.blocks.{b}.ffn"
        m = cfg.ffn_mult * d
        shapes.update({f"{p}.ln_g": (d,), f"{p}.ln_b": (d,), f"{p}.w1": (d, m), f"{p}.b1": (m,),
                       f"{p}.w2": (m, d), f"{p}.b2": (d,)})
    shapes.update({"lm.ln_f_g": (d,), "lm.ln_f_b": (d,), "lm.head.w": (d, cfg.vocab_size), "lm.head.b": (cfg.vocab_size,)})
    return shapes


def init_lm(cfg: LmConfig, rng: np.random.Generator, dtype=np.float32) -> StubLm:
    params = {k: init_array(k, s, rng, cfg.init_std, dtype) for k, s in param_shapes(cfg).items()}
    return StubLm(cfg, params)


def lm_forward(P: dict[str, Tensor], cfg: LmConfig, token_ids, token_valid=None,
               prefix: Tensor | None = None) -> Tensor:
    """Next-token logits [B, L, V] for the text positions.

    ``prefix`` [B, P, dim] is prepended to the embedded tokens without
    positional embeddings; text positions keep positions 0..L-1. The whole
    sequence is causally masked.
    """
    token_ids = np.asarray(token_ids)
    b, n = token_ids.shape
    if n > cfg.max_len:
        raise ValueError(f"lm_forward: length {n} exceeds max_len {cfg.max_len}")
    if token_valid is None:
        token_valid = np.ones(token_ids.shape, dtype=bool)
    x = T.getitem(P["lm.tok_emb"], token_ids) + T.getitem(P["lm.pos_emb"], slice(0, n))
    n_prefix = 0
    if prefix is not None:
        if prefix.shape[-1] != cfg.dim:
            raise ValueError(f"lm_forward: prefix width {prefix.shape[-1]} != lm dim {cfg.dim}")
        n_prefix = prefix.shape[1]
        x = T.concat([prefix, x], axis=1)
    s = n_prefix + n
    key_valid = np.ones((b, s), dtype=bool)
    key_valid[:, n_prefix:] = token_valid
    mask = np.tril(np.ones((s, s), dtype=bool))[None, None] & key_valid[:, None, None, :]
    for layer in range(cfg.n_layers):
        p = f"lm.blocks.{layer}.attn"
        h = T.layer_norm(x, P[f"{p}.ln_g"], P[f"{p}.ln_b"])
        x = x + multi_head_attention(P, p, h, h, mask, cfg.n_heads)
        x = feed_forward(P, f"lm.blocks.{layer}.ffn", x)
    x = T.layer_norm(x, P["lm.ln_f_g"], P["lm.ln_f_b"])
    if n_prefix:
        x = T.getitem(x, (slice(None), slice(n_prefix, None)))
    return T.linear(x, P["lm.head.w"], P["lm.head.b"])
