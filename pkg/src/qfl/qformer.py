"""Querying Transformer.

Two transformer submodules run over one concatenated sequence
``queries ‖ text``. They share every self-attention layer; the query part
additionally cross-attends to the tile features of a case in blocks with an
even index, and each part has its own feed-forward layers. Blocks use
pre-layer-norm residual connections.

Parameters are a flat ``dict[str, np.ndarray]``. Forward functions receive
the same dict wrapped as :class:`~qfl.tensor.Tensor` leaves (see
:func:`as_leaves`) so the training loop can choose which names get gradients.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MaskMode(str, enum.Enum):
    UNIMODAL = "unimodal"
    BIDIRECTIONAL = "bidirectional"
    MULTIMODAL_CAUSAL = "multimodal_causal"


@dataclass(frozen=True)
class QFormerConfig:
    n_blocks: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    n_queries: int = 16
    image_feature_dim: int = 192
    vocab_size: int = 128
    max_text_len: int = 64
    ffn_mult: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.n_queries < 1 or self.n_blocks < 1:
            raise ValueError("n_queries and n_blocks must be >= 1")

    def has_cross_attention(self, block: int) -> bool:
        return block % 2 == 0

    def to_dict(self) -> dict:
        return asdict(self)


def build_attention_mask(mode: MaskMode | str, n_queries: int, text_len: int) -> np.ndarray:
    """Boolean [S, S] self-attention mask over ``queries ‖ text`` (True = may attend)."""
    mode = MaskMode(mode)
    s = n_queries + text_len
    if mode is MaskMode.BIDIRECTIONAL:
        return np.ones((s, s), dtype=bool)
    mask = np.zeros((s, s), dtype=bool)
    mask[:n_queries, :n_queries] = True
    if mode is MaskMode.UNIMODAL:
        mask[n_queries:, n_queries:] = True
    else:
        mask[n_queries:, :n_queries] = True
        mask[n_queries:, n_queries:] = np.tril(np.ones((text_len, text_len), dtype=bool))
    return mask


# -- parameters ------------------------------------------------------------

def _attn_shapes(prefix: str, d: int, kv_dim: int) -> dict[str, tuple]:
    return {
        f"{prefix}.ln_g": (d,), f"{prefix}.ln_b": (d,),
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (kv_dim, d), f"{prefix}.bk": (d,),
        f"{prefix}.wv": (kv_dim, d), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
    }


def _ffn_shapes(prefix: str, d: int, mult: int) -> dict[str, tuple]:
    return {
        f"{prefix}.ln_g": (d,), f"{prefix}.ln_b": (d,),
        f"{prefix}.w1": (d, mult * d), f"{prefix}.b1": (mult * d,),
        f"{prefix}.w2": (mult * d, d), f"{prefix}.b2": (d,),
    }


def param_shapes(cfg: QFormerConfig) -> dict[str, tuple]:
    d = cfg.hidden_dim
    shapes: dict[str, tuple] = {
        "query_embeddings": (cfg.n_queries, d),
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_text_len, d),
    }
    for b in range(cfg.n_blocks):
        shapes.update(_attn_shapes(f"blocks.{b}.sa", d, d))
        if cfg.has_cross_attention(b):
            shapes.update(_attn_shapes(f"blocks.{b}.ca", d, cfg.image_feature_dim))
        shapes.update(_ffn_shapes(f"blocks.{b}.ffn_img", d, cfg.ffn_mult))
        shapes.update(_ffn_shapes(f"blocks.{b}.ffn_txt", d, cfg.ffn_mult))
    shapes.update({
        "ln_img_g": (d,), "ln_img_b": (d,),
        "ln_txt_g": (d,), "ln_txt_b": (d,),
        "itg_head.w": (d, cfg.vocab_size), "itg_head.b": (cfg.vocab_size,),
        "itm_head.w": (d, 1), "itm_head.b": (1,),
        "log_temperature": (),
    })
    return shapes


def init_array(name: str, shape: tuple, rng: np.random.Generator, std: float, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("_g"):
        return np.ones(shape, dtype=dtype)
    if leaf.endswith("_b") or (leaf.startswith("b") and len(shape) == 1):
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_params(cfg: QFormerConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "log_temperature":
            params[name] = np.asarray(math.log(0.07), dtype=dtype)
        else:
            params[name] = init_array(name, shape, rng, cfg.init_std, dtype)
    return params


def as_leaves(params: dict[str, np.ndarray], trainable=()) -> dict[str, Tensor]:
    return T.parameters_to_leaves(params, trainable)


# -- building blocks ---------------------------------------------------------

def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head_attention(P: dict[str, Tensor], prefix: str, x: Tensor, kv: Tensor,
                         mask: np.ndarray | None, n_heads: int) -> Tensor:
    """``x`` [B, n, D] attends to ``kv`` [B, m, Dkv]; mask broadcasts to [B, 1, n, m]."""
    q = _heads(T.linear(x, P[f"{prefix}.wq"], P[f"{prefix}.bq"]), n_heads)
    k = _heads(T.linear(kv, P[f"{prefix}.wk"], P[f"{prefix}.bk"]), n_heads)
    v = _heads(T.linear(kv, P[f"{prefix}.wv"], P[f"{prefix}.bv"]), n_heads)
    out = _merge_heads(T.scaled_dot_attention(q, k, v, mask))
    return T.linear(out, P[f"{prefix}.wo"], P[f"{prefix}.bo"])


def feed_forward(P: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = T.layer_norm(x, P[f"{prefix}.ln_g"], P[f"{prefix}.ln_b"])
    h = T.gelu(T.linear(h, P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    return x + T.linear(h, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


def embed_text(P: dict[str, Tensor], token_ids: np.ndarray) -> Tensor:
    token_ids = np.asarray(token_ids)
    emb = T.getitem(P["tok_emb"], token_ids)
    return emb + T.getitem(P["pos_emb"], slice(0, token_ids.shape[-1]))


# -- forward passes ------------------------------------------------------------

def forward(P: dict[str, Tensor], cfg: QFormerConfig, *, tiles=None, tile_valid=None,
            token_ids=None, token_valid=None, mode: MaskMode | str = MaskMode.BIDIRECTIONAL,
            with_queries: bool = True) -> tuple[Tensor | None, Tensor | None]:
    """Batched pass over ``queries ‖ text``.

    ``tiles`` is [B, n_tiles, F] (padded; ``tile_valid`` marks real rows),
    ``token_ids`` is [B, L] (``token_valid`` marks non-pad positions). Either
    side may be omitted. Returns ``(query_states [B, nq, D], text_states [B, L, D])``.
    """
    mode = MaskMode(mode)
    streams = []
    batch = None
    nq = 0
    if with_queries:
        tiles = tiles if isinstance(tiles, Tensor) else Tensor(tiles, dtype=P["query_embeddings"].dtype)
        if tiles.ndim != 3 or tiles.shape[1] == 0:
            raise ValueError("forward: tile bag must be non-empty [B, n_tiles, F]")
        if tiles.shape[2] != cfg.image_feature_dim:
            raise ValueError(f"forward: tile features have width {tiles.shape[2]}, expected {cfg.image_feature_dim}")
        batch, nq = tiles.shape[0], P["query_embeddings"].shape[0]
        if tile_valid is None:
            tile_valid = np.ones(tiles.shape[:2], dtype=bool)
        tile_valid = np.asarray(tile_valid, dtype=bool)
        if not tile_valid.any(axis=1).all():
            raise ValueError("forward: a case has no valid tiles")
        qe = P["query_embeddings"]
        streams.append(T.add(Tensor(np.zeros((batch,) + qe.shape, dtype=qe.dtype)), qe))
    text_len = 0
    if token_ids is not None:
        token_ids = np.asarray(token_ids)
        if token_ids.ndim != 2:
            raise ValueError("forward: token_ids must be [B, L]")
        text_len = token_ids.shape[1]
        if text_len > cfg.max_text_len:
            raise ValueError(f"forward: text length {text_len} exceeds max_text_len {cfg.max_text_len}")
        if batch is not None and token_ids.shape[0] != batch:
            raise ValueError("forward: image and text batch sizes differ")
        batch = token_ids.shape[0]
        if token_valid is None:
            token_valid = np.ones(token_ids.shape, dtype=bool)
        token_valid = np.asarray(token_valid, dtype=bool)
        streams.append(embed_text(P, token_ids))
    if batch is None:
        raise ValueError("forward: nothing to encode")

    sa_mask = build_attention_mask(mode, nq, text_len)[None, None]
    key_valid = np.ones((batch, nq + text_len), dtype=bool)
    if text_len:
        key_valid[:, nq:] = token_valid
    sa_mask = sa_mask & key_valid[:, None, None, :]
    ca_mask = tile_valid[:, None, None, :] if nq else None

    qx = streams[0] if nq else None
    tx = streams[-1] if text_len else None
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}.sa"
        h = qx if tx is None else (tx if qx is None else T.concat([qx, tx], axis=1))
        hn = T.layer_norm(h, P[f"{pre}.ln_g"], P[f"{pre}.ln_b"])
        h = h + multi_head_attention(P, pre, hn, hn, sa_mask, cfg.n_heads)
        if nq and text_len:
            qx, tx = T.getitem(h, (slice(None), slice(0, nq))), T.getitem(h, (slice(None), slice(nq, None)))
        elif nq:
            qx = h
        else:
            tx = h
        if nq and cfg.has_cross_attention(b):
            pre = f"blocks.{b}.ca"
            qn = T.layer_norm(qx, P[f"{pre}.ln_g"], P[f"{pre}.ln_b"])
            qx = qx + multi_head_attention(P, pre, qn, tiles, ca_mask, cfg.n_heads)
        if nq:
            qx = feed_forward(P, f"blocks.{b}.ffn_img", qx)
        if text_len:
            tx = feed_forward(P, f"blocks.{b}.ffn_txt", tx)

    q_out = T.layer_norm(qx, P["ln_img_g"], P["ln_img_b"]) if nq else None
    t_out = T.layer_norm(tx, P["ln_txt_g"], P["ln_txt_b"]) if text_len else None
    return q_out, t_out


def encode_image_batch(P, cfg, tiles, tile_valid=None) -> Tensor:
    return forward(P, cfg, tiles=tiles, tile_valid=tile_valid)[0]


def encode_text_batch(P, cfg, token_ids, token_valid=None, cls_id: int | None = None) -> Tensor:
    token_ids = np.asarray(token_ids)
    if cls_id is not None and not np.all(token_ids[:, 0] == cls_id):
        raise ValueError("encode_text: sequences must start with the CLS token")
    _, states = forward(P, cfg, token_ids=token_ids, token_valid=token_valid,
                        mode=MaskMode.UNIMODAL, with_queries=False)
    return T.getitem(states, (slice(None), 0))


def encode_image(P, cfg, tile_features) -> Tensor:
    """Query states [n_queries, hidden] for one case's tile bag."""
    tile_features = tile_features if isinstance(tile_features, Tensor) else Tensor(tile_features, dtype=P["query_embeddings"].dtype)
    if tile_features.ndim != 2 or tile_features.shape[0] == 0:
        raise ValueError("encode_image: empty tile bag")
    out = encode_image_batch(P, cfg, T.reshape(tile_features, (1,) + tile_features.shape))
    return T.getitem(out, 0)


def encode_text(P, cfg, token_ids, cls_id: int = 1) -> Tensor:
    """Final-layer state [hidden] at the CLS position."""
    ids = np.asarray(token_ids)[None]
    if ids.shape[1] == 0:
        raise ValueError("encode_text: empty sequence")
    return T.getitem(encode_text_batch(P, cfg, ids, cls_id=cls_id), 0)


def joint_forward(P, cfg, tile_features, token_ids, mode: MaskMode | str) -> tuple[Tensor, Tensor]:
    """Single-case ``(query_states [nq, D], text_states [L, D])``."""
    tile_features = tile_features if isinstance(tile_features, Tensor) else Tensor(tile_features, dtype=P["query_embeddings"].dtype)
    if tile_features.ndim != 2 or tile_features.shape[0] == 0:
        raise ValueError("joint_forward: empty tile bag")
    q, t = forward(P, cfg, tiles=T.reshape(tile_features, (1,) + tile_features.shape),
                   token_ids=np.asarray(token_ids)[None], mode=mode)
    return T.getitem(q, 0), T.getitem(t, 0)


def pad_bags(bags: list[np.ndarray], max_tiles: int | None = None, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length tile bags into [B, n_max, F] plus a validity mask."""
    if max_tiles is not None:
        bags = [b[:max_tiles] for b in bags]
    n = max(len(b) for b in bags)
    out = np.zeros((len(bags), n, bags[0].shape[1]), dtype=dtype)
    valid = np.zeros((len(bags), n), dtype=bool)
    for i, b in enumerate(bags):
        out[i, :len(b)] = b
        valid[i, :len(b)] = True
    return out, valid


def pad_sequences(seqs: list, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid
