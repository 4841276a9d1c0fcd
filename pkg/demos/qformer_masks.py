"""
One Q-Former, three attention patterns
======================================

Queries and text share self-attention; the mask decides who sees whom.
Here we perturb one side and watch which outputs move.
"""

import numpy as np

from qfl import qformer as Q

cfg = Q.QFormerConfig(n_blocks=2, hidden_dim=16, n_heads=2, n_queries=4, image_feature_dim=12,
                      vocab_size=30, max_text_len=10)
P = Q.as_leaves(Q.init_params(cfg, np.random.default_rng(0), dtype=np.float64))
rng = np.random.default_rng(1)
tiles = rng.normal(size=(1, 5, 12))
ids = rng.integers(6, 30, size=(1, 8))
other = ids.copy()
other[0, 5:] = rng.integers(6, 30, size=3)

for mode in Q.MaskMode:
    print(mode.value)
    print(Q.build_attention_mask(mode, 2, 3).astype(int))
    qa, ta = Q.forward(P, cfg, tiles=tiles, token_ids=ids, mode=mode)
    qb, tb = Q.forward(P, cfg, tiles=tiles, token_ids=other, mode=mode)
    # changing tokens 5.. should leave queries alone except in the bidirectional mode
    print("  query shift:", float(np.abs(qa.data - qb.data).max()))
    print("  text shift at positions 0-4:", float(np.abs(ta.data[0, :5] - tb.data[0, :5]).max()))
