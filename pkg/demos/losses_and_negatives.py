"""
The three stage-1 objectives
============================

Contrastive (ITC) over in-batch pairs, matching (ITM) on sampled hard
negatives, and generation (ITG) by teacher forcing.
"""

import math

import numpy as np

from qfl import objectives as O
from qfl.tensor import Tensor

rng = np.random.default_rng(0)
n, nq, d = 6, 4, 8
x = rng.normal(size=(n, nq, d))
x /= np.linalg.norm(x, axis=-1, keepdims=True)
y = x[np.arange(n), rng.integers(0, nq, n)] + 0.3 * rng.normal(size=(n, d))
y /= np.linalg.norm(y, axis=-1, keepdims=True)

sim = O.pairwise_similarity(Tensor(x), Tensor(y))
print("similarity diagonal:", np.round(np.diag(sim.data), 3))
tau = Tensor(np.asarray(0.07))
print("ITC, smoothed targets:", O.itc_loss(Tensor(x), Tensor(y), tau, 0.9).item())
print("ITC, one-hot targets: ", O.itc_loss(Tensor(x), Tensor(y), tau, 1.0).item())

# negatives are drawn in proportion to exp(sim / tau), never the true partner
neg_text = O.mine_hard_negatives(sim.data, "text_for_image", rng, 0.07)
neg_image = O.mine_hard_negatives(sim.data, "image_for_text", rng, 0.07)
batch = O.ItmBatch.from_negatives(neg_text, neg_image)
print("ITM pairs:", len(batch.labels), "positives:", int(batch.labels.sum()))
states = Tensor(rng.normal(size=(len(batch.labels), nq, d)))
print("ITM with a random head:", O.itm_loss(states, batch.labels, Tensor(rng.normal(size=(d, 1)) * 0.1),
                                            Tensor(np.zeros(1))).item())

# uniform logits cost log(V) per token
print("ITG on uniform logits:", O.itg_loss(Tensor(np.zeros((2, 5, 40))), np.ones((2, 5), int)).item(),
      "vs log 40 =", math.log(40))
