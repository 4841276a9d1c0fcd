"""
Recall@k, ranks and their uncertainty
=====================================

Rows are images, columns are reports; the diagonal holds the true pairs.
Only the queries are resampled for the interval, the gallery stays fixed.
"""

import numpy as np

from qfl import evaluation as E

rng = np.random.default_rng(0)
n = 60
sim = rng.normal(size=(n, n)) + 2.0 * np.eye(n)

for direction in E.DIRECTIONS:
    values, ci = E.retrieval_metrics(sim, direction, n_resamples=1000, seed=0)
    print(direction)
    for name in ("R@1", "R@5", "R@10", "MeanRank", "MedianRank"):
        lo, hi = ci[name]
        print(f"  {name:10s} {values[name]:7.3f}  [{lo:.3f}, {hi:.3f}]")

# ties are broken towards the smaller gallery index
print("all-equal ranks:", E.match_ranks(np.ones((4, 4)), "image_to_text").tolist())
print("recall@N is always 1:", E.recall_at_k(sim, n, "text_to_image"))
