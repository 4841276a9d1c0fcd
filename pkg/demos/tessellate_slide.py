"""
Cutting a slide into tiles
==========================

A slide is a tissue mask plus an exclusion mask (pen marks). The grid starts
at the top-left corner; a tile survives when at least 5% of it is tissue and
none of it is marked.
"""

import numpy as np

from qfl.tessellation import TessellationSpec, synthetic_slide, tessellate

rng = np.random.default_rng(4)
tissue, pen = synthetic_slide(rng, size=64, pen_probability=1.0)
kept = tessellate(TessellationSpec(tissue, pen, tile_size=8))
print(f"{tissue.mean():.1%} tissue, {pen.sum()} pen pixels, {len(kept)} of 64 tiles kept")

# draw the grid: '#' kept, 'x' rejected for the pen, '.' too little tissue
for r in range(0, 64, 8):
    row = ""
    for c in range(0, 64, 8):
        if (r, c) in kept:
            row += "#"
        elif pen[r:r + 8, c:c + 8].any() and tissue[r:r + 8, c:c + 8].mean() >= 0.05:
            row += "x"
        else:
            row += "."
    print(row)

# the threshold is inclusive: 20 tissue pixels in a 20x20 tile is exactly 5%
m = np.zeros((20, 20), bool)
m.flat[:20] = True
print("exactly 5% kept:", tessellate(TessellationSpec(m, np.zeros_like(m), 20)) == [(0, 0)])
