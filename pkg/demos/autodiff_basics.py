"""
Reverse-mode gradients on numpy arrays
======================================

A Tensor remembers how it was made, so ``backward`` can push gradients back
to the leaves. ``grad_check`` compares those gradients with central
differences.
"""

import numpy as np

from qfl import tensor as T
from qfl.tensor import Tensor

# a leaf that tracks gradients, and a small scalar function of it
x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
y = (T.tanh(x) * x).sum()
T.backward(y)
print("f(x)      =", y.item())
print("autodiff  =", x.grad)
print("by hand   =", np.tanh(x.data) + x.data * (1 - np.tanh(x.data) ** 2))

# the same check, automated; the number is the worst relative error
print("grad_check:", T.grad_check(lambda v: (T.tanh(v) * v).sum(), x.data))

# attention with a mask: the second query may only look at the first key
r = np.random.default_rng(0)
q, k, v = (Tensor(r.normal(size=s)) for s in ((2, 4), (3, 4), (3, 2)))
mask = np.array([[True, True, True], [True, False, False]])
print("masked row equals v[0]:", np.allclose(T.scaled_dot_attention(q, k, v, mask).data[1], v.data[0]))

# no_grad skips graph construction entirely
with T.no_grad():
    z = T.exp(x).sum()
print("requires_grad under no_grad:", z.requires_grad)
