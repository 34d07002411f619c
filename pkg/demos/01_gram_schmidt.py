"""Orthogonalizing a stack of expert vectors.

Run: python3 demos/01_gram_schmidt.py
"""

import warnings

import numpy as np

from omoe import Tensor, gram_schmidt, orthogonality_defect, stiefel_residual
from omoe.orthogonalize import DegenerateStackWarning
from omoe.tensor import finite_diff_check

# %% Two experts in 2-D: columns (1,1) and (1,0).
E = np.array([[1.0, 1.0],
              [1.0, 0.0]])
print("input columns:\n", E)
print("orthogonal:\n", gram_schmidt(Tensor(E)).data)        # (1,1), (0.5,-0.5)
print("orthonormal:\n", gram_schmidt(Tensor(E), "orthonormal").data)

# %% The first column never moves, later ones lose their overlap with earlier ones.
rng = np.random.default_rng(0)
E = rng.normal(size=(32, 5))
out = gram_schmidt(Tensor(E)).data
print("first column unchanged:", np.array_equal(out[:, 0], E[:, 0]))
print("largest |cos| before: %.3f  after: %.1e" % (orthogonality_defect(E), orthogonality_defect(out)))
print("stiefel residual (orthonormal): %.1e" % stiefel_residual(gram_schmidt(Tensor(E), "orthonormal")))

# %% Leading axes are batch axes: one stack per token.
tokens = rng.normal(size=(8, 16, 32, 3))   # batch x seq x d x experts
print("batched output shape:", gram_schmidt(Tensor(tokens)).shape)

# %% Collinear experts cannot be orthogonalized; the residual is ~0 and flagged.
E = np.array([[1.0, 2.0], [0.0, 0.0]])
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    out, mask = gram_schmidt(Tensor(E), return_mask=True)
print("degenerate:", bool(mask), "| residual:", out.data[:, 1],
      "| warned:", any(issubclass(w.category, DegenerateStackWarning) for w in caught))

# %% Gram-Schmidt is built from differentiable primitives, so gradients come for free.
E = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)))
print("finite-difference rel. error: %.1e" % finite_diff_check(lambda t: (gram_schmidt(t) * w).sum(), E))
