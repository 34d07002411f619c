"""Independent reference implementations used as test oracles."""

import numpy as np


def classical_gs(E):
    """Classical Gram-Schmidt: every projection uses the original column.

    e'_j = e_j - sum_{i<j} <e'_i, e_j> / <e'_i, e'_i> e'_i
    """
    E = np.asarray(E, dtype=float)
    d, k = E.shape
    out = np.zeros_like(E)
    for j in range(k):
        v = E[:, j].copy()
        for i in range(j):
            u = out[:, i]
            v -= (u @ E[:, j]) / (u @ u) * u
        out[:, j] = v
    return out


def mixture_reference(W0, As, Bs, G, h, scale):
    """Plain mixture of LoRA experts with softmax gates, written with numpy only.

    Row-vector convention, y = h W0^T + sum_i g_i (h A_i^T B_i^T) * scale, with
    the expert terms summed left to right before the base is added, so the
    result can be compared bitwise.
    """
    logits = h @ G.T
    z = np.exp(logits - logits.max())
    g = z / z.sum()
    mix = None
    for gi, A, B in zip(g, As, Bs):
        term = gi * (((h @ A.T) @ B.T) * scale)
        mix = term if mix is None else mix + term
    return h @ W0.T + mix


def mean_abs_cos(vectors):
    """Mean |cos| over distinct pairs of the given list of 1-D vectors."""
    vals = []
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            a, b = vectors[i], vectors[j]
            vals.append(abs(float(np.dot(a, b))) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.mean(vals))
