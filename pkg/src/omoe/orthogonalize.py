"""Gram-Schmidt orthogonalization of per-token expert representations.

An expert stack is a ``d x k`` matrix whose column ``i`` is expert ``i``'s
output for one token (any leading batch axes are allowed: ``[..., d, k]``).
The orthogonal map is

    e'_j = e_j - sum_{i<j} <e'_i, e_j> / <e'_i, e'_i> * e'_i

evaluated in the modified (sequential re-projection) order, which is the
same map in exact arithmetic and loses less orthogonality in floating point.
Everything is composed from differentiable tensor primitives, so the
backward pass comes from the autodiff engine.
"""

from __future__ import annotations

import enum
import warnings

import numpy as np

from .errors import ContractError, DegenerateStackError, DimensionError
from .tensor import Tensor, as_tensor, stack, where

DEFAULT_EPS = 1e-8


class OrthoMode(enum.Enum):
    ORTHOGONAL = "orthogonal"
    ORTHONORMAL = "orthonormal"
    OFF = "off"

    @classmethod
    def parse(cls, value):
        if isinstance(value, OrthoMode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractError(f"ortho_mode must be orthogonal/orthonormal/off, got {value!r}") from None


class DegenerateStackWarning(RuntimeWarning):
    pass


def gram_schmidt_columns(columns, mode=OrthoMode.ORTHOGONAL, eps=DEFAULT_EPS):
    """Orthogonalize a list of column tensors, each shaped ``[..., d]``.

    Returns ``(outputs, degenerate)`` where ``degenerate`` is a boolean array
    over the leading axes, true for every token in which some residual had
    squared norm below ``eps``.  Projections onto a degenerate residual are
    skipped; the residual itself is passed through.  In orthonormal mode the
    degenerate columns are left unnormalized, so callers must check the mask.
    """
    mode = OrthoMode.parse(mode)
    if eps <= 0:
        raise ContractError("eps must be positive")
    columns = list(columns)
    if not columns:
        raise ContractError("need at least one expert column")
    lead = columns[0].shape[:-1]
    degenerate = np.zeros(lead, dtype=bool)
    if mode is OrthoMode.OFF:
        return columns, degenerate

    outputs, sq_norms, flags = [], [], []
    for j, e in enumerate(columns):
        v = e
        for i in range(j):
            u = outputs[i]
            coef = (u * v).sum(axis=-1, keepdims=True) / sq_norms[i]
            if flags[i].any():
                coef = where(flags[i][..., None], 0.0, coef)
            v = v - coef * u
        n2 = (v * v).sum(axis=-1, keepdims=True)
        flag = n2.data[..., 0] < eps
        if flag.any():
            n2 = where(flag[..., None], 1.0, n2)
            degenerate |= flag
        outputs.append(v)
        sq_norms.append(n2)
        flags.append(flag)

    if mode is OrthoMode.ORTHONORMAL:
        outputs = [v / n2.sqrt() for v, n2 in zip(outputs, sq_norms)]
    return outputs, degenerate


def gram_schmidt(E, mode=OrthoMode.ORTHOGONAL, eps=DEFAULT_EPS, return_mask=False):
    """Orthogonalize the columns of ``E`` (``[..., d, k]``).

    Degenerate (near-collinear) stacks emit a :class:`DegenerateStackWarning`
    in orthogonal mode and raise :class:`DegenerateStackError` in orthonormal
    mode, where the zero residual cannot be normalized.
    """
    mode = OrthoMode.parse(mode)
    E = as_tensor(E)
    if E.ndim < 2:
        raise DimensionError(f"expert stack must be at least 2-D, got shape {E.shape}")
    d, k = E.shape[-2:]
    if k < 1 or d < k:
        raise DimensionError(f"expert stack needs d >= k >= 1, got d={d}, k={k}")
    if mode is OrthoMode.OFF:
        mask = np.zeros(E.shape[:-2], dtype=bool)
        return (E, mask) if return_mask else E

    cols = [E[..., :, j] for j in range(k)]
    out, mask = gram_schmidt_columns(cols, mode, eps)
    if mask.any():
        n_bad = int(mask.sum())
        if mode is OrthoMode.ORTHONORMAL:
            raise DegenerateStackError(f"{n_bad} expert stack(s) are rank-deficient; cannot normalize")
        warnings.warn(f"{n_bad} degenerate expert stack(s); residuals passed through",
                      DegenerateStackWarning, stacklevel=2)
    result = stack(out, axis=-1)
    return (result, mask) if return_mask else result


def stiefel_residual(E):
    """Frobenius norm of ``E^T E - I``; zero exactly on the Stiefel manifold."""
    E = np.asarray(E.data if isinstance(E, Tensor) else E, dtype=float)
    k = E.shape[-1]
    gram = np.swapaxes(E, -1, -2) @ E
    r = np.linalg.norm(gram - np.eye(k), axis=(-2, -1))
    return float(r) if np.ndim(r) == 0 else r


def orthogonality_defect(E):
    """Largest ``|<e_i, e_j>| / (|e_i| |e_j|)`` over distinct columns (0 for k=1)."""
    E = np.asarray(E.data if isinstance(E, Tensor) else E, dtype=float)
    norms = np.linalg.norm(E, axis=-2)
    gram = np.swapaxes(E, -1, -2) @ E
    denom = norms[..., :, None] * norms[..., None, :]
    k = E.shape[-1]
    off = ~np.eye(k, dtype=bool)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.abs(gram) / denom
    ratio = np.where(denom > 0, ratio, 0.0)
    return float(ratio[..., off].max()) if k > 1 else 0.0
