"""Low-rank adapter experts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, dropout


def kaiming_uniform_init(shape, seed, dtype=None):
    """Uniform samples on ``[-sqrt(6 / fan_in), sqrt(6 / fan_in)]``.

    ``fan_in`` is the second extent (input features of a ``out x in`` weight).
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if len(shape) != 2:
        raise ContractError(f"kaiming_uniform_init expects a 2-D shape, got {tuple(shape)}")
    fan_in = shape[1]
    bound = math.sqrt(6.0 / fan_in)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, dtype=dtype)


@dataclass(eq=False)
class LoraExpert:
    """One expert ``delta(x) = scale * B @ (A @ x)`` with ``scale = alpha / r``.

    ``A`` is ``r x k_in`` (Kaiming-uniform), ``B`` is ``d x r`` (zeros), so a
    fresh expert outputs exactly zero.  ``use_scale=False`` drops the
    ``alpha / r`` factor.
    """

    A: Tensor
    B: Tensor
    alpha: float = 1.0
    dropout_p: float = 0.0
    use_scale: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    def __post_init__(self):
        r, k_in = self.A.shape
        d, r_b = self.B.shape
        if r != r_b:
            raise DimensionError(f"A {self.A.shape} and B {self.B.shape} disagree on rank")
        if r > min(d, k_in):
            raise ContractError(f"rank {r} exceeds min(d={d}, k_in={k_in})")
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must lie in [0, 1)")

    @classmethod
    def create(cls, d, k_in, rank, alpha=None, dropout_p=0.0, seed=0, use_scale=True, dtype=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        A = kaiming_uniform_init((rank, k_in), rng, dtype=dtype)
        B = Tensor(np.zeros((d, rank)), requires_grad=True, dtype=A.dtype)
        return cls(A=A, B=B, alpha=float(rank if alpha is None else alpha),
                   dropout_p=dropout_p, use_scale=use_scale, rng=rng)

    @property
    def rank(self):
        return self.A.shape[0]

    @property
    def k_in(self):
        return self.A.shape[1]

    @property
    def d(self):
        return self.B.shape[0]

    @property
    def scale(self):
        return self.alpha / self.rank if self.use_scale else 1.0

    def parameters(self):
        return [self.A, self.B]

    def __call__(self, x, training=False):
        return expert_forward(self, x, training)


def expert_forward(e, x, training=False):
    """Apply expert ``e`` to ``x`` of shape ``[..., k_in]`` and return ``[..., d]``."""
    x = as_tensor(x, dtype=e.A.dtype)
    if x.shape[-1] != e.k_in:
        raise DimensionError(f"expert expects inputs of length {e.k_in}, got shape {x.shape}")
    x = dropout(x, e.dropout_p, e.rng, training)
    out = (x @ e.A.T) @ e.B.T
    if e.use_scale:
        out = out * e.scale
    return out


def count_trainable(e):
    return e.rank * e.k_in + e.d * e.rank
