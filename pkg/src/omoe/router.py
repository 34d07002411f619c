"""Token-to-expert gating: soft, top-k and router-free uniform modes."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor, as_tensor, softmax


class Routing(enum.Enum):
    SOFT = "soft"
    TOPK = "topk"
    UNIFORM = "uniform"

    @classmethod
    def parse(cls, value):
        if isinstance(value, Routing):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractError(f"routing must be one of soft/topk/uniform, got {value!r}") from None


@dataclass(eq=False)
class RouterState:
    """Router parameters ``G`` (``n_experts x d_model``) and the routing strategy.

    ``G`` is ``None`` in uniform mode, which owns no parameters.
    """

    n_experts: int
    d_model: int
    strategy: Routing = Routing.SOFT
    k_active: int = 2
    G: Tensor | None = None

    def __post_init__(self):
        self.strategy = Routing.parse(self.strategy)
        if self.n_experts < 1:
            raise ContractError("n_experts must be positive")
        if self.strategy is Routing.TOPK and not 1 <= self.k_active <= self.n_experts:
            raise ContractError(f"k_active={self.k_active} must lie in [1, n_experts={self.n_experts}]")
        if self.strategy is Routing.UNIFORM:
            self.G = None
        elif self.G is None:
            self.G = Tensor(np.zeros((self.n_experts, self.d_model)), requires_grad=True)
        elif self.G.shape != (self.n_experts, self.d_model):
            raise DimensionError(f"G has shape {self.G.shape}, expected {(self.n_experts, self.d_model)}")

    @classmethod
    def create(cls, n_experts, d_model, strategy="soft", k_active=2, seed=0, init_std=None, dtype=None):
        """Build a router; learned modes draw ``G`` from a small Gaussian.

        ``init_std=0`` gives zero logits (uniform gates at start).
        """
        strategy = Routing.parse(strategy)
        G = None
        if strategy is not Routing.UNIFORM:
            std = 1.0 / np.sqrt(d_model) if init_std is None else init_std
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            G = Tensor(rng.normal(0.0, std, size=(n_experts, d_model)) if std > 0
                       else np.zeros((n_experts, d_model)), requires_grad=True, dtype=dtype)
        return cls(n_experts=n_experts, d_model=d_model, strategy=strategy, k_active=k_active, G=G)

    def parameters(self):
        return [] if self.G is None else [self.G]

    def count_trainable(self):
        return 0 if self.G is None else self.G.size

    def __call__(self, h):
        return gate(self, h)


def gate(rs, h, dtype=None):
    """Mixture coefficients ``[..., n_experts]`` for hidden states ``h[..., d_model]``."""
    if rs.strategy is Routing.UNIFORM:
        dtype = dtype or (h.dtype if isinstance(h, Tensor) else None)
        lead = h.shape[:-1]
        return Tensor(np.full(lead + (rs.n_experts,), 1.0 / rs.n_experts), dtype=dtype)
    h = as_tensor(h, dtype=rs.G.dtype)
    if h.shape[-1] != rs.d_model:
        raise DimensionError(f"router expects d_model={rs.d_model}, got shape {h.shape}")
    logits = h @ rs.G.T
    if np.isnan(logits.data).any():
        raise NumericError("router produced NaN logits")
    probs = softmax(logits, axis=-1)
    if rs.strategy is Routing.TOPK:
        return renormalize_topk(probs, rs.k_active)
    return probs


def topk_mask(g, k_active):
    """Boolean mask of the ``k_active`` largest entries along the last axis.

    Ties keep the lowest index.
    """
    g = np.asarray(g)
    n = g.shape[-1]
    if not 1 <= k_active <= n:
        raise ContractError(f"k_active={k_active} must lie in [1, {n}]")
    order = np.argsort(-g, axis=-1, kind="stable")[..., :k_active]
    mask = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def renormalize_topk(g, k_active):
    """Keep the top ``k_active`` gate values and rescale them to sum to one.

    The selection mask carries no gradient; the ratio is differentiated exactly.
    The denominator is accumulated in expert-index order so the result does
    not depend on numpy's reduction order.
    """
    g = as_tensor(g)
    mask = topk_mask(g.data, k_active)
    kept = g * Tensor(mask.astype(g.dtype), dtype=g.dtype)
    total = kept[..., 0:1]
    for i in range(1, kept.shape[-1]):
        total = total + kept[..., i:i + 1]
    return kept / total


def load_balance_penalty(gates):
    """Squared coefficient of variation of the per-expert mean gate.

    An optional auxiliary term for the top-k MoE baseline; it is zero when
    every expert receives the same average mass.
    """
    g = gates.reshape(-1, gates.shape[-1])
    usage = g.mean(axis=0)
    mu = usage.mean()
    centred = usage - mu
    return (centred * centred).mean() / (mu * mu)
