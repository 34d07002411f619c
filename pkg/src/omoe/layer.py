"""The orthogonal mixture-of-LoRA-experts adapter layer.

For a hidden state ``h`` the layer returns

    W0 h + sum_i g_i(h) * GS(E(h))_i

where ``E(h)`` stacks the expert outputs column-wise, ``GS`` is the
Gram-Schmidt map from :mod:`omoe.orthogonalize` and ``g`` the router.  With
orthogonalization off this is the plain mixture-of-LoRA layer, and with one
soft-gated expert it is a single LoRA adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .lora import LoraExpert, count_trainable, expert_forward
from .orthogonalize import DEFAULT_EPS, OrthoMode, gram_schmidt_columns
from .router import RouterState, gate
from .tensor import Tensor, as_tensor, no_grad, where


@dataclass
class LayerTapRecord:
    """Expert vectors for one token: ``pre``/``post`` are ``d x n_experts``."""

    layer_index: int | None
    pre: np.ndarray
    post: np.ndarray
    gates: np.ndarray
    target: str | None = None


@dataclass(eq=False)
class OmoeLayer:
    W0: Tensor
    experts: list
    router: RouterState
    ortho: OrthoMode = OrthoMode.ORTHOGONAL
    eps: float = DEFAULT_EPS
    layer_index: int | None = None
    target: str | None = None
    balance_coef: float = 0.0
    # diagnostics, not part of the math
    capture: bool = field(default=False, repr=False)
    last_tap: dict | None = field(default=None, repr=False)
    track_gates: bool = field(default=False, repr=False)
    last_gates: Tensor | None = field(default=None, repr=False)
    degenerate_tokens: int = field(default=0, repr=False)

    def __post_init__(self):
        self.ortho = OrthoMode.parse(self.ortho)
        if self.W0.requires_grad:
            raise ContractError("base weight W0 must be frozen")
        if not self.experts:
            raise ContractError("need at least one expert")
        d, k_in = self.W0.shape
        for e in self.experts:
            if (e.d, e.k_in, e.rank) != (d, k_in, self.experts[0].rank):
                raise DimensionError("all experts must share (d, k_in, r) with W0")
        if self.router.n_experts != len(self.experts) or self.router.d_model != k_in:
            raise DimensionError("router does not match the expert count / input width")
        if self.ortho is not OrthoMode.OFF and d < len(self.experts):
            raise ContractError(f"orthogonalization needs d >= n_experts, got d={d}, n={len(self.experts)}")

    @classmethod
    def create(cls, W0, n_experts=2, rank=16, alpha=32.0, routing="soft", k_active=2,
               ortho="orthogonal", eps=DEFAULT_EPS, dropout=0.0, seed=0, use_scale=True,
               router_init_std=None, layer_index=None, target=None, balance_coef=0.0):
        W0 = W0 if isinstance(W0, Tensor) else Tensor(W0)
        W0.requires_grad = False
        d, k_in = W0.shape
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        experts = [LoraExpert.create(d, k_in, rank, alpha, dropout, seed=np.random.default_rng(rng.integers(2**63)),
                                     use_scale=use_scale, dtype=W0.dtype)
                   for _ in range(n_experts)]
        router = RouterState.create(n_experts, k_in, routing, k_active, seed=rng,
                                    init_std=router_init_std, dtype=W0.dtype)
        return cls(W0=W0, experts=experts, router=router, ortho=ortho, eps=eps,
                   layer_index=layer_index, target=target, balance_coef=balance_coef)

    @property
    def n_experts(self):
        return len(self.experts)

    @property
    def d(self):
        return self.W0.shape[0]

    @property
    def k_in(self):
        return self.W0.shape[1]

    def parameters(self):
        ps = []
        for e in self.experts:
            ps.extend(e.parameters())
        ps.extend(self.router.parameters())
        return ps

    def named_parameters(self, prefix=""):
        out = []
        for i, e in enumerate(self.experts):
            out.append((f"{prefix}experts.{i}.A", e.A))
            out.append((f"{prefix}experts.{i}.B", e.B))
        if self.router.G is not None:
            out.append((f"{prefix}router.G", self.router.G))
        return out

    def expert_param_count(self):
        return sum(count_trainable(e) for e in self.experts)

    def count_trainable(self):
        return self.expert_param_count() + self.router.count_trainable()

    def __call__(self, h, training=False):
        return omoe_forward(self, h, training)


def omoe_forward(layer, h, training=False):
    """Adapter output ``[..., d]`` for hidden states ``h[..., k_in]``.

    Tokens whose expert stack is degenerate (for instance every expert still
    outputs zero right after initialization) skip orthogonalization and use
    the raw expert outputs.
    """
    h = as_tensor(h, dtype=layer.W0.dtype)
    if h.shape[-1] != layer.k_in:
        raise DimensionError(f"layer expects inputs of length {layer.k_in}, got shape {h.shape}")
    base = h @ layer.W0.T
    reps = [expert_forward(e, h, training) for e in layer.experts]
    posts, degenerate = gram_schmidt_columns(reps, layer.ortho, layer.eps)
    if degenerate.any():
        layer.degenerate_tokens += int(degenerate.sum())
        keep = degenerate[..., None]
        posts = [where(keep, e, p) for e, p in zip(reps, posts)]
    g = gate(layer.router, h, dtype=layer.W0.dtype)
    if layer.track_gates:
        layer.last_gates = g
    if layer.n_experts == 1:
        mix = g * posts[0]
    else:
        mix = None
        for i, p in enumerate(posts):
            term = g[..., i:i + 1] * p
            mix = term if mix is None else mix + term
    if layer.capture:
        layer.last_tap = {
            "pre": np.stack([r.data for r in reps], axis=-1),
            "post": np.stack([p.data for p in posts], axis=-1),
            "gates": np.array(g.data),
        }
    return base + mix


def tap_representations(layer, h):
    """Record pre/post-orthogonalization expert vectors and gates for token(s) ``h``.

    Runs in evaluation mode without touching gradients.  A 1-D ``h`` gives one
    :class:`LayerTapRecord`; a batch ``[N, k_in]`` gives a list of them.
    """
    old = layer.capture
    layer.capture = True
    try:
        with no_grad():
            omoe_forward(layer, h, training=False)
        tap = layer.last_tap
    finally:
        layer.capture = old
    records = records_from_tap(tap, layer.layer_index, layer.target)
    return records[0] if np.ndim(h.data if isinstance(h, Tensor) else h) == 1 else records


def records_from_tap(tap, layer_index=None, target=None, index=None):
    """Split a batched tap into per-token records; ``index`` selects leading positions."""
    pre, post, gates = tap["pre"], tap["post"], tap["gates"]
    d, n = pre.shape[-2:]
    pre = pre.reshape(-1, d, n)
    post = post.reshape(-1, d, n)
    gates = gates.reshape(-1, n)
    rows = range(pre.shape[0]) if index is None else index
    return [LayerTapRecord(layer_index, pre[i].copy(), post[i].copy(), gates[i].copy(), target) for i in rows]


@dataclass
class LayerDiversity:
    mean_abs_cos: float
    n_pairs: int
    skipped: int


def pairwise_diversity(records, which="post"):
    """Mean ``|cos(e_i, e_j)|`` over tokens and expert pairs, per layer.

    Pairs involving a zero vector are skipped and counted.  Returns a dict
    ``layer_index -> LayerDiversity``; a layer with only skipped pairs gets
    ``nan``.
    """
    if not records:
        raise ContractError("pairwise_diversity needs at least one record")
    if which not in ("pre", "post"):
        raise ContractError("which must be 'pre' or 'post'")
    sums, counts, skipped = {}, {}, {}
    for rec in records:
        E = getattr(rec, which)
        key = rec.layer_index
        sums.setdefault(key, 0.0)
        counts.setdefault(key, 0)
        skipped.setdefault(key, 0)
        norms = np.linalg.norm(E, axis=0)
        n = E.shape[1]
        for i in range(n):
            for j in range(i + 1, n):
                if norms[i] == 0.0 or norms[j] == 0.0:
                    skipped[key] += 1
                    continue
                sums[key] += abs(float(E[:, i] @ E[:, j])) / (norms[i] * norms[j])
                counts[key] += 1
    return {k: LayerDiversity(sums[k] / counts[k] if counts[k] else float("nan"), counts[k], skipped[k])
            for k in sums}
