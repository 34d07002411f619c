"""A small frozen decoder-only transformer with seven adapter injection points.

Each block is pre-norm multi-head causal attention (``Q, K, V, O``) followed
by a gated feed-forward network (``Gate, Up, Down``), mirroring the
projection names of LLaMA-style models.  All weights are random and frozen;
only the adapters inserted by :func:`inject_adapters` train.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .layer import OmoeLayer
from .orthogonalize import OrthoMode
from .tensor import Tensor, embedding, silu, softmax

TARGETS = ("Q", "K", "V", "O", "Up", "Down", "Gate")
_ATTR = {"Q": "q", "K": "k", "V": "v", "O": "o", "Up": "up", "Down": "down", "Gate": "gate"}


class LayerPattern(enum.Enum):
    ALL = "all"
    TRIANGLE = "triangle"          # orthogonal experts in the low band
    INV_TRIANGLE = "inv_triangle"  # high band
    DIAMOND = "diamond"            # medium band
    BOWTIE = "bowtie"              # low + high bands

    @classmethod
    def parse(cls, value):
        if isinstance(value, LayerPattern):
            return value
        aliases = {"△": "triangle", "▽": "inv_triangle", "◇": "diamond", "⋈": "bowtie"}
        v = aliases.get(str(value), str(value).lower())
        try:
            return cls(v)
        except ValueError:
            raise ConfigError("injection.layer_pattern", f"unknown pattern {value!r}") from None


@dataclass
class BackboneConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 64
    max_seq: int = 32
    seed: int = 0

    def validate(self):
        for name in ("n_layers", "d_model", "n_heads", "ffn_mult", "vocab_size", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"backbone.{name}", "must be a positive integer")
        if self.d_model % self.n_heads:
            raise ConfigError("backbone.n_heads", f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_ffn(self):
        return self.d_model * self.ffn_mult

    def projection_shape(self, target):
        """``(d_out, d_in)`` of the frozen projection named ``target``."""
        D, F = self.d_model, self.d_ffn
        return {"Q": (D, D), "K": (D, D), "V": (D, D), "O": (D, D),
                "Up": (F, D), "Gate": (F, D), "Down": (D, F)}[target]


@dataclass
class InjectionSpec:
    """Which projections get adapters and which layers orthogonalize.

    ``band_sizes = [n_low, n_high]`` replaces the default thirds, e.g.
    ``[10, 12]`` for a 10/10/12 split of 32 layers.
    """

    targets: tuple = TARGETS
    layer_pattern: LayerPattern = LayerPattern.ALL
    band_sizes: list | None = None

    def __post_init__(self):
        self.targets = tuple(self.targets)
        self.layer_pattern = LayerPattern.parse(self.layer_pattern)

    def validate(self):
        if not self.targets:
            raise ConfigError("injection.targets", "must name at least one projection")
        for t in self.targets:
            if t not in TARGETS:
                raise ConfigError("injection.targets", f"unknown target {t!r}; expected one of {', '.join(TARGETS)}")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError("injection.targets", "duplicate target names")
        if self.band_sizes is not None:
            b = self.band_sizes
            if (not isinstance(b, (list, tuple)) or len(b) != 2
                    or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in b)):
                raise ConfigError("injection.band_sizes", "expected [n_low, n_high] with non-negative integers")


def layer_bands(n_layers, band_sizes=None):
    """Split 0-based layer indices into (low, medium, high) bands.

    By default low is the first ``ceil(L/3)`` layers, high the last
    ``ceil(L/3)`` (never overlapping low), medium whatever is left.
    ``band_sizes = (n_low, n_high)`` sets the two outer bands explicitly.
    """
    if band_sizes is None:
        n_low = n_high = math.ceil(n_layers / 3)
    else:
        n_low, n_high = band_sizes
        if n_low + n_high > n_layers:
            raise ConfigError("injection.band_sizes", f"{n_low} + {n_high} exceeds {n_layers} layers")
    low = list(range(min(n_low, n_layers)))
    high = [i for i in range(max(n_layers - n_high, 0), n_layers) if i not in low]
    medium = [i for i in range(n_layers) if i not in low and i not in high]
    return low, medium, high


def orthogonal_layers(pattern, n_layers, band_sizes=None):
    """0-based indices of layers that receive orthogonalized experts."""
    pattern = LayerPattern.parse(pattern)
    low, medium, high = layer_bands(n_layers, band_sizes)
    return {
        LayerPattern.ALL: list(range(n_layers)),
        LayerPattern.TRIANGLE: low,
        LayerPattern.INV_TRIANGLE: high,
        LayerPattern.DIAMOND: medium,
        LayerPattern.BOWTIE: low + high,
    }[pattern]


class FrozenLinear:
    def __init__(self, W):
        self.W = W

    @property
    def d(self):
        return self.W.shape[0]

    @property
    def k_in(self):
        return self.W.shape[1]

    def __call__(self, x, training=False):
        return x @ self.W.T


def rms_norm(x, eps=1e-6):
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt()


class Block:
    def __init__(self, q, k, v, o, gate, up, down):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.gate, self.up, self.down = gate, up, down

    def projections(self):
        return [(t, getattr(self, _ATTR[t])) for t in TARGETS]


class ToyTransformer:
    """Frozen transformer mapping token ids ``[T]`` or ``[B, T]`` to logits."""

    def __init__(self, cfg, tok_emb, pos_emb, blocks, lm_head):
        self.cfg = cfg
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.lm_head = lm_head
        self._mask_cache = {}

    # -- forward --------------------------------------------------------
    def _causal_mask(self, T, dtype):
        key = (T, dtype)
        if key not in self._mask_cache:
            m = np.triu(np.full((T, T), -1e9), k=1)
            self._mask_cache[key] = Tensor(m, dtype=dtype)
        return self._mask_cache[key]

    def _attention(self, blk, x, training):
        B, T, D = x.shape
        H = self.cfg.n_heads
        Dh = D // H

        def heads(t):
            return t.reshape(B, T, H, Dh).transpose(0, 2, 1, 3)

        q, k, v = heads(blk.q(x, training)), heads(blk.k(x, training)), heads(blk.v(x, training))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(Dh)) + self._causal_mask(T, x.dtype)
        att = softmax(scores, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return blk.o(ctx, training)

    def _ffn(self, blk, x, training):
        return blk.down(silu(blk.gate(x, training)) * blk.up(x, training), training)

    def hidden_states(self, tokens, training=False):
        tokens = np.asarray(tokens)
        if tokens.ndim not in (1, 2):
            raise DimensionError(f"tokens must be [T] or [B, T], got shape {tokens.shape}")
        batched = tokens.ndim == 2
        if not batched:
            tokens = tokens[None, :]
        B, T = tokens.shape
        if T == 0:
            raise ContractError("cannot run the model on an empty sequence")
        if T > self.cfg.max_seq:
            raise ContractError(f"sequence length {T} exceeds max_seq={self.cfg.max_seq}")
        x = embedding(self.tok_emb, tokens) + self.pos_emb[:T]
        for blk in self.blocks:
            x = x + self._attention(blk, rms_norm(x), training)
            x = x + self._ffn(blk, rms_norm(x), training)
        return x, batched

    def __call__(self, tokens, positions=None, training=False):
        """Logits ``[B, T, V]`` (or ``[T, V]``), or ``[B, V]`` at ``positions``."""
        x, batched = self.hidden_states(tokens, training)
        if positions is not None:
            positions = np.asarray(positions)
            x = x[np.arange(x.shape[0]), positions]
            return rms_norm(x) @ self.lm_head.T
        logits = rms_norm(x) @ self.lm_head.T
        return logits if batched else logits[0]

    # -- parameters -----------------------------------------------------
    def adapters(self):
        out = []
        for li, blk in enumerate(self.blocks):
            for t, mod in blk.projections():
                if isinstance(mod, OmoeLayer):
                    out.append((f"layers.{li}.{t}", mod))
        return out

    def named_parameters(self):
        out = []
        for name, ad in self.adapters():
            out.extend(ad.named_parameters(prefix=name + "."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_frozen(self):
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb), ("lm_head", self.lm_head)]
        for li, blk in enumerate(self.blocks):
            for t, mod in blk.projections():
                out.append((f"layers.{li}.{t}.W0", mod.W0 if isinstance(mod, OmoeLayer) else mod.W))
        return out

    def frozen_fingerprint(self):
        h = hashlib.sha256()
        for name, t in self.named_frozen():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def param_counts(self):
        """Trainable counts split into expert and router parameters."""
        expert = sum(ad.expert_param_count() for _, ad in self.adapters())
        router = sum(ad.router.count_trainable() for _, ad in self.adapters())
        return {"expert": expert, "router": router, "total": expert + router}

    def set_capture(self, on, layers=None, targets=None):
        for li, blk in enumerate(self.blocks):
            for t, mod in blk.projections():
                if isinstance(mod, OmoeLayer):
                    hit = (layers is None or li in layers) and (targets is None or t in targets)
                    mod.capture = bool(on and hit)
                    if not mod.capture:
                        mod.last_tap = None


def build_backbone(cfg):
    """Deterministic random frozen transformer for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D, V = cfg.d_model, cfg.vocab_size

    def frozen(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape))

    tok_emb = frozen((V, D), 1.0)
    pos_emb = frozen((cfg.max_seq, D), 0.5)
    blocks = []
    for _ in range(cfg.n_layers):
        mods = {}
        for t in TARGETS:
            d_out, d_in = cfg.projection_shape(t)
            mods[_ATTR[t]] = FrozenLinear(frozen((d_out, d_in), 1.0 / math.sqrt(d_in)))
        blocks.append(Block(**mods))
    lm_head = frozen((V, D), 1.0 / math.sqrt(D))
    return ToyTransformer(cfg, tok_emb, pos_emb, blocks, lm_head)


@dataclass
class AdapterConfig:
    rank: int = 16
    alpha: float = 32.0
    n_experts: int = 2
    routing: str = "soft"
    k_active: int = 2
    ortho_mode: str = "orthogonal"
    ortho_eps: float = 1e-8
    use_scale: bool = True
    router_init_std: float | None = None
    balance_coef: float = 0.0

    def validate(self, backbone=None, targets=TARGETS):
        from .router import Routing
        if self.rank < 1:
            raise ConfigError("adapter.rank", "must be a positive integer")
        if self.alpha <= 0:
            raise ConfigError("adapter.alpha", "must be positive")
        if self.n_experts < 1:
            raise ConfigError("adapter.n_experts", "must be a positive integer")
        try:
            routing = Routing.parse(self.routing)
        except ContractError as exc:
            raise ConfigError("adapter.routing", str(exc)) from None
        try:
            ortho = OrthoMode.parse(self.ortho_mode)
        except ContractError as exc:
            raise ConfigError("adapter.ortho_mode", str(exc)) from None
        if routing.value == "topk" and not 1 <= self.k_active <= self.n_experts:
            raise ConfigError("adapter.k_active", f"k_active={self.k_active} must lie in [1, n_experts={self.n_experts}]")
        if self.ortho_eps <= 0:
            raise ConfigError("adapter.ortho_eps", "must be positive")
        if self.balance_coef < 0:
            raise ConfigError("adapter.balance_coef", "must be non-negative")
        if backbone is not None:
            for t in targets:
                d, k_in = backbone.projection_shape(t)
                if self.rank > min(d, k_in):
                    raise ConfigError("adapter.rank", f"rank {self.rank} exceeds min(d, k_in)={min(d, k_in)} for target {t}")
                if ortho is not OrthoMode.OFF and d < self.n_experts:
                    raise ConfigError("adapter.n_experts", f"orthogonalization needs d >= n_experts; target {t} has d={d}")


def inject_adapters(model, spec, adapter, seed=0, dropout=0.0):
    """Return a copy of ``model`` with adapter layers on the requested projections.

    Layers selected by ``spec.layer_pattern`` use ``adapter.ortho_mode``; the
    other adapted layers are plain mixtures (orthogonalization off).  The
    frozen weights are shared with ``model``, never copied or modified.
    """
    spec.validate()
    adapter.validate(model.cfg, spec.targets)
    ortho_set = set(orthogonal_layers(spec.layer_pattern, model.cfg.n_layers, spec.band_sizes))
    rng = np.random.default_rng(seed)
    blocks = []
    for li, blk in enumerate(model.blocks):
        new = copy.copy(blk)
        for t in spec.targets:
            base = getattr(blk, _ATTR[t])
            W0 = base.W0 if isinstance(base, OmoeLayer) else base.W
            mode = adapter.ortho_mode if li in ortho_set else OrthoMode.OFF
            layer = OmoeLayer.create(
                W0, n_experts=adapter.n_experts, rank=adapter.rank, alpha=adapter.alpha,
                routing=adapter.routing, k_active=adapter.k_active, ortho=mode,
                eps=adapter.ortho_eps, dropout=dropout,
                seed=np.random.default_rng(rng.integers(2**63)), use_scale=adapter.use_scale,
                router_init_std=adapter.router_init_std, layer_index=li, target=t,
                balance_coef=adapter.balance_coef)
            setattr(new, _ATTR[t], layer)
        blocks.append(new)
    return ToyTransformer(model.cfg, model.tok_emb, model.pos_emb, blocks, model.lm_head)
