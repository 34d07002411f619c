"""Where orthogonal experts go, and what they cost.

Run: python3 demos/04_layer_patterns_and_budgets.py
"""

from omoe import AdapterConfig, BackboneConfig, InjectionSpec, build_backbone, inject_adapters
from omoe.backbone import layer_bands, orthogonal_layers

# %% Layers are split into thirds; patterns pick which thirds get Gram-Schmidt.
for n in (6, 32):
    low, medium, high = layer_bands(n)
    print(f"{n} layers: low {low[0]}-{low[-1]}, medium {medium[0]}-{medium[-1]}, high {high[0]}-{high[-1]}")
for sym in ("△", "▽", "◇", "⋈"):
    print(sym, orthogonal_layers(sym, 6))

# %% Parameter budget: two experts versus eight at the same rank.
base = build_backbone(BackboneConfig())
spec = InjectionSpec()
for n in (1, 2, 8):
    m = inject_adapters(base, spec, AdapterConfig(n_experts=n, ortho_mode="off" if n == 8 else "orthogonal"))
    c = m.param_counts()
    print(f"{n} expert(s): expert params {c['expert']:>8d}, router {c['router']:>5d}")

# %% The adapters never touch the frozen weights.
m = inject_adapters(base, spec, AdapterConfig())
print("frozen fingerprint shared:", m.frozen_fingerprint() == base.frozen_fingerprint())
