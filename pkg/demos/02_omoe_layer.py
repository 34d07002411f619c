"""One adapter layer: frozen base, LoRA experts, router and Gram-Schmidt.

Run: python3 demos/02_omoe_layer.py
"""

import numpy as np

from omoe import OmoeLayer, omoe_forward, pairwise_diversity, tap_representations
from omoe.tensor import Tensor

rng = np.random.default_rng(0)
W0 = rng.normal(size=(32, 24))          # frozen projection, d_out x d_in
h = rng.normal(size=(10, 24))           # ten tokens

# %% At initialization every B is zero, so the layer reproduces the frozen projection.
layer = OmoeLayer.create(W0, n_experts=2, rank=8, alpha=16, seed=0)
print("fresh output == W0 h:", np.array_equal(omoe_forward(layer, h).data, (Tensor(h) @ Tensor(W0).T).data))
print("tokens that skipped orthogonalization (all experts zero):", layer.degenerate_tokens)
print("trainable parameters:", layer.count_trainable(), "(experts", layer.expert_param_count(), ")")

# %% Pretend some training happened.
for e in layer.experts:
    e.B.data[...] = rng.normal(scale=0.2, size=e.B.shape)

# %% Tap the expert vectors before and after orthogonalization.
records = tap_representations(layer, h)
pre = pairwise_diversity(records, "pre")[None].mean_abs_cos
post = pairwise_diversity(records, "post")[None].mean_abs_cos
print("mean |cos| between experts: pre %.3f, post %.1e" % (pre, post))
print("gates of token 0:", records[0].gates.round(3))

# %% The same weights with orthogonalization off: the plain mixture.
plain = OmoeLayer(layer.W0, layer.experts, layer.router, ortho="off")
rec = tap_representations(plain, h[0])
print("ortho off: pre == post", np.array_equal(rec.pre, rec.post))

# %% Routing variants.
for routing in ("soft", "topk", "uniform"):
    l = OmoeLayer.create(W0, n_experts=4, rank=4, routing=routing, k_active=2, seed=1)
    l.track_gates = True
    omoe_forward(l, h)
    print(f"{routing:8s} gates token 0:", l.last_gates.data[0].round(3))
