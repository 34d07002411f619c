"""Fine-tune orthogonal and plain expert mixtures on the synthetic tasks.

Uses a small backbone so the whole script finishes in under a minute on one core.
Run: python3 demos/03_train_and_compare.py
"""

from omoe import RunConfig
from omoe.experiments import compare_methods, run_experiment

base = RunConfig.from_dict({
    "name": "omoe",
    "backbone": {"n_layers": 4, "d_model": 32, "n_heads": 2},
    "adapter": {"rank": 8, "alpha": 16},
    "tasks": {"n_train": 256, "n_test": 64},
})
vanilla = base.replace(**{"name": "vanilla", "adapter.ortho_mode": "off"})

# %% One run each; the summary carries per-task accuracy and per-layer diversity.
for run in (base, vanilla):
    s = run_experiment(run, seed=0).summary
    acc = ", ".join(f"{k} {v:.2f}" for k, v in s["accuracy"].items())
    div = ", ".join(f"L{k} {v['post']:.1e}" for k, v in s["diversity"].items())
    print(f"{run.name:8s} acc: {acc}")
    print(f"{'':8s} post |cos|: {div}")

# %% The same pair across two seeds as a table.
table = compare_methods([base, vanilla], seeds=[0, 1])
print(table.to_markdown())
