"""Running configured experiments and comparing methods across seeds."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import collect_taps, diversity_report
from .backbone import LayerPattern
from .config import build_model
from .tasks import Batch
from .tensor import get_precision
from .train import train


@dataclass
class RunResult:
    name: str
    seed: int
    model: object
    history: object
    summary: dict


def trained_diversity(model, run, seed, n_tokens=64):
    """Per-layer pre/post mean |cos| on the scored token of test sequences."""
    vocab = run.backbone.vocab_size
    tests = [t.generate(seed, vocab)[1] for t in run.tasks.build()]
    per_task = max(1, n_tokens // len(tests))
    batch = Batch.concat([b.take(slice(0, per_task)) for b in tests])
    return diversity_report(collect_taps(model, batch))


def run_experiment(run, seed=None, log=None, diversity_tokens=64):
    """Build, train and summarize ``run`` for one seed."""
    seed = run.seed if seed is None else seed
    model = build_model(run, seed)
    hist = train(model, run.tasks.build(), run.train, seed=seed, log=log)
    div = trained_diversity(model, run, seed, diversity_tokens) if diversity_tokens else {}
    acc = hist.final_accuracy
    summary = {
        "name": run.name,
        "seed": seed,
        "precision": get_precision().value,
        "config": run.to_dict(),
        "params": model.param_counts(),
        "steps": hist.steps,
        "final_loss": hist.final_loss,
        "accuracy": acc,
        "mean_accuracy": float(np.mean(list(acc.values()))) if acc else float("nan"),
        "degenerate_tokens": hist.degenerate_tokens,
        "diversity": {str(k + 1): v for k, v in div.items()},
    }
    return RunResult(run.name, seed, model, hist, summary)


def write_summary(path, summary):
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


# -- sweeps -------------------------------------------------------------

def expand_sweeps(run):
    """One config per value of each swept adapter field (no sweep -> ``[run]``)."""
    if not run.sweep:
        return [run]
    out = []
    for key, values in run.sweep.items():
        for v in values:
            r = run.replace(**{f"adapter.{key}": v})
            r.sweep = {}
            r.name = f"{run.name}[{key}={v}]"
            if key == "n_experts" and r.adapter.routing == "topk":
                r.adapter.k_active = min(r.adapter.k_active, v)
            out.append(r.validate())
    return out


def rank_sweep(run, ranks=(2, 4, 8, 16, 32)):
    """Rank ablation keeping ``alpha / r`` fixed."""
    ratio = run.adapter.alpha / run.adapter.rank
    return [run.replace(**{"adapter.rank": r, "adapter.alpha": ratio * r, "name": f"{run.name}[rank={r}]"})
            for r in ranks]


def expert_sweep(run, counts=range(2, 8)):
    return expand_sweeps(run.replace(sweep={"n_experts": list(counts)}))


def layerwise_runs(run):
    """The four band patterns: orthogonal experts in low / high / medium / low+high layers."""
    names = {LayerPattern.TRIANGLE: "low", LayerPattern.INV_TRIANGLE: "high",
             LayerPattern.DIAMOND: "medium", LayerPattern.BOWTIE: "low+high"}
    return [run.replace(**{"injection.layer_pattern": p, "name": f"{run.name}-{names[p]}"}) for p in names]


# -- comparison tables -----------------------------------------------------

@dataclass
class ComparisonTable:
    tasks: list
    rows: list = field(default_factory=list)
    single_task: bool = False

    def columns(self):
        cols = ["method", "status", "seeds"]
        for t in self.tasks + ["mean"]:
            cols += [f"acc_{t}_mean", f"acc_{t}_std"]
        if self.single_task:
            for t in self.tasks + ["mean"]:
                cols += [f"st_{t}_mean", f"mt_minus_st_{t}"]
        cols += ["trainable_params", "expert_params", "param_ratio"]
        return cols

    def write_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.rows:
                w.writerow([_fmt_csv(row.get(c)) for c in cols])

    def to_markdown(self):
        head = ["method", "seeds"] + self.tasks + ["mean"]
        if self.single_task:
            head += [f"MT-ST {t}" for t in self.tasks + ["mean"]]
        head += ["trainable", "expert params", "ratio"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for row in self.rows:
            if row["status"] != "ok":
                cells = [row["method"], str(row.get("seeds", ""))] + ["FAILED"] * (len(head) - 2)
                lines.append("| " + " | ".join(cells) + " |")
                continue
            cells = [row["method"], str(row["seeds"])]
            for t in self.tasks + ["mean"]:
                cells.append(f"{row[f'acc_{t}_mean']:.3f} ± {row[f'acc_{t}_std']:.3f}")
            if self.single_task:
                for t in self.tasks + ["mean"]:
                    cells.append(f"{row[f'mt_minus_st_{t}']:+.3f}")
            cells += [str(row["trainable_params"]), str(row["expert_params"]), f"{row['param_ratio']:.4f}"]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    @property
    def failed(self):
        return any(r["status"] != "ok" for r in self.rows)


def _fmt_csv(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def compare_methods(runs, seeds, single_task=False, reference=None, log=None):
    """Train every config in ``runs`` for every seed and tabulate accuracy.

    Each row carries mean and standard deviation of per-task test accuracy,
    trainable and expert parameter counts and ``param_ratio`` = expert
    params relative to the ``reference`` row (default: the row with the most
    expert parameters).  With ``single_task`` every task is also trained on
    its own and ``mt_minus_st_*`` columns give multi-task minus single-task
    accuracy.  A failing run marks its row as failed instead of raising.
    """
    runs = list(runs)
    seeds = list(seeds)
    tasks = list(runs[0].tasks.rules)
    table = ComparisonTable(tasks, single_task=single_task)
    for run in runs:
        row = {"method": run.name, "seeds": len(seeds), "status": "ok"}
        try:
            mt = {t: [] for t in tasks + ["mean"]}
            st = {t: [] for t in tasks + ["mean"]}
            counts = None
            for seed in seeds:
                res = run_experiment(run, seed, diversity_tokens=0)
                counts = res.summary["params"]
                for t in tasks:
                    mt[t].append(res.summary["accuracy"][t])
                mt["mean"].append(res.summary["mean_accuracy"])
                if log:
                    log(run.name, seed, res.summary["mean_accuracy"])
                if single_task:
                    accs = []
                    for t in tasks:
                        one = run.replace(**{"tasks.rules": (t,)})
                        acc = run_experiment(one, seed, diversity_tokens=0).summary["accuracy"][t]
                        st[t].append(acc)
                        accs.append(acc)
                    st["mean"].append(float(np.mean(accs)))
            for t in tasks + ["mean"]:
                row[f"acc_{t}_mean"] = float(np.mean(mt[t]))
                row[f"acc_{t}_std"] = float(np.std(mt[t]))
                if single_task:
                    row[f"st_{t}_mean"] = float(np.mean(st[t]))
                    row[f"mt_minus_st_{t}"] = row[f"acc_{t}_mean"] - row[f"st_{t}_mean"]
            row["trainable_params"] = counts["total"]
            row["expert_params"] = counts["expert"]
        except Exception as exc:  # a failed run becomes a marked row
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        table.rows.append(row)

    ok = [r for r in table.rows if r["status"] == "ok"]
    if ok:
        if reference is None:
            ref = max(ok, key=lambda r: r["expert_params"])
        else:
            matches = [r for r in ok if r["method"] == reference]
            ref = matches[0] if matches else max(ok, key=lambda r: r["expert_params"])
        for r in ok:
            r["param_ratio"] = r["expert_params"] / ref["expert_params"]
    return table
