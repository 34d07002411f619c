"""Command line: ``omoe train | analyze | compare | export``.

Exit codes: 0 success, 2 invalid config or arguments, 3 non-finite loss,
4 at least one failed run in ``compare``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import tensor
from .analysis import collect_taps, diversity_report, write_pca_csv, write_vectors_csv
from .backbone import TARGETS
from .checkpoint import CheckpointError, load_into, read_checkpoint, save_model
from .config import RunConfig, build_model
from .errors import ConfigError, NonFiniteLossError, PrecisionError
from .experiments import compare_methods, expand_sweeps, run_experiment, write_summary
from .tasks import Batch

EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_PARTIAL = 4


def _int_list(text):
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _fail(code, msg):
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_train(args):
    run = RunConfig.load(args.config)
    seed = run.seed if args.seed is None else args.seed
    out = args.out or run.output_dir
    os.makedirs(out, exist_ok=True)

    def log(step, loss):
        if args.verbose:
            print(f"step {step:5d}  loss {loss:.4f}", file=sys.stderr)

    res = run_experiment(run, seed, log=log)
    save_model(os.path.join(out, "model.omoe"), res.model, {"run": run.to_dict(), "seed": seed})
    res.history.write_csv(os.path.join(out, "metrics.csv"))
    write_summary(os.path.join(out, "summary.json"), res.summary)
    print(json.dumps({"out": out, "mean_accuracy": res.summary["mean_accuracy"], "steps": res.summary["steps"]}))
    return 0


def _model_from_checkpoint(path):
    _, meta = read_checkpoint(path)
    run = RunConfig.from_dict(meta["run"])
    model = build_model(run, meta["seed"])
    load_into(model, path)
    return run, meta["seed"], model


def cmd_analyze(args):
    run, seed, model = _model_from_checkpoint(args.checkpoint)
    n_layers = run.backbone.n_layers
    layers = args.layers or list(range(1, n_layers + 1))
    bad = [l for l in layers if not 1 <= l <= n_layers]
    if bad:
        return _fail(EXIT_CONFIG, f"unknown layer index {bad[0]} (layers are 1..{n_layers})")
    target = args.target or run.injection.targets[0]
    if target not in run.injection.targets:
        return _fail(EXIT_CONFIG, f"target {target!r} has no adapter in this checkpoint")
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "analysis")
    os.makedirs(out, exist_ok=True)

    tests = [t.generate(seed, run.backbone.vocab_size)[1] for t in run.tasks.build()]
    pool = Batch.concat(tests)
    order = np.random.default_rng([seed, 31337]).permutation(len(pool))
    batch = pool.take(order[:args.tokens])
    if len(batch) < args.tokens:
        return _fail(EXIT_CONFIG, f"only {len(batch)} evaluation sequences available")

    report = {}
    for layer in layers:
        recs = collect_taps(model, batch, layers=[layer - 1], targets=[target])
        write_vectors_csv(os.path.join(out, f"vectors_layer{layer}.csv"), recs)
        if args.pca:
            write_pca_csv(os.path.join(out, f"pca_layer{layer}.csv"), recs, seed=seed)
        stats = diversity_report(recs)[layer - 1]
        report[str(layer)] = stats

    with open(os.path.join(out, "diversity.json"), "w") as fh:
        json.dump({"target": target, "tokens": args.tokens, "layers": report}, fh, indent=2, sort_keys=True)
    with open(os.path.join(out, "diversity.csv"), "w") as fh:
        fh.write("layer,target,pre_mean_abs_cos,post_mean_abs_cos,pairs,skipped\n")
        for layer in layers:
            s = report[str(layer)]
            fh.write(f"{layer},{target},{s['pre']!r},{s['post']!r},{s['pairs']},{s['skipped']}\n")
    for layer in layers:
        s = report[str(layer)]
        print(f"layer {layer:2d} {target}: pre |cos| {s['pre']:.3e}  post |cos| {s['post']:.3e}")
    return 0


def cmd_compare(args):
    if len(args.configs) < 2 and not any(RunConfig.load(p).sweep for p in args.configs):
        return _fail(EXIT_CONFIG, "compare needs at least two configs (or a sweep)")
    runs = []
    for path in args.configs:
        runs.extend(expand_sweeps(RunConfig.load(path)))
    rules = runs[0].tasks.rules
    if any(r.tasks.rules != rules for r in runs):
        return _fail(EXIT_CONFIG, "all compared configs must use the same tasks")
    seeds = args.seeds or [0, 1, 2]
    out = args.out or "runs/compare"
    os.makedirs(out, exist_ok=True)

    def log(name, seed, acc):
        print(f"{name} seed={seed} mean_acc={acc:.3f}", file=sys.stderr)

    table = compare_methods(runs, seeds, single_task=args.single_task, reference=args.reference, log=log)
    table.write_csv(os.path.join(out, "comparison.csv"))
    md = table.to_markdown()
    with open(os.path.join(out, "comparison.md"), "w") as fh:
        fh.write(md)
    print(md)
    return EXIT_PARTIAL if table.failed else 0


def cmd_export(args):
    tensors, meta = read_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    if args.format == "npz":
        np.savez(os.path.join(args.out, "adapters.npz"), **tensors)
    else:
        with open(os.path.join(args.out, "adapters.csv"), "w") as fh:
            fh.write("name,index,value\n")
            for name, arr in tensors.items():
                for i, v in enumerate(arr.reshape(-1)):
                    fh.write(f"{name},{i},{float(v)!r}\n")
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"exported {len(tensors)} tensors to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="omoe", description="Orthogonal mixture-of-LoRA-experts experiments")
    p.add_argument("--precision", choices=["single", "double"],
                   help="numeric precision (default: $OMOE_PRECISION or double)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="tap expert representations from a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--layers", type=_int_list, help="1-based layer numbers, e.g. 1,3,6 (default: all)")
    a.add_argument("--tokens", type=int, default=64)
    a.add_argument("--target", choices=TARGETS)
    a.add_argument("--pca", action="store_true", help="also write 2-D PCA projections")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="train several configs over seeds and tabulate")
    c.add_argument("--configs", nargs="+", required=True)
    c.add_argument("--seeds", type=_int_list)
    c.add_argument("--single-task", action="store_true", help="also train each task alone (MT-ST columns)")
    c.add_argument("--reference", help="method name used as the param_ratio denominator")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("export", help="dump checkpoint tensors to npz or csv")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=["npz", "csv"], default="npz")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.precision:
            tensor.set_precision(args.precision)
        tensor.get_precision()  # surface a bad OMOE_PRECISION before any work
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"invalid config: {exc}")
    except NonFiniteLossError as exc:
        return _fail(EXIT_NAN, str(exc))
    except (CheckpointError, PrecisionError, FileNotFoundError) as exc:
        return _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
