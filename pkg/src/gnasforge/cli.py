"""Command-line entry point: search / retrain / eval / gen-data / gradcheck.

Artifacts never contain timestamps or host info, so re-running with the same
inputs and seed reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, asdict


from .graphs import load_graph_json, save_graph_json, random_split, \
    generate_sbm, generate_chain_task, GraphFormatError
from .search import (
    SearchConfig, SearchError, Genotype, GenotypeNet,
    grid_search_hidden, retrain_genotype, evaluate,
)
from .tensor import ParameterStore
from . import verify

EXIT_OK, EXIT_ERROR, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


_CONFIG_ONLY_KEYS = {"dataset", "out_dir", "split_seed", "split"}


def load_run_config(path):
    """Parse a run config JSON into (SearchConfig, extras); unknown keys rejected."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    known = {f.name for f in fields(SearchConfig)}
    unknown = set(doc) - known - _CONFIG_ONLY_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    extras = {k: doc.pop(k) for k in list(doc) if k in _CONFIG_ONLY_KEYS}
    for key in ("hidden_grid", "expansions", "attentions", "head_counts",
                "aggregators", "activations", "freeze_layers"):
        if key in doc:
            doc[key] = tuple(doc[key])
    try:
        return SearchConfig(**doc), extras
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


def _load_dataset(path, split_seed=None):
    if not os.path.exists(path):
        raise ConfigError(f"dataset file not found: {path}")
    graph = load_graph_json(path)
    if not graph.masks:
        graph = random_split(graph, seed=0 if split_seed is None else split_seed)
    return graph


def cmd_search(args):
    config, extras = load_run_config(args.config)
    if args.seed is not None:
        config = SearchConfig(**{**asdict(config), "seed": args.seed})
    if "dataset" not in extras:
        raise ConfigError("config must name a 'dataset' path")
    graph = _load_dataset(extras["dataset"], extras.get("split_seed"))
    out_dir = args.out or extras.get("out_dir")
    if not out_dir:
        raise ConfigError("no output directory (use --out or config 'out_dir')")
    os.makedirs(out_dir, exist_ok=True)

    threads = int(os.environ.get("GNASFORGE_THREADS", "1"))
    result = grid_search_hidden(config, graph, max_workers=threads)

    result["genotype"].save(os.path.join(out_dir, "genotype.json"))
    best_log = result["per_size"][result["hidden"]]["log"]
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as f:
        for rec in best_log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    resolved = dict(asdict(config), **extras)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=list)

    store = ParameterStore()
    for name, (group, data) in sorted(result["store_state"].items()):
        store.add(name, data, group=group)
    store.save(os.path.join(out_dir, "checkpoint"),
               extra_meta={"counters": result["counters"], "hidden": result["hidden"]})
    print(f"best hidden size {result['hidden']}, val metric {result['val_metric']:.4f}")
    return EXIT_OK


def cmd_retrain(args):
    genotype = Genotype.load(args.genotype)
    graph = _load_dataset(args.data)
    net, report = retrain_genotype(genotype, graph, epochs=args.epochs,
                                   seed=args.seed if args.seed is not None else 0)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "retrain_report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    net.store.save(os.path.join(out_dir, "checkpoint"),
                   extra_meta={"best_epoch": report["best_epoch"]})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    genotype = Genotype.load(args.genotype)
    graph = _load_dataset(args.data)
    net = GenotypeNet(genotype, graph.spec.feature_dim, graph.spec.num_classes)
    net.store.load(args.checkpoint)
    logits = net.forward(graph)
    metric = evaluate(logits, graph.labels, graph.masks["test"], graph.spec.task)
    print(f"test metric: {metric:.6f}")
    return EXIT_OK


def cmd_gen_data(args):
    if args.kind == "sbm":
        graph, _ = generate_sbm(args.classes, args.per_class, args.p_in, args.p_out,
                                args.feature_dim, args.noise,
                                args.seed if args.seed is not None else 0)
    elif args.kind == "chain":
        graph, _ = generate_chain_task(args.length, args.blocks,
                                       args.seed if args.seed is not None else 0)
    else:
        raise ConfigError(f"unknown dataset kind {args.kind!r}")
    if args.split:
        graph = random_split(graph, seed=args.seed if args.seed is not None else 0)
    save_graph_json(graph, args.out)
    print(f"wrote {graph.num_nodes}-node graph to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = verify.run_all(args.target)
    worst = 0.0
    for name in sorted(results):
        err = results[name]
        worst = max(worst, err)
        status = "ok" if err < verify.TOLERANCE else "FAIL"
        print(f"{status:4s} {name:40s} max rel err {err:.3e}")
    print(f"worst: {worst:.3e} (tolerance {verify.TOLERANCE:g})")
    return EXIT_OK if worst < verify.TOLERANCE else EXIT_ERROR


def build_parser():
    p = argparse.ArgumentParser(prog="gnasforge",
                                description="Dual micro/macro architecture search for GNNs")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the grid + dual search")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_search)

    r = sub.add_parser("retrain", help="retrain a derived genotype from scratch")
    r.add_argument("--genotype", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int, default=300)
    r.set_defaults(fn=cmd_retrain)

    e = sub.add_parser("eval", help="evaluate a retrained checkpoint")
    e.add_argument("--genotype", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--kind", required=True, choices=["sbm", "chain"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", action="store_true", help="add a 60/20/20 random split")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", dest="per_class", type=int, default=50)
    g.add_argument("--p-in", dest="p_in", type=float, default=0.3)
    g.add_argument("--p-out", dest="p_out", type=float, default=0.02)
    g.add_argument("--feature-dim", dest="feature_dim", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--length", type=int, default=200)
    g.add_argument("--blocks", type=int, default=3)
    g.set_defaults(fn=cmd_gen_data)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("target", nargs="?", default="all",
                   help="'all', a group (primitives/blocks/route/controller), or a primitive name")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, GraphFormatError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SearchError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
