"""Command-line entry point: ``ctnn {gen-data,train,eval,spectral,gradcheck}``."""

from __future__ import annotations

import argparse
import inspect
import json
import os
import sys
import warnings

import numpy as np

from .errors import CTNNError, ConfigError, NonConvergence


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _json_arg(text: str):
    """Inline JSON or a path to a JSON file."""
    if os.path.exists(text):
        with open(text) as fh:
            return json.load(fh)
    return json.loads(text)


def cmd_gen_data(args) -> int:
    from .datagen import GENERATORS, save_dataset

    params = {}
    for item in args.param or []:
        k, _, v = item.partition("=")
        params[k.replace("-", "_")] = _value(v)
    gen = GENERATORS[args.generator]
    allowed = set(inspect.signature(gen).parameters) - {"seed"}
    for k in params:
        if k not in allowed:
            raise ConfigError(f"unknown parameter for generator {args.generator}", f"param.{k}")
    ds = gen(seed=args.seed, **params)
    save_dataset(ds, args.out)
    print(json.dumps(ds.manifest))
    return 0


def cmd_train(args) -> int:
    from .train import build_dataset, load_config, output_dim, save_model, split_arrays, stdout_emitter, train

    cfg = load_config(args.config)
    report = train(cfg, emit=stdout_emitter, keep_models=bool(args.models_dir))
    models = report.pop("_models", {})
    if args.models_dir:
        os.makedirs(args.models_dir, exist_ok=True)
        data = build_dataset(cfg.dataset)
        x, y = split_arrays(data, "train")
        arms = {a.name: (i, a) for i, a in enumerate(cfg.arms)}
        for (name, seed), model in models.items():
            ai, arm = arms[name]
            pseed = seed if cfg.param_seeding == "paired" else seed * 1000 + ai
            save_model(os.path.join(args.models_dir, f"{name}-seed{seed}.json"), model, arm.model, x.shape,
                       output_dim(data, y), pseed)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    return 0


def cmd_eval(args) -> int:
    from .datagen import load_dataset
    from .train import evaluate, load_model, split_arrays

    model = load_model(args.model)
    x, y = split_arrays(load_dataset(args.data), args.split)
    print(json.dumps({"metric": args.metric, "value": evaluate(model, x, y, args.metric)}))
    return 0


def cmd_spectral(args) -> int:
    from .complex import CombinatorialComplex, InducedDigraph, NeighborhoodSpec, induced_digraph
    from .copresheaf import CochainField, Copresheaf
    from .families import FixedPerEdge, make_family
    from .laplacian import spectral_report, symmetrize
    from .nn import make_rng

    with open(args.complex) as fh:
        cc = CombinatorialComplex.from_json(fh.read())
    spec = NeighborhoodSpec.from_dict(_json_arg(args.neighborhood))
    g = induced_digraph(cc, spec)
    if args.orient:
        g = InducedDigraph.from_edges([(s, t) for s, t in g.edges if s < t], g.vertices)
    fdoc = _json_arg(args.family)
    if "edges" in fdoc:
        fam = FixedPerEdge.from_json(json.dumps(fdoc))
        cp = Copresheaf.from_fixed(g, fam, fam.dim)
    else:
        fdoc = dict(fdoc)
        kind, dim = fdoc.pop("kind"), int(fdoc.pop("dim"))
        seed = int(fdoc.pop("seed", 0))
        fam = make_family(kind, dim, rng=make_rng(seed), **fdoc.pop("options", {}))
        rng = np.random.Generator(np.random.Philox(seed + 1))
        feats = CochainField({v: rng.standard_normal(fam.cond_dim) for v in g.vertices})
        cp = Copresheaf.from_family(g, fam, feats)
    scp = symmetrize(cp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        report = spectral_report(scp, steps=args.steps, seed=args.seed)
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps({k: report[k] for k in ("lambda_max", "kernel_dim", "converged")}))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import TARGETS, TOLERANCE

    results = TARGETS[args.target](args.points)
    ok = True
    for name, err in results.items():
        passed = err <= TOLERANCE
        ok &= passed
        print(json.dumps({"check": name, "max_rel_error": err, "pass": passed}))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctnn", description="Copresheaf topological neural networks")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--generator", required=True, choices=["heat", "advection", "cc-class", "token-rel"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter, repeatable")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train every arm of an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="summary JSON path")
    t.add_argument("--models-dir", help="write one model snapshot per arm and seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", required=True, choices=["mse", "accuracy"])
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("spectral", help="spectral report of a copresheaf Laplacian")
    s.add_argument("--complex", required=True)
    s.add_argument("--neighborhood", required=True, help="JSON or path")
    s.add_argument("--family", required=True, help="JSON or path")
    s.add_argument("--report", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--orient", action="store_true", help="keep only edges with source id < target id before symmetrizing")
    s.set_defaults(func=cmd_spectral)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--target", required=True, choices=["ops", "layers", "energy"])
    c.add_argument("--points", type=int, default=10)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CTNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
