"""Command-line entry point: ``hmsm <subcommand> ...``.

Every subcommand's options can also come from a JSON ``--config`` file
(keys are the option names with underscores); flags given on the command
line win. ``--print-config`` prints the resolved options and exits. Relative
output paths are placed under ``$MSM_OUT_ROOT`` when it is set.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
4 partially failed recipe or incomplete report.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import export_csv, load_batch, save_batch
from .exceptions import ConfigError, ContractViolation, ModelFileError, NumericFailure
from .datagen import GenProfile, RegimeGraph, Sparsity, sample_ground_truth, sample_sequences
from .model import ModelSpec, load as load_model, save as save_model
from .numerics import Rng

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

logger = logging.getLogger("hmsm")


def out_path(path) -> Path:
    """Resolve an output path against ``$MSM_OUT_ROOT`` when relative."""
    path = Path(path)
    root = os.environ.get("MSM_OUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- subcommands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    if (args.sparsity_fraction is None) == (args.max_parents is None):
        raise ConfigError("give exactly one of --sparsity-fraction or --max-parents")
    sparsity = Sparsity(fraction=args.sparsity_fraction, max_parents=args.max_parents, exact=args.exact_parents)
    profile = GenProfile(
        variant=args.variant,
        sparsity=sparsity,
        transition_noise_std=args.noise_std,
        init_mean_std=args.init_mean_std,
        init_std=args.init_std,
        self_stay_prob=args.stay,
        hidden_per_output=args.hidden_per_output,
        weight_scale=args.weight_scale,
        bias_scale=args.bias_scale,
        deterministic=args.deterministic,
    )
    spec = ModelSpec(d=args.d, M=args.M, K=args.K, hidden_per_output=args.hidden_per_output)
    root = Rng(args.seed)
    truth, graph = sample_ground_truth(root.child(0), spec, profile)
    truth.meta["seed"] = args.seed
    # --data-seed draws fresh sequences (e.g. a held-out set) from the same truth
    data_rng = root.child(1) if args.data_seed is None else Rng(args.data_seed).child(1)
    batch, _ = sample_sequences(data_rng, truth, args.N, args.T, deterministic=args.deterministic)
    batch.seed = args.seed
    batch.meta["data_seed"] = args.data_seed
    batch.meta["variant"] = args.variant
    data = out_path(args.out)
    save_batch(batch, data)
    stem = data.with_suffix("") if data.suffix else data
    save_model(truth, f"{stem}.truth.msm.json")
    graph.save(f"{stem}.graph.json")
    if args.csv:
        export_csv(batch, f"{stem}.csv")
    print(f"wrote {data} (N={batch.N}, T={batch.T}, d={batch.d}) with truth and graph sidecars")
    return EXIT_OK


def _train_config(args):
    from .learning import TrainConfig

    fields = TrainConfig.__dataclass_fields__
    return TrainConfig(**{k: getattr(args, k) for k in fields if getattr(args, k, None) is not None})


def cmd_train(args) -> int:
    from .learning import fit

    batch = load_batch(args.data)
    spec = ModelSpec(
        d=batch.d,
        M=args.M,
        K=args.K,
        hidden_per_output=args.hidden_per_output,
        activation=args.activation,
        locally_connected=not args.fully_connected,
    )
    masks = None
    if args.mask == "truth":
        if not args.graph:
            raise ConfigError("--mask truth needs --graph")
        graph = RegimeGraph.load(args.graph)
        if graph.edges.shape != (spec.K, spec.d, spec.d, spec.M):
            raise ConfigError(f"graph shape {graph.edges.shape} does not match K={spec.K}, d={spec.d}, M={spec.M}")
        masks = np.stack([graph.row_masks(k) for k in range(spec.K)])
    config = _train_config(args)
    model, report = fit(batch, spec, config, masks=masks)
    target = out_path(args.out)
    save_model(model, target)
    log_path = out_path(args.log) if args.log else Path(f"{target}.log.csv")
    with log_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loglik", "lr"])
        for i, (ll, lr) in enumerate(zip(report.epoch_loglik, report.epoch_lr)):
            w.writerow([i, repr(ll), repr(lr)])
    print(f"wrote {target}; restart {report.chosen_restart}, mean log-likelihood "
          f"{report.restart_loglik[report.chosen_restart]:.4f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    from .inference import posteriors

    model = load_model(args.model)
    batch = load_batch(args.data)
    target = out_path(args.out)
    M, K = model.spec.M, model.K
    with target.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", "t", "state"] + [f"p{k}" for k in range(K)])
        for start in range(0, batch.N, 500):
            post = posteriors(model, batch.X[start : start + 500])
            for i, g in enumerate(post.gamma):
                for r, row in enumerate(g):
                    # t is 0-based: row r is the regime of sample M-1+r
                    w.writerow([start + i, M - 1 + r, int(np.argmax(row))] + [repr(float(p)) for p in row])
    print(f"wrote {target}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import (
        estimate_graph,
        f1_graphs,
        heldout_windows,
        match_permutation,
        transition_frequency,
    )
    from .inference import posteriors

    est = load_model(args.model)
    held = load_batch(args.data)
    metrics = args.metric or ["l2", "f1"]
    results: dict = {}
    sigma = None
    truth = load_model(args.truth) if args.truth else None
    if ("l2" in metrics or "f1" in metrics) and truth is None:
        raise ConfigError("--truth is required for l2/f1 metrics")
    if truth is not None:
        windows = heldout_windows(held, args.n_samples, Rng(args.seed), M=est.spec.M)
        match = match_permutation(est, truth, windows)
        sigma = match.sigma
        results["l2"] = match.err
        results["sigma"] = [int(s) for s in sigma]
        results["match_method"] = match.method
    if "f1" in metrics:
        if not args.graph:
            raise ConfigError("--graph is required for the f1 metric")
        score = f1_graphs(estimate_graph(est, held, args.tau), RegimeGraph.load(args.graph), sigma)
        results["f1"] = score.mean_f1
        results["f1_per_state"] = score.f1.tolist()
    if "freq" in metrics:
        rate = args.sample_rate or held.meta.get("sample_rate_hz")
        if not rate:
            raise ConfigError("--sample-rate is required for freq when the data carries none")
        gammas = [g for s in range(0, held.N, 500) for g in posteriors(est, held.X[s : s + 500]).gamma]
        results["freq_hz"] = transition_frequency(gammas, args.kernel, float(rate))
        results["freq_meta"] = {"aggregation": "mean of per-epoch rates", "kernel_len": args.kernel,
                                "sample_rate_hz": float(rate)}
    prefix = out_path(args.out)
    flat = {k: v for k, v in results.items() if isinstance(v, (int, float))}
    with Path(f"{prefix}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in flat.items():
            w.writerow([k, repr(float(v))])
    summary = {"model": str(args.model), "data": str(args.data), "tau": args.tau, **results}
    Path(f"{prefix}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for k, v in flat.items():
        print(f"{k}\t{v:.6g}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .preprocessing import preprocess, read_csv_recording, read_raw_recording, write_outputs

    src = Path(args.input)
    if src.suffix.lower() == ".csv":
        if not args.rate:
            raise ConfigError("--rate is required for CSV input")
        rec = read_csv_recording(src, args.rate)
    else:
        rec = read_raw_recording(src, args.sidecar)
    if args.channels:
        rec = rec.select([c.strip() for c in args.channels.split(",")])
    batch, manifest = preprocess(
        rec, f0_hz=args.notch_hz, q=args.q, target_hz=args.target_hz, seconds=args.epoch_seconds
    )
    manifest["source"] = str(src)
    data, man = write_outputs(batch, manifest, out_path(args.out))
    print(f"wrote {data} ({batch.N} epochs of T={batch.T}, {batch.d} channels) and {man}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .recipes import report

    summary = report(args.result_dir)
    _print_summary(summary)
    return EXIT_OK if summary["complete"] else EXIT_PARTIAL


def cmd_recipe(args) -> int:
    from .recipes import get_recipe, run_recipe

    recipe = get_recipe(args.name, quick=args.quick)
    if args.seeds:
        recipe.seeds = [int(s) for s in args.seeds.split(",")]
    target = out_path(args.out or f"results/{recipe.name}")
    only = set(args.only.split(",")) if args.only else None
    summary = run_recipe(recipe, target, jobs=args.jobs, only=only)
    _print_summary(summary)
    return EXIT_OK if summary["complete"] else EXIT_PARTIAL


def _print_summary(summary) -> None:
    metric = summary["metric"]
    for g in summary["groups"]:
        val = g.get(f"{metric}_mean", "")
        shown = f"{val:.4f}" if isinstance(val, float) else "-"
        print(f"K={g['K']} M={g['M']} {g['variant']:8s} {metric}={shown} n={g['n_seeds']} {g['status']}")
    if summary["missing_cells"]:
        print("missing cells: " + ", ".join(summary["missing_cells"]))


# -- parser -------------------------------------------------------------------------

def _add_train_flags(p) -> None:
    from .learning import TrainConfig

    defaults = TrainConfig()
    for name, f in TrainConfig.__dataclass_fields__.items():
        flag = "--" + name.replace("_", "-")
        default = getattr(defaults, name)
        if isinstance(default, bool):
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=default)
        else:
            p.add_argument(flag, dest=name, type=float if default is None else type(default), default=default)


# options that must be set, on the command line or in --config
REQUIRED = {
    "generate": ["out"],
    "train": ["data", "K", "M", "out"],
    "decode": ["model", "data", "out"],
    "eval": ["model", "data", "out"],
    "preprocess": ["input", "out"],
    "report": [],
    "recipe": [],
}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so they do not clobber values given before the subcommand
    def default(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default(None), help="JSON file with option defaults for the subcommand")
    p.add_argument("--print-config", action="store_true", default=default(False),
                   help="print the resolved options and exit")
    p.add_argument("-v", "--verbose", action="count", default=default(0))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmsm", description="Identifiable high-order Markov switching models", parents=[_common(False)]
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(True)

    def _sub(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = _sub("generate", help="sample a ground-truth model and sequences")
    g.add_argument("--d", type=int, default=5)
    g.add_argument("--M", type=int, default=2)
    g.add_argument("--K", type=int, default=3)
    g.add_argument("--N", type=int, default=2000)
    g.add_argument("--T", type=int, default=200)
    g.add_argument("--variant", choices=["zero", "nonzero", "relu"], default="zero")
    g.add_argument("--sparsity-fraction", type=float)
    g.add_argument("--max-parents", type=int)
    g.add_argument("--exact-parents", action="store_true")
    g.add_argument("--noise-std", type=float, default=0.05)
    g.add_argument("--init-mean-std", type=float, default=0.7)
    g.add_argument("--init-std", type=float, default=0.7)
    g.add_argument("--stay", type=float, default=0.9)
    g.add_argument("--hidden-per-output", type=int, default=16)
    g.add_argument("--weight-scale", type=float, default=1.0)
    g.add_argument("--bias-scale", type=float, default=1.0)
    g.add_argument("--deterministic", action="store_true")
    g.add_argument("--seed", type=int, default=0, help="seed of the ground truth (and of the data by default)")
    g.add_argument("--data-seed", type=int, help="separate seed for the sampled sequences")
    g.add_argument("--csv", action="store_true", help="also export long-format CSV")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = _sub("train", help="fit a model with generalised EM")
    t.add_argument("--data")
    t.add_argument("--K", type=int)
    t.add_argument("--M", type=int)
    t.add_argument("--hidden-per-output", type=int, default=16)
    t.add_argument("--activation", choices=["cosine", "relu"], default="cosine")
    t.add_argument("--fully-connected", action="store_true")
    t.add_argument("--mask", choices=["dense", "truth"], default="dense")
    t.add_argument("--graph")
    t.add_argument("--out")
    t.add_argument("--log", help="per-epoch CSV log (default: <out>.log.csv)")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    d = _sub("decode", help="posterior regime marginals and argmax path")
    d.add_argument("--model")
    d.add_argument("--data")
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode)

    e = _sub("eval", help="score an estimate against ground truth")
    e.add_argument("--model")
    e.add_argument("--data", help="held-out sequences")
    e.add_argument("--truth")
    e.add_argument("--graph")
    e.add_argument("--metric", action="append", choices=["l2", "f1", "freq"])
    e.add_argument("--tau", type=float, default=0.05)
    e.add_argument("--n-samples", type=int, default=1000)
    e.add_argument("--sample-rate", type=float)
    e.add_argument("--kernel", type=int, default=3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="output prefix for .csv and .json")
    e.set_defaults(func=cmd_eval)

    p = _sub("preprocess", help="notch, decimate, standardize and epoch a recording")
    p.add_argument("--input", help="CSV with channel header, or raw f64 with JSON sidecar")
    p.add_argument("--rate", type=float, help="sample rate for CSV input")
    p.add_argument("--sidecar")
    p.add_argument("--channels", help="comma-separated channel labels to keep")
    p.add_argument("--notch-hz", type=float, default=50.0)
    p.add_argument("--q", type=float, default=35.0)
    p.add_argument("--target-hz", type=float, default=200.0)
    p.add_argument("--epoch-seconds", type=float, default=2.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_preprocess)

    r = _sub("report", help="aggregate a recipe result directory")
    r.add_argument("result_dir")
    r.set_defaults(func=cmd_report)

    rc = _sub("recipe", help="run a named experiment recipe or a recipe JSON file")
    rc.add_argument("name")
    rc.add_argument("--out")
    rc.add_argument("--quick", action="store_true", help="tiny smoke-scale version")
    rc.add_argument("--jobs", type=int, default=1)
    rc.add_argument("--only", help="comma-separated cell ids")
    rc.add_argument("--seeds", help="comma-separated seed list override")
    rc.set_defaults(func=cmd_recipe)
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        command = cfg.pop("command", args.command)
        if command != args.command:
            raise ConfigError(f"config is for {command!r}, not {args.command!r}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ConfigError(f"{args.command}: missing required option(s) {flags}")
    return args


def resolved_config(args) -> dict:
    skip = {"func", "config", "print_config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.print_config:
        print(json.dumps(resolved_config(args), indent=2))
        return EXIT_OK
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractViolation, ModelFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
