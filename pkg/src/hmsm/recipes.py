"""Experiment recipes: generate -> train -> evaluate over a grid of cells.

A recipe is a JSON-serializable bundle of generator settings, a (K, M,
variant) grid, explicit seeds, a training config and an evaluation plan.
``run_recipe`` writes one metric CSV per cell plus aggregate tables whose
axes follow the synthetic figures (metric against lag, one series per K, or
one column per generator variant).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import VARIANTS, GenProfile, Sparsity, sample_ground_truth, sample_sequences
from .evaluation import estimate_graph, f1_graphs, heldout_windows, match_permutation
from .exceptions import ConfigError
from .learning import TrainConfig, fit, mean_loglik
from .model import ModelSpec
from .numerics import Rng

logger = logging.getLogger(__name__)

VARIANT_LABELS = {"zero": "Zero", "nonzero": "NonZero", "relu": "Relu"}
METRIC_FIELDS = ["l2", "f1", "train_loglik", "heldout_loglik", "epochs", "chosen_restart"]
CELL_KEYS = ["K", "M", "variant", "seed"]


@dataclass
class Recipe:
    name: str
    metric: str
    K_values: list[int]
    M_values: list[int]
    variants: list[str]
    seeds: list[int]
    d: int = 5
    N: int = 2000
    T: int = 200
    heldout_N: int = 200
    l2_samples: int = 1000
    tau: float = 0.05
    mask_mode: str = "dense"
    # parent-cap table keyed by lag; keys are strings in JSON
    sparsity_by_M: dict = field(default_factory=dict)
    profile: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        if self.metric not in ("f1", "l2"):
            raise ConfigError(f"metric must be 'f1' or 'l2', got {self.metric!r}")
        if self.mask_mode not in ("dense", "truth"):
            raise ConfigError("mask_mode must be 'dense' or 'truth'")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        if not self.seeds:
            raise ConfigError("a recipe needs an explicit, non-empty seed list")
        self.sparsity_by_M = {int(k): v for k, v in self.sparsity_by_M.items()}
        for M in self.M_values:
            if M not in self.sparsity_by_M:
                raise ConfigError(f"no sparsity entry for M={M}")
        TrainConfig.from_dict(self.train)

    def cells(self) -> list[dict]:
        return [
            {"K": K, "M": M, "variant": v, "seed": s}
            for K in self.K_values
            for M in self.M_values
            for v in self.variants
            for s in self.seeds
        ]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["sparsity_by_M"] = {str(k): v for k, v in sorted(self.sparsity_by_M.items())}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Recipe":
        return cls(**data)

    @classmethod
    def load(cls, path) -> "Recipe":
        return cls.from_dict(json.loads(Path(path).read_text()))


def cell_id(cell: dict) -> str:
    return f"K{cell['K']}_M{cell['M']}_{cell['variant']}_s{cell['seed']}"


# -- built-in recipes ------------------------------------------------------

MODERATE = {1: {"max_parents": 5}, 2: {"max_parents": 10}, 5: {"max_parents": 20}}
HIGH = {1: {"max_parents": 5}, 2: {"max_parents": 5}, 5: {"max_parents": 5}}
DESK_TRAIN = {"max_epochs": 60, "batch_size": 100, "n_restarts": 2}


def _fig1(name, sparsity, description) -> Recipe:
    return Recipe(
        name=name,
        metric="f1",
        K_values=[3, 5],
        M_values=[1, 2, 5],
        variants=["zero"],
        seeds=[0],
        sparsity_by_M=sparsity,
        train=dict(DESK_TRAIN),
        description=description,
    )


def builtin_recipes() -> dict[str, Recipe]:
    return {
        "fig1a-desk": _fig1("fig1a-desk", MODERATE, "F1 against lag, moderate sparsity (caps up to 20 parents)"),
        "fig1b-desk": _fig1("fig1b-desk", HIGH, "F1 against lag, high sparsity (at most 5 parents)"),
        "fig1c-desk": Recipe(
            name="fig1c-desk",
            metric="l2",
            K_values=[3],
            M_values=[1, 2],
            variants=["zero", "nonzero", "relu"],
            seeds=[0, 1, 2],
            N=1000,
            mask_mode="truth",
            sparsity_by_M={1: {"max_parents": 5}, 2: {"max_parents": 10}},
            train={"max_epochs": 40, "batch_size": 25, "n_restarts": 1},
            description="matched L2 per generator variant, truth-masked networks",
        ),
    }


def quick_version(recipe: Recipe) -> Recipe:
    """Tiny variant of a recipe for smoke and determinism checks."""
    small = {M: {"max_parents": min(2, 3 * M)} for M in recipe.M_values[:2]}
    return dataclasses.replace(
        recipe,
        name=recipe.name + "-quick",
        K_values=recipe.K_values[:1],
        M_values=recipe.M_values[:2],
        seeds=recipe.seeds[:2],
        d=3,
        N=24,
        T=30,
        heldout_N=8,
        l2_samples=100,
        sparsity_by_M=small,
        profile={**recipe.profile, "hidden_per_output": 4},
        train={"max_epochs": 2, "batch_size": 12, "n_restarts": 1, "linear_restarts": 1,
               "linear_iters": 3, "warmup_epochs": 1},
    )


def get_recipe(name: str, quick: bool = False) -> Recipe:
    recipes = builtin_recipes()
    if name not in recipes:
        path = Path(name)
        if path.is_file():
            recipe = Recipe.load(path)
        else:
            raise ConfigError(f"unknown recipe {name!r}; built-ins: {sorted(recipes)}")
    else:
        recipe = recipes[name]
    return quick_version(recipe) if quick else recipe


# -- running ----------------------------------------------------------------

def run_cell(recipe: Recipe, cell: dict) -> dict:
    """Generate, train and evaluate one grid cell; returns its metric row."""
    K, M, variant, seed = cell["K"], cell["M"], cell["variant"], cell["seed"]
    root = Rng(seed).child(K, M, VARIANTS.index(variant))
    profile = GenProfile.from_dict({
        **recipe.profile,
        "variant": variant,
        "sparsity": Sparsity.from_dict(recipe.sparsity_by_M[M]),
    })
    spec = ModelSpec(d=recipe.d, M=M, K=K, hidden_per_output=profile.hidden_per_output)
    truth, graph = sample_ground_truth(root.child(0), spec, profile)
    train, _ = sample_sequences(root.child(1), truth, recipe.N, recipe.T)
    held, _ = sample_sequences(root.child(2), truth, recipe.heldout_N, recipe.T)

    fit_spec = dataclasses.replace(truth.spec, shared_band=None)
    masks = np.stack([graph.row_masks(k) for k in range(K)]) if recipe.mask_mode == "truth" else None
    config = TrainConfig.from_dict({**recipe.train, "seed": seed})
    est, report = fit(train, fit_spec, config, masks=masks)

    windows = heldout_windows(held, recipe.l2_samples, root.child(3), M=M)
    match = match_permutation(est, truth, windows)
    score = f1_graphs(estimate_graph(est, held, recipe.tau), graph, match.sigma)
    row = dict(cell)
    row.update({
        "l2": match.err,
        "f1": score.mean_f1,
        "train_loglik": report.restart_loglik[report.chosen_restart],
        "heldout_loglik": mean_loglik(est, held.X),
        "epochs": len(report.epoch_loglik),
        "chosen_restart": report.chosen_restart,
    })
    return row


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, fields, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f, "")) for f in fields])
    return path


def _cell_task(args):
    recipe_dict, cell, cell_dir = args
    recipe = Recipe.from_dict(recipe_dict)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("metrics.csv", "error.txt"):
        (cell_dir / stale).unlink(missing_ok=True)
    t0 = time.perf_counter()
    try:
        row = run_cell(recipe, cell)
    except Exception as exc:  # recorded per cell; the run continues
        (cell_dir / "error.txt").write_text("".join(traceback.format_exception(exc)))
        return cell, False, time.perf_counter() - t0
    write_rows(cell_dir / "metrics.csv", CELL_KEYS + METRIC_FIELDS, [row])
    return cell, True, time.perf_counter() - t0


def run_recipe(recipe: Recipe, out_dir, *, jobs: int = 1, only=None) -> dict:
    """Run every cell (or the ids in ``only``) and write the aggregate tables.

    Returns the report summary; ``summary["complete"]`` is False when any
    cell failed or is missing.
    """
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "recipe.json").write_text(json.dumps(recipe.to_dict(), indent=2, sort_keys=True))
    cells = [c for c in recipe.cells() if only is None or cell_id(c) in only]
    tasks = [(recipe.to_dict(), c, str(out / "cells" / cell_id(c))) for c in cells]
    progress = out / "progress.log"

    def log(cell, ok, secs):
        with progress.open("a") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {cell_id(cell)} {'ok' if ok else 'FAILED'} {secs:.1f}s\n")
        logger.info("cell %s %s (%.1fs)", cell_id(cell), "ok" if ok else "failed", secs)

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_cell_task, tasks):
                log(*res)
    else:
        for t in tasks:
            log(*_cell_task(t))
    return report(out)


# -- reporting ----------------------------------------------------------------

def _read_cell(path: Path) -> dict | None:
    if not path.is_file():
        return None
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows[0] if rows else None


def report(result_dir) -> dict:
    """Collate per-cell CSVs into ``aggregate.csv``, ``aggregate.json`` and the
    figure-shaped ``table.csv``.

    Groups are (K, M, variant); mean and standard deviation run over seeds
    (std uses ``ddof=1``, and is 0 for a single seed). A group with any
    missing or failed seed is flagged ``incomplete``.
    """
    root = Path(result_dir)
    recipe = Recipe.load(root / "recipe.json")
    groups: dict[tuple, list] = {}
    missing = []
    for cell in recipe.cells():
        key = (cell["K"], cell["M"], cell["variant"])
        row = _read_cell(root / "cells" / cell_id(cell) / "metrics.csv")
        groups.setdefault(key, [])
        if row is None:
            missing.append(cell_id(cell))
        else:
            groups[key].append(row)

    agg_rows = []
    for (K, M, variant), rows in groups.items():
        expected = len(recipe.seeds)
        out = {"K": K, "M": M, "variant": variant, "n_seeds": len(rows),
               "status": "complete" if len(rows) == expected else "incomplete"}
        for f in ("l2", "f1"):
            vals = np.array([float(r[f]) for r in rows])
            out[f"{f}_mean"] = float(vals.mean()) if vals.size else ""
            out[f"{f}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else "")
        agg_rows.append(out)

    fields = ["K", "M", "variant", "n_seeds", "status", "l2_mean", "l2_std", "f1_mean", "f1_std"]
    write_rows(root / "aggregate.csv", fields, agg_rows)
    _write_table(root / "table.csv", recipe, agg_rows)
    summary = {
        "recipe": recipe.name,
        "metric": recipe.metric,
        "complete": not missing,
        "missing_cells": missing,
        "groups": agg_rows,
    }
    (root / "aggregate.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _write_table(path, recipe: Recipe, agg_rows) -> None:
    lookup = {(r["K"], r["M"], r["variant"]): r for r in agg_rows}
    col = f"{recipe.metric}_mean"
    if recipe.metric == "l2" and len(recipe.variants) > 1:
        fields = ["K", "M"] + [VARIANT_LABELS[v] for v in recipe.variants]
        rows = []
        for K in recipe.K_values:
            for M in recipe.M_values:
                row = {"K": K, "M": M}
                for v in recipe.variants:
                    g = lookup[(K, M, v)]
                    row[VARIANT_LABELS[v]] = g[col] if g["status"] == "complete" else "incomplete"
                rows.append(row)
    else:
        fields = ["K", "M", "variant", recipe.metric.upper()]
        rows = []
        for K in recipe.K_values:
            for M in recipe.M_values:
                for v in recipe.variants:
                    g = lookup[(K, M, v)]
                    rows.append({"K": K, "M": M, "variant": v,
                                 recipe.metric.upper(): g[col] if g["status"] == "complete" else "incomplete"})
    write_rows(path, fields, rows)
