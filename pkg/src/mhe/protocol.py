"""Seeded experiment runner: in-domain benchmark, zero-shot transfer, and
few-shot cross-dataset transfer at desk scale.

A plan enumerates (variant, init, pct, seed, target) cells; every cell runs
exactly once and is keyed uniquely, so a full replay with the same plan
reproduces every report bit for bit. Comparative claims (pretrained vs
random init, 5% vs 1%, deformable vs plain conv) are statistical trends
over the seed list, never single-run point claims.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import hmt
from .errors import ConfigError, DataError, DivergenceError
from .losses import LossConfig
from .metrics import MetricsReport, evaluate_split
from .model import (Checkpoint, HeightRegressor, ModelSpec, TrainConfig,
                    calibrate_head_bias, init_from, save_checkpoint, train)
from .seeding import path_hash
from .synthdata import PRESETS, DatasetManifest, generate_dataset, subsample_fewshot

# variant name -> (deformable mid block?, loss variant trained with)
VARIANT_TABLE: dict[str, tuple[bool, str]] = {
    "conv_baseline": (False, "mse_only"),
    "sdc": (True, "mse_only"),
    "sdc+msg": (True, "msg"),
    "sdc+si": (True, "si"),
    "sdc+rank": (True, "rank"),
}


@dataclass(frozen=True)
class ExperimentPlan:
    out_dir: str
    data_dir: str
    source_preset: str = "source"
    target_presets: tuple[str, ...] = ("target_a",)
    variants: tuple[str, ...] = ("conv_baseline", "sdc")
    init_modes: tuple[str, ...] = ("pretrained", "random")
    pcts: tuple[float, ...] = (1.0, 5.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    n_source: tuple[int, int, int] = (256, 16, 64)
    n_target: tuple[int, int, int] = (64, 8, 64)
    pretrain_epochs: int = 30
    finetune_epochs: int = 15
    pretrain_lr: float = 3e-3
    finetune_lr: float = 1e-3
    batch: int = 8
    finetune_batch: int = 2
    data_seed: int = 0

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANT_TABLE:
                raise ConfigError(f"unknown model variant {v!r}")
        for m in self.init_modes:
            if m not in ("pretrained", "random"):
                raise ConfigError(f"unknown init mode {m!r}")
        for p in (self.source_preset, *self.target_presets):
            if p not in PRESETS:
                raise ConfigError(f"unknown dataset preset {p!r}")

    def plan_hash(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.blake2b(canon.encode(), digest_size=6).hexdigest()

    def results_dir(self) -> Path:
        return Path(self.out_dir) / self.plan_hash()

    def model_spec(self, variant: str) -> ModelSpec:
        use_sdc, _ = VARIANT_TABLE[variant]
        return ModelSpec(use_sdc=use_sdc)

    def loss_config(self, variant: str) -> LossConfig:
        _, loss_variant = VARIANT_TABLE[variant]
        return LossConfig(variant=loss_variant)


class CellKey(NamedTuple):
    target: str
    variant: str
    init: str
    pct: float     # 0 marks evaluation without fine-tuning
    seed: int

    def slug(self) -> str:
        pct = f"{self.pct:g}".replace(".", "_")
        return f"{self.target}__{self.variant}__{self.init}__p{pct}__s{self.seed}"


@dataclass
class ResultTable:
    cells: dict[CellKey, MetricsReport] = field(default_factory=dict)

    HEADER = "target,variant,init,pct,seed,mae,rmse,si_rmse,msge,n_images"

    def add(self, key: CellKey, report: MetricsReport) -> None:
        if key in self.cells:
            raise ConfigError(f"duplicate result cell {key}")
        self.cells[key] = report

    def row(self, key: CellKey) -> str:
        r = self.cells[key]
        return (f"{key.target},{key.variant},{key.init},{key.pct:g},{key.seed},"
                f"{r.mae!r},{r.rmse!r},{r.si_rmse!r},{r.msge!r},{r.n_images}")

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for key in sorted(self.cells):
            lines.append(self.row(key))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != cls.HEADER:
            raise DataError("result CSV header mismatch")
        table = cls()
        for ln in lines[1:]:
            t, v, i, pct, seed, mae, rmse, si, msge, n = ln.split(",")
            table.add(CellKey(t, v, i, float(pct), int(seed)),
                      MetricsReport(float(mae), float(rmse), float(si),
                                    float(msge), int(n)))
        return table

    def mean_over_seeds(self, target: str, variant: str, init: str,
                        pct: float, metric: str = "mae") -> float:
        vals = [getattr(r, metric) for k, r in self.cells.items()
                if (k.target, k.variant, k.init, k.pct) == (target, variant, init, pct)]
        if not vals:
            raise KeyError(f"no cells for {(target, variant, init, pct)}")
        return float(np.mean(vals))

    def aggregate(self) -> dict[tuple[str, str, str, float], dict[str, tuple[float, float | None]]]:
        """(target, variant, init, pct) -> metric -> (mean, std over seeds);
        std is sample std and only present with >= 2 seeds."""
        groups: dict[tuple, list[MetricsReport]] = {}
        for k, r in self.cells.items():
            groups.setdefault((k.target, k.variant, k.init, k.pct), []).append(r)
        out = {}
        for gk, reports in sorted(groups.items()):
            stat = {}
            for metric in ("mae", "rmse", "si_rmse", "msge"):
                vals = np.array([getattr(r, metric) for r in reports])
                std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
                stat[metric] = (float(vals.mean()), std)
            out[gk] = stat
        return out


# ----------------------------------------------------------------------
# dataset and checkpoint orchestration


def ensure_datasets(plan: ExperimentPlan) -> dict[str, DatasetManifest]:
    """Generate (or reuse, when bit-compatible settings exist on disk) the
    source and target datasets named by the plan."""
    out: dict[str, DatasetManifest] = {}
    jobs = [(plan.source_preset, plan.n_source)] + \
           [(t, plan.n_target) for t in plan.target_presets]
    for preset, (n_tr, n_va, n_te) in jobs:
        root = Path(plan.data_dir) / preset
        spec = PRESETS[preset]
        want = {"train": n_tr, "val": n_va, "test": n_te}
        if (root / "manifest.json").exists():
            existing = DatasetManifest.load(root)
            if (existing.scene == spec and existing.counts() == want
                    and existing.root_seed == plan.data_seed):
                out[preset] = existing
                continue
        out[preset] = generate_dataset(spec, n_tr, n_va, n_te, root,
                                       root_seed=plan.data_seed, name=preset)
    return out


def _pretrain_seed(plan: ExperimentPlan, variant: str, seed: int) -> int:
    return path_hash("pretrain", variant, seed) & 0x7FFFFFFF


def mean_train_height(manifest: DatasetManifest, split: str = "train") -> float:
    vals = [float(hmt.load(h).mean()) for _, h in manifest.split_pairs(split)]
    return float(np.mean(vals))


def run_pretrain(plan: ExperimentPlan, variant: str, seed: int,
                 source: DatasetManifest) -> tuple[Checkpoint, list[float]]:
    """Train a variant on the source dataset; the loss curve must end below
    its start (divergence guard aside, a flat curve is treated as failure)."""
    spec = plan.model_spec(variant)
    run_seed = _pretrain_seed(plan, variant, seed)
    model = HeightRegressor.build(spec, seed=run_seed)
    calibrate_head_bias(model, mean_train_height(source))
    cfg = TrainConfig(epochs=plan.pretrain_epochs, lr=plan.pretrain_lr,
                      batch=plan.batch, seed=run_seed,
                      loss=plan.loss_config(variant))
    ckpt, curve = train(model, source, cfg)
    if curve and not curve[-1] < curve[0]:
        raise DivergenceError(
            f"pretrain loss did not improve: {curve[0]:.4f} -> {curve[-1]:.4f}")
    return ckpt, curve


def run_zeroshot(ckpt: Checkpoint, targets: dict[str, DatasetManifest]) -> dict[str, MetricsReport]:
    """Evaluate a checkpoint on each target's full test split, no training."""
    model = init_from(HeightRegressor(ckpt.spec), ckpt, "full")
    return {name: evaluate_split(model.predict, man) for name, man in targets.items()}


def run_fewshot(plan: ExperimentPlan, ckpt: Checkpoint, variant: str,
                target: DatasetManifest, pct: float, init: str,
                seed: int) -> MetricsReport:
    """Fine-tune on a few-shot subset of the target and evaluate on its full
    test split. ``init`` picks the checkpoint weights or a fresh random init."""
    model = HeightRegressor(ckpt.spec)
    run_seed = path_hash("fewshot", variant, target.name, pct, init, seed) & 0x7FFFFFFF
    init_from(model, ckpt if init == "pretrained" else None,
              "full" if init == "pretrained" else "random", seed=run_seed)
    subset = subsample_fewshot(target, pct, seed)
    if init == "random":
        calibrate_head_bias(model, mean_train_height(subset))
    cfg = TrainConfig(epochs=plan.finetune_epochs, lr=plan.finetune_lr,
                      batch=min(plan.finetune_batch, subset.counts()["train"]),
                      seed=run_seed, loss=plan.loss_config(variant))
    train(model, subset, cfg)
    return evaluate_split(model.predict, target)


# ----------------------------------------------------------------------
# full plan


def run_plan(plan: ExperimentPlan, log=None) -> ResultTable:
    """Execute every cell of the plan and write result files.

    Emits, under ``<out_dir>/<plan-hash>/``: one CSV per cell under
    ``cells/``, the combined ``table.csv``, an aligned ``table.txt``, the
    pretrain checkpoints and loss curves, and the resolved plan.
    """
    say = log or (lambda msg: None)
    res_dir = plan.results_dir()
    (res_dir / "cells").mkdir(parents=True, exist_ok=True)
    (res_dir / "pretrain").mkdir(parents=True, exist_ok=True)
    (res_dir / "plan.json").write_text(
        json.dumps(asdict(plan), sort_keys=True, indent=1, default=str))

    datasets = ensure_datasets(plan)
    source = datasets[plan.source_preset]
    targets = {t: datasets[t] for t in plan.target_presets}
    table = ResultTable()

    for variant in plan.variants:
        for seed in plan.seeds:
            say(f"pretrain {variant} seed {seed}")
            ckpt, curve = run_pretrain(plan, variant, seed, source)
            stem = res_dir / "pretrain" / f"{variant}__s{seed}"
            save_checkpoint(stem.with_suffix(".ckpt"), ckpt)
            stem.with_suffix(".curve.csv").write_text(
                "epoch,loss\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(curve)) + "\n")

            model = init_from(HeightRegressor(ckpt.spec), ckpt, "full")
            table.add(CellKey(plan.source_preset, variant, "pretrained", 0.0, seed),
                      evaluate_split(model.predict, source))
            for tname, rep in run_zeroshot(ckpt, targets).items():
                table.add(CellKey(tname, variant, "pretrained", 0.0, seed), rep)

            for tname, tman in targets.items():
                for pct in plan.pcts:
                    for init in plan.init_modes:
                        say(f"fewshot {variant} {tname} init={init} pct={pct:g} seed={seed}")
                        rep = run_fewshot(plan, ckpt, variant, tman, pct, init, seed)
                        table.add(CellKey(tname, variant, init, pct, seed), rep)

    emit_tables(table, res_dir, pcts=plan.pcts, expected=expected_cells(plan))
    return table


def expected_cells(plan: ExperimentPlan) -> list[CellKey]:
    """Full enumeration of the plan's result keys (evaluation-only rows
    included); run_plan must fill every one exactly once."""
    keys = []
    for variant in plan.variants:
        for seed in plan.seeds:
            keys.append(CellKey(plan.source_preset, variant, "pretrained", 0.0, seed))
            for tname in plan.target_presets:
                keys.append(CellKey(tname, variant, "pretrained", 0.0, seed))
                for pct in plan.pcts:
                    for init in plan.init_modes:
                        keys.append(CellKey(tname, variant, init, pct, seed))
    return keys


def emit_tables(table: ResultTable, out_dir: str | Path,
                pcts: Iterable[float] = (1.0, 5.0),
                expected: Iterable[CellKey] | None = None) -> None:
    """Write per-cell CSVs, the combined CSV, and an aligned text pivot with
    the best value per column flagged. With ``expected`` given, refuse to
    emit an incomplete plan."""
    if expected is not None:
        missing = [k for k in expected if k not in table.cells]
        if missing:
            raise ConfigError(f"plan incomplete: {len(missing)} missing cells, "
                              f"first {missing[0]}")
    out = Path(out_dir)
    cells = out / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    for key in sorted(table.cells):
        (cells / f"{key.slug()}.csv").write_text(
            table.HEADER + "\n" + table.row(key) + "\n")
    (out / "table.csv").write_text(table.to_csv())
    (out / "table.txt").write_text(render_pivot(table, pcts))


METRIC_NAMES = ("mae", "rmse", "si_rmse", "msge")


def render_pivot(table: ResultTable, pcts: Iterable[float]) -> str:
    """Mean-over-seeds pivot: one row per (target, variant, init), metric
    columns grouped by training fraction; '*' marks the column minimum."""
    agg = table.aggregate()
    pcts = [p for p in pcts if p > 0]
    zero_rows = sorted(k for k in agg if k[3] == 0)
    few_groups = sorted({(k[0], k[1], k[2]) for k in agg if k[3] in pcts})

    lines = []
    if zero_rows:
        lines.append("== no fine-tuning (pct=0: in-domain for the source, "
                     "zero-shot for targets) ==")
        head = f"{'target':<12} {'variant':<14} " + " ".join(
            f"{m.upper():>9}" for m in METRIC_NAMES)
        lines.append(head)
        for k in zero_rows:
            stat = agg[k]
            row = f"{k[0]:<12} {k[1]:<14} " + " ".join(
                f"{stat[m][0]:>9.4f}" for m in METRIC_NAMES)
            lines.append(row)
        lines.append("")

    if few_groups:
        lines.append("== few-shot fine-tuning (mean over seeds) ==")
        col_heads = []
        for pct in pcts:
            col_heads += [f"{m.upper()}@{pct:g}%" for m in METRIC_NAMES]
        lines.append(f"{'target':<12} {'variant':<14} {'init':<11} "
                     + " ".join(f"{h:>11}" for h in col_heads))
        matrix = []
        for g in few_groups:
            vals = []
            for pct in pcts:
                key = (g[0], g[1], g[2], pct)
                for m in METRIC_NAMES:
                    vals.append(agg[key][m][0] if key in agg else math.nan)
            matrix.append((g, vals))
        n_cols = len(pcts) * len(METRIC_NAMES)
        best = [min((row[1][c] for row in matrix if not math.isnan(row[1][c])),
                    default=math.nan) for c in range(n_cols)]
        for g, vals in matrix:
            cells_txt = []
            for c, v in enumerate(vals):
                mark = "*" if v == best[c] else " "
                cells_txt.append(f"{v:>10.4f}{mark}")
            lines.append(f"{g[0]:<12} {g[1]:<14} {g[2]:<11} " + " ".join(cells_txt))
    return "\n".join(lines) + "\n"
