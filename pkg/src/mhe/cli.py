"""Command-line entry point.

Subcommands: ``gen``, ``train``, ``finetune``, ``eval``, ``gradcheck``,
``bench``. Settings come from an INI config file (sections of key=value)
with ``--set section.key=value`` overrides; unknown keys are rejected. The
fully resolved config is echoed into every run's output directory so runs
are self-describing and replayable.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric divergence,
5 check failure. Errors print one machine-parsable line to stderr.
``MHE_THREADS`` caps kernel (BLAS) threads; it is applied at package import.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
from pathlib import Path

from .errors import CheckFailure, ConfigError, DataError, DivergenceError

_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_bool(s: str) -> bool:
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_list(cast):
    def parse(s: str):
        items = [p.strip() for p in s.split(",") if p.strip()]
        return tuple(cast(p) for p in items)
    return parse


# (section, key) -> parser; every subcommand rejects keys outside its schema
_SCENE_KEYS = {
    "height": int, "width": int, "density": float, "height_mu": float,
    "height_sigma": float, "height_max": float, "camera_height": int,
    "sun_azimuth": float, "sun_elevation": float, "shadows": _parse_bool,
}

SCHEMAS: dict[str, dict[str, dict]] = {
    "gen": {
        "gen": {"out": str, "preset": str, "name": str, "seed": int,
                "n_train": int, "n_val": int, "n_test": int},
        "scene": _SCENE_KEYS,
    },
    "train": {
        "train": {"data": str, "out": str, "variant": str, "epochs": int,
                  "lr": float, "momentum": float, "batch": int, "seed": int,
                  "hflip": _parse_bool, "split": str},
        "loss": {"rank_pairs": int, "rank_threshold": float,
                 "msg_scales": _parse_list(float), "rh_weight": float},
    },
    "finetune": {
        "finetune": {"data": str, "checkpoint": str, "out": str, "variant": str,
                     "pct": float, "init": str, "epochs": int, "lr": float,
                     "momentum": float, "batch": int, "seed": int},
        "loss": {"rank_pairs": int, "rank_threshold": float,
                 "msg_scales": _parse_list(float), "rh_weight": float},
    },
    "eval": {
        "eval": {"data": str, "checkpoint": str, "out": str, "split": str},
    },
    "gradcheck": {
        "gradcheck": {"out": str, "seed": int, "mutate": str},
    },
    "bench": {
        "bench": {"out": str, "data": str, "source": str,
                  "targets": _parse_list(str), "variants": _parse_list(str),
                  "init_modes": _parse_list(str), "pcts": _parse_list(float),
                  "seeds": _parse_list(int), "n_source": _parse_list(int),
                  "n_target": _parse_list(int), "pretrain_epochs": int,
                  "finetune_epochs": int, "pretrain_lr": float,
                  "finetune_lr": float, "batch": int, "finetune_batch": int,
                  "data_seed": int},
    },
}

DEFAULTS: dict[str, dict[str, dict[str, str]]] = {
    "gen": {"gen": {"preset": "source", "seed": "0",
                    "n_train": "16", "n_val": "4", "n_test": "8"}},
    "train": {"train": {"variant": "sdc", "epochs": "30", "lr": "0.003",
                        "momentum": "0.9", "batch": "8", "seed": "0",
                        "hflip": "false", "split": "train"}},
    "finetune": {"finetune": {"variant": "sdc", "pct": "5", "init": "pretrained",
                              "epochs": "15", "lr": "0.001", "momentum": "0.9",
                              "batch": "2", "seed": "0"}},
    "eval": {"eval": {"split": "test"}},
    "gradcheck": {"gradcheck": {"seed": "0", "mutate": "none"}},
    "bench": {"bench": {"source": "source", "targets": "target_a",
                        "variants": "conv_baseline,sdc",
                        "init_modes": "pretrained,random", "pcts": "1,5",
                        "seeds": "0,1,2", "n_source": "256,16,64",
                        "n_target": "64,8,64", "pretrain_epochs": "30",
                        "finetune_epochs": "15", "pretrain_lr": "0.003",
                        "finetune_lr": "0.001", "batch": "8", "finetune_batch": "2",
                        "data_seed": "0"}},
}


class Config:
    """Resolved, schema-checked settings for one subcommand."""

    def __init__(self, cmd: str, raw: dict[str, dict[str, str]]):
        schema = SCHEMAS[cmd]
        self.cmd = cmd
        self.raw = raw
        self.values: dict[str, dict[str, object]] = {}
        for section, pairs in raw.items():
            if section not in schema:
                raise ConfigError(f"unknown config section [{section}] for {cmd}")
            for key, val in pairs.items():
                if key not in schema[section]:
                    raise ConfigError(f"unknown config key [{section}] {key} for {cmd}")
                cast = schema[section][key]
                try:
                    parsed = cast(val)
                except ConfigError:
                    raise
                except Exception:
                    raise ConfigError(f"bad value for [{section}] {key}: {val!r}")
                self.values.setdefault(section, {})[key] = parsed

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        val = self.get(section, key)
        if val is None:
            raise ConfigError(f"missing required setting [{section}] {key}")
        return val

    def section(self, name: str) -> dict:
        return dict(self.values.get(name, {}))

    def echo_text(self) -> str:
        lines = []
        for section in sorted(self.raw):
            lines.append(f"[{section}]")
            for key in sorted(self.raw[section]):
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)


def load_config(cmd: str, path: str | None, overrides: list[str]) -> Config:
    raw: dict[str, dict[str, str]] = {s: dict(kv) for s, kv in DEFAULTS[cmd].items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise DataError(f"config file not found: {path}")
        for section in parser.sections():
            for key, val in parser.items(section):
                raw.setdefault(section, {})[key] = val
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, val = item.split("=", 1)
        section, key = target.split(".", 1)
        raw.setdefault(section.strip(), {})[key.strip()] = val.strip()
    return Config(cmd, raw)


def _prepare_out(cfg: Config, out: str) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.ini").write_text(cfg.echo_text())
    return out_dir


# ----------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: Config) -> int:
    from .synthdata import PRESETS, SceneSpec, generate_dataset

    preset = cfg.get("gen", "preset")
    if preset != "custom" and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known: "
                          f"{sorted(PRESETS)} or custom")
    base = dataclasses.asdict(PRESETS[preset]) if preset != "custom" else {}
    base.update(cfg.section("scene"))
    spec = SceneSpec(**base)
    out = _prepare_out(cfg, cfg.require("gen", "out"))
    manifest = generate_dataset(
        spec, cfg.get("gen", "n_train"), cfg.get("gen", "n_val"),
        cfg.get("gen", "n_test"), out, root_seed=cfg.get("gen", "seed"),
        name=cfg.get("gen", "name", preset))
    print(f"dataset {manifest.name}: {manifest.counts()} at {out}")
    return 0


def _loss_config(cfg: Config, variant: str):
    from .losses import LossConfig
    from .protocol import VARIANT_TABLE

    if variant not in VARIANT_TABLE:
        raise ConfigError(f"unknown variant {variant!r}; known: {sorted(VARIANT_TABLE)}")
    use_sdc, loss_variant = VARIANT_TABLE[variant]
    return use_sdc, LossConfig(variant=loss_variant, **cfg.section("loss"))


def cmd_train(cfg: Config) -> int:
    from .model import (HeightRegressor, ModelSpec, TrainConfig,
                        calibrate_head_bias, save_checkpoint, train)
    from .protocol import mean_train_height
    from .synthdata import DatasetManifest

    variant = cfg.get("train", "variant")
    use_sdc, loss_cfg = _loss_config(cfg, variant)
    manifest = DatasetManifest.load(cfg.require("train", "data"))
    out = _prepare_out(cfg, cfg.require("train", "out"))
    seed = cfg.get("train", "seed")
    model = HeightRegressor.build(ModelSpec(use_sdc=use_sdc), seed=seed)
    calibrate_head_bias(model, mean_train_height(manifest, cfg.get("train", "split")))
    tc = TrainConfig(epochs=cfg.get("train", "epochs"), lr=cfg.get("train", "lr"),
                     momentum=cfg.get("train", "momentum"),
                     batch=cfg.get("train", "batch"), seed=seed,
                     loss=loss_cfg, hflip=cfg.get("train", "hflip"))
    ckpt, curve = train(model, manifest, tc, split=cfg.get("train", "split"))
    save_checkpoint(out / "model.ckpt", ckpt)
    (out / "curve.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    last = f", final loss {curve[-1]:.6g}" if curve else ""
    print(f"trained {variant} for {tc.epochs} epochs{last}; checkpoint at "
          f"{out / 'model.ckpt'}")
    return 0


def cmd_finetune(cfg: Config) -> int:
    from .metrics import evaluate_split
    from .model import (HeightRegressor, TrainConfig, init_from,
                        load_checkpoint, save_checkpoint, train)
    from .synthdata import DatasetManifest, subsample_fewshot

    variant = cfg.get("finetune", "variant")
    _, loss_cfg = _loss_config(cfg, variant)
    ckpt = load_checkpoint(cfg.require("finetune", "checkpoint"))
    manifest = DatasetManifest.load(cfg.require("finetune", "data"))
    out = _prepare_out(cfg, cfg.require("finetune", "out"))
    seed = cfg.get("finetune", "seed")
    init = cfg.get("finetune", "init")
    if init not in ("pretrained", "random"):
        raise ConfigError(f"init must be pretrained or random, got {init!r}")
    model = HeightRegressor(ckpt.spec)
    init_from(model, ckpt if init == "pretrained" else None,
              "full" if init == "pretrained" else "random", seed=seed)
    pct = cfg.get("finetune", "pct")
    subset = subsample_fewshot(manifest, pct, seed) if pct < 100 else manifest
    if init == "random":
        from .model import calibrate_head_bias
        from .protocol import mean_train_height
        calibrate_head_bias(model, mean_train_height(subset))
    tc = TrainConfig(epochs=cfg.get("finetune", "epochs"),
                     lr=cfg.get("finetune", "lr"),
                     momentum=cfg.get("finetune", "momentum"),
                     batch=min(cfg.get("finetune", "batch"),
                               subset.counts()["train"]),
                     seed=seed, loss=loss_cfg)
    new_ckpt, curve = train(model, subset, tc)
    save_checkpoint(out / "model.ckpt", new_ckpt)
    (out / "curve.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    report = evaluate_split(model.predict, manifest)
    (out / "metrics.csv").write_text(
        "mae,rmse,si_rmse,msge,n_images\n"
        f"{report.mae!r},{report.rmse!r},{report.si_rmse!r},{report.msge!r},"
        f"{report.n_images}\n")
    print(f"finetuned {init} on {subset.counts()['train']} images ({pct:g}%),"
          f" {tc.epochs} epochs")
    print(report.text_table())
    return 0


def cmd_eval(cfg: Config) -> int:
    from .metrics import evaluate_split
    from .model import HeightRegressor, init_from, load_checkpoint
    from .synthdata import DatasetManifest

    ckpt = load_checkpoint(cfg.require("eval", "checkpoint"))
    manifest = DatasetManifest.load(cfg.require("eval", "data"))
    out = _prepare_out(cfg, cfg.require("eval", "out"))
    model = init_from(HeightRegressor(ckpt.spec), ckpt, "full")
    report = evaluate_split(model.predict, manifest, split=cfg.get("eval", "split"))
    (out / "metrics.csv").write_text(
        "mae,rmse,si_rmse,msge,n_images\n"
        f"{report.mae!r},{report.rmse!r},{report.si_rmse!r},{report.msge!r},"
        f"{report.n_images}\n")
    print(report.text_table())
    return 0


def cmd_gradcheck(cfg: Config) -> int:
    from .gradcheck import run_all

    report = run_all(seed=cfg.get("gradcheck", "seed"),
                     mutate=cfg.get("gradcheck", "mutate"))
    out = cfg.get("gradcheck", "out")
    if out is not None:
        out_dir = _prepare_out(cfg, out)
        (out_dir / "report.txt").write_text(report.text() + "\n")
    print(report.text())
    if not report.ok:
        raise CheckFailure("gradient check failed")
    return 0


def cmd_bench(cfg: Config) -> int:
    from .protocol import ExperimentPlan, run_plan

    def triple(key):
        vals = cfg.get("bench", key)
        if len(vals) != 3:
            raise ConfigError(f"[bench] {key} needs train,val,test counts")
        return tuple(vals)

    plan = ExperimentPlan(
        out_dir=cfg.require("bench", "out"),
        data_dir=cfg.require("bench", "data"),
        source_preset=cfg.get("bench", "source"),
        target_presets=cfg.get("bench", "targets"),
        variants=cfg.get("bench", "variants"),
        init_modes=cfg.get("bench", "init_modes"),
        pcts=cfg.get("bench", "pcts"),
        seeds=cfg.get("bench", "seeds"),
        n_source=triple("n_source"),
        n_target=triple("n_target"),
        pretrain_epochs=cfg.get("bench", "pretrain_epochs"),
        finetune_epochs=cfg.get("bench", "finetune_epochs"),
        pretrain_lr=cfg.get("bench", "pretrain_lr"),
        finetune_lr=cfg.get("bench", "finetune_lr"),
        batch=cfg.get("bench", "batch"),
        finetune_batch=cfg.get("bench", "finetune_batch"),
        data_seed=cfg.get("bench", "data_seed"),
    )
    res_dir = plan.results_dir()
    res_dir.mkdir(parents=True, exist_ok=True)
    (res_dir / "resolved.ini").write_text(cfg.echo_text())
    run_plan(plan, log=lambda msg: print(f"[bench] {msg}"))
    print((res_dir / "table.txt").read_text())
    print(f"results under {res_dir}")
    return 0


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic RGB/height dataset"),
    "train": (cmd_train, "train a height regressor on a dataset"),
    "finetune": (cmd_finetune, "few-shot fine-tune a checkpoint on a target dataset"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset split"),
    "gradcheck": (cmd_gradcheck, "verify analytic gradients against finite differences"),
    "bench": (cmd_bench, "run a full pretrain/zero-shot/few-shot benchmark plan"),
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mhe",
        description="Height-estimation toolkit: data generation, training, "
                    "evaluation, gradient checking, transfer benchmarks.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name, (_, blurb) in COMMANDS.items():
        p = sub.add_parser(name, help=blurb, description=blurb)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="SECTION.KEY=VALUE", help="override a setting")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.cmd, args.config, args.overrides)
        return COMMANDS[args.cmd][0](cfg)
    except (ConfigError, ValueError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: divergence: {e}", file=sys.stderr)
        return 4
    except CheckFailure as e:
        print(f"error: checkfail: {e.args[0].splitlines()[0]}", file=sys.stderr)
        return 5
    except (DataError, OSError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
