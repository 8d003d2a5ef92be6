"""``dssc``: the experiment lifecycle from a single JSON config file.

One experiment is one config file. Flags override scalar fields only::

    {
      "manifest": "corpus/synth.manifest",
      "cache_dir": "cache",
      "arch": "C1",                      # preset name, or {"preset": "C1", ...overrides}
      "train": {"epochs": 10, "batch_size": 16},
      "protocol": "osps",                # osps | loso | full
      "pretrain_checkpoint": null,       # required by finetune
      "checkpoint": null,                # file or a train output dir; used by eval/export
      "presets": ["C1", "C2", "C3", "C4", "C5", "C6"],
      "desk_scale": null,                # e.g. {"width_divisor": 8, "input_size": 32}
      "out_dir": "runs/c1",
      "seed": 0
    }

Relative paths resolve against the config file's directory. Errors are
printed to stderr as one JSON object and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import AudioError
from .harness import (
    CorpusManifest,
    ManifestError,
    MissingCacheError,
    SplitPlan,
    aggregate,
    bundled_manifest,
    evaluate,
    export_embeddings,
    generate_plans,
    load_dataset,
    preprocess_manifest,
    write_reports,
)
from .model import PRESETS, ArchConfig, build, desk_clone, preset
from .synth import SynthSpec, generate
from .training import (
    TrainConfig,
    config_hash,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log_csv,
)

EXIT_CODES = {"config": 2, "missing_cache": 3, "audio": 4, "manifest": 5, "internal": 1}
ABLATION_PRESETS = ("C1", "C2", "C3", "C4", "C5", "C6")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# --------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    manifest: str | None = None
    cache_dir: str | None = None
    arch: str | dict = "C1"
    train: dict = field(default_factory=dict)
    protocol: str = "osps"
    pretrain_checkpoint: str | None = None
    checkpoint: str | None = None
    presets: list[str] = field(default_factory=lambda: list(ABLATION_PRESETS))
    out_dir: str = "runs"
    seed: int = 0
    synth: dict = field(default_factory=dict)
    desk_scale: dict | None = None

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config field {k!r}" for k in unknown])
        cfg = cls(**d)
        if base is not None:
            for name in ("manifest", "cache_dir", "pretrain_checkpoint", "checkpoint", "out_dir"):
                v = getattr(cfg, name)
                if v and not _is_bundled(v) and not Path(v).is_absolute():
                    setattr(cfg, name, str((base / v).resolve()))
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {path} does not exist"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
        if "resolved_config" in d:  # a run.json written by a previous run
            d = d["resolved_config"]
        return cls.from_dict(d, base=path.parent.resolve())

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # -- resolution --------------------------------------------------------

    def load_manifest(self) -> CorpusManifest:
        if _is_bundled(self.manifest):
            return bundled_manifest(self.manifest.split(":", 1)[1])
        return CorpusManifest.load(self.manifest)

    def arch_config(self, n_classes: int) -> ArchConfig:
        spec = self.arch
        if isinstance(spec, str):
            cfg = preset(spec, n_classes=n_classes)
        else:
            spec = dict(spec)
            name = spec.pop("preset", None)
            spec.setdefault("n_classes", n_classes)
            cfg = preset(name, **spec) if name is not None else ArchConfig.from_dict(spec)
        if self.desk_scale:
            cfg = desk_clone(cfg, **self.desk_scale)
        return cfg

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(d["class_weights"])
        return TrainConfig(**d)

    def validate(self, command: str) -> list[str]:
        """Every violation for ``command``, not just the first."""
        errors = []
        needs_manifest = command in ("preprocess", "splits", "train", "finetune", "eval", "ablate", "export-embeddings")
        needs_cache = command in ("preprocess", "train", "finetune", "eval", "ablate", "export-embeddings")
        if needs_manifest:
            if not self.manifest:
                errors.append("manifest: required")
            elif not _is_bundled(self.manifest) and not Path(self.manifest).is_file():
                errors.append(f"manifest: {self.manifest} does not exist")
        if needs_cache and not self.cache_dir:
            errors.append("cache_dir: required (or set DSSC_CACHE)")
        if self.protocol not in ("osps", "loso", "full"):
            errors.append(f"protocol: must be osps, loso or full, got {self.protocol!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            errors.append(f"seed: must be an integer, got {self.seed!r}")
        if command in ("train", "finetune", "eval", "ablate", "export-embeddings"):
            try:
                errors += [f"arch: {e}" for e in self.arch_config(4).validate()]
            except (KeyError, TypeError) as exc:
                errors.append(f"arch: {exc.args[0] if exc.args else exc}")
            try:
                errors += [f"train: {e}" for e in self.train_config().validate()]
            except TypeError as exc:
                errors.append(f"train: {exc}")
        if command == "ablate":
            bad = [p for p in self.presets if p not in PRESETS]
            if bad:
                errors.append(f"presets: unknown {bad}; choose from {sorted(PRESETS)}")
        if command == "finetune":
            if not self.pretrain_checkpoint:
                errors.append("pretrain_checkpoint: required for finetune")
            elif not Path(self.pretrain_checkpoint).is_file():
                errors.append(f"pretrain_checkpoint: {self.pretrain_checkpoint} does not exist")
        if command in ("eval", "export-embeddings"):
            if not self.checkpoint:
                errors.append(f"checkpoint: required for {command}")
            elif not Path(self.checkpoint).exists():
                errors.append(f"checkpoint: {self.checkpoint} does not exist")
        if command == "synth":
            try:
                errors += [f"synth: {e}" for e in SynthSpec.from_dict(self.synth).validate()]
            except TypeError as exc:
                errors.append(f"synth: {exc}")
        return errors


def _is_bundled(path: str | None) -> bool:
    return bool(path) and str(path).startswith("bundled:")


# --------------------------------------------------------------------------
# run bookkeeping


def _versions() -> dict:
    import scipy

    return {"dsscnet": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _experiment_hash(cfg: ExperimentConfig, **extra) -> str:
    # where results land is not part of what was run
    d = cfg.to_dict()
    d.pop("out_dir", None)
    return config_hash({**extra, **d})


def _write_run_meta(out: Path, command: str, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    meta = {
        "command": command,
        "config_hash": _experiment_hash(cfg, command=command),
        "seed": cfg.seed,
        "versions": _versions(),
        "resolved_config": resolved,
    }
    if extra:
        meta.update(extra)
    path = out / "run.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _select_plans(manifest: CorpusManifest, protocol: str, plan_id: str | None) -> list[SplitPlan]:
    plans = generate_plans(manifest, protocol)
    if plan_id is None:
        return plans
    chosen = [p for p in plans if p.plan_id == plan_id]
    if not chosen:
        raise ConfigError([f"plan: {plan_id!r} not among {[p.plan_id for p in plans][:5]}..."])
    return chosen


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _checkpoint_for(cfg: ExperimentConfig, plan: SplitPlan) -> Path:
    path = Path(cfg.checkpoint)
    if path.is_dir():
        path = path / plan.plan_id / "model.dsck"
        if not path.is_file():
            raise ConfigError([f"checkpoint: no model.dsck for plan {plan.plan_id} under {cfg.checkpoint}"])
    return path


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig, args) -> dict:
    spec = SynthSpec.from_dict({**cfg.synth, "seed": cfg.seed})
    out = Path(cfg.out_dir)
    manifest, path = generate(spec, out)
    _write_run_meta(out, "synth", cfg)
    return {"manifest": str(path), "speakers": len(manifest.speakers),
            "utterances": sum(len(s.utterances) for s in manifest.speakers)}


def cmd_preprocess(cfg: ExperimentConfig, args) -> dict:
    manifest = cfg.load_manifest()
    n = preprocess_manifest(manifest, cfg.cache_dir)
    _write_run_meta(Path(cfg.out_dir), "preprocess", cfg, {"written": n})
    return {"written": n, "cache_dir": cfg.cache_dir}


def cmd_splits(cfg: ExperimentConfig, args) -> dict:
    manifest = cfg.load_manifest()
    plans = _select_plans(manifest, cfg.protocol, args.plan)
    out = Path(cfg.out_dir) / "plans"
    out.mkdir(parents=True, exist_ok=True)
    for p in plans:
        (out / f"{p.plan_id}.json").write_text(json.dumps(p.to_dict(), indent=1) + "\n")
    _write_run_meta(Path(cfg.out_dir), "splits", cfg)
    return {"plans": len(plans), "dir": str(out)}


def _train_plans(cfg: ExperimentConfig, args, arch_name=None, out: Path | None = None, finetuning: bool = False):
    manifest = cfg.load_manifest()
    plans = _select_plans(manifest, cfg.protocol, args.plan)
    tcfg = cfg.train_config()
    if arch_name is not None:
        cfg = replace(cfg, arch=arch_name)
    arch = cfg.arch_config(manifest.n_classes)
    out = Path(cfg.out_dir) if out is None else out
    source = load_checkpoint(cfg.pretrain_checkpoint) if finetuning else None
    provenance = {"corpus_id": manifest.corpus_id, "config_hash": _experiment_hash(cfg)}

    def run(plan: SplitPlan):
        data = load_dataset(manifest, plan.train, cfg.cache_dir, arch.input_size)
        if finetuning:
            model, rows = finetune(source, data, tcfg, n_classes=manifest.n_classes, arch=arch)
        else:
            model, rows = train(build(arch, seed=tcfg.seed), data, tcfg)
        pdir = out / plan.plan_id
        pdir.mkdir(parents=True, exist_ok=True)
        write_log_csv(rows, pdir / "train_log.csv")
        save_checkpoint(pdir / "model.dsck", model, provenance={**provenance, "plan_id": plan.plan_id})
        report = evaluate(model, plan, manifest, cfg.cache_dir) if plan.test else None
        return rows, report

    results = _map(run, plans, args.jobs)
    reports = [r for _, r in results if r is not None]
    if reports:
        write_reports(reports, out)
    return plans, results, reports


def cmd_train(cfg: ExperimentConfig, args, finetuning: bool = False) -> dict:
    command = "finetune" if finetuning else "train"
    plans, results, reports = _train_plans(cfg, args, finetuning=finetuning)
    _write_run_meta(Path(cfg.out_dir), command, cfg)
    summary = {"plans": len(plans), "final_loss": [rows[-1]["loss"] for rows, _ in results]}
    if reports:
        summary["accuracy"] = aggregate(reports).accuracy
    return summary


def cmd_finetune(cfg: ExperimentConfig, args) -> dict:
    return cmd_train(cfg, args, finetuning=True)


def cmd_eval(cfg: ExperimentConfig, args) -> dict:
    manifest = cfg.load_manifest()
    plans = [p for p in _select_plans(manifest, cfg.protocol, args.plan) if p.test]

    def run(plan):
        model = load_checkpoint(_checkpoint_for(cfg, plan)).to_model()
        return evaluate(model, plan, manifest, cfg.cache_dir)

    reports = _map(run, plans, args.jobs)
    out = Path(cfg.out_dir)
    write_reports(reports, out)
    _write_run_meta(out, "eval", cfg)
    agg = aggregate(reports)
    return {"plans": len(reports), "accuracy": agg.accuracy, "f1": agg.f1}


def cmd_ablate(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.out_dir)
    rows = []
    for name in cfg.presets:
        plans, results, reports = _train_plans(cfg, args, arch_name=name, out=out / name)
        rows.append({
            "preset": name,
            "plans": len(plans),
            "final_train_loss": float(np.mean([r[-1]["loss"] for r, _ in results])),
            "final_train_accuracy": float(np.mean([r[-1]["accuracy"] for r, _ in results])),
            "accuracy": aggregate(reports).accuracy if reports else float("nan"),
            "f1": aggregate(reports).f1 if reports else float("nan"),
        })
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_run_meta(out, "ablate", cfg)
    return {"rows": rows}


def cmd_export_embeddings(cfg: ExperimentConfig, args) -> dict:
    manifest = cfg.load_manifest()
    plans = [p for p in _select_plans(manifest, cfg.protocol, args.plan) if p.test]
    out = Path(cfg.out_dir)

    def run(plan):
        model = load_checkpoint(_checkpoint_for(cfg, plan)).to_model()
        return str(export_embeddings(model, plan, manifest, cfg.cache_dir, out / "embeddings" / f"{plan.plan_id}.csv"))

    paths = _map(run, plans, args.jobs)
    _write_run_meta(out, "export-embeddings", cfg)
    return {"files": paths}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "splits": cmd_splits,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dssc", description="Dysarthric severity classification experiments.")
    parser.add_argument("--version", action="version", version=f"dssc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--jobs", type=int, default=1, help="plans run concurrently")
        p.add_argument("--plan", help="run a single plan id, e.g. osps-007")
        p.add_argument("--out", help="override out_dir")
        p.add_argument("--manifest", help="override the manifest path (bundled:torgo, bundled:uaspeech allowed)")
        p.add_argument("--cache", help="override cache_dir")
        p.add_argument("--protocol", choices=("osps", "loso", "full"), help="override the protocol")
        p.add_argument("--checkpoint", help="override checkpoint")
    return parser


def _resolve(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "manifest": args.manifest,
        "cache_dir": args.cache,
        "protocol": args.protocol,
        "checkpoint": args.checkpoint,
    }
    for k, v in overrides.items():
        if v is not None:
            if k in ("out_dir", "manifest", "cache_dir", "checkpoint") and not _is_bundled(v):
                v = str(Path(v).resolve())
            setattr(cfg, k, v)
    env_cache = os.environ.get("DSSC_CACHE")
    if env_cache:
        cfg.cache_dir = str(Path(env_cache).resolve())
    return cfg


def _fail(category: str, message: str, details=None) -> int:
    payload = {"error": category, "message": message}
    if details:
        payload["details"] = details
    print(json.dumps(payload), file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        errors = cfg.validate(args.command)
        if errors:
            raise ConfigError(errors)
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail("config", f"{len(exc.errors)} config error(s)", exc.errors)
    except MissingCacheError as exc:
        return _fail("missing_cache", f"{exc} (dssc preprocess --config <config>)", exc.missing[:50])
    except AudioError as exc:
        return _fail("audio", str(exc), [exc.code])
    except ManifestError as exc:
        return _fail("manifest", str(exc))
    print(json.dumps({"command": args.command, "ok": True, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
