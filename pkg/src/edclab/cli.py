"""Command-line driver: condense, label, eval, verify-theory, probe, pipeline.

Exit codes: 0 success, 1 validation (config / data), 2 runtime or numeric
failure, 3 artifact integrity.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import oracles
from .artifact import ArtifactError, IntegrityError, load_artifact, save_artifact
from .config import (PRESETS, SCHEDULES, ConfigError, CondenseConfig, default_cache_root,
                     make_config, read_config_file)
from .data import DatasetError, load_dataset
from .flatness import hessian_fro_probe
from .models import build_ensemble, build_model
from .post_eval import gradient_alignment_probe, train_student
from .soft_labels import cache_epoch_labels, generate_soft_labels, label_cache_key
from .stats import compute_or_load_stats
from .synthesis import matching_objective, synthesize

logger = logging.getLogger("edclab")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INTEGRITY = 0, 1, 2, 3


@dataclass
class RunRecord:
    subcommand: str
    config_hash: str | None = None
    config: dict | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    exit_status: int = EXIT_OK
    wall_time: float = 0.0
    message: str | None = None

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fh.write(json.dumps(self.__dict__) + "\n")


class JsonLogFormatter(logging.Formatter):
    """One JSON object per log line."""

    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"time": round(record.created, 3), "level": record.levelname,
                           "logger": record.name, "message": record.getMessage()})


# ---------------------------------------------------------------- stages

def condense_stage(cfg: CondenseConfig, out_dir: Path, cache: Path | None,
                   probe_every: int = 0) -> dict[str, str]:
    data = load_dataset(cfg.dataset)
    ensemble = build_ensemble(cfg.observers, data, cfg.observer_epochs, cfg.seed, cache)
    stats = compute_or_load_stats(data, ensemble, cache, whitelist=cfg.layer_whitelist)
    ds, log = synthesize(data, ensemble, stats, cfg, probe_every=probe_every)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.write_jsonl(out_dir / "synthesis_log.jsonl")
    manifest = save_artifact(ds, None, out_dir, cfg, data.mean, data.std,
                             {"stage": "condense", "dataset": data.source,
                              "observers": ensemble.names})
    return {"artifact": str(out_dir), "log": str(out_dir / "synthesis_log.jsonl"),
            "checksum": manifest.artifact_checksum}


def label_stage(artifact_dir: Path, cfg: CondenseConfig | None, cache: Path | None
                ) -> dict[str, str]:
    ds, _, manifest = load_artifact(artifact_dir)
    cfg = cfg or manifest.condense_config
    data = load_dataset(cfg.dataset)
    ensemble = build_ensemble(cfg.label_observers or cfg.observers, data, cfg.observer_epochs,
                              cfg.seed, cache)
    if cfg.label_ensemble == "lite":
        ensemble = ensemble.lite()
    if cfg.label_mode == "per_epoch_cached":
        labels = cache_epoch_labels(ds, ensemble, cfg.eval_epochs, cfg.eval_crop_scale_min,
                                    cfg.seed, space=cfg.label_space)
    else:
        labels = generate_soft_labels(ds, ensemble, cfg.label_space)
    key = label_cache_key(manifest.artifact_checksum, ensemble.ensemble_id,
                          cfg.eval_epochs if labels.epoch_cache is not None else 0)
    meta = dict(manifest.metadata)
    meta.update({"stage": "label", "label_key": key})
    new = save_artifact(ds, labels, artifact_dir, cfg, meta.get("mean"), meta.get("std"), meta,
                        previews=False)
    return {"artifact": str(artifact_dir), "checksum": new.artifact_checksum}


def eval_stage(artifact_dir: Path, cfg: CondenseConfig | None, out_dir: Path | None,
               student: str | None = None, hard_labels: bool = False) -> dict:
    ds, labels, manifest = load_artifact(artifact_dir)
    cfg = cfg or manifest.condense_config
    student = student or cfg.student
    build_model(student, ds.images.shape[1], ds.num_classes, ds.images.shape[2])
    data = load_dataset(cfg.dataset)
    if hard_labels:
        labels = None
    elif labels is None:
        raise ArtifactError("artifact has no soft labels; run `label` first or pass --hard-labels")
    result = train_student(ds, labels, student, cfg, data)
    out_dir = out_dir or artifact_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.jsonl", "w") as fh:
        for rec in result.epochs:
            fh.write(json.dumps(rec) + "\n")
    summary = {**result.summary(), "student": student, "hard_labels": hard_labels,
               "config_hash": cfg.config_hash()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return {"eval": str(out_dir / "eval.jsonl"), "summary": str(out_dir / "summary.json"),
            **{k: v for k, v in summary.items() if k.endswith("acc")}}


def verify_stage(report_path: Path | None, seed: int, n_random: int,
                 inject_bad_bound: bool) -> tuple[bool, dict]:
    reports = oracles.run_suite(seed, n_random, inject_bad_bound)
    table = oracles.summarize(reports)
    failing = [r.check for r in reports if not r.passed]
    if report_path is not None:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        with open(report_path, "w") as fh:
            for r in reports:
                fh.write(json.dumps(r.to_record(), default=float) + "\n")
    print(f"{'check':<22}{'passed':>8}{'total':>8}")
    for name, (ok, n) in table.items():
        print(f"{name:<22}{ok:>8}{n:>8}")
    if failing:
        print("failing checks: " + ", ".join(sorted(set(failing))))
    return not failing, {"report": str(report_path) if report_path else "",
                         "failing": ",".join(sorted(set(failing)))}


def probe_stage(artifact_dir: Path, cfg: CondenseConfig | None, cache: Path | None,
                probes: int, trials: int, batch: int) -> dict:
    ds, _, manifest = load_artifact(artifact_dir)
    cfg = cfg or manifest.condense_config
    data = load_dataset(cfg.dataset)
    ensemble = build_ensemble(cfg.observers, data, cfg.observer_epochs, cfg.seed, cache)
    stats = compute_or_load_stats(data, ensemble, cache, whitelist=cfg.layer_whitelist)
    fn = matching_objective(ensemble, stats, ds.labels, cfg.alpha, cfg.layer_whitelist)
    fro = hessian_fro_probe(fn, ds.images, probes, cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = build_model(cfg.student, data.channels, data.num_classes, data.resolution[0])
    batch = min(batch, len(ds), len(data.train_y))
    cos_c, cos_o = gradient_alignment_probe(model, ds, data, batch, trials, cfg.seed)
    out = {"hessian_fro": fro, "cos_condensed": cos_c, "cos_original": cos_o}
    (artifact_dir / "probe.json").write_text(json.dumps(out, indent=2))
    print(json.dumps(out))
    return {"probe": str(artifact_dir / "probe.json"), **out}


# ---------------------------------------------------------------- argument parsing

_INIT_ALIASES = {"patch": "patch_concat", "patch_concat": "patch_concat", "real": "real",
                 "gaussian": "gaussian"}


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--flatness-weight", type=float)
    p.add_argument("--flatness", choices=["logits", "stats", "sam", "none"])
    p.add_argument("--batch", type=int, help="post-evaluation batch size")
    p.add_argument("--synth-batch", type=int)
    p.add_argument("--ipc", type=int)
    p.add_argument("--iters", type=int, help="synthesis iterations")
    p.add_argument("--epochs", type=int, help="post-evaluation epochs")
    p.add_argument("--init", choices=sorted(_INIT_ALIASES))
    p.add_argument("--schedule", choices=SCHEDULES)
    p.add_argument("--ema-rate", type=float)
    p.add_argument("--dataset")
    p.add_argument("--observers")
    p.add_argument("--label-mode", choices=["static", "per_epoch_cached"])


_FLAG_TO_FIELD = {"alpha": "alpha", "zeta": "zeta", "tau": "tau", "beta": "beta", "seed": "seed",
                  "flatness_weight": "flatness_weight", "flatness": "flatness",
                  "batch": "eval_batch", "synth_batch": "synth_batch", "ipc": "ipc",
                  "iters": "synth_iters", "epochs": "eval_epochs", "schedule": "schedule",
                  "ema_rate": "eval_ema_rate", "dataset": "dataset", "observers": "observers",
                  "label_mode": "label_mode", "preset": "preset"}


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> CondenseConfig:
    """defaults < preset < base (an artifact's config) < config file < flags."""
    overrides = {field_: getattr(args, flag, None) for flag, field_ in _FLAG_TO_FIELD.items()}
    if getattr(args, "init", None):
        overrides["init"] = _INIT_ALIASES[args.init]
    path = getattr(args, "config", None)
    return _layer(base or {}, read_config_file(path) if path is not None else {}, overrides)


def _layer(base: dict, file_values: dict, overrides: dict) -> CondenseConfig:
    values = {**base, **file_values}
    values.update({k: v for k, v in overrides.items() if v is not None})
    preset = values.pop("preset", None)
    return make_config(values, preset=preset)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edclab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--cache-dir", type=Path, help="overrides $EDC_CACHE_DIR")
    p.add_argument("--run-log", type=Path, help="RunRecord JSONL (default <cache>/runs.jsonl)")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("condense", help="statistics pass + synthesis")
    _config_flags(c)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--probe-every", type=int, default=0)

    lab = sub.add_parser("label", help="ensemble soft labels for an artifact")
    _config_flags(lab)
    lab.add_argument("--artifact", type=Path, required=True)

    e = sub.add_parser("eval", help="post-evaluation of an artifact")
    _config_flags(e)
    e.add_argument("--artifact", type=Path, required=True)
    e.add_argument("--student")
    e.add_argument("--out", type=Path)
    e.add_argument("--hard-labels", action="store_true")

    v = sub.add_parser("verify-theory", help="Gaussian-mixture oracle suite")
    v.add_argument("--report", type=Path)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--inject-bad-bound", action="store_true", help=argparse.SUPPRESS)

    pr = sub.add_parser("probe", help="Hessian-Frobenius and gradient-alignment probes")
    _config_flags(pr)
    pr.add_argument("--artifact", type=Path, required=True)
    pr.add_argument("--probes", type=int, default=16)
    pr.add_argument("--trials", type=int, default=100)
    pr.add_argument("--probe-batch", type=int, default=50)

    pl = sub.add_parser("pipeline", help="condense -> label -> eval")
    _config_flags(pl)
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("--student")
    return p


def _dispatch(args, record: RunRecord, cache: Path) -> int:
    cmd = args.command
    if cmd == "verify-theory":
        ok, arts = verify_stage(args.report, args.seed, args.trials, args.inject_bad_bound)
        record.artifacts.update(arts)
        return EXIT_OK if ok else EXIT_RUNTIME
    base = None
    if cmd in ("label", "eval", "probe"):
        base = dict(load_artifact_config(args.artifact))
    cfg = resolve_config(args, base)
    record.config_hash, record.config = cfg.config_hash(), cfg.to_dict()
    if cmd == "condense":
        record.artifacts.update(condense_stage(cfg, args.out, cache, args.probe_every))
    elif cmd == "label":
        record.artifacts.update(label_stage(args.artifact, cfg, cache))
    elif cmd == "eval":
        record.artifacts.update(
            {k: str(v) for k, v in eval_stage(args.artifact, cfg, args.out, args.student,
                                              args.hard_labels).items()})
    elif cmd == "probe":
        record.artifacts.update({k: str(v) for k, v in probe_stage(
            args.artifact, cfg, cache, args.probes, args.trials, args.probe_batch).items()})
    elif cmd == "pipeline":
        art = args.out / "artifact"
        record.artifacts.update(condense_stage(cfg, art, cache))
        record.artifacts.update(label_stage(art, cfg, cache))
        record.artifacts.update({k: str(v) for k, v in eval_stage(
            art, cfg, args.out / "eval", args.student).items()})
    return EXIT_OK


def load_artifact_config(artifact_dir: Path) -> dict:
    from .artifact import read_manifest
    return read_manifest(artifact_dir).config


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler()
    handler.setFormatter(JsonLogFormatter())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        handlers=[handler], force=True)
    cache = args.cache_dir or default_cache_root()
    record = RunRecord(args.command)
    t0 = time.perf_counter()
    try:
        status = _dispatch(args, record, cache)
    except (ConfigError, DatasetError) as exc:
        status, record.message = EXIT_VALIDATION, str(exc)
    except IntegrityError as exc:
        status, record.message = EXIT_INTEGRITY, f"integrity error: {exc}"
    except ArtifactError as exc:
        status, record.message = EXIT_VALIDATION, str(exc)
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        status, record.message = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
    if record.message:
        print(f"edclab {args.command}: {record.message}", file=sys.stderr)
    record.exit_status = status
    record.wall_time = time.perf_counter() - t0
    record.write(args.run_log or cache / "runs.jsonl")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
