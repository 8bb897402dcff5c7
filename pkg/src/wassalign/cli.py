"""Command-line entry point.

Every command reads a flat ``key = value`` spec file (``#`` comments), fills
in documented defaults, and writes the fully resolved spec next to its
outputs so the snapshot alone reproduces the run.

Exit codes: 0 success, 2 spec/validation error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    ContainerError,
    FewShotBudget,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_container,
    save_dataset,
    split_pair,
    subsample_labeled,
)
from .losses import sample_projections, swd_distance
from .autodiff import Tensor
from .nn import EncoderConfig, init_parameters, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    aggregate_metrics,
    baseline_finetune,
    baseline_target_only,
    evaluate,
    pretrain_source,
    train_transfer,
    write_metrics,
)

logger = logging.getLogger("wassalign")

EXIT_SPEC, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
COMMANDS = ("synth", "pretrain", "transfer", "baseline", "eval", "swd", "sweep")


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spec files

_SYNTH_KEYS = {f.name: f for f in fields(SyntheticSpec)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig) if f.name not in ("seed", "deterministic")}
_ENCODER_DEFAULTS = {"stages": EncoderConfig().stages_text(), "norm": EncoderConfig().norm, "embed_dim": EncoderConfig().embed_dim}

# key -> (default, commands using it)
_OTHER_KEYS = {
    "command": (None, COMMANDS),
    "seed": (0, COMMANDS),
    "out": (None, COMMANDS),
    "data": (None, ("pretrain", "transfer", "baseline", "eval", "sweep")),
    "source_data": (None, ("pretrain", "transfer", "baseline", "sweep")),
    "target_data": (None, ("transfer", "baseline", "sweep")),
    "checkpoint": (None, ("transfer", "baseline", "eval")),
    "budget": ("32", ("transfer", "baseline", "sweep")),
    "balanced": (True, ("transfer", "baseline", "sweep")),
    "labeled_target_count": (0, ("transfer", "baseline", "sweep")),  # derived; checked when given
    "baseline": ("target-only", ("baseline",)),
    "tied_init": (True, ("pretrain", "transfer", "sweep")),
    "branch": ("target", ("eval",)),
    "split": ("test", ("eval",)),
    "seeds": ("1,2,3,4,5", ("sweep",)),
    "methods": ("transfer,target-only,finetune", ("sweep",)),
    "file_a": (None, ("swd",)),
    "file_b": (None, ("swd",)),
    "num_projections": (50, ("swd",)),
}

_TRAIN_COMMANDS = ("pretrain", "transfer", "baseline", "sweep")


def _keys_for(command: str) -> dict:
    keys = {k: d for k, (d, cmds) in _OTHER_KEYS.items() if command in cmds}
    if command == "synth":
        keys.update({k: f.default for k, f in _SYNTH_KEYS.items() if k != "seed"})
    if command in _TRAIN_COMMANDS:
        keys.update({k: f.default for k, f in _TRAIN_KEYS.items()})
        keys.update(_ENCODER_DEFAULTS)
    return keys


def parse_spec_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise SpecError(f"line {lineno}: empty key")
        if key in out:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_bool(key: str, value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise SpecError(f"{key}: expected a boolean, got {value!r}")


def _coerce(key: str, value, default):
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            return _parse_bool(key, value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise SpecError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return str(value)


def resolve_spec(command: str, raw: dict, overrides: Optional[dict] = None) -> dict:
    """Validate keys and materialize every default for ``command``."""
    allowed = _keys_for(command)
    merged = dict(raw)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(allowed))
    if unknown:
        raise SpecError(f"unknown spec keys for '{command}': {', '.join(unknown)}")
    if merged.get("command", command) != command:
        raise SpecError(f"spec file is for command {merged['command']!r}, not {command!r}")
    resolved = {}
    for key, default in allowed.items():
        resolved[key] = _coerce(key, merged.get(key, default), default)
    resolved["command"] = command
    if command in _TRAIN_COMMANDS or command == "eval":
        data = resolved.get("data")
        if resolved.get("source_data") is None and "source_data" in resolved and data:
            resolved["source_data"] = str(Path(data) / "A")
        if resolved.get("target_data") is None and "target_data" in resolved and data:
            resolved["target_data"] = str(Path(data) / "B")
    return resolved


def format_spec(spec: dict) -> str:
    lines = ["# resolved spec; every default materialized"]
    for key in sorted(spec):
        value = spec[key]
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def _require(spec: dict, *keys: str) -> None:
    missing = [k for k in keys if spec.get(k) in (None, "")]
    if missing:
        raise SpecError(f"missing required spec keys: {', '.join(missing)}")


def _train_config(spec: dict, seed: int, deterministic: bool) -> TrainConfig:
    kwargs = {k: spec[k] for k in _TRAIN_KEYS}
    try:
        return TrainConfig(seed=seed, deterministic=deterministic, **kwargs)
    except ValueError as exc:
        raise SpecError(str(exc)) from None


def _encoder_config(spec: dict, in_shape: tuple) -> EncoderConfig:
    try:
        return EncoderConfig(
            in_channels=in_shape[0],
            image_size=in_shape[1],
            stages=EncoderConfig.parse_stages(spec["stages"]),
            norm=spec["norm"],
            embed_dim=int(spec["embed_dim"]),
        )
    except ValueError as exc:
        raise SpecError(f"encoder config: {exc}") from None


def _budget(spec: dict) -> FewShotBudget:
    try:
        return FewShotBudget.parse(spec["budget"], spec["balanced"])
    except ValueError as exc:
        raise SpecError(str(exc)) from None


# ---------------------------------------------------------------------------
# output helpers


def _prepare_out(path, force: bool) -> Path:
    if path is None:
        raise SpecError("no output directory: set 'out' in the spec or pass --out")
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(root, split: str):
    return load_dataset(Path(root) / split)


def _write_run(out: Path, spec: dict, records, net=None, result: Optional[dict] = None) -> None:
    (out / "resolved_spec.txt").write_text(format_spec(spec), encoding="utf-8")
    write_metrics(records, out / "metrics.jsonl")
    if net is not None:
        save_checkpoint(net, out / "checkpoint.tnsr")
    if result is not None:
        (out / "result.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _checkpoint_path(spec: dict) -> Path:
    path = Path(spec["checkpoint"])
    if path.is_dir():
        path = path / "checkpoint.tnsr"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: expected {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(spec: dict, out: Path) -> int:
    kwargs = {k: spec[k] for k in _SYNTH_KEYS if k != "seed"}
    try:
        synth = SyntheticSpec(seed=spec["seed"], **kwargs)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    a, b = generate_synthetic(synth)
    h = synth.spec_hash()
    for split, (da, db) in split_pair(a, b, synth.seed).items():
        save_dataset(da, out / "A" / split, h)
        save_dataset(db, out / "B" / split, h)
    (out / "resolved_spec.txt").write_text(format_spec(spec), encoding="utf-8")
    print(h)
    return 0


def cmd_pretrain(spec: dict, out: Path, deterministic: bool) -> int:
    _require(spec, "source_data")
    train = _load_split(spec["source_data"], "train")
    val = _load_split(spec["source_data"], "val")
    cfg = _train_config(spec, spec["seed"], deterministic)
    enc = _encoder_config(spec, train.images.shape[1:])
    net = init_parameters(enc, train.num_classes, spec["seed"], tied=spec["tied_init"])
    net, records = pretrain_source(net, train, val, cfg)
    test = _load_split(spec["source_data"], "test")
    result = {"source_test_accuracy": evaluate(net, test, "source").accuracy}
    _write_run(out, spec, records, net, result)
    return 0


def _record_labeled_count(spec: dict, n: int) -> None:
    if spec.get("labeled_target_count") not in (None, 0, n):
        raise SpecError(f"labeled_target_count = {spec['labeled_target_count']} but the budget yields {n}")
    spec["labeled_target_count"] = n


def _labeled_target(spec: dict):
    target_train = _load_split(spec["target_data"], "train")
    labeled, unlabeled = subsample_labeled(target_train, _budget(spec), spec["seed"])
    _record_labeled_count(spec, len(labeled))
    return target_train, labeled, unlabeled


def cmd_transfer(spec: dict, out: Path, deterministic: bool) -> int:
    _require(spec, "checkpoint", "source_data", "target_data")
    net = load_checkpoint(_checkpoint_path(spec))
    cfg = _train_config(spec, spec["seed"], deterministic)
    _, labeled, unlabeled = _labeled_target(spec)
    source = _load_split(spec["source_data"], "train")
    if spec["tied_init"]:
        net.copy_source_to_target()
    net, records = train_transfer(net, labeled, unlabeled, source, cfg, _load_split(spec["target_data"], "val"))
    result = {"target_test_accuracy": evaluate(net, _load_split(spec["target_data"], "test"), "target").accuracy}
    _write_run(out, spec, records, net, result)
    return 0


def cmd_baseline(spec: dict, out: Path, deterministic: bool) -> int:
    kind = spec["baseline"]
    if kind not in ("target-only", "finetune"):
        raise SpecError(f"baseline must be 'target-only' or 'finetune', got {kind!r}")
    _require(spec, "target_data")
    cfg = _train_config(spec, spec["seed"], deterministic)
    target_train, labeled, _ = _labeled_target(spec)
    val = _load_split(spec["target_data"], "val")
    if kind == "target-only":
        spec["source_data"] = "unused"
        spec["checkpoint"] = "unused"
        enc = _encoder_config(spec, target_train.images.shape[1:])
        net = init_parameters(enc, target_train.num_classes, spec["seed"])
        net, records = baseline_target_only(net, labeled, cfg, len(target_train), val)
    else:
        _require(spec, "checkpoint")
        spec["source_data"] = "unused"
        net = load_checkpoint(_checkpoint_path(spec))
        net, records = baseline_finetune(net, labeled, cfg, len(target_train), val)
    result = {"target_test_accuracy": evaluate(net, _load_split(spec["target_data"], "test"), "target").accuracy}
    _write_run(out, spec, records, net, result)
    return 0


def cmd_eval(spec: dict, out: Optional[Path]) -> int:
    _require(spec, "checkpoint", "data")
    net = load_checkpoint(_checkpoint_path(spec))
    ds = load_dataset(Path(spec["data"]) / spec["split"]) if (Path(spec["data"]) / spec["split"]).exists() else load_dataset(spec["data"])
    res = evaluate(net, ds, spec["branch"])
    report = {
        "accuracy": res.accuracy,
        "per_class_accuracy": [None if np.isnan(a) else float(a) for a in res.per_class_accuracy],
        "confusion": res.confusion.tolist(),
    }
    text = json.dumps(report, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n", encoding="utf-8")
    return 0


def _single_matrix(path) -> np.ndarray:
    entries = read_container(path)
    if len(entries) != 1:
        raise SpecError(f"{path}: expected exactly one tensor, found {len(entries)}")
    (arr,) = entries.values()
    if arr.ndim != 2:
        raise SpecError(f"{path}: expected a 2-D [M,d] tensor, got shape {arr.shape}")
    return arr.astype(np.float64)


def cmd_swd(spec: dict) -> int:
    _require(spec, "file_a", "file_b")
    a = _single_matrix(spec["file_a"])
    b = _single_matrix(spec["file_b"])
    if a.shape != b.shape:
        raise SpecError(f"shape mismatch: {a.shape} vs {b.shape}")
    proj = sample_projections(spec["num_projections"], a.shape[1], spec["seed"])
    value = swd_distance(Tensor(a), Tensor(b), proj).item()
    print(format(value, ".17g"))
    return 0


def cmd_sweep(spec: dict, out: Path, deterministic: bool) -> int:
    """Per seed: pretrain, then each method; one aggregate when every seed succeeds."""
    try:
        seeds = [int(s) for s in str(spec["seeds"]).split(",") if s.strip()]
    except ValueError:
        raise SpecError(f"seeds: cannot parse {spec['seeds']!r}") from None
    if len(seeds) < 2:
        raise SpecError("a sweep needs at least two seeds")
    methods = [m.strip() for m in str(spec["methods"]).split(",") if m.strip()]
    for m in methods:
        if m not in ("transfer", "target-only", "finetune"):
            raise SpecError(f"unknown method {m!r}")
    _require(spec, "source_data", "target_data")
    (out / "resolved_spec.txt").write_text(format_spec(spec), encoding="utf-8")
    per_seed, failures = {}, {}
    for seed in seeds:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        try:
            per_seed[seed] = _sweep_seed(spec, seed, methods, run_dir, deterministic)
        except (FloatingPointError, ValueError) as exc:
            failures[seed] = str(exc)
            (run_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
            logger.error("seed %d failed: %s", seed, exc)
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return EXIT_NUMERIC
    agg = aggregate_metrics(per_seed)
    (out / "aggregate.json").write_text(json.dumps(agg.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for key in sorted(agg.mean):
        print(f"{key}: {agg.mean[key]:.4f} +/- {agg.stderr[key]:.4f}")
    return 0


def _sweep_seed(spec: dict, seed: int, methods: list, run_dir: Path, deterministic: bool) -> dict:
    cfg = _train_config(spec, seed, deterministic)
    src_train = _load_split(spec["source_data"], "train")
    tgt_train = _load_split(spec["target_data"], "train")
    tgt_test = _load_split(spec["target_data"], "test")
    enc = _encoder_config(spec, src_train.images.shape[1:])
    seed_spec = dict(spec, seed=seed)
    labeled, unlabeled = subsample_labeled(tgt_train, _budget(spec), seed)
    _record_labeled_count(seed_spec, len(labeled))
    result: dict = {}
    pretrained = None
    if any(m in ("transfer", "finetune") for m in methods):
        net = init_parameters(enc, src_train.num_classes, seed, tied=spec["tied_init"])
        pretrained, records = pretrain_source(net, src_train, _load_split(spec["source_data"], "val"), cfg)
        result["source_test_accuracy"] = evaluate(pretrained, _load_split(spec["source_data"], "test"), "source").accuracy
        d = run_dir / "pretrain"
        d.mkdir(exist_ok=True)
        _write_run(d, seed_spec, records, pretrained)
    for method in methods:
        if method == "transfer":
            net = pretrained.clone()
            if spec["tied_init"]:
                net.copy_source_to_target()
            net, records = train_transfer(net, labeled, unlabeled, src_train, cfg)
        elif method == "finetune":
            net, records = baseline_finetune(pretrained.clone(), labeled, cfg, len(tgt_train))
        else:
            net = init_parameters(enc, tgt_train.num_classes, seed)
            net, records = baseline_target_only(net, labeled, cfg, len(tgt_train))
        acc = evaluate(net, tgt_test, "target").accuracy
        result[f"{method}_test_accuracy"] = acc
        d = run_dir / method
        d.mkdir(exist_ok=True)
        _write_run(d, seed_spec, records, net, {"target_test_accuracy": acc})
    (run_dir / "result.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return result


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wassalign", description="Sliced-Wasserstein cross-modal transfer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--spec", type=Path, help="key = value spec file")
        p.add_argument("--out", type=Path, help="output directory (overrides 'out')")
        p.add_argument("--seed", type=int, help="overrides 'seed'")
        p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
        p.add_argument("--deterministic", action="store_true", help="single-threaded numerics, zeroed wall clock")
        if name == "swd":
            p.add_argument("file_a", nargs="?", type=Path)
            p.add_argument("file_b", nargs="?", type=Path)
            p.add_argument("--L", dest="num_projections", type=int)
    return parser


def _thread_limit(deterministic: bool):
    env = os.environ.get("WASSALIGN_THREADS")
    limit = int(env) if env else (1 if deterministic else None)
    if limit is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = parse_spec_text(args.spec.read_text(encoding="utf-8")) if args.spec else {}
        overrides = {"seed": args.seed, "out": str(args.out) if args.out else None}
        if args.command == "swd":
            overrides.update(
                file_a=str(args.file_a) if args.file_a else None,
                file_b=str(args.file_b) if args.file_b else None,
                num_projections=args.num_projections,
            )
        spec = resolve_spec(args.command, raw, overrides)
        with _thread_limit(args.deterministic):
            return _dispatch(args, spec)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ContainerError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC


def _dispatch(args, spec: dict) -> int:
    cmd = args.command
    if cmd == "swd":
        return cmd_swd(spec)
    if cmd == "eval":
        return cmd_eval(spec, Path(spec["out"]) if spec.get("out") else None)
    out = _prepare_out(spec.get("out"), args.force)
    if cmd == "synth":
        return cmd_synth(spec, out)
    if cmd == "pretrain":
        return cmd_pretrain(spec, out, args.deterministic)
    if cmd == "transfer":
        return cmd_transfer(spec, out, args.deterministic)
    if cmd == "baseline":
        return cmd_baseline(spec, out, args.deterministic)
    return cmd_sweep(spec, out, args.deterministic)


if __name__ == "__main__":
    sys.exit(main())
