"""Command-line entry point: ``facm-lab <verb> [--config F] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .flow_process import NUM_CLASSES
from .network import CheckpointError, load_checkpoint, save_checkpoint
from .sampler_eval import evaluate, few_step_sample
from .tensor_core import ContractViolation
from .trainer import IncompatibleTeacherError, TrainConfig, TrainingDiverged, distill, pretrain_teacher, train_scratch

VERBS = ("pretrain", "distill", "scratch", "sample", "eval", "verify", "equivalence")
PARADIGM_OF = {"pretrain": "pretrain_teacher", "distill": "distill", "scratch": "scratch"}

log = logging.getLogger("facm_lab")


class ConfigError(ValueError):
    pass


_DEFAULTS = TrainConfig(steps=0)


def _kind(name: str):
    if name == "steps":
        return int
    default = getattr(_DEFAULTS, name)
    return type(default)


def _parse_value(name: str, raw: str, where: str):
    kind = _kind(name)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(float(p) for p in raw.split(","))
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {raw!r} for key {name!r} (expected {kind.__name__})") from None


def _parse_line(line: str, where: str):
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ConfigError(f"{where}: expected 'key = value', got {text!r}")
    key, raw = (s.strip() for s in text.split("=", 1))
    if key not in TrainConfig.field_names():
        raise ConfigError(f"{where}: unknown key {key!r}")
    return key, _parse_value(key, raw, where)


def parse_config(path=None, overrides=(), **forced) -> TrainConfig:
    """Flat ``key = value`` file (``#`` comments), then ``key=value`` overrides,
    then ``forced`` keyword values (the CLI uses this for the verb's paradigm)."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            kv = _parse_line(line, f"{path}:{lineno}")
            if kv:
                values[kv[0]] = kv[1]
    for i, item in enumerate(overrides, 1):
        kv = _parse_line(item, f"--set #{i}")
        if kv:
            values[kv[0]] = kv[1]
    values.update(forced)
    try:
        return TrainConfig(**values)
    except (ContractViolation, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None


def config_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(b)) for b in v)
        elif isinstance(v, float):
            v = repr(v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _snapshot(out: Path, cfg: TrainConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg))
    (out / "seed.txt").write_text(f"{cfg.seed}\n")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facm-lab", description="Flow-anchored consistency models on 2-D toy data.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", help="output directory (default $FACM_LAB_OUT/<verb> or runs/<verb>)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads; 1 gives bit-reproducible traces")
    ap.add_argument("--checkpoint", help="checkpoint for sample / eval")
    ap.add_argument("--teacher-ref", help="teacher checkpoint for the eval ODE reference")
    ap.add_argument("--nfe", default="1,2", help="comma-separated step counts for sample / eval")
    ap.add_argument("--n", type=int, default=2000, help="number of samples for sample / eval")
    ap.add_argument("--quick", action="store_true", help="verify: skip the trained-network check")
    return ap


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("FACM_LAB_OUT")
    return Path(root or "runs") / args.verb


def _need(path, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is required")
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _train(args, cfg: TrainConfig, out: Path) -> int:
    trace = out / "trace.csv"
    if args.verb == "pretrain":
        ckpt = pretrain_teacher(cfg, trace)
    elif args.verb == "distill":
        teacher = load_checkpoint(_need(cfg.teacher, "teacher checkpoint (config key 'teacher')"))
        ckpt = distill(teacher, cfg, trace)
    else:
        ckpt = train_scratch(cfg, trace)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    last = ckpt.trace[-1] if ckpt.trace else {}
    print(f"{args.verb}: {cfg.steps} steps, final total loss {last.get('total', float('nan')):.6g}, wrote {out}")
    return 0


def _nfe_list(text: str) -> list[int]:
    try:
        nfe = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--nfe must be comma-separated integers, got {text!r}") from None
    if not nfe or min(nfe) < 1:
        raise ConfigError("--nfe values must be >= 1")
    return nfe


def _sample(args, cfg: TrainConfig, out: Path) -> int:
    from .flow_process import write_samples_csv

    ckpt = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    net = ckpt.network()
    k = net.config.num_classes
    labels = np.random.default_rng([cfg.seed, 11]).integers(0, k, args.n) if k > 0 else None
    for nfe in _nfe_list(args.nfe):
        pts = few_step_sample(net, nfe, args.n, labels, cfg.seed)
        write_samples_csv(out / f"samples_nfe{nfe}.csv", pts, labels, {"nfe": nfe, "seed": cfg.seed})
    print(f"sample: wrote {out}")
    return 0


def _eval(args, cfg: TrainConfig, out: Path) -> int:
    ckpt = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    teacher = load_checkpoint(_need(args.teacher_ref, "--teacher-ref")).network() if args.teacher_ref else None
    guidance = cfg.guidance if NUM_CLASSES.get(cfg.dataset, 0) > 0 else None
    rep = evaluate(ckpt, cfg.dataset, _nfe_list(args.nfe), args.n, cfg.seed, out, teacher, guidance=guidance)
    print("nfe  energy_distance  sliced_w2")
    for row in rep.rows:
        print(f"{row['nfe']:>3}  {row['energy_distance']:.6g}  {row['sliced_w2']:.6g}")
    if rep.reference:
        print(f"ref  {rep.reference['energy_distance']:.6g}  {rep.reference['sliced_w2']:.6g}  (heun, {rep.reference['ode_steps']} steps)")
    return 0


def _verify(args, cfg: TrainConfig, out: Path) -> int:
    from .verification import run_all

    results = run_all(cfg.seed, include_training=not args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    (out / "verify.txt").write_text("\n".join(r.line() for r in results) + "\n")
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


def _equivalence(args, cfg: TrainConfig, out: Path) -> int:
    from .verification import equivalence_max_gap

    gap = equivalence_max_gap(20, cfg.seed)
    print(f"max |T_MF(r=1) - T_sCM(w=1/(1-t))| = {gap:.3e}")
    (out / "equivalence.txt").write_text(f"{gap!r}\n")
    return 0 if gap <= 1e-12 else 1


_HANDLERS = {
    "pretrain": _train,
    "distill": _train,
    "scratch": _train,
    "sample": _sample,
    "eval": _eval,
    "verify": _verify,
    "equivalence": _equivalence,
}


def run(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        forced = {}
        if args.verb in PARADIGM_OF:
            forced["paradigm"] = PARADIGM_OF[args.verb]
        if args.seed is not None:
            forced["seed"] = args.seed
        cfg = parse_config(args.config, args.overrides, **forced)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as e:
        ap.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = _out_dir(args)
    try:
        _snapshot(out, cfg)
        with threadpool_limits(limits=args.threads):
            return _HANDLERS[args.verb](args, cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, IncompatibleTeacherError, CheckpointError, ContractViolation, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
