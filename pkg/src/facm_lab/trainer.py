"""Optimization loops: teacher pre-training, FACM distillation, FACM from scratch."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import network as netmod
from . import objectives as obj
from .flow_process import (
    NUM_CLASSES,
    ConditioningScheme,
    Dataset,
    FlowSample,
    TimeSchedule,
    interpolate,
    make_dataset,
    sample_time,
)
from .network import NULL_LABEL, Checkpoint, Network, NetworkConfig
from .tensor_core import ContractViolation, Tape, gradient, stop_gradient

log = logging.getLogger(__name__)

PARADIGMS = ("pretrain_teacher", "distill", "scratch")
OBJECTIVES = ("facm", "scm", "meanflow")
TRACE_COLUMNS = ("step", "fm_loss", "cm_loss", "total", "grad_norm", "clamp_fraction")

# fixed labels for the independent RNG streams derived from the run seed
STREAM_DATA, STREAM_BATCH, STREAM_INIT, STREAM_DROPOUT, STREAM_OBJECTIVE = range(5)


def stream(seed: int, label: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(label)])


@dataclass(frozen=True)
class TrainConfig:
    paradigm: str = "distill"
    objective: str = "facm"
    steps: int | None = None
    batch_size: int = 256
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ema_rel_length: float = 0.2
    p_mean: float = -0.8
    p_std: float = 1.6
    w: float = 1.75
    t_low: float = 0.125
    alpha_kind: str = "one_minus_t_pow"
    alpha_p: float = 0.5
    beta_kind: str = "cos_half_pi"
    beta_p: float = 0.5
    norm_c: float = 1e-3
    clamp: bool = True
    clamp_lo: float = -1.0
    clamp_hi: float = 1.0
    fm_weight: float = 1.0
    scheme: str = "expanded_interval"
    dataset: str = "eight_gaussians"
    dataset_size: int = 100_000
    seed: int = 0
    mixed_condition_ratio: float = 0.5
    label_dropout: float = 0.1
    meanflow_ratio: float = 0.75
    grad_clip: float = 10.0
    hidden_width: int = 256
    depth: int = 4
    time_embed_dim: int = 128
    dropout: float = 0.0
    nonfinite_abort: int = 50
    teacher: str = ""

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ContractViolation(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.objective not in OBJECTIVES:
            raise ContractViolation(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.steps is None:
            object.__setattr__(self, "steps", 20_000 if self.paradigm == "pretrain_teacher" else 10_000)
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        ConditioningScheme(self.scheme)
        if not self.lr > 0:
            raise ContractViolation("lr must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ContractViolation("batch_size must be >= 1 and steps >= 0")
        if len(self.adam_betas) != 2 or not all(0 < b < 1 for b in self.adam_betas):
            raise ContractViolation("adam_betas must lie in (0, 1)^2")
        if not 0 <= self.mixed_condition_ratio <= 1 or not 0 <= self.label_dropout < 1:
            raise ContractViolation("mixed_condition_ratio and label_dropout must be probabilities")
        if self.clamp and self.clamp_lo > self.clamp_hi:
            raise ContractViolation("clamp_lo > clamp_hi")
        self.guidance, self.weighting  # validate

    @property
    def schedule(self) -> TimeSchedule:
        return TimeSchedule(self.p_mean, self.p_std)

    @property
    def guidance(self) -> obj.GuidanceSpec:
        return obj.GuidanceSpec(self.w, self.t_low)

    @property
    def weighting(self) -> obj.WeightingSpec:
        return obj.WeightingSpec(self.alpha_kind, self.alpha_p, self.beta_kind, self.beta_p)

    @property
    def clamp_range(self) -> tuple[float, float] | None:
        return (self.clamp_lo, self.clamp_hi) if self.clamp else None

    @property
    def conditioning(self) -> ConditioningScheme:
        return ConditioningScheme(self.scheme)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_dim=2,
            hidden_width=self.hidden_width,
            depth=self.depth,
            time_embed_dim=self.time_embed_dim,
            num_classes=NUM_CLASSES.get(self.dataset, 0),
            scheme=self.conditioning,
            seed=self.seed,
            dropout=self.dropout,
        )

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------------------
# AdamW and EMA


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state: OptimizerState, lr: float, betas=(0.9, 0.999), wd: float = 0.0, eps: float = 1e-8):
    """One AdamW update with bias correction and decoupled weight decay.

    Returns (new_params, state). Non-finite gradients leave parameters and
    moments untouched and bump ``state.skipped``.
    """
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ContractViolation(f"shape mismatch for parameter {k}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return params, state
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p = p * (1.0 - lr * wd) if wd else p
        out[k] = p - lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + eps)
    return out, state


def ema_decay(rel_length: float, total_steps: int) -> float:
    """Exponential decay whose half-life is rel_length * total_steps / 2 steps."""
    half_life = rel_length * max(total_steps, 1) / 2.0
    return math.exp(math.log(0.5) / half_life)


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float


def ema_update(ema: EmaState, online: dict[str, np.ndarray]) -> EmaState:
    d = ema.decay
    for k, p in online.items():
        if ema.shadow[k].shape != p.shape:
            raise ContractViolation(f"EMA shape mismatch for {k}")
    return EmaState({k: d * ema.shadow[k] + (1.0 - d) * online[k] for k in ema.shadow}, d)


# --------------------------------------------------------------------------
# Loops


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, trace: list[dict], diag: dict):
        super().__init__(msg)
        self.trace = trace
        self.diag = diag


class IncompatibleTeacherError(ValueError):
    pass


def draw_batch(cfg: TrainConfig, data: Dataset, rng: np.random.Generator, label_dropout: float) -> FlowSample:
    idx = rng.integers(0, len(data), size=cfg.batch_size)
    x1 = data.points[idx]
    x0 = rng.standard_normal(x1.shape)
    t = sample_time(rng, cfg.schedule, size=cfg.batch_size)
    labels = data.labels[idx].copy()
    if NUM_CLASSES.get(cfg.dataset, 0) > 0 and label_dropout > 0:
        labels[rng.random(cfg.batch_size) < label_dropout] = NULL_LABEL
    return interpolate(x0, x1, t, class_label=labels)


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _run(
    cfg: TrainConfig,
    net: Network,
    loss_fn: Callable[[FlowSample, np.random.Generator], obj.LossBreakdown],
    label_dropout: float,
    clip: float | None,
    trace_path=None,
    callback=None,
) -> Checkpoint:
    data = make_dataset(cfg.dataset, cfg.dataset_size, stream(cfg.seed, STREAM_DATA))
    batch_rng = stream(cfg.seed, STREAM_BATCH)
    obj_rng = stream(cfg.seed, STREAM_OBJECTIVE)
    params = net.param_arrays()
    opt = OptimizerState.zeros_like(params)
    ema = EmaState({k: v.copy() for k, v in params.items()}, ema_decay(cfg.ema_rel_length, cfg.steps))
    trace: list[dict] = []
    streak = 0
    skipped = 0

    for step in range(cfg.steps):
        batch = draw_batch(cfg, data, batch_rng, label_dropout)
        with Tape():
            br = loss_fn(batch, obj_rng)
            grads = gradient(br.loss, net.params) if br.finite else None
        garr = None if grads is None else {k: g.data for k, g in grads.items()}
        gnorm = float("nan") if garr is None else _global_norm(garr)
        row = {
            "step": step,
            "fm_loss": br.fm_loss,
            "cm_loss": br.cm_loss,
            "total": br.total,
            "grad_norm": gnorm,
            "clamp_fraction": br.diag.get("clamp_fraction", 0.0),
        }
        trace.append(row)
        if garr is None or not math.isfinite(gnorm):
            skipped += 1
            streak += 1
            if streak > cfg.nonfinite_abort:
                if trace_path is not None:
                    write_trace(trace_path, trace)
                raise TrainingDiverged(
                    f"{streak} consecutive non-finite steps ending at step {step}",
                    trace,
                    {"last": row, "diag": br.diag, "skipped": skipped},
                )
            continue
        streak = 0
        if clip and gnorm > clip:
            garr = {k: g * (clip / gnorm) for k, g in garr.items()}
        params, opt = adamw_step(params, garr, opt, cfg.lr, cfg.adam_betas, cfg.weight_decay, cfg.adam_eps)
        net.set_params(params)
        ema = ema_update(ema, params)
        if callback is not None:
            callback(step, row, net)

    if trace_path is not None:
        write_trace(trace_path, trace)
    ckpt = Checkpoint(
        network_config=net.config,
        params=params,
        ema=ema.shadow,
        opt_m=opt.m,
        opt_v=opt.v,
        opt_step=opt.step,
        step=cfg.steps,
        meta={"paradigm": cfg.paradigm, "objective": cfg.objective, "seed": cfg.seed, "skipped": skipped},
    )
    ckpt.trace = trace
    return ckpt


def write_trace(path, trace: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["step"], *(repr(float(row[c])) for c in TRACE_COLUMNS[1:])])


def pretrain_teacher(cfg: TrainConfig, trace_path=None, callback=None) -> Checkpoint:
    """Flow-matching pre-training with mixed FM-format / plain time conditioning."""
    if cfg.paradigm != "pretrain_teacher":
        raise ContractViolation("pretrain_teacher requires paradigm = pretrain_teacher")
    net = netmod.init(cfg.network_config(), stream(cfg.seed, STREAM_INIT))
    drop_rng = stream(cfg.seed, STREAM_DROPOUT)

    def loss_fn(batch, rng):
        use_fm = rng.random(len(batch)) < cfg.mixed_condition_ratio
        return obj.fm_pretrain_loss(net, batch, use_fm, drop_rng if cfg.dropout > 0 else None)

    return _run(cfg, net, loss_fn, cfg.label_dropout, None, trace_path, callback)


def _check_teacher(teacher_cfg: NetworkConfig, cfg: TrainConfig) -> None:
    want = cfg.network_config()
    problems = [
        f"{name}: teacher {getattr(teacher_cfg, name)!r} vs requested {getattr(want, name)!r}"
        for name in ("input_dim", "num_classes", "scheme")
        if getattr(teacher_cfg, name) != getattr(want, name)
    ]
    if problems:
        raise IncompatibleTeacherError("incompatible teacher: " + "; ".join(problems))


def _objective_loss(cfg: TrainConfig, net: Network, teacher: Network | None):
    drop_rng = stream(cfg.seed, STREAM_DROPOUT) if cfg.dropout > 0 else None
    scheme = cfg.conditioning
    if cfg.objective == "facm":
        return lambda batch, rng: obj.facm_loss(
            net,
            teacher,
            batch,
            scheme,
            cfg.guidance,
            cfg.weighting,
            norm_c=cfg.norm_c,
            clamp_range=cfg.clamp_range,
            fm_weight=cfg.fm_weight,
            dropout_rng=drop_rng,
        )
    if cfg.objective == "scm":
        return lambda batch, rng: obj.scm_loss(net, teacher, batch, cfg.guidance)
    return lambda batch, rng: obj.meanflow_loss(net, teacher, batch, cfg.guidance, rng, cfg.meanflow_ratio, cfg.norm_c)


def distill(teacher: Checkpoint, cfg: TrainConfig, trace_path=None, callback=None) -> Checkpoint:
    """Student starts from the teacher's EMA weights; a frozen copy supplies velocities."""
    _check_teacher(teacher.network_config, cfg)
    frozen = teacher.network(use_ema=True, frozen=True)
    student = teacher.network(use_ema=True, frozen=False)
    clip = None if cfg.objective == "facm" else cfg.grad_clip
    return _run(cfg, student, _objective_loss(cfg, student, frozen), 0.0, clip, trace_path, callback)


def train_scratch(cfg: TrainConfig, trace_path=None, callback=None) -> Checkpoint:
    if cfg.paradigm != "scratch":
        raise ContractViolation("train_scratch requires paradigm = scratch")
    net = netmod.init(cfg.network_config(), stream(cfg.seed, STREAM_INIT))
    clip = None if cfg.objective == "facm" else cfg.grad_clip
    return _run(cfg, net, _objective_loss(cfg, net, None), cfg.label_dropout, clip, trace_path, callback)


def fm_validation_loss(net: Network, cfg: TrainConfig, n: int = 4096, seed: int = 12345) -> float:
    """Plain-time FM loss (L2 + cosine) on fresh draws, fixed seed."""
    rng = np.random.default_rng(seed)
    data = make_dataset(cfg.dataset, n, rng)
    x0 = rng.standard_normal((n, 2))
    t = sample_time(rng, cfg.schedule, size=n)
    labels = data.labels if net.config.num_classes > 0 else None
    batch = interpolate(x0, data.points, t, class_label=labels)
    with stop_gradient():
        br = obj.fm_pretrain_loss(net, batch, np.ones(n, dtype=bool))
    return br.fm_loss
