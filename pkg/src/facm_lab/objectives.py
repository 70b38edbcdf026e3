"""Training targets and losses: guidance, flow anchor, relaxed consistency, baselines."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .flow_process import (
    ConditioningScheme,
    FlowSample,
    Task,
    encode_condition,
    encode_two_time,
)
from .network import NULL_LABEL, Network, forward, forward_jvp
from .tensor_core import ContractViolation, Tensor

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class GuidanceSpec:
    w: float = 1.75
    t_low: float = 0.125

    def __post_init__(self):
        if self.w < 0:
            raise ContractViolation(f"guidance scale must be >= 0, got {self.w}")
        if not 0.0 <= self.t_low <= 1.0:
            raise ContractViolation(f"t_low must lie in [0, 1], got {self.t_low}")


class WeightKind(str, enum.Enum):
    ONE = "one"
    ONE_MINUS_T_POW = "one_minus_t_pow"
    COS_HALF_PI = "cos_half_pi"


def weight(t, kind: WeightKind | str, p: float = 0.5):
    kind = WeightKind(kind)
    t = np.asarray(t, dtype=float)
    if kind is WeightKind.ONE:
        return np.ones_like(t)
    if kind is WeightKind.ONE_MINUS_T_POW:
        if not p > 0:
            raise ContractViolation("exponent p must be positive")
        return 1.0 - t**p
    return np.cos(t * math.pi / 2)


@dataclass(frozen=True)
class WeightingSpec:
    alpha_kind: WeightKind = WeightKind.ONE_MINUS_T_POW
    alpha_p: float = 0.5
    beta_kind: WeightKind = WeightKind.COS_HALF_PI
    beta_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "alpha_kind", WeightKind(self.alpha_kind))
        object.__setattr__(self, "beta_kind", WeightKind(self.beta_kind))
        for kind, p in ((self.alpha_kind, self.alpha_p), (self.beta_kind, self.beta_p)):
            if kind is WeightKind.ONE_MINUS_T_POW and not p > 0:
                raise ContractViolation("exponent p must be positive")


def alpha_weight(t, spec: WeightingSpec):
    return weight(t, spec.alpha_kind, spec.alpha_p)


def beta_weight(t, spec: WeightingSpec):
    return weight(t, spec.beta_kind, spec.beta_p)


@dataclass
class LossBreakdown:
    fm_loss: float
    cm_loss: float
    total: float
    diag: dict = field(default_factory=dict)
    finite: bool = True
    loss: Tensor | None = None


class BaselineKind(str, enum.Enum):
    SCM = "scm"
    MEANFLOW = "meanflow"


# --------------------------------------------------------------------------
# Targets


def _col(t, like: np.ndarray):
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def cfg_velocity(v_base, v_cond, v_uncond, spec: GuidanceSpec, t) -> np.ndarray:
    """v_base + w (v_cond - v_uncond), left unguided where t < t_low."""
    v_base, v_cond, v_uncond = (np.asarray(a, dtype=float) for a in (v_base, v_cond, v_uncond))
    if not (v_base.shape == v_cond.shape == v_uncond.shape):
        raise ContractViolation(
            f"cfg_velocity shapes differ: {v_base.shape}, {v_cond.shape}, {v_uncond.shape}"
        )
    guided = v_base + spec.w * (v_cond - v_uncond)
    if v_base.ndim <= 1:
        return v_base.copy() if float(t) < spec.t_low else guided
    return np.where(_col(t, v_base) < spec.t_low, v_base, guided)


def cosine_distance(a, b, diag: dict | None = None) -> float:
    """1 - cos(a, b); 0 when either vector is (numerically) zero."""
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        if diag is not None:
            diag["degenerate_cosine"] = True
        return 0.0
    return float(np.clip(1.0 - np.dot(a, b) / (na * nb), 0.0, 2.0))


def _rows(x: Tensor) -> Tensor:
    return tc.reshape(x, shape=(1, x.shape[0])) if x.ndim == 1 else x


def fm_loss_per_sample(F_fm: Tensor, v) -> Tensor:
    F_fm = _rows(tc.as_tensor(F_fm))
    v = np.asarray(v, dtype=float).reshape(F_fm.shape)
    diff = F_fm - v
    l2 = tc.dot(diff, diff)
    nF = tc.l2norm(F_fm)
    nv = np.linalg.norm(v, axis=-1)
    ok = (nF.data >= DEGENERATE_NORM) & (nv >= DEGENERATE_NORM)
    denom = nF * np.where(ok, nv, 1.0) + np.where(ok, 0.0, 1.0)
    cos = 1.0 - tc.dot(F_fm, v) / denom
    return l2 + cos * ok.astype(float)


def fm_loss(F_fm: Tensor, v) -> Tensor:
    """Batch mean of ||F - v||^2 + (1 - cos(F, v))."""
    if tuple(np.shape(v)) != tuple(tc.as_tensor(F_fm).shape):
        raise ContractViolation("fm_loss: prediction and target shapes differ")
    return tc.mean(fm_loss_per_sample(F_fm, v))


def norm_l2_per_sample(pred: Tensor, target, c: float = 1e-3) -> Tensor:
    if not c > 0:
        raise ContractViolation(f"norm_l2 constant must be positive, got {c}")
    pred = _rows(tc.as_tensor(pred))
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float).reshape(pred.shape)
    diff = pred - target
    e = tc.dot(diff, diff)
    # the denominator acts as an adaptive weight: no gradient flows through it
    return e * (1.0 / np.sqrt(e.data + c))


def norm_l2(pred: Tensor, target, c: float = 1e-3) -> Tensor:
    """Batch mean of e / sqrt(e + c), e = ||pred - target||^2."""
    return tc.mean(norm_l2_per_sample(pred, target, c))


def cm_target(F_sg, v, t, dFdt, alpha, clamp_range: tuple[float, float] | None = (-1.0, 1.0)):
    """Relaxed fixed-point target.

    g = F_sg - (v + (1 - t) dFdt), clamped to ``clamp_range`` (None disables),
    then v_tar = F_sg - alpha * g. Returns (v_tar, g) with g post-clamp.
    """
    F_sg, v, dFdt = (np.asarray(getattr(a, "data", a), dtype=float) for a in (F_sg, v, dFdt))
    if not (F_sg.shape == v.shape == dFdt.shape):
        raise ContractViolation("cm_target: tensor shapes differ")
    g = F_sg - (v + (1.0 - _col(t, F_sg)) * dFdt)
    if clamp_range is not None:
        g = tc.clamp(g, *clamp_range).data
    return F_sg - _col(alpha, F_sg) * g, g


def scm_baseline_target(F_sg, v, t, dFdt, w_choice: str | float | Callable = "inverse") -> np.ndarray:
    """sCM regression target F_sg + w(t)(1-t) df/dt for the linear-flow parameterization.

    ``w_choice="inverse"`` selects w(t) = 1/(1-t), for which the target is
    v + (1-t) dFdt exactly. A float or callable gives the generic form.
    """
    F_sg, v, dFdt = (np.asarray(getattr(a, "data", a), dtype=float) for a in (F_sg, v, dFdt))
    tt = _col(t, F_sg)
    if isinstance(w_choice, str):
        if w_choice != "inverse":
            raise ContractViolation(f"unknown sCM weighting {w_choice!r}")
        if np.any(tt >= 1.0):
            raise ContractViolation("w(t) = 1/(1-t) is undefined at t = 1")
        return v + (1.0 - tt) * dFdt
    w = w_choice(np.asarray(t, dtype=float)) if callable(w_choice) else float(w_choice)
    w = _col(w, F_sg) if np.ndim(w) else w
    df_dt = v - F_sg + (1.0 - tt) * dFdt
    return F_sg + w * (1.0 - tt) * df_dt


def meanflow_baseline_target(F_sg, v, t, r, dFdt_r) -> np.ndarray:
    """v + (r - t) dF/dt, with dF/dt taken along the (t, r) condition with tangent (1, 0)."""
    v = np.asarray(getattr(v, "data", v), dtype=float)
    dFdt_r = np.asarray(getattr(dFdt_r, "data", dFdt_r), dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > 1):
        raise ContractViolation("r must lie in [0, 1]")
    return v + (_col(r, v) - _col(t, v)) * dFdt_r


# --------------------------------------------------------------------------
# Losses


def guided_velocity(
    net: Network,
    teacher: Network | None,
    batch: FlowSample,
    scheme: ConditioningScheme,
    guidance: GuidanceSpec,
) -> np.ndarray:
    """Velocity target v for a batch, always under stop-gradient.

    With a teacher: v_base = v_uncond = teacher(x_t, null), so w = 1 gives
    the conditional teacher velocity. From scratch: v_base = x1 - x0 plus
    (w - 1) times the online model's cond/uncond difference, skipped for
    samples whose label was dropped.
    """
    c_fm = encode_condition(scheme, Task.FM, batch.t)
    labels = batch.class_label
    with tc.stop_gradient():
        if teacher is not None:
            if teacher.config.num_classes == 0 or labels is None:
                return forward(teacher, batch.x_t, c_fm).data.copy()
            v_cond = forward(teacher, batch.x_t, c_fm, labels).data
            v_uncond = forward(teacher, batch.x_t, c_fm, NULL_LABEL).data
            return cfg_velocity(v_uncond, v_cond, v_uncond, guidance, batch.t)
        v = batch.v.copy()
        if net.config.num_classes == 0 or labels is None or guidance.w == 1.0:
            return v
        keep = np.asarray(labels) != NULL_LABEL
        if not keep.any():
            return v
        v_cond = forward(net, batch.x_t, c_fm, labels).data
        v_uncond = forward(net, batch.x_t, c_fm, NULL_LABEL).data
        guided = v + (guidance.w - 1.0) * (v_cond - v_uncond)
        keep = keep & (np.asarray(batch.t) >= guidance.t_low)
        return np.where(keep[:, None], guided, v)


def _finish(fm: Tensor | None, cm: Tensor, diag: dict) -> LossBreakdown:
    total = cm if fm is None else fm + cm
    fm_v = 0.0 if fm is None else fm.item()
    br = LossBreakdown(fm_loss=fm_v, cm_loss=cm.item(), total=total.item(), diag=diag, loss=total)
    br.finite = bool(np.isfinite(br.total) and np.isfinite(fm_v) and np.isfinite(br.cm_loss))
    return br


def facm_loss(
    net: Network,
    teacher: Network | None,
    batch: FlowSample,
    scheme: ConditioningScheme,
    guidance: GuidanceSpec,
    weighting: WeightingSpec,
    *,
    norm_c: float = 1e-3,
    clamp_range: tuple[float, float] | None = (-1.0, 1.0),
    fm_weight: float = 1.0,
    dropout_rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Flow-anchor loss plus relaxed consistency loss for one batch.

    Must be evaluated inside a ``Tape`` for ``.loss`` to be differentiable;
    gradients reach the parameters only through the FM and CM forwards.
    """
    scheme = ConditioningScheme(scheme)
    if net.config.scheme is not scheme:
        raise ContractViolation("network scheme does not match requested scheme")
    t = np.asarray(batch.t, dtype=float)
    labels = batch.class_label if net.config.num_classes > 0 else None
    v = guided_velocity(net, teacher, batch, scheme, guidance)

    fm = None
    if fm_weight != 0.0:
        F_fm = forward(net, batch.x_t, encode_condition(scheme, Task.FM, t), labels, dropout_rng)
        fm = fm_loss(F_fm, v)
        if fm_weight != 1.0:
            fm = fm * fm_weight

    dual = forward_jvp(net, batch.x_t, encode_condition(scheme, Task.CM, t), v, labels)
    F_cm = dual.primal
    dFdt = dual.tangent.data
    F_sg = F_cm.data
    alpha = alpha_weight(t, weighting)
    raw_g = F_sg - (v + (1.0 - t[:, None]) * dFdt)
    v_tar, g = cm_target(F_sg, v, t, dFdt, alpha, clamp_range)
    cm = tc.mean(norm_l2_per_sample(F_cm, v_tar, norm_c) * beta_weight(t, weighting))

    if clamp_range is None:
        clamp_fraction = 0.0
    else:
        clamp_fraction = float(np.mean((raw_g < clamp_range[0]) | (raw_g > clamp_range[1])))
    diag = {
        "mean_residual_norm": float(np.mean(np.linalg.norm(raw_g, axis=-1))),
        "clamp_fraction": clamp_fraction,
        "mean_dFdt_norm": float(np.mean(np.linalg.norm(dFdt, axis=-1))),
    }
    return _finish(fm, cm, diag)


def fm_pretrain_loss(
    net: Network,
    batch: FlowSample,
    use_fm_condition: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Pure flow-matching loss with per-sample choice of FM-format or plain-time condition."""
    scheme = net.config.scheme
    t = np.asarray(batch.t, dtype=float)
    enc_fm = encode_condition(scheme, Task.FM, t)
    enc_cm = encode_condition(scheme, Task.CM, t)
    mask = np.asarray(use_fm_condition, dtype=bool)[:, None]
    cond = type(enc_fm)(
        Task.FM,
        scheme,
        t,
        np.where(mask, enc_fm.encoded, enc_cm.encoded),
        np.where(mask, enc_fm.time_tangent, enc_cm.time_tangent),
    )
    labels = batch.class_label if net.config.num_classes > 0 else None
    F = forward(net, batch.x_t, cond, labels, dropout_rng)
    fm = fm_loss(F, batch.v)
    br = _finish(None, fm, {})
    br.fm_loss, br.cm_loss = br.cm_loss, 0.0
    return br


def scm_loss(
    net: Network,
    teacher: Network | None,
    batch: FlowSample,
    guidance: GuidanceSpec,
    w_choice: str | float | Callable = "inverse",
) -> LossBreakdown:
    """Continuous-time CM baseline: MSE to the sCM target, no flow anchor, no clamp."""
    scheme = net.config.scheme
    t = np.asarray(batch.t, dtype=float)
    labels = batch.class_label if net.config.num_classes > 0 else None
    v = guided_velocity(net, teacher, batch, scheme, guidance)
    dual = forward_jvp(net, batch.x_t, encode_condition(scheme, Task.CM, t), v, labels)
    target = scm_baseline_target(dual.primal.data, v, t, dual.tangent.data, w_choice)
    diff = dual.primal - target
    cm = tc.mean(tc.dot(diff, diff))
    diag = {"mean_dFdt_norm": float(np.mean(np.linalg.norm(dual.tangent.data, axis=-1)))}
    return _finish(None, cm, diag)


def meanflow_loss(
    net: Network,
    teacher: Network | None,
    batch: FlowSample,
    guidance: GuidanceSpec,
    rng: np.random.Generator,
    ratio_r_eq_t: float = 0.75,
    norm_c: float = 1e-3,
) -> LossBreakdown:
    """Average-velocity baseline on the (t, r) condition, r in [t, 1]."""
    if net.config.scheme is not ConditioningScheme.AUXILIARY_TIME:
        raise ContractViolation("MeanFlow needs the two-time (auxiliary_time) network")
    if not 0.0 <= ratio_r_eq_t <= 1.0:
        raise ContractViolation("ratio_r_eq_t must lie in [0, 1]")
    t = np.asarray(batch.t, dtype=float)
    n = len(t)
    r = t + (1.0 - t) * rng.random(n)
    r = np.where(rng.random(n) < ratio_r_eq_t, t, r)
    labels = batch.class_label if net.config.num_classes > 0 else None
    v = guided_velocity(net, teacher, batch, ConditioningScheme.AUXILIARY_TIME, guidance)
    dual = forward_jvp(net, batch.x_t, encode_two_time(t, r), v, labels)
    target = meanflow_baseline_target(dual.primal.data, v, t, r, dual.tangent.data)
    cm = norm_l2(dual.primal, target, norm_c)
    diag = {
        "mean_dFdt_norm": float(np.mean(np.linalg.norm(dual.tangent.data, axis=-1))),
        "fraction_r_eq_t": float(np.mean(r == t)),
    }
    return _finish(None, cm, diag)


def target_equivalence_gap(net: Network, t_grid, x_t, v, label=None) -> float:
    """max |T_MF(r=1) - T'_sCM| for a two-time network over a time grid.

    The sCM side is evaluated through the generic weighted form with
    w(t) = 1/(1-t) supplied numerically, so the cancellation is exercised
    rather than assumed.
    """
    if net.config.scheme is not ConditioningScheme.AUXILIARY_TIME:
        raise ContractViolation("equivalence check needs a two-time network")
    worst = 0.0
    x_t = np.asarray(x_t, dtype=float)
    v = np.asarray(v, dtype=float)
    for t in t_grid:
        tv = np.full(len(x_t), float(t))
        with tc.stop_gradient():
            d_mf = forward_jvp(net, x_t, encode_two_time(tv, 1.0), v, label)
            d_cm = forward_jvp(net, x_t, encode_condition(ConditioningScheme.AUXILIARY_TIME, Task.CM, tv), v, label)
        t_mf = meanflow_baseline_target(d_mf.primal.data, v, tv, 1.0, d_mf.tangent.data)
        t_scm = scm_baseline_target(d_cm.primal.data, v, tv, d_cm.tangent.data, lambda s: 1.0 / (1.0 - s))
        worst = max(worst, float(np.max(np.abs(t_mf - t_scm))))
    return worst
