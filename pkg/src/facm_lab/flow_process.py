"""OT flow-matching interpolant, time schedule, task conditioning and toy data."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import ContractViolation

T_MIN = 1e-5
T_MAX = 1.0 - 1e-5


class ConditioningScheme(str, enum.Enum):
    EXPANDED_INTERVAL = "expanded_interval"
    AUXILIARY_TIME = "auxiliary_time"

    @property
    def arity(self) -> int:
        return 1 if self is ConditioningScheme.EXPANDED_INTERVAL else 2


class Task(str, enum.Enum):
    FM = "fm"
    CM = "cm"


@dataclass(frozen=True)
class TimeSchedule:
    p_mean: float = -0.8
    p_std: float = 1.6


@dataclass(frozen=True)
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v: np.ndarray
    class_label: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x0)


@dataclass(frozen=True)
class ConditioningSignal:
    """Encoded condition for a batch (or a single time).

    ``encoded`` and ``time_tangent`` have trailing dimension equal to the
    scheme's arity; ``time_tangent`` is d(encoded)/dt along the trajectory.
    """

    task: Task
    scheme: ConditioningScheme
    raw_t: np.ndarray
    encoded: np.ndarray
    time_tangent: np.ndarray

    @property
    def arity(self) -> int:
        return self.encoded.shape[-1]


def time_from_sigma(sigma):
    return 1.0 - (2.0 / math.pi) * np.arctan(sigma)


def sample_time(rng: np.random.Generator, schedule: TimeSchedule, size=None):
    """Log-normal arctan schedule; draws outside (T_MIN, T_MAX) are redrawn."""
    if not schedule.p_std > 0:
        raise ContractViolation(f"p_std must be positive, got {schedule.p_std}")
    scalar = size is None
    n = 1 if scalar else int(np.prod(size))
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        z = rng.standard_normal(todo.size)
        t = time_from_sigma(np.exp(schedule.p_mean + schedule.p_std * z))
        ok = (t > T_MIN) & (t < T_MAX)
        out[todo[ok]] = t[ok]
        todo = todo[~ok]
    return float(out[0]) if scalar else out.reshape(size)


def time_cdf(t, schedule: TimeSchedule):
    """Analytic CDF of the (untruncated) schedule."""
    from scipy.stats import norm

    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        log_sigma = np.log(np.tan(0.5 * math.pi * (1.0 - t)))
    return norm.sf((log_sigma - schedule.p_mean) / schedule.p_std)


def interpolate(x0, x1, t, class_label=None) -> FlowSample:
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise ContractViolation(f"x0 shape {x0.shape} != x1 shape {x1.shape}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractViolation("t must lie in [0, 1]")
    tt = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    x_t = (1 - tt) * x0 + tt * x1
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, v=x1 - x0, class_label=class_label)


def encode_condition(scheme: ConditioningScheme, task: Task, t) -> ConditioningSignal:
    scheme = ConditioningScheme(scheme)
    task = Task(task)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractViolation("t must lie in [0, 1]")
    ones = np.ones_like(t)
    if scheme is ConditioningScheme.EXPANDED_INTERVAL:
        if task is Task.CM:
            enc, tan = [t], [ones]
        else:
            enc, tan = [2.0 - t], [-ones]
    else:
        if task is Task.CM:
            enc, tan = [t, ones], [ones, np.zeros_like(t)]
        else:
            enc, tan = [t, t], [ones, ones]
    return ConditioningSignal(task, scheme, t, np.stack(enc, axis=-1), np.stack(tan, axis=-1))


def encode_two_time(t, r) -> ConditioningSignal:
    """(t, r) conditioning for average-velocity objectives; r is held fixed along the path."""
    t = np.asarray(t, dtype=float)
    r = np.broadcast_to(np.asarray(r, dtype=float), t.shape)
    enc = np.stack([t, r], axis=-1)
    tan = np.stack([np.ones_like(t), np.zeros_like(t)], axis=-1)
    return ConditioningSignal(Task.CM, ConditioningScheme.AUXILIARY_TIME, t, enc, tan)


# --------------------------------------------------------------------------
# Toy datasets. Scale constants are the analytic per-axis std of each generator,
# so normalized data has zero mean and unit variance per axis.

GAUSS_RADIUS = 2.0
GAUSS_STD = 0.2
MOONS_NOISE = 0.1

_SCALES = {
    "eight_gaussians": (
        np.zeros(2),
        np.full(2, math.sqrt(GAUSS_RADIUS**2 / 2 + GAUSS_STD**2)),
    ),
    "two_moons": (
        np.array([0.5, 0.25]),
        np.array(
            [
                math.sqrt(0.75 + MOONS_NOISE**2),
                math.sqrt(9 / 16 - 1 / math.pi + MOONS_NOISE**2),
            ]
        ),
    ),
    "checkerboard": (np.zeros(2), np.full(2, math.sqrt(4 / 3))),
}

DATASETS = tuple(_SCALES)
NUM_CLASSES = {"eight_gaussians": 8, "two_moons": 0, "checkerboard": 0}


@dataclass(frozen=True)
class Dataset:
    name: str
    points: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(zip(self.points, self.labels.tolist()))

    def __getitem__(self, i):
        return self.points[i], int(self.labels[i])


def eight_gaussian_centers(normalized: bool = True) -> np.ndarray:
    k = np.arange(8)
    ang = 2 * math.pi * k / 8
    c = GAUSS_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if normalized:
        mu, sd = _SCALES["eight_gaussians"]
        c = (c - mu) / sd
    return c


def _raw_samples(name: str, n: int, rng: np.random.Generator):
    if name == "eight_gaussians":
        labels = rng.integers(0, 8, size=n)
        pts = eight_gaussian_centers(normalized=False)[labels] + GAUSS_STD * rng.standard_normal((n, 2))
        return pts, labels
    labels = np.zeros(n, dtype=np.int64)
    if name == "two_moons":
        upper = rng.random(n) < 0.5
        theta = math.pi * rng.random(n)
        x = np.where(upper, np.cos(theta), 1 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1) + MOONS_NOISE * rng.standard_normal((n, 2))
        return pts, labels
    # checkerboard: 8 filled unit squares of a 4x4 board on [-2, 2]^2
    x = 4 * rng.random(n) - 2
    y = rng.random(n) - 2 * rng.integers(0, 2, size=n)
    y = y + np.mod(np.floor(x), 2)
    return np.stack([x, y], axis=1), labels


def make_dataset(name: str, n: int, rng: np.random.Generator) -> Dataset:
    if name not in _SCALES:
        raise ValueError(f"unknown dataset {name!r}; valid names: {', '.join(DATASETS)}")
    if n < 0:
        raise ContractViolation("n must be non-negative")
    pts, labels = _raw_samples(name, n, rng)
    mu, sd = _SCALES[name]
    pts = (pts - mu) / sd
    return Dataset(name, pts.reshape(n, 2), np.asarray(labels, dtype=np.int64))


def write_samples_csv(path, points, labels=None, extra: dict | None = None) -> None:
    """Write ``x,y,label`` rows plus any constant extra columns."""
    points = np.asarray(points)
    labels = np.zeros(len(points), dtype=int) if labels is None else np.asarray(labels)
    extra = extra or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label", *extra])
        for (x, y), lab in zip(points, labels):
            w.writerow([repr(float(x)), repr(float(y)), int(lab), *extra.values()])
