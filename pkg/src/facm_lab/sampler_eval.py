"""Few-step consistency sampling, teacher ODE reference, two-sample metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor_core as tc
from .flow_process import NUM_CLASSES, Task, encode_condition, make_dataset, write_samples_csv
from .network import NULL_LABEL, Checkpoint, Network, forward
from .objectives import GuidanceSpec, cfg_velocity
from .tensor_core import ContractViolation

REPORT_COLUMNS = ("nfe", "energy_distance", "sliced_w2", "n_samples", "seed")


@dataclass(frozen=True)
class SampleSchedule:
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ContractViolation(f"step count must be >= 1, got {self.N}")

    @property
    def timesteps(self) -> np.ndarray:
        return np.arange(self.N) / self.N


def _base_seed(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63 - 1))


def noise_for_step(seed: int, step: int, n: int, dim: int) -> np.ndarray:
    """Row k is a function of (seed, step, k) only; step 0 is the starting noise."""
    return np.random.default_rng([seed, step]).standard_normal((n, dim))


def _meta(net):
    """(input_dim, scheme, num_classes) for a Network or any model exposing them."""
    cfg = getattr(net, "config", net)
    return cfg.input_dim, cfg.scheme, cfg.num_classes


def _predict(net, x, cond, labels) -> np.ndarray:
    if isinstance(net, Network):
        with tc.stop_gradient():
            return forward(net, x, cond, labels).data
    return np.asarray(net(x, cond, labels), dtype=float)


def _labels(net, label, n: int):
    if _meta(net)[2] == 0:
        return None
    if label is None:
        return NULL_LABEL
    return np.broadcast_to(np.asarray(label, dtype=np.int64), (n,))


def few_step_sample(net, N: int, n_samples: int, label=None, rng=0, return_trace: bool = False):
    """N-step consistency sampling with re-noising on t_i = (i-1)/N.

    Each step predicts x1_hat = x + (1 - t_i) F(x, c_CM(t_i)); between steps
    the input is re-noised as t_{i+1} x1_hat + (1 - t_{i+1}) z_i.
    ``net`` is a Network or a callable ``(x, cond, labels) -> velocity`` with
    ``input_dim``, ``scheme`` and ``num_classes`` attributes.
    """
    sched = SampleSchedule(N)
    seed = _base_seed(rng)
    dim, scheme, _ = _meta(net)
    labels = _labels(net, label, n_samples)
    ts = sched.timesteps
    x = noise_for_step(seed, 0, n_samples, dim)
    trace = []
    for i, t in enumerate(ts):
        cond = encode_condition(scheme, Task.CM, np.full(n_samples, t))
        F = _predict(net, x, cond, labels)
        x1_hat = x + (1.0 - t) * F
        step = {"t": float(t), "x_in": x, "x1_hat": x1_hat}
        if i + 1 < N:
            t_next = ts[i + 1]
            z = noise_for_step(seed, i + 1, n_samples, dim)
            x = t_next * x1_hat + (1.0 - t_next) * z
            step.update(z=z, t_next=float(t_next), x_next=x)
        trace.append(step)
    return (x1_hat, trace) if return_trace else x1_hat


def integrate_ode(field_fn: Callable[[np.ndarray, float], np.ndarray], x0, n_steps: int, method: str = "heun"):
    """Fixed-step Euler or Heun integration of dx/dt = field_fn(x, t) over [0, 1]."""
    if n_steps < 1:
        raise ContractViolation("n_steps must be >= 1")
    if method not in ("euler", "heun"):
        raise ContractViolation(f"method must be euler or heun, got {method!r}")
    x = np.asarray(x0, dtype=float)
    h = 1.0 / n_steps
    for k in range(n_steps):
        t = k * h
        d1 = field_fn(x, t)
        if method == "euler":
            x = x + h * d1
        else:
            x_pred = x + h * d1
            d2 = field_fn(x_pred, t + h)
            x = x + 0.5 * h * (d1 + d2)
    return x


def teacher_field(teacher: Network, guidance: GuidanceSpec | None, labels):
    """Velocity field of a flow model under the FM conditioning, with optional CFG."""
    scheme = teacher.config.scheme

    def field_fn(x, t):
        cond = encode_condition(scheme, Task.FM, np.full(len(x), t))
        with tc.stop_gradient():
            if labels is None or isinstance(labels, int) and labels == NULL_LABEL:
                return forward(teacher, x, cond, labels).data
            v_cond = forward(teacher, x, cond, labels).data
            if guidance is None:
                return v_cond
            v_uncond = forward(teacher, x, cond, NULL_LABEL).data
            return cfg_velocity(v_uncond, v_cond, v_uncond, guidance, t)

    return field_fn


def ode_solve_reference(
    teacher: Network,
    n_steps: int,
    method: str,
    n_samples: int,
    label=None,
    rng=0,
    guidance: GuidanceSpec | None = None,
) -> np.ndarray:
    seed = _base_seed(rng)
    x0 = noise_for_step(seed, 0, n_samples, teacher.config.input_dim)
    labels = _labels(teacher, label, n_samples)
    return integrate_ode(teacher_field(teacher, guidance, labels), x0, n_steps, method)


def energy_distance(A, B) -> float:
    """2 E|a-b| - E|a-a'| - E|b-b'| over all pairs (V-statistic)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if len(A) == 0 or len(B) == 0:
        raise ContractViolation("energy_distance needs non-empty samples")
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if A.shape[1] != B.shape[1]:
        raise ContractViolation("energy_distance: dimension mismatch")
    ab = cdist(A, B).mean()
    aa = cdist(A, A).mean()
    bb = cdist(B, B).mean()
    return float(max(2 * ab - aa - bb, 0.0))


def random_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sliced_w2(A, B, n_projections: int = 128, rng=None) -> float:
    """Mean over random unit directions of the squared 1-D W2 between projections."""
    rng = np.random.default_rng(0) if rng is None else rng
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if A.shape[1] != B.shape[1]:
        raise ContractViolation("sliced_w2: dimension mismatch")
    if len(A) != len(B):
        n = min(len(A), len(B))
        A = A[np.sort(rng.choice(len(A), n, replace=False))] if len(A) > n else A
        B = B[np.sort(rng.choice(len(B), n, replace=False))] if len(B) > n else B
    dirs = random_directions(n_projections, A.shape[1], rng)
    pa = np.sort(A @ dirs.T, axis=0)
    pb = np.sort(B @ dirs.T, axis=0)
    return float(np.mean((pa - pb) ** 2))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    reference: dict | None = None
    n_samples: int = 0
    seed: int = 0

    def metric(self, nfe: int, key: str = "energy_distance") -> float:
        for row in self.rows:
            if row["nfe"] == nfe:
                return row[key]
        raise KeyError(nfe)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in self.rows:
                w.writerow([row[c] if c in ("nfe", "n_samples", "seed") else repr(float(row[c])) for c in REPORT_COLUMNS])


def metrics(A, B, seed: int, n_projections: int = 128) -> dict:
    return {
        "energy_distance": energy_distance(A, B),
        "sliced_w2": sliced_w2(A, B, n_projections, np.random.default_rng([seed, 7])),
    }


def evaluate(
    checkpoint: Checkpoint | Network,
    dataset: str,
    nfe_list,
    n_samples: int,
    rng=0,
    out_dir=None,
    teacher: Network | None = None,
    ode_steps: int = 200,
    guidance: GuidanceSpec | None = None,
) -> EvalReport:
    """Generate at each NFE and compare against fresh reference data.

    With ``teacher`` given, the report also carries the metrics of the
    teacher's Heun ODE solution (``ode_steps`` steps) as ``reference``.
    """
    net = checkpoint.network() if isinstance(checkpoint, Checkpoint) else checkpoint
    seed = _base_seed(rng)
    data = make_dataset(dataset, n_samples, np.random.default_rng([seed, 1]))
    labels = data.labels if NUM_CLASSES.get(dataset, 0) > 0 and net.config.num_classes > 0 else None
    report = EvalReport(n_samples=n_samples, seed=seed)
    for nfe in nfe_list:
        samples = few_step_sample(net, int(nfe), n_samples, labels, seed + 2)
        row = {"nfe": int(nfe), **metrics(samples, data.points, seed), "n_samples": n_samples, "seed": seed}
        report.rows.append(row)
        if out_dir is not None:
            write_samples_csv(Path(out_dir) / f"samples_nfe{nfe}.csv", samples, labels, {"nfe": int(nfe), "seed": seed})
    if teacher is not None:
        ref = ode_solve_reference(teacher, ode_steps, "heun", n_samples, labels, seed + 2, guidance)
        report.reference = {"ode_steps": ode_steps, **metrics(ref, data.points, seed)}
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "report.csv")
    return report
