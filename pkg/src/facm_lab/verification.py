"""Hermetic invariant checks shared by the ``verify`` command and the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .flow_process import (
    ConditioningScheme,
    Task,
    TimeSchedule,
    encode_condition,
    interpolate,
    make_dataset,
    sample_time,
)
from .network import Network, NetworkConfig, forward_jvp, init
from .objectives import GuidanceSpec, guided_velocity, target_equivalence_gap
from .sampler_eval import few_step_sample, noise_for_step
from .tensor_core import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name:<28} value={self.value:.3e}  threshold={self.threshold:.1e}  {self.detail}"


# --------------------------------------------------------------------------
# random MLPs written directly against the tensor primitives


def random_mlp(rng: np.random.Generator):
    d_in = int(rng.integers(1, 4))
    d_out = int(rng.integers(1, 4))
    H = int(rng.integers(3, 9))
    depth = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    p = {
        "w_in": rng.normal(0, 0.7, (d_in, H)),
        "w_sin": rng.normal(0, 0.7, (k, H)),
        "w_cos": rng.normal(0, 0.7, (k, H)),
        "b_in": rng.normal(0, 0.3, H),
        "freq": np.abs(rng.normal(1.0, 0.5, k)) + 0.1,
    }
    for i in range(depth - 1):
        p[f"w{i}"] = rng.normal(0, 1 / math.sqrt(H), (H, H))
        p[f"b{i}"] = rng.normal(0, 0.3, H)
    p["w_out"] = rng.normal(0, 1 / math.sqrt(H), (H, d_out))
    p["b_out"] = rng.normal(0, 0.3, d_out)
    return p, depth, d_in, d_out


def mlp_apply(params: dict, depth: int, x, t):
    """x: (B, d_in), t: (B, 1). Uses matmul, add, mul, sin, cos, silu, exp, div."""
    phase = t * params["freq"].data[None, :] if isinstance(params["freq"], Tensor) else t * params["freq"][None, :]
    h = x @ params["w_in"] + tc.sin(phase) @ params["w_sin"] + tc.cos(phase) @ params["w_cos"] + params["b_in"]
    for i in range(depth - 1):
        h = tc.silu(h) @ params[f"w{i}"] + params[f"b{i}"]
    h = tc.silu(h)
    out = h @ params["w_out"] + params["b_out"]
    return out + tc.exp(out * 0.1) / (1.0 + t * t)


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def autodiff_oracles(n_nets: int = 50, seed: int = 0, h: float = 1e-5):
    """Reverse grads and JVP tangents against central differences, plus the
    dot-product identity r . (J u) == (J^T r) . u. Returns worst errors."""
    rng = np.random.default_rng(seed)
    worst = {"grad": 0.0, "jvp": 0.0, "dot": 0.0}
    for _ in range(n_nets):
        p, depth, d_in, d_out = random_mlp(rng)
        B = int(rng.integers(1, 4))
        x = rng.standard_normal((B, d_in))
        t = rng.random((B, 1))
        r = rng.standard_normal((B, d_out))

        def scalar(arrs, xx=x, tt=t):
            with tc.stop_gradient():
                return float(np.sum(mlp_apply(arrs, depth, Tensor(xx), Tensor(tt)).data * r))

        ptens = {k: Tensor(v, requires_grad=True) for k, v in p.items() if k != "freq"}
        ptens["freq"] = p["freq"]
        xt = Tensor(x, requires_grad=True)
        with tc.Tape():
            loss = tc.sum(mlp_apply(ptens, depth, xt, Tensor(t)) * r)
            keys = [k for k in ptens if k != "freq"]
            grads = tc.gradient(loss, [ptens[k] for k in keys] + [xt])
        for j, k in enumerate(keys):
            fd = np.zeros_like(p[k])
            for idx in np.ndindex(p[k].shape):
                plus = {**p, k: p[k].copy()}
                minus = {**p, k: p[k].copy()}
                plus[k][idx] += h
                minus[k][idx] -= h
                fd[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
            worst["grad"] = max(worst["grad"], _rel(grads[j].data, fd))
        g_x = grads[len(keys)].data

        u = rng.standard_normal(x.shape)
        ut = rng.standard_normal(t.shape)
        dual = tc.jvp(lambda a, b: mlp_apply(p, depth, a, b), [x, t], [u, ut])
        with tc.stop_gradient():
            fp = mlp_apply(p, depth, Tensor(x + h * u), Tensor(t + h * ut)).data
            fm = mlp_apply(p, depth, Tensor(x - h * u), Tensor(t - h * ut)).data
        worst["jvp"] = max(worst["jvp"], _rel(dual.tangent.data, (fp - fm) / (2 * h)))

        # time tangent zero so that J u only involves x, matching g_x
        dual_x = tc.jvp(lambda a: mlp_apply(p, depth, a, Tensor(t)), [x], [u])
        fwd = float(np.sum(r * dual_x.tangent.data))
        rev = float(np.sum(g_x * u))
        worst["dot"] = max(worst["dot"], abs(fwd - rev) / max(abs(fwd), 1.0))
    return worst


def check_autodiff(n_nets: int = 50, seed: int = 0) -> list[CheckResult]:
    w = autodiff_oracles(n_nets, seed)
    return [
        CheckResult("reverse-mode vs FD", w["grad"] <= 1e-6, w["grad"], 1e-6, f"{n_nets} random MLPs"),
        CheckResult("forward-mode vs FD", w["jvp"] <= 1e-6, w["jvp"], 1e-6, f"{n_nets} random MLPs"),
        CheckResult("reverse/forward dot", w["dot"] <= 1e-10, w["dot"], 1e-10, f"{n_nets} random MLPs"),
    ]


def average_velocity_identity(n: int = 100, seed: int = 0) -> float:
    """max |vbar - (v + (1-t) d vbar/dt)| with d/dt taken by dual numbers along (v, 1)."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n, 2))
    x1 = rng.standard_normal((n, 2))
    t = rng.uniform(0.0, 0.99, size=(n, 1))
    s = interpolate(x0, x1, t[:, 0])
    dual = tc.jvp(lambda xt, tt: (x1 - xt) / (1.0 - tt), [s.x_t, t], [s.v, np.ones_like(t)])
    vbar = dual.primal.data
    return float(np.max(np.abs(vbar - (s.v + (1.0 - t) * dual.tangent.data))))


def equivalence_max_gap(n_nets: int = 20, seed: int = 0, t_grid=None) -> float:
    t_grid = np.linspace(0.05, 0.85, 9) if t_grid is None else t_grid
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nets):
        cfg = NetworkConfig(
            hidden_width=int(rng.integers(8, 33)),
            depth=int(rng.integers(1, 4)),
            time_embed_dim=2 * int(rng.integers(2, 9)),
            scheme=ConditioningScheme.AUXILIARY_TIME,
        )
        net = init(cfg, rng)
        # perturb so the auxiliary embedder is not trivially zero
        net.set_params({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in net.param_arrays().items()})
        x_t = rng.standard_normal((16, 2))
        v = rng.standard_normal((16, 2))
        worst = max(worst, target_equivalence_gap(net, t_grid, x_t, v))
    return worst


def time_schedule_median(n: int = 1_000_000, seed: int = 0, schedule: TimeSchedule = TimeSchedule()):
    emp = float(np.median(sample_time(np.random.default_rng(seed), schedule, size=n)))
    analytic = 1.0 - (2.0 / math.pi) * math.atan(math.exp(schedule.p_mean))
    return emp, analytic


class LinearFlowOracle:
    """Average-velocity oracle for a flow whose endpoint is a fixed x1: F = (x1 - x)/(1 - t)."""

    num_classes = 0

    def __init__(self, x1, scheme=ConditioningScheme.EXPANDED_INTERVAL):
        self.x1 = np.asarray(x1, dtype=float)
        self.input_dim = self.x1.shape[-1]
        self.scheme = ConditioningScheme(scheme)

    def __call__(self, x, cond, labels=None):
        return (self.x1 - x) / (1.0 - cond.raw_t[:, None])


def sampler_contract(seed: int = 0, n: int = 64) -> float:
    """Largest deviation of the 1- and 2-step samplers from their closed forms."""
    x1 = np.random.default_rng([seed, 99]).standard_normal((n, 2))
    oracle = LinearFlowOracle(x1)
    err = 0.0
    out1, tr1 = few_step_sample(oracle, 1, n, None, seed, return_trace=True)
    z0 = noise_for_step(seed, 0, n, 2)
    F0 = oracle(z0, encode_condition(oracle.scheme, Task.CM, np.zeros(n)))
    err = max(err, np.max(np.abs(out1 - (z0 + F0))), np.max(np.abs(out1 - x1)))
    out2, tr2 = few_step_sample(oracle, 2, n, None, seed, return_trace=True)
    if [s["t"] for s in tr2] != [0.0, 0.5]:
        return math.inf
    z1 = noise_for_step(seed, 1, n, 2)
    x_mid = 0.5 * tr2[0]["x1_hat"] + 0.5 * z1
    err = max(err, np.max(np.abs(tr2[1]["x_in"] - x_mid)), np.max(np.abs(out2 - x1)))
    return float(err)


def boundary_ratio(net: Network, teacher: Network | None = None, guidance: GuidanceSpec | None = None,
                   dataset: str = "eight_gaussians", n: int = 2048, seed: int = 0, t_pair=(0.99, 0.999)) -> float:
    """Ratio of mean (1-t)||dF/dt|| at t_pair[1] to that at t_pair[0].

    dF/dt is the total derivative along the trajectory, taken with the same
    velocity the training target uses (guided teacher velocity when a teacher
    is given, the interpolant velocity otherwise)."""
    data = make_dataset(dataset, n, np.random.default_rng([seed, 1]))
    x0 = np.random.default_rng([seed, 2]).standard_normal((n, net.config.input_dim))
    labels = data.labels if net.config.num_classes > 0 else None
    guidance = guidance or GuidanceSpec()
    vals = []
    for t in t_pair:
        batch = interpolate(x0, data.points, np.full(n, t), labels)
        v = guided_velocity(net, teacher, batch, net.config.scheme, guidance) if teacher is not None else batch.v
        with tc.stop_gradient():
            dual = forward_jvp(net, batch.x_t, encode_condition(net.config.scheme, Task.CM, batch.t), v, labels)
        vals.append((1.0 - t) * float(np.mean(np.linalg.norm(dual.tangent.data, axis=-1))))
    return vals[1] / vals[0]


def quick_trained_pair(seed: int = 0):
    """Small teacher + FACM student trained in-process; used for the boundary check."""
    from .trainer import TrainConfig, distill, pretrain_teacher

    base = dict(hidden_width=64, depth=3, time_embed_dim=32, batch_size=256, seed=seed)
    teacher = pretrain_teacher(TrainConfig(paradigm="pretrain_teacher", steps=1500, lr=1e-3, **base))
    student = distill(teacher, TrainConfig(paradigm="distill", steps=500, lr=1e-4, **base))
    return teacher.network(), student.network()


def run_all(seed: int = 0, include_training: bool = True) -> list[CheckResult]:
    results = check_autodiff(50, seed)
    err = average_velocity_identity(100, seed)
    results.append(CheckResult("average-velocity identity", err <= 1e-9, err, 1e-9))
    gap = equivalence_max_gap(20, seed)
    results.append(CheckResult("MF(r=1) == sCM target", gap <= 1e-12, gap, 1e-12, "20 nets x 9 times"))
    emp, ana = time_schedule_median(seed=seed)
    results.append(CheckResult("time schedule median", abs(emp - ana) <= 2e-3, abs(emp - ana), 2e-3, f"emp={emp:.5f} analytic={ana:.5f}"))
    err = sampler_contract(seed)
    results.append(CheckResult("sampler closed forms", err <= 1e-12, err, 1e-12, "N=1 and N=2"))
    if include_training:
        teacher, student = quick_trained_pair(seed)
        ratio = boundary_ratio(student, teacher, seed=seed)
        results.append(CheckResult("boundary continuity", ratio <= 0.11, ratio, 0.11, "(1-t)|dF/dt| at .999 over .99"))
    return results
