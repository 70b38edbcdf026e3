import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL
from facm_lab.flow_process import Task, encode_condition, make_dataset
from facm_lab.network import init
from facm_lab.sampler_eval import evaluate
from facm_lab.tensor_core import ContractViolation
from facm_lab.trainer import (
    TRACE_COLUMNS,
    EmaState,
    IncompatibleTeacherError,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    distill,
    ema_decay,
    ema_update,
    fm_validation_loss,
    pretrain_teacher,
    stream,
    train_scratch,
    write_trace,
)

TINY = dict(hidden_width=16, depth=2, time_embed_dim=8, batch_size=32)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.adam_betas, cfg.ema_rel_length, cfg.w, cfg.t_low) == (1e-4, (0.9, 0.999), 0.2, 1.75, 0.125)
    assert (cfg.p_mean, cfg.p_std, cfg.alpha_kind, cfg.alpha_p, cfg.beta_kind) == (-0.8, 1.6, "one_minus_t_pow", 0.5, "cos_half_pi")
    assert TrainConfig(paradigm="pretrain_teacher").steps == 20_000 and cfg.steps == 10_000
    for bad in (dict(lr=0.0), dict(batch_size=0), dict(adam_betas=(0.9, 1.0)), dict(paradigm="x"), dict(scheme="y")):
        with pytest.raises((ContractViolation, ValueError)):
            TrainConfig(**bad)


def test_adamw_first_step_oracle():
    st_ = OptimizerState.zeros_like({"p": np.array(1.0)})
    out, st_ = adamw_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, st_, 0.1, (0.9, 0.999), 0.0, 1e-8)
    assert float(out["p"]) == pytest.approx(1 - 0.1 * (1 / (1 + 1e-8)), abs=1e-15)
    assert st_.step == 1


def test_adamw_decoupled_decay_and_zero_grad():
    p = {"w": np.array([2.0, -4.0])}
    out, _ = adamw_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), 0.1, wd=0.5)
    np.testing.assert_allclose(out["w"], p["w"] * (1 - 0.1 * 0.5), rtol=1e-15)
    out, _ = adamw_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), 0.1)
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adamw_skips_nonfinite_and_checks_shapes():
    p = {"w": np.array([1.0, 2.0])}
    st_ = OptimizerState.zeros_like(p)
    out, st_ = adamw_step(p, {"w": np.array([np.nan, 1.0])}, st_, 0.1)
    assert out is p and st_.skipped == 1 and st_.step == 0
    np.testing.assert_array_equal(st_.m["w"], 0.0)
    with pytest.raises(ContractViolation):
        adamw_step(p, {"w": np.zeros(3)}, st_, 0.1)


def test_ema_examples():
    on = {"a": np.array([1.0])}
    assert ema_update(EmaState({"a": np.array([0.0])}, 1.0), on).shadow["a"][0] == 0.0
    assert ema_update(EmaState({"a": np.array([0.0])}, 0.0), on).shadow["a"][0] == 1.0
    e = EmaState({"a": np.array([0.0])}, 0.5)
    assert ema_update(ema_update(e, on), on).shadow["a"][0] == 0.75


@given(st.floats(0.01, 0.99), st.integers(1, 50))
def test_ema_geometric_convergence(d, n):
    e = EmaState({"a": np.array([0.0])}, d)
    for _ in range(n):
        e = ema_update(e, {"a": np.array([1.0])})
    assert e.shadow["a"][0] == pytest.approx(1 - d**n, rel=1e-12)


def test_ema_decay_half_life():
    d = ema_decay(0.2, 1000)
    assert d**100 == pytest.approx(0.5, rel=1e-12)


def test_streams_are_independent_and_reproducible():
    assert stream(3, 0).random() == stream(3, 0).random()
    assert stream(3, 0).random() != stream(3, 1).random()


def test_pretrain_mixed_ratio_zero_runs():
    ck = pretrain_teacher(TrainConfig(paradigm="pretrain_teacher", steps=5, mixed_condition_ratio=0.0, **TINY))
    assert len(ck.trace) == 5 and all(math.isfinite(r["total"]) for r in ck.trace)
    with pytest.raises(ContractViolation):
        pretrain_teacher(TrainConfig(paradigm="distill", steps=1, **TINY))


def test_pretrain_lowers_validation_loss(small_teacher):
    cfg, ck = small_teacher
    untrained = init(cfg.network_config(), stream(cfg.seed, 2))
    assert fm_validation_loss(ck.network(), cfg) < fm_validation_loss(untrained, cfg)


def test_teacher_learns_both_encodings(small_teacher):
    cfg, ck = small_teacher
    net = ck.network()
    d = make_dataset("eight_gaussians", 2000, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    t = rng.uniform(0.05, 0.95, 2000)
    x = (1 - t[:, None]) * rng.standard_normal((2000, 2)) + t[:, None] * d.points
    a = net(x, encode_condition(net.config.scheme, Task.FM, t), d.labels).data
    b = net(x, encode_condition(net.config.scheme, Task.CM, t), d.labels).data
    rel = np.linalg.norm(a - b, axis=1) / np.linalg.norm(a, axis=1)
    assert np.median(rel) <= 0.05


def test_distill_rejects_incompatible_teacher(small_teacher):
    _, ck = small_teacher
    with pytest.raises(IncompatibleTeacherError):
        distill(ck, TrainConfig(steps=1, scheme="auxiliary_time", **SMALL))
    with pytest.raises(IncompatibleTeacherError):
        distill(ck, TrainConfig(steps=1, dataset="two_moons", **SMALL))


def test_distill_starts_from_teacher_and_trace_is_finite(small_teacher):
    _, ck = small_teacher
    out = distill(ck, TrainConfig(steps=20, **SMALL))
    assert len(out.trace) == 20 and all(math.isfinite(r["total"]) for r in out.trace)
    assert out.trace[0]["total"] == out.trace[0]["fm_loss"] + out.trace[0]["cm_loss"]
    assert out.meta["paradigm"] == "distill" and out.step == 20


def test_reproducible_trace(tmp_path, small_teacher):
    _, ck = small_teacher
    cfg = TrainConfig(steps=15, seed=4, **SMALL)
    distill(ck, cfg, tmp_path / "a.csv")
    distill(ck, cfg, tmp_path / "b.csv")
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b and a.decode().splitlines()[0] == ",".join(TRACE_COLUMNS)


def test_nonfinite_steps_never_touch_parameters(small_teacher):
    _, ck = small_teacher
    poisoned = type(ck)(ck.network_config, ck.params, {k: np.full_like(v, np.nan) for k, v in ck.ema.items()})
    cfg = TrainConfig(steps=10, nonfinite_abort=3, **SMALL)
    with pytest.raises(TrainingDiverged) as info:
        distill(poisoned, cfg)
    assert len(info.value.trace) == 4 and info.value.diag["skipped"] == 4


def test_scratch_runs_finite_for_three_seeds():
    for seed in range(3):
        ck = train_scratch(TrainConfig(paradigm="scratch", steps=40, seed=seed, **TINY))
        assert all(math.isfinite(r["total"]) for r in ck.trace)


def test_scratch_worse_than_distill_at_equal_steps(small_teacher):
    _, teacher = small_teacher
    steps = 300
    scratch = train_scratch(TrainConfig(paradigm="scratch", steps=steps, **SMALL))
    student = distill(teacher, TrainConfig(steps=steps, **SMALL))
    e_s = evaluate(scratch, "eight_gaussians", [1], 1000, 0).metric(1)
    e_d = evaluate(student, "eight_gaussians", [1], 1000, 0).metric(1)
    assert e_d < e_s


def test_write_trace_round_trips_floats(tmp_path):
    rows = [{"step": 0, "fm_loss": 0.1, "cm_loss": 1 / 3, "total": 0.1 + 1 / 3, "grad_norm": math.pi, "clamp_fraction": 0.0}]
    write_trace(tmp_path / "t.csv", rows)
    vals = (tmp_path / "t.csv").read_text().splitlines()[1].split(",")
    assert float(vals[2]) == 1 / 3 and float(vals[4]) == math.pi
