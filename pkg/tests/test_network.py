import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facm_lab import tensor_core as tc
from facm_lab.flow_process import ConditioningScheme, ConditioningSignal, Task, encode_condition
from facm_lab.network import (
    MAGIC,
    NULL_LABEL,
    Checkpoint,
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
    NetworkConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    embedding_frequencies,
    forward,
    forward_jvp,
    init,
    load,
    load_checkpoint,
    save,
    save_checkpoint,
    time_embedding,
)
from facm_lab.tensor_core import ContractViolation, Tape, Tensor

EI, AT = ConditioningScheme.EXPANDED_INTERVAL, ConditioningScheme.AUXILIARY_TIME


def small(scheme=EI, classes=0, seed=0, **kw):
    cfg = NetworkConfig(hidden_width=16, depth=3, time_embed_dim=8, num_classes=classes, scheme=scheme, seed=seed, **kw)
    return init(cfg, np.random.default_rng(seed))


@pytest.mark.parametrize("kw", [dict(depth=0), dict(hidden_width=0), dict(time_embed_dim=7), dict(dropout=1.0)])
def test_config_validation(kw):
    with pytest.raises(ContractViolation):
        NetworkConfig(**kw)


def test_init_deterministic():
    a, b = small(seed=3), small(seed=3)
    assert a.param_arrays().keys() == b.param_arrays().keys()
    for k, v in a.param_arrays().items():
        assert v.tobytes() == b.param_arrays()[k].tobytes()


def test_no_class_table_without_classes():
    assert "class.table" not in small().params
    assert small(classes=8).params["class.table"].shape == (9, 16)


def test_aux_embedder_zero_init_output_independent():
    net = small(AT)
    x = np.random.default_rng(0).standard_normal((5, 2))
    t = np.full(5, 0.4)
    a = forward(net, x, ConditioningSignal(Task.CM, AT, t, np.stack([t, np.ones(5)], 1), np.zeros((5, 2)))).data
    b = forward(net, x, ConditioningSignal(Task.CM, AT, t, np.stack([t, np.full(5, 0.37)], 1), np.zeros((5, 2)))).data
    assert a.tobytes() == b.tobytes()


def test_forward_shape_and_determinism():
    net = small(classes=8)
    x = np.random.default_rng(1).standard_normal((16, 2))
    c = encode_condition(EI, Task.FM, np.full(16, 0.2))
    out = forward(net, x, c, np.arange(16) % 8)
    assert out.shape == (16, 2) and np.all(np.isfinite(out.data))
    assert forward(net, x, c, np.arange(16) % 8).data.tobytes() == out.data.tobytes()


def test_single_point_forward():
    net = small()
    assert forward(net, np.zeros(2), encode_condition(EI, Task.CM, 0.5)).shape == (2,)


def test_zero_weights_zero_output():
    net = small()
    net.set_params({k: np.zeros_like(v) for k, v in net.param_arrays().items()})
    out = forward(net, np.ones((3, 2)), encode_condition(EI, Task.CM, np.full(3, 0.5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_label_range_checked():
    net = small(classes=8)
    c = encode_condition(EI, Task.CM, np.full(2, 0.5))
    with pytest.raises(ContractViolation):
        forward(net, np.zeros((2, 2)), c, np.array([0, 8]))
    with pytest.raises(ContractViolation):
        forward(small(), np.zeros((2, 2)), c, np.array([0, 1]))


def test_null_label_differs_from_class():
    net = small(classes=8)
    c = encode_condition(EI, Task.CM, np.full(2, 0.5))
    a = forward(net, np.zeros((2, 2)), c, NULL_LABEL).data
    b = forward(net, np.zeros((2, 2)), c, 0).data
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(forward(net, np.zeros((2, 2)), c, None).data, a)


def test_scheme_mismatch_rejected():
    with pytest.raises(ContractViolation):
        forward(small(), np.zeros((1, 2)), encode_condition(AT, Task.CM, np.full(1, 0.5)))


def test_forward_jvp_rejects_fm():
    with pytest.raises(ContractViolation):
        forward_jvp(small(), np.zeros((1, 2)), encode_condition(EI, Task.FM, np.full(1, 0.5)), np.ones((1, 2)))


@pytest.mark.parametrize("scheme", [EI, AT])
def test_forward_jvp_primal_bit_identical(scheme):
    net = small(scheme, classes=8)
    rng = np.random.default_rng(2)
    x, v = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    c = encode_condition(scheme, Task.CM, rng.random(6))
    lab = rng.integers(0, 8, 6)
    d = forward_jvp(net, x, c, v, lab)
    assert d.primal.data.tobytes() == forward(net, x, c, lab).data.tobytes()


@pytest.mark.parametrize("scheme", [EI, AT])
def test_forward_jvp_matches_trajectory_fd(scheme):
    rng = np.random.default_rng(5)
    for seed in range(5):
        net = small(scheme, classes=8, seed=seed)
        net.set_params({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in net.param_arrays().items()})
        x, v = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        t = rng.uniform(0.1, 0.9, 4)
        lab = rng.integers(0, 8, 4)
        d = forward_jvp(net, x, encode_condition(scheme, Task.CM, t), v, lab)
        h = 1e-5
        fp = forward(net, x + h * v, encode_condition(scheme, Task.CM, t + h), lab).data
        fm = forward(net, x - h * v, encode_condition(scheme, Task.CM, t - h), lab).data
        fd = (fp - fm) / (2 * h)
        assert np.linalg.norm(d.tangent.data - fd) <= 1e-6 * np.linalg.norm(fd)


def test_forward_jvp_zero_tangents():
    net = small()
    x = np.ones((2, 2))
    c = encode_condition(EI, Task.CM, np.full(2, 0.3))
    c0 = ConditioningSignal(Task.CM, EI, c.raw_t, c.encoded, np.zeros_like(c.time_tangent))
    np.testing.assert_array_equal(forward_jvp(net, x, c0, np.zeros_like(x)).tangent.data, 0.0)


def test_forward_jvp_tangent_shape_check():
    with pytest.raises(ContractViolation):
        forward_jvp(small(), np.zeros((2, 2)), encode_condition(EI, Task.CM, np.full(2, 0.3)), np.zeros((3, 2)))


def test_frozen_teacher_never_in_gradients():
    student, teacher = small(seed=1), small(seed=2).copy(frozen=True)
    x = np.ones((3, 2))
    c = encode_condition(EI, Task.CM, np.full(3, 0.5))
    tape = Tape()
    with tape:
        loss = tc.sum(forward(student, x, c) * forward(teacher, x, c))
    touched = {id(inp) for rec in tape.records for inp in rec.inputs if inp.requires_grad}
    assert not touched & {id(p) for p in teacher.params.values()}
    assert touched & {id(p) for p in student.params.values()}


def test_embedding_covers_expanded_interval():
    w = embedding_frequencies(64)
    assert w.min() == pytest.approx(np.pi / 2)  # period 4 covers c in [0, 2]
    grid = np.round(np.arange(1, 100) / 100, 2)
    s1, c1 = time_embedding(Tensor(grid[:, None]), 64)
    s2, c2 = time_embedding(Tensor(2 - grid[:, None]), 64)
    gap = np.sqrt(np.sum((s1.data - s2.data) ** 2 + (c1.data - c2.data) ** 2, axis=1))
    assert gap.min() > 1e-3


def test_checkpoint_round_trip(tmp_path):
    net = small(AT, classes=8)
    p = tmp_path / "n.ckpt"
    save(net, p)
    assert p.read_bytes().startswith(MAGIC)
    back = load(p, AT)
    assert back.config == net.config
    for k, v in net.param_arrays().items():
        assert back.param_arrays()[k].tobytes() == v.tobytes()


def test_checkpoint_with_state_round_trip():
    net = small()
    arr = net.param_arrays()
    ck = Checkpoint(net.config, arr, ema={k: v * 2 for k, v in arr.items()}, opt_m=arr, opt_v=arr, opt_step=7, step=9, meta={"a": 1})
    back = checkpoint_from_bytes(checkpoint_bytes(ck))
    assert (back.step, back.opt_step, back.meta) == (9, 7, {"a": 1})
    assert all(back.ema[k].tobytes() == (v * 2).tobytes() for k, v in arr.items())
    assert back.config_hash() == ck.config_hash()


@given(st.integers(0, 10_000))
def test_truncated_checkpoint_rejected(cut):
    data = checkpoint_bytes(Checkpoint(small().config, small().param_arrays()))
    cut = cut % len(data)
    with pytest.raises(CorruptCheckpointError):
        checkpoint_from_bytes(data[:cut])


def test_corrupt_and_version_errors(tmp_path):
    data = checkpoint_bytes(Checkpoint(small().config, small().param_arrays()))
    with pytest.raises(CorruptCheckpointError):
        checkpoint_from_bytes(data + b"\0")
    with pytest.raises(CorruptCheckpointError):
        checkpoint_from_bytes(b"NOTACKPT" + data[8:])
    bumped = data[:8] + (99).to_bytes(4, "little") + data[12:]
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(bumped)
    p = tmp_path / "x.ckpt"
    save(small(), p)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(p, AT)


def test_atomic_save_leaves_no_temp_files(tmp_path):
    save_checkpoint(Checkpoint(small().config, small().param_arrays()), tmp_path / "a.ckpt")
    assert [f.name for f in tmp_path.iterdir()] == ["a.ckpt"]
