"""Velocity network F(x_t, c): an MLP with sinusoidal time embeddings.

Conditioning enters additively at the first hidden layer: the input
projection, the main time embedding of c[0], the auxiliary time embedding of
c[1] (two-time scheme only, zero-initialized output) and a class embedding
row. Class row ``num_classes`` is the null class used for unconditional
velocities.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .flow_process import ConditioningScheme, ConditioningSignal, Task
from .tensor_core import ContractViolation, DualTensor, Tensor

NULL_LABEL = -1


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 2
    hidden_width: int = 256
    depth: int = 4
    time_embed_dim: int = 128
    num_classes: int = 0
    scheme: ConditioningScheme = ConditioningScheme.EXPANDED_INTERVAL
    seed: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", ConditioningScheme(self.scheme))
        if self.depth < 1:
            raise ContractViolation("depth must be >= 1")
        if self.hidden_width < 1:
            raise ContractViolation("hidden_width must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ContractViolation("time_embed_dim must be a positive even number")
        if self.input_dim < 1 or self.num_classes < 0:
            raise ContractViolation("input_dim must be >= 1 and num_classes >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def embedding_frequencies(dim: int) -> np.ndarray:
    """Angular frequencies from pi/2 (period 4, covers c in [0, 2]) up to pi.

    The top frequency is kept low on purpose: the consistency loss differentiates
    the network along t, and fast time features inflate dF/dt.
    """
    half = dim // 2
    if half == 1:
        return np.array([math.pi / 2])
    return (math.pi / 2) * 2.0 ** (np.arange(half) / (half - 1))


def time_embedding(c: Tensor, dim: int) -> tuple[Tensor, Tensor]:
    """sin/cos features of a (B, 1) condition column, returned as two halves."""
    phase = c * embedding_frequencies(dim)[None, :]
    return tc.sin(phase), tc.cos(phase)


def _linear_init(rng, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


def _time_embedder_init(rng, prefix: str, E: int, H: int, zero_out: bool) -> dict[str, np.ndarray]:
    w1, b1 = _linear_init(rng, E, H)
    w2, b2 = _linear_init(rng, H, H)
    if zero_out:
        w2, b2 = np.zeros_like(w2), np.zeros_like(b2)
    half = E // 2
    return {
        f"{prefix}.w_sin": w1[:half],
        f"{prefix}.w_cos": w1[half:],
        f"{prefix}.b1": b1,
        f"{prefix}.w2": w2,
        f"{prefix}.b2": b2,
    }


class Network:
    """Parameters plus config. Frozen networks never enter a gradient map."""

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray], frozen: bool = False):
        self.config = config
        self.frozen = frozen
        self.params: dict[str, Tensor] = {}
        self.set_params(params)

    def set_params(self, arrays: dict[str, np.ndarray]) -> None:
        self.params = {
            k: Tensor(np.array(v, dtype=np.float64), requires_grad=not self.frozen, name=k)
            for k, v in arrays.items()
        }

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def copy(self, frozen: bool | None = None) -> "Network":
        return Network(self.config, self.param_arrays(), self.frozen if frozen is None else frozen)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __call__(self, x_t, cond: ConditioningSignal, label=None) -> Tensor:
        return forward(self, x_t, cond, label)


def init(config: NetworkConfig, rng: np.random.Generator | None = None) -> Network:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    H, E, D = config.hidden_width, config.time_embed_dim, config.input_dim
    params: dict[str, np.ndarray] = {}
    params["in.w"], params["in.b"] = _linear_init(rng, D, H)
    params.update(_time_embedder_init(rng, "temb", E, H, zero_out=False))
    if config.scheme is ConditioningScheme.AUXILIARY_TIME:
        params.update(_time_embedder_init(rng, "aux", E, H, zero_out=True))
    if config.num_classes > 0:
        params["class.table"] = rng.standard_normal((config.num_classes + 1, H)) * 0.1
    for i in range(config.depth - 1):
        params[f"h{i}.w"], params[f"h{i}.b"] = _linear_init(rng, H, H)
    params["out.w"], params["out.b"] = _linear_init(rng, H, D)
    return Network(config, params)


def _embed_time(p: dict[str, Tensor], prefix: str, c: Tensor, E: int) -> Tensor:
    s, co = time_embedding(c, E)
    h = s @ p[f"{prefix}.w_sin"] + co @ p[f"{prefix}.w_cos"] + p[f"{prefix}.b1"]
    return tc.silu(h) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _label_rows(net: Network, label, batch: int) -> np.ndarray | None:
    K = net.config.num_classes
    if K == 0:
        if label is not None and np.any(np.asarray(label) != NULL_LABEL):
            raise ContractViolation("unconditional network received a class label")
        return None
    if label is None:
        return np.full(batch, K, dtype=np.int64)
    lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (batch,))
    if np.any(lab >= K) or np.any(lab < NULL_LABEL):
        raise ContractViolation(f"label out of range for {K} classes")
    return np.where(lab == NULL_LABEL, K, lab)


def _apply(net: Network, x: Tensor, c: Tensor, label, dropout_rng=None) -> Tensor:
    cfg = net.config
    p = net.params
    B = x.shape[0]
    h = x @ p["in.w"] + p["in.b"]
    h = h + _embed_time(p, "temb", tc.reshape(_column(c, 0), shape=(B, 1)), cfg.time_embed_dim)
    if cfg.scheme is ConditioningScheme.AUXILIARY_TIME:
        h = h + _embed_time(p, "aux", tc.reshape(_column(c, 1), shape=(B, 1)), cfg.time_embed_dim)
    rows = _label_rows(net, label, B)
    if rows is not None:
        h = h + tc.take_rows(p["class.table"], rows)
    for i in range(cfg.depth - 1):
        h = tc.silu(h)
        if dropout_rng is not None and cfg.dropout > 0:
            keep = (dropout_rng.random(h.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            h = h * keep
        h = h @ p[f"h{i}.w"] + p[f"h{i}.b"]
    return tc.silu(h) @ p["out.w"] + p["out.b"]


def _column(c: Tensor, j: int) -> Tensor:
    sel = np.zeros((c.shape[1], 1))
    sel[j, 0] = 1.0
    return c @ sel


def _prepare(net: Network, x_t, cond: ConditioningSignal):
    x = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=np.float64)
    if x.shape[-1] != net.config.input_dim:
        raise ContractViolation(f"x_t trailing dim {x.shape[-1]} != input_dim {net.config.input_dim}")
    if cond.scheme is not net.config.scheme:
        raise ContractViolation(f"condition scheme {cond.scheme.value} != network scheme {net.config.scheme.value}")
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    B = x2.shape[0]
    enc = np.broadcast_to(cond.encoded, (B, cond.arity))
    tan = np.broadcast_to(cond.time_tangent, (B, cond.arity))
    return x2, enc, tan, single


def forward(net: Network, x_t, cond: ConditioningSignal, label=None, dropout_rng=None) -> Tensor:
    x2, enc, _, single = _prepare(net, x_t, cond)
    out = _apply(net, Tensor(x2), Tensor(enc), label, dropout_rng)
    return tc.reshape(out, shape=(net.config.input_dim,)) if single else out


def forward_jvp(net: Network, x_t, cond: ConditioningSignal, x_tangent, label=None) -> DualTensor:
    """Primal F(x_t, c) and its derivative along (x_tangent, cond.time_tangent)."""
    if cond.task is not Task.CM:
        raise ContractViolation("forward_jvp is only defined for the CM condition")
    x2, enc, tan, single = _prepare(net, x_t, cond)
    u = np.asarray(x_tangent.data if isinstance(x_tangent, Tensor) else x_tangent, dtype=np.float64)
    u2 = u[None, :] if single else u
    if u2.shape != x2.shape:
        raise ContractViolation(f"x_tangent shape {u.shape} != x_t shape {np.shape(x_t)}")
    out = _apply(net, Tensor(x2, tangent=u2), Tensor(enc, tangent=tan), label)
    if single:
        out = tc.reshape(out, shape=(net.config.input_dim,))
    tangent = out.tangent if out.tangent is not None else np.zeros_like(out.data)
    return DualTensor(out, Tensor(tangent))


# --------------------------------------------------------------------------
# Checkpoints

MAGIC = b"FACMCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    opt_step: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)
    trace: list = field(default_factory=list, repr=False, compare=False)

    def network(self, use_ema: bool = True, frozen: bool = False) -> Network:
        src = self.ema if (use_ema and self.ema is not None) else self.params
        return Network(self.network_config, src, frozen=frozen)

    def config_hash(self) -> str:
        blob = json.dumps(self.network_config.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _pack_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"unexpected end of file at byte {self.pos} (needed {n}, have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "network": ckpt.network_config.to_dict(),
        "step": ckpt.step,
        "opt_step": ckpt.opt_step,
        "config_hash": ckpt.config_hash(),
        "meta": ckpt.meta,
    }
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for prefix, group in (("ema", ckpt.ema), ("opt_m", ckpt.opt_m), ("opt_v", ckpt.opt_v)):
        if group is not None:
            tensors += [(f"{prefix}/{k}", v) for k, v in group.items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _pack_tensor(buf, name, np.asarray(arr))
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable config blob: {exc}") from exc
    groups: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        prefix, _, key = name.partition("/")
        groups.setdefault(prefix, {})[key] = arr
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return Checkpoint(
        network_config=NetworkConfig.from_dict(header["network"]),
        params=groups.get("param", {}),
        ema=groups.get("ema"),
        opt_m=groups.get("opt_m"),
        opt_v=groups.get("opt_v"),
        opt_step=int(header.get("opt_step", 0)),
        step=int(header.get("step", 0)),
        meta=header.get("meta", {}),
    )


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    _atomic_write(Path(path), checkpoint_bytes(ckpt))


def load_checkpoint(path, scheme: ConditioningScheme | str | None = None) -> Checkpoint:
    ckpt = checkpoint_from_bytes(Path(path).read_bytes())
    if scheme is not None and ckpt.network_config.scheme is not ConditioningScheme(scheme):
        raise ConfigMismatchError(
            f"checkpoint uses scheme {ckpt.network_config.scheme.value}, requested {ConditioningScheme(scheme).value}"
        )
    return ckpt


def save(net: Network, path) -> None:
    save_checkpoint(Checkpoint(net.config, net.param_arrays()), path)


def load(path, scheme: ConditioningScheme | str | None = None) -> Network:
    return load_checkpoint(path, scheme).network(use_ema=False)
