"""Parameter sets, the Adam optimizer, MLP stacks, and checkpoint I/O.

Parameters live in named :class:`ParamSet` collections (one per network)
carrying their Adam moment buffers and a freeze flag; the alternating
trainer flips the freeze flags, never the optimizer wiring.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

CHECKPOINT_MAGIC = b"IVCK"
CHECKPOINT_VERSION = 1


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 5e-4
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0.0:
            raise ValueError(f"Adam lr must be positive, got {self.lr}")


class ParamSet:
    """Named parameter collection with Adam state and a freeze flag."""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.frozen = False
        self.skipped_steps = 0  # counts adam_step calls while frozen

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"{self.name}: duplicate parameter {name!r}")
        t = tape.parameter(data)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def freeze(self):
        self.frozen = True

    def unfreeze(self):
        self.frozen = False

    def state_bytes(self) -> bytes:
        """Raw parameter bytes, for bit-identity checks."""
        return b"".join(self.params[k].data.tobytes() for k in sorted(self.params))

    def clone_data(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_data(self, data: dict[str, np.ndarray]):
        for k, v in data.items():
            p = self.params[k]
            if p.data.shape != v.shape:
                raise ValueError(f"{self.name}.{k}: shape {v.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(v, dtype=np.float64)


def adam_step(ps: ParamSet, cfg: AdamConfig):
    """Bias-corrected Adam update; zeroes gradients afterward.

    Frozen sets are a counted no-op so the alternating trainer can call
    unconditionally.
    """
    if ps.frozen:
        ps.skipped_steps += 1
        return
    ps.step_count += 1
    t = ps.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in ps.params.items():
        g = p.grad
        if g is None:
            continue
        m = ps.adam_m[name]
        v = ps.adam_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data = p.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    ps.zero_grad()


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Affine + activation stack whose parameters live in a ParamSet.

    ``final_w_std`` switches the last layer to small-normal init (keeps
    residual branches near zero at start without starving gradient flow
    through the hidden layers).
    """

    def __init__(self, ps: ParamSet, prefix: str, dims, rng: np.random.Generator,
                 activation: str = "relu", final_activation: str | None = None,
                 final_w_std: float | None = None):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        self.activation = activation
        self.final_activation = final_activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        last = len(dims) - 2
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            if i == last and final_w_std is not None:
                w = rng.normal(0.0, final_w_std, size=(din, dout))
            else:
                w = kaiming_uniform(rng, din, dout)
            self.weights.append(ps.register(f"{prefix}.w{i}", w))
            self.biases.append(ps.register(f"{prefix}.b{i}", np.zeros(dout)))

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.weights, self.biases, x,
                           self.activation, self.final_activation)


_ACTIVATIONS = {
    "relu": tape.relu,
    "tanh": tape.tanh,
    "abs": tape.absolute,
}


def mlp_forward(weights, biases, x: Tensor, activation="relu", final_activation=None) -> Tensor:
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        x = tape.add(tape.matmul(x, w), b)
        act = final_activation if i == last else activation
        if act is not None and act != "linear":
            x = _ACTIVATIONS[act](x)
    return x


# --- checkpoint format -------------------------------------------------
#
# magic "IVCK", u32 version, u32 set count, then per ParamSet:
#   str name, u32 param count, per param:
#     str name, u32 ndim, u32*ndim dims, f64 data, f64 adam_m, f64 adam_v,
#     u64 step_count
# Strings are u32 length + UTF-8 bytes. Everything little-endian.


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _read_str(buf: memoryview, off: int):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    s = bytes(buf[off:off + n]).decode("utf-8")
    return s, off + n


def save_checkpoint(path, paramsets: list[ParamSet]):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(paramsets))]
    for ps in paramsets:
        chunks.append(_pack_str(ps.name))
        chunks.append(struct.pack("<I", len(ps.params)))
        for pname in sorted(ps.params):
            p = ps.params[pname]
            chunks.append(_pack_str(pname))
            chunks.append(struct.pack("<I", p.data.ndim))
            chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            chunks.append(p.data.astype("<f8").tobytes())
            chunks.append(ps.adam_m[pname].astype("<f8").tobytes())
            chunks.append(ps.adam_v[pname].astype("<f8").tobytes())
            chunks.append(struct.pack("<Q", ps.step_count))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, ParamSet]:
    with open(path, "rb") as f:
        buf = memoryview(f.read())
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {bytes(buf[:4])!r}")
    version, n_sets = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, ParamSet] = {}
    for _ in range(n_sets):
        name, off = _read_str(buf, off)
        (n_params,) = struct.unpack_from("<I", buf, off)
        off += 4
        ps = ParamSet(name)
        steps = []
        for _ in range(n_params):
            pname, off = _read_str(buf, off)
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * count
            data = np.frombuffer(buf, "<f8", count, off).reshape(shape).copy()
            off += nbytes
            m = np.frombuffer(buf, "<f8", count, off).reshape(shape).copy()
            off += nbytes
            v = np.frombuffer(buf, "<f8", count, off).reshape(shape).copy()
            off += nbytes
            (sc,) = struct.unpack_from("<Q", buf, off)
            off += 8
            steps.append(sc)
            ps.register(pname, data)
            ps.adam_m[pname] = m
            ps.adam_v[pname] = v
        if steps and len(set(steps)) != 1:
            raise ValueError(f"{path}: inconsistent step counts in set {name!r}")
        ps.step_count = steps[0] if steps else 0
        out[name] = ps
    return out
