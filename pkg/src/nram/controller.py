"""The trainable controller (MLP or LSTM) and its checkpoint format."""
from __future__ import annotations

import functools
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .machine import ControllerOutputs

CHECKPOINT_MAGIC = b"NRAMCKPT"
CHECKPOINT_VERSION = 1


def output_size(R: int, Q: int) -> int:
    return sum(2 * (R + i) for i in range(Q)) + R * (R + Q) + 1


def head_slices(R: int, Q: int) -> dict[str, tuple[int, int]]:
    """Column ranges of each head inside the flat output vector.

    Order: a_1, b_1, a_2, b_2, ..., a_Q, b_Q, c_1, ..., c_R, finish.
    """
    slices = {}
    pos = 0
    for i in range(Q):
        for name in ("a", "b"):
            slices[f"{name}{i}"] = (pos, pos + R + i)
            pos += R + i
    for j in range(R):
        slices[f"c{j}"] = (pos, pos + R + Q)
        pos += R + Q
    slices["finish"] = (pos, pos + 1)
    return slices


def _shapes(variant: str, R: int, Q: int, H: int) -> dict[str, tuple[int, ...]]:
    out = output_size(R, Q)
    if variant == "mlp":
        return {"W1": (R, H), "b1": (H,), "W2": (H, H), "b2": (H,), "Wo": (H, out), "bo": (out,)}
    if variant == "lstm":
        return {"W1": (R, H), "b1": (H,), "Wx": (H, 4 * H), "Wh": (H, 4 * H), "bl": (4 * H,),
                "Wo": (H, out), "bo": (out,)}
    raise ValueError(f"unknown controller variant {variant!r}")


@dataclass
class ControllerParams:
    variant: str
    R: int
    Q: int
    rnn_size: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = _shapes(self.variant, self.R, self.Q, self.rnn_size)
        if self.weights:
            for name, shape in expected.items():
                if self.weights[name].shape != shape:
                    raise ValueError(f"{name}: shape {self.weights[name].shape}, expected {shape}")

    @property
    def recurrent(self) -> bool:
        return self.variant == "lstm"

    def names(self) -> list[str]:
        return list(_shapes(self.variant, self.R, self.Q, self.rnn_size))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[n].ravel() for n in self.names()])

    def with_flat(self, vector: np.ndarray) -> "ControllerParams":
        weights, pos = {}, 0
        for name, shape in _shapes(self.variant, self.R, self.Q, self.rnn_size).items():
            n = int(np.prod(shape))
            weights[name] = np.asarray(vector[pos:pos + n], dtype=np.float64).reshape(shape)
            pos += n
        return ControllerParams(self.variant, self.R, self.Q, self.rnn_size, weights)

    def copy(self) -> "ControllerParams":
        return self.with_flat(self.flat().copy())


def init_params(rng: np.random.Generator, init_h: float, variant: str, R: int, Q: int,
                rnn_size: int) -> ControllerParams:
    """Every weight and bias i.i.d. uniform on (-init_h, init_h)."""
    if init_h < 0:
        raise ValueError("init_h must be non-negative")
    weights = {name: rng.uniform(-init_h, init_h, size=shape)
               for name, shape in _shapes(variant, R, Q, rnn_size).items()}
    return ControllerParams(variant, R, Q, rnn_size, weights)


def split_heads(flat, R: int, Q: int) -> ControllerOutputs:
    sl = head_slices(R, Q)
    take = ad.slice_last if isinstance(flat, Tensor) else (lambda x, a, b: x[..., a:b])
    a = [take(flat, *sl[f"a{i}"]) for i in range(Q)]
    b = [take(flat, *sl[f"b{i}"]) for i in range(Q)]
    c = [take(flat, *sl[f"c{j}"]) for j in range(R)]
    lo, _ = sl["finish"]
    finish = flat[..., lo]
    return ControllerOutputs(a, b, c, finish)


@functools.lru_cache(maxsize=None)
def pack_index(R: int, Q: int) -> np.ndarray:
    """(2Q+R, R+Q) map from packed head rows to flat output columns; -1 pads."""
    sl = head_slices(R, Q)
    rows = [f"{n}{i}" for i in range(Q) for n in ("a", "b")] + [f"c{j}" for j in range(R)]
    index = np.full((len(rows), R + Q), -1, dtype=np.int64)
    for r, name in enumerate(rows):
        lo, hi = sl[name]
        index[r, :hi - lo] = np.arange(lo, hi)
    index.flags.writeable = False
    return index


def packed_heads(flat: Tensor, R: int, Q: int) -> ControllerOutputs:
    """Heads as plain arrays plus one differentiable packed logit tensor."""
    heads = split_heads(flat.value, R, Q)
    heads.finish_logit = flat[..., head_slices(R, Q)["finish"][0]]
    heads.packed = ad.gather_last(flat, pack_index(R, Q))
    return heads


def concat_heads(out: ControllerOutputs) -> np.ndarray:
    parts = []
    for ai, bi in zip(out.a, out.b):
        parts += [np.asarray(ai), np.asarray(bi)]
    parts += [np.asarray(c) for c in out.c]
    parts.append(np.asarray(out.finish_logit)[..., None])
    return np.concatenate(parts, axis=-1)


def _trunk(w: dict, hidden, x, variant: str):
    h = ad.relu(ad.add(ad.matmul(x, w["W1"]), w["b1"]))
    if variant == "mlp":
        h = ad.relu(ad.add(ad.matmul(h, w["W2"]), w["b2"]))
        return h, None
    h_prev, c_prev = hidden
    H = w["Wh"].shape[0] if isinstance(w["Wh"], np.ndarray) else w["Wh"].value.shape[0]
    z = ad.add(ad.add(ad.matmul(h, w["Wx"]), ad.matmul(h_prev, w["Wh"])), w["bl"])
    i = ad.sigmoid(ad.slice_last(z, 0, H))
    f = ad.sigmoid(ad.slice_last(z, H, 2 * H))
    o = ad.sigmoid(ad.slice_last(z, 2 * H, 3 * H))
    g = ad.tanh(ad.slice_last(z, 3 * H, 4 * H))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, (h, c)


def zero_hidden(params: ControllerParams, batch_shape: tuple = ()):
    if not params.recurrent:
        return None
    z = np.zeros(tuple(batch_shape) + (params.rnn_size,))
    return (z, z.copy())


def forward(params: ControllerParams, hidden, inputs) -> tuple[ControllerOutputs, object]:
    """Plain-numpy forward pass (no tape)."""
    x = np.asarray(inputs, dtype=float)
    if x.shape[-1] != params.R:
        raise ValueError(f"controller expects {params.R} inputs, got {x.shape[-1]}")
    if params.recurrent and hidden is None:
        hidden = zero_hidden(params, x.shape[:-1])
    h, new_hidden = _trunk(params.weights, hidden, x, params.variant)
    flat = ad.add(ad.matmul(h, params.weights["Wo"]), params.weights["bo"]).value
    out = split_heads(flat, params.R, params.Q)
    if new_hidden is not None:
        new_hidden = tuple(ad.as_tensor(v).value for v in new_hidden)
    return out, new_hidden


class NeuralController:
    """Adapter used by the machine; holds Tensor leaves while training."""

    def __init__(self, params: ControllerParams, dtype=np.float64):
        self.params = params
        self.recurrent = params.recurrent
        self.dtype = dtype
        self.tensors = {n: Tensor(params.weights[n].astype(dtype), requires_grad=True) for n in params.names()}

    def initial_hidden(self, batch_shape: tuple):
        if not self.recurrent:
            return None
        z = np.zeros(tuple(batch_shape) + (self.params.rnn_size,), dtype=self.dtype)
        return (ad.Tensor(z), ad.Tensor(z.copy()))

    def forward(self, inputs, hidden, t: int):
        if ad.as_tensor(inputs).value.shape[-1] != self.params.R:
            raise ValueError(f"controller expects {self.params.R} inputs")
        h, new_hidden = _trunk(self.tensors, hidden, inputs, self.params.variant)
        flat = ad.add(ad.matmul(h, self.tensors["Wo"]), self.tensors["bo"])
        return packed_heads(flat, self.params.R, self.params.Q), new_hidden

    def gradients(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value)).astype(np.float64)
                for n, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def save_checkpoint(params: ControllerParams, path, M: int | None = None, extra: dict | None = None) -> bytes:
    """Header (JSON, sorted keys) followed by little-endian float64 payload."""
    header = {
        "version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "R": params.R,
        "Q": params.Q,
        "M": M,
        "rnn_size": params.rnn_size,
        "shapes": {n: list(params.weights[n].shape) for n in params.names()},
        "order": params.names(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    buf.write(params.flat().astype("<f8").tobytes())
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def load_checkpoint(path_or_bytes) -> tuple[ControllerParams, dict]:
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", data[pos:pos + 4])
    header = json.loads(data[pos + 4:pos + 4 + n])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    payload = np.frombuffer(data[pos + 4 + n:], dtype="<f8")
    skeleton = ControllerParams(header["variant"], header["R"], header["Q"], header["rnn_size"])
    params = skeleton.with_flat(payload.astype(np.float64))
    return params, header
