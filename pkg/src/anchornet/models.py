"""Small MLP and CNN classifiers with anchored variants and checkpoint I/O.

The anchored variant of a spec differs from the standard one only in the
first layer, which takes twice the data channels (reference and residual
stacked along the channel axis).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, ValidationError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ANCHCKPT"
CHECKPOINT_VERSION = 1

DEFAULT_CNN = ((16, 3, 1), (32, 3, 1))
DEFAULT_MLP = (128, 128)


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "small_cnn"
    input_channels: int = 3
    input_hw: tuple[int, int] = (16, 16)
    num_classes: int = 10
    hidden: tuple = field(default=DEFAULT_CNN)
    anchored: bool = False
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if self.kind == "small_cnn":
            hidden = tuple(tuple(int(v) for v in layer) for layer in self.hidden)
        else:
            hidden = tuple(int(v) for v in self.hidden)
        object.__setattr__(self, "hidden", hidden)

    @property
    def first_layer_channels(self) -> int:
        return 2 * self.input_channels if self.anchored else self.input_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["hidden"] = [list(h) if isinstance(h, tuple) else h for h in self.hidden]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Walk the architecture and return (name, shape) for every parameter in order."""
    if spec.num_classes < 1 or spec.input_channels < 1 or min(spec.input_hw) < 1:
        raise ValidationError("num_classes, input_channels and input_hw must be positive")
    shapes = []
    if spec.kind == "mlp":
        width = spec.first_layer_channels * spec.input_hw[0] * spec.input_hw[1]
        for i, h in enumerate(spec.hidden):
            if h < 1:
                raise ValidationError(f"zero-sized hidden layer at position {i}")
            shapes += [(f"fc{i}.weight", (width, h)), (f"fc{i}.bias", (h,))]
            width = h
        shapes += [("out.weight", (width, spec.num_classes)), ("out.bias", (spec.num_classes,))]
    elif spec.kind == "small_cnn":
        c = spec.first_layer_channels
        h, w = spec.input_hw
        for i, layer in enumerate(spec.hidden):
            if len(layer) != 3:
                raise ValidationError(f"cnn layer {i} must be (filters, kernel, stride)")
            filters, k, stride = layer
            if filters < 1 or k < 1 or stride < 1:
                raise ValidationError(f"zero-sized conv layer at position {i}")
            pad = k // 2
            h = (h + 2 * pad - k) // stride + 1
            w = (w + 2 * pad - k) // stride + 1
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise ValidationError(f"feature map {h}x{w} after conv {i} is not poolable by 2")
            h, w = h // 2, w // 2
            shapes += [(f"conv{i}.weight", (filters, c, k, k)), (f"conv{i}.bias", (filters,))]
            c = filters
        shapes += [("out.weight", (c * h * w, spec.num_classes)), ("out.bias", (spec.num_classes,))]
    else:
        raise ValidationError(f"unknown model kind {spec.kind!r}")
    return shapes


def parameter_count(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for _, s in _layer_shapes(spec)))


class Model:
    """Parameters plus a forward function determined by a :class:`ModelSpec`.

    ``forward_samples`` counts how many input rows have been pushed through
    ``forward``; inference timing and protocol tests read it.
    """

    def __init__(self, spec: ModelSpec, parameters: dict[str, Tensor]):
        self.spec = spec
        self.parameters = parameters
        self.forward_samples = 0

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None


def build(spec: ModelSpec) -> Model:
    """Fan-in uniform weights in (-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(spec.init_seed)
    params = {}
    for name, shape in _layer_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(spec, params)


def forward(model: Model, x) -> Tensor:
    spec = model.spec
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"expected NCHW input, got shape {x.shape}")
    expected = (spec.first_layer_channels,) + spec.input_hw
    if tuple(x.shape[1:]) != expected:
        raise DimensionError(f"model expects inputs of shape (N, {expected}), got {x.shape}")
    p = model.parameters
    n = x.shape[0]
    model.forward_samples += n
    if spec.kind == "mlp":
        h = T.reshape(x, (n, -1))
        for i in range(len(spec.hidden)):
            h = T.relu(T.add_bias(T.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"]))
    else:
        h = x
        for i, (_, k, stride) in enumerate(spec.hidden):
            h = T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=stride, padding=k // 2)
            h = T.avg_pool2d(T.relu(h), 2)
        h = T.reshape(h, (n, -1))
    return T.add_bias(T.matmul(h, p["out.weight"]), p["out.bias"])


def predict_logits(model: Model, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Tape-free forward in chunks; returns a plain array."""
    x = np.asarray(x, dtype=np.float64)
    out = [forward(model, x[i : i + batch_size]).data for i in range(0, x.shape[0], batch_size)]
    if not out:
        return np.zeros((0, model.spec.num_classes))
    return np.concatenate(out, axis=0)


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, canonical spec JSON, then each parameter as LE float64."""
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec_json)))
        fh.write(spec_json)
        for name, shape in _layer_shapes(model.spec):
            arr = model.parameters[name].data
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic: expected {CHECKPOINT_MAGIC!r}, found {blob[:8]!r}")
    try:
        version, spec_len = struct.unpack_from("<II", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version mismatch: expected {CHECKPOINT_VERSION}, found {version}")
        pos = 16
        spec = ModelSpec.from_dict(json.loads(blob[pos : pos + spec_len]))
        pos += spec_len
        state = {}
        for name, shape in _layer_shapes(spec):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            found = blob[pos : pos + nlen].decode()
            pos += nlen
            if found != name:
                raise FormatError(f"parameter order mismatch: expected {name}, found {found}")
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            if tuple(dims) != tuple(shape):
                raise FormatError(f"{name}: expected shape {shape}, found {dims}")
            count = int(np.prod(shape))
            state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated or malformed checkpoint: {exc}") from exc
    if pos != len(blob):
        raise FormatError(f"trailing bytes in checkpoint: expected {pos}, found {len(blob)}")
    model = build(spec)
    model.load_state_dict(state)
    return model


def with_weights(model: Model, state: dict[str, np.ndarray]) -> Model:
    """A fresh model sharing ``model``'s spec but using the given weights."""
    clone = Model(model.spec, {k: Tensor(v, requires_grad=True, name=k) for k, v in state.items()})
    return clone


def spec_for(data_channels: int, hw: Sequence[int], num_classes: int, *, kind="small_cnn",
             hidden=None, anchored=False, init_seed=0) -> ModelSpec:
    if hidden is None:
        hidden = DEFAULT_CNN if kind == "small_cnn" else DEFAULT_MLP
    return ModelSpec(kind=kind, input_channels=data_channels, input_hw=tuple(hw),
                     num_classes=num_classes, hidden=tuple(hidden), anchored=anchored,
                     init_seed=init_seed)
