"""MLP and small-CNN classifiers over the autodiff engine, plus checkpoint I/O."""
from __future__ import annotations

import os
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, FormatError, ValidationError

STREAM_INIT = 1


@dataclass(frozen=True)
class ModelArch:
    """Immutable architecture description.

    For ``kind="mlp"`` the input shape is ``(D,)`` and ``hidden`` lists the
    hidden widths.  ``kind="small_cnn"`` takes ``(c, h, w)`` images and uses
    the fixed conv(16)-pool-conv(32)-pool-dense stack.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        if self.kind == "mlp":
            if len(self.input_shape) != 1:
                raise ValidationError(f"mlp input shape must be (D,), got {self.input_shape}")
        elif self.kind == "small_cnn":
            if len(self.input_shape) != 3:
                raise ValidationError(f"small_cnn input shape must be (c, h, w), got {self.input_shape}")
            _, h, w = self.input_shape
            if h < 4 or w < 4:
                raise ValidationError(f"small_cnn needs images of at least 4x4, got {self.input_shape}")
        else:
            raise ValidationError(f"unknown architecture kind {self.kind!r}")

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) pairs of every parameter tensor."""
        if self.kind == "mlp":
            widths = [self.input_shape[0], *self.hidden, self.num_classes]
            shapes = []
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                shapes += [(f"fc{i}.weight", (fan_in, fan_out)), (f"fc{i}.bias", (fan_out,))]
            return shapes
        c, h, w = self.input_shape
        flat = 32 * (h // 2 // 2) * (w // 2 // 2)
        return [
            ("conv0.weight", (16, c, 3, 3)),
            ("conv0.bias", (16,)),
            ("conv1.weight", (32, 16, 3, 3)),
            ("conv1.bias", (32,)),
            ("fc.weight", (flat, self.num_classes)),
            ("fc.bias", (self.num_classes,)),
        ]


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


class ModelParams(Mapping[str, Tensor]):
    """Ordered, named parameter tensors (leaves of the autodiff tape)."""

    def __init__(self, tensors: Mapping[str, np.ndarray | Tensor]):
        self._tensors: dict[str, Tensor] = {}
        for name, value in tensors.items():
            data = value.data if isinstance(value, Tensor) else value
            self._tensors[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.arrays())

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self._tensors.items() if t.grad is not None}

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of names, order and values."""
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


def init_params(arch: ModelArch, seed: int) -> ModelParams:
    """He-normal weights, zero biases; identical seeds give identical parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), STREAM_INIT]))
    tensors = {}
    for name, shape in arch.layer_shapes():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.standard_normal(shape) * np.sqrt(2.0 / _fan_in(shape))
    return ModelParams(tensors)


def param_count(arch: ModelArch) -> int:
    return int(sum(np.prod(shape) for _, shape in arch.layer_shapes()))


def forward(params: ModelParams, arch: ModelArch, batch) -> Tensor:
    """Raw logits (b x C) for ``batch``."""
    x = ad.as_tensor(batch)
    if x.shape[1:] != arch.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input shape {arch.input_shape}")
    if arch.kind == "mlp":
        n_layers = len(arch.hidden) + 1
        for i in range(n_layers):
            x = ad.matmul(x, params[f"fc{i}.weight"]) + params[f"fc{i}.bias"]
            if i < n_layers - 1:
                x = ad.relu(x)
        return x
    x = ad.maxpool2d(ad.relu(ad.conv2d(x, params["conv0.weight"], pad=1, bias=params["conv0.bias"])))
    x = ad.maxpool2d(ad.relu(ad.conv2d(x, params["conv1.weight"], pad=1, bias=params["conv1.bias"])))
    x = ad.reshape(x, (x.shape[0], -1))
    return ad.matmul(x, params["fc.weight"]) + params["fc.bias"]


def predict_logits(params: ModelParams, arch: ModelArch, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Tape-free logits over a whole feature array, computed in chunks."""
    chunks = [forward(params, arch, features[i : i + batch_size]).data for i in range(0, len(features), batch_size)]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# checkpoints: text header "name d0 d1 ..." per line, blank line, then
# little-endian float64 payload in header order.


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    path = Path(path)
    header = "".join(f"{name} {' '.join(str(d) for d in t.shape)}".rstrip() + "\n" for name, t in params.items())
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header.encode("ascii") + b"\n" + payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    raw = Path(path).read_bytes()
    split = raw.find(b"\n\n")
    if split < 0:
        raise FormatError(f"{path}: missing blank line after checkpoint header")
    entries = []
    for line in raw[:split].decode("ascii").splitlines():
        name, *dims = line.split()
        entries.append((name, tuple(int(d) for d in dims)))
    payload = raw[split + 2 :]
    expected = 8 * sum(int(np.prod(s)) for _, s in entries)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f8")
    tensors, offset = {}, 0
    for name, shape in entries:
        n = int(np.prod(shape))
        tensors[name] = values[offset : offset + n].reshape(shape).astype(np.float64)
        offset += n
    return ModelParams(tensors)
