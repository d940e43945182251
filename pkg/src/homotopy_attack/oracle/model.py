"""Small differentiable classifiers with hand-written backprop, plus the MDL1 weight format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Affine",
    "Conv2D",
    "ReLU",
    "Flatten",
    "Model",
    "ModelFormatError",
    "forward",
    "build_mlp",
    "build_small_conv",
    "save_model",
    "load_model",
    "encode_model",
    "decode_model",
]

MODEL_MAGIC = b"MDL1"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Affine:
    """``y = W x + b`` on a flat input; ``W`` has shape ``(out, in)``."""

    weight: np.ndarray
    bias: np.ndarray
    kind = "affine"

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("affine layer needs weight (out, in) and bias (out,)")

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ValueError(f"affine expects input ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def params(self):
        return (self.weight, self.bias)

    def descriptor(self) -> str:
        return f"affine:{self.weight.shape[1]}>{self.weight.shape[0]}"

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, cache, dout):
        x = cache
        return dout @ self.weight, (dout.T @ x, dout.sum(axis=0))


@dataclass(frozen=True)
class Conv2D:
    """Valid, stride-1 convolution on ``(H, W, C)`` inputs.

    ``weight`` has shape ``(kh, kw, C, F)``; output is ``(H-kh+1, W-kw+1, F)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    kind = "conv"

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[3],):
            raise ValueError("conv layer needs weight (kh, kw, C, F) and bias (F,)")

    def out_shape(self, in_shape):
        kh, kw, c, f = self.weight.shape
        if len(in_shape) != 3 or in_shape[2] != c or in_shape[0] < kh or in_shape[1] < kw:
            raise ValueError(f"conv {self.weight.shape} incompatible with input {tuple(in_shape)}")
        return (in_shape[0] - kh + 1, in_shape[1] - kw + 1, f)

    def params(self):
        return (self.weight, self.bias)

    def descriptor(self) -> str:
        kh, kw, c, f = self.weight.shape
        return f"conv:{kh}x{kw}x{c}>{f}"

    def forward(self, x):
        kh, kw, c, f = self.weight.shape
        # (B, Ho, Wo, C, kh, kw) -> (B, Ho, Wo, kh, kw, C)
        patches = sliding_window_view(x, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
        b, ho, wo = patches.shape[:3]
        cols = patches.reshape(b * ho * wo, kh * kw * c)
        out = cols @ self.weight.reshape(kh * kw * c, f) + self.bias
        return out.reshape(b, ho, wo, f), (x.shape, cols)

    def backward(self, cache, dout):
        x_shape, cols = cache
        kh, kw, c, f = self.weight.shape
        b, ho, wo, _ = dout.shape
        d2 = dout.reshape(-1, f)
        dw = (cols.T @ d2).reshape(self.weight.shape)
        db = d2.sum(axis=0)
        dcols = (d2 @ self.weight.reshape(-1, f).T).reshape(b, ho, wo, kh, kw, c)
        dx = np.zeros(x_shape)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        return dx, (dw, db)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return ()

    def descriptor(self) -> str:
        return "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, dout):
        return np.where(cache, dout, 0.0), ()


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def params(self):
        return ()

    def descriptor(self) -> str:
        return "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout):
        return dout.reshape(cache), ()


@dataclass(frozen=True)
class Model:
    """An immutable layer stack mapping ``input_shape`` images to ``num_classes`` logits."""

    layers: tuple
    input_shape: tuple[int, ...]
    num_classes: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ValueError(f"model output must be a flat logit vector, got shape {shape}")
        object.__setattr__(self, "num_classes", int(shape[0]))

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def descriptor(self) -> str:
        dims = "x".join(str(d) for d in self.input_shape)
        return ";".join([f"input:{dims}"] + [layer.descriptor() for layer in self.layers])

    def forward_batch(self, xb: np.ndarray, keep_cache: bool = False):
        """Logits for a batch ``(B, *input_shape)``; optionally the per-layer caches for backprop."""
        h = np.asarray(xb, dtype=np.float64)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h)
            if keep_cache:
                caches.append(cache)
        return (h, caches) if keep_cache else h

    def backward_batch(self, caches, dlogits: np.ndarray, need_params: bool = True):
        """Backpropagate ``dlogits``; returns ``(dx, param_grads)`` with grads in declaration order."""
        grads = []
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, pgrads = layer.backward(cache, d)
            if need_params:
                grads.extend(reversed(pgrads))
        grads.reverse()
        return d, grads

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def with_params(self, new_params: Sequence[np.ndarray]) -> "Model":
        it = iter(new_params)
        layers = []
        for layer in self.layers:
            if isinstance(layer, (Affine, Conv2D)):
                layers.append(type(layer)(next(it), next(it)))
            else:
                layers.append(layer)
        return Model(tuple(layers), self.input_shape)

    def predict(self, x) -> int:
        return int(np.argmax(forward(self, x)))


def forward(model: Model, x) -> np.ndarray:
    """Logits for a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return model.forward_batch(x[None])[0]


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_mlp(input_shape=(12, 12, 3), hidden=64, num_classes=10, rng=None) -> Model:
    rng = np.random.default_rng(0) if rng is None else rng
    n = int(np.prod(input_shape))
    return Model(
        (
            Flatten(),
            Affine(_he_normal(rng, (hidden, n), n), np.zeros(hidden)),
            ReLU(),
            Affine(_he_normal(rng, (num_classes, hidden), hidden) / np.sqrt(2), np.zeros(num_classes)),
        ),
        input_shape,
    )


def build_small_conv(input_shape=(12, 12, 3), filters=8, kernel=3, num_classes=10, rng=None) -> Model:
    rng = np.random.default_rng(0) if rng is None else rng
    h, w, c = input_shape
    fan_in = kernel * kernel * c
    flat = (h - kernel + 1) * (w - kernel + 1) * filters
    return Model(
        (
            Conv2D(_he_normal(rng, (kernel, kernel, c, filters), fan_in), np.zeros(filters)),
            ReLU(),
            Flatten(),
            Affine(_he_normal(rng, (num_classes, flat), flat) / np.sqrt(2), np.zeros(num_classes)),
        ),
        input_shape,
    )


def _parse_descriptor(desc: str):
    """Yield ``(input_shape, [(kind, param_shapes)])`` from a descriptor string."""
    parts = desc.split(";")
    if not parts or not parts[0].startswith("input:"):
        raise ModelFormatError(f"descriptor must start with input shape: {desc!r}")
    try:
        input_shape = tuple(int(d) for d in parts[0][len("input:"):].split("x"))
        specs = []
        for part in parts[1:]:
            if part in ("relu", "flatten"):
                specs.append((part, ()))
            elif part.startswith("affine:"):
                n_in, n_out = (int(v) for v in part[len("affine:"):].split(">"))
                specs.append(("affine", ((n_out, n_in), (n_out,))))
            elif part.startswith("conv:"):
                kern, f = part[len("conv:"):].split(">")
                kh, kw, c = (int(v) for v in kern.split("x"))
                specs.append(("conv", ((kh, kw, c, int(f)), (int(f),))))
            else:
                raise ModelFormatError(f"unknown layer kind {part!r}")
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed descriptor {desc!r}") from exc
    return input_shape, specs


def encode_model(model: Model) -> bytes:
    desc = model.descriptor().encode("utf-8")
    out = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(desc)), desc]
    for p in model.params():
        out.append(np.ascontiguousarray(p).astype("<f8").tobytes())
    return b"".join(out)


def decode_model(blob: bytes) -> Model:
    if len(blob) < 12:
        raise ModelFormatError("truncated model file header")
    if blob[:4] != MODEL_MAGIC:
        raise ModelFormatError("not an MDL1 model file (bad magic)")
    version, dlen = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off = 12 + dlen
    if len(blob) < off:
        raise ModelFormatError("truncated model descriptor")
    try:
        desc = blob[12:off].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("model descriptor is not UTF-8") from exc
    input_shape, specs = _parse_descriptor(desc)
    layers = []
    for kind, shapes in specs:
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            if len(blob) < off + 8 * count:
                raise ModelFormatError("truncated weight payload")
            arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape))
            off += 8 * count
        layers.append({"relu": ReLU, "flatten": Flatten, "affine": Affine, "conv": Conv2D}[kind](*arrays))
    if off != len(blob):
        raise ModelFormatError(f"{len(blob) - off} trailing bytes after weight payload")
    try:
        return Model(tuple(layers), input_shape)
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent architecture: {exc}") from exc


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> Model:
    return decode_model(Path(path).read_bytes())
