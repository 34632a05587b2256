"""The three-convolution classifier, its summary table, inference and model files.

Default stack on a 64x64x1 input::

    Conv2D(64, relu) -> MaxPool2 -> Conv2D(128, relu) -> MaxPool2
    -> Conv2D(128, relu) -> Flatten -> Dense(128, relu) -> Dense(3, softmax)

With 1x1 kernels this has 4,219,779 trainable parameters.

Model file layout (little-endian)::

    b"BINSIGHT" | version u32 | config (10 x u32) |
    per tensor: rank u32, dims u32 x rank, float32 payload | CRC-32 u32

The CRC covers every byte before it.  Tensor order and shapes follow from the
config, so a file is self-describing.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import nn
from .errors import (
    BadMagic,
    ChecksumMismatch,
    ConfigError,
    CorruptFile,
    ShapeError,
    TruncatedFile,
    UnsupportedVersion,
)

MAGIC = b"BINSIGHT"
FORMAT_VERSION = 1
DEFAULT_CLASSES = ("mirai", "gafgyt", "goodware")

_CONFIG_FIELDS = 10
_U32_MAX = 2**32 - 1


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 64
    input_width: int = 64
    channels: int = 1
    num_classes: int = 3
    kernel_size: int = 1
    conv_channels: tuple = (64, 128, 128)
    dense_width: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_channels) != 3:
            raise ConfigError("conv_channels must list exactly three widths")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 (gray) or 3 (entropy)")
        if self.input_height % 4 or self.input_width % 4 or min(self.input_height, self.input_width) < 4:
            raise ConfigError("input sides must be positive multiples of 4 (two 2x2 pools)")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        values = self._as_u32()
        if min(values) < 0 or max(values) > _U32_MAX:
            raise ConfigError("config values must fit in an unsigned 32-bit field")

    @property
    def input_shape(self) -> tuple:
        return (self.input_height, self.input_width, self.channels)

    def _as_u32(self) -> list:
        return [self.input_height, self.input_width, self.channels, self.num_classes,
                self.kernel_size, *self.conv_channels, self.dense_width, self.seed]


def class_names_for(num_classes: int) -> tuple:
    if num_classes == len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES
    return tuple(f"class_{i}" for i in range(num_classes))


def build_layers(config: ModelConfig) -> list:
    k = config.kernel_size
    c1, c2, c3 = config.conv_channels
    flat = (config.input_height // 4) * (config.input_width // 4) * c3
    return [
        nn.Conv2D(config.channels, c1, k, "relu"),
        nn.MaxPool2(),
        nn.Conv2D(c1, c2, k, "relu"),
        nn.MaxPool2(),
        nn.Conv2D(c2, c3, k, "relu"),
        nn.Flatten(),
        nn.Dense(flat, config.dense_width, "relu"),
        nn.Dense(config.dense_width, config.num_classes, "softmax"),
    ]


@dataclass
class Model:
    config: ModelConfig
    layers: list
    params: list  # one list of arrays per layer
    class_names: tuple = DEFAULT_CLASSES
    optimizer: Optional[nn.AdamState] = None
    epoch: int = 0

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def parameters(self) -> list:
        return [p for layer_params in self.params for p in layer_params]

    def layer_param_counts(self) -> list:
        return [nn.param_count(layer) for layer in self.layers]

    def total_params(self) -> int:
        return sum(self.layer_param_counts())

    def output_shapes(self) -> list:
        shapes, shape = [], self.config.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def astype(self, dtype) -> "Model":
        """Copy with parameters cast to ``dtype`` (no optimizer state)."""
        params = [[p.astype(dtype) for p in lp] for lp in self.params]
        return Model(self.config, self.layers, params, self.class_names)

    # forward / backward on batches ``[N, H, W, C]`` already scaled to [0, 1]

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        caches = []
        for layer, lp in zip(self.layers, self.params):
            x, cache = layer.forward(lp, x)
            if keep_cache:
                caches.append(cache)
        return (x, caches) if keep_cache else x

    def backward(self, caches: list, grad_logits: np.ndarray) -> list:
        grads = [None] * len(self.layers)
        g = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(self.params[i], caches[i], g)
        return grads

    def loss_and_grads(self, x: np.ndarray, labels) -> tuple[float, np.ndarray, list]:
        """Mean cross-entropy, batch probabilities and per-layer gradients."""
        probs, caches = self.forward(x, keep_cache=True)
        loss, grad_logits = nn.sparse_cce(probs, labels)
        return loss, probs, self.backward(caches, grad_logits.astype(probs.dtype, copy=False))


def build_model(config: Optional[ModelConfig] = None, dtype=np.float32, class_names: Optional[Sequence[str]] = None) -> Model:
    config = config or ModelConfig()
    layers = build_layers(config)
    shape = config.input_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    rng = np.random.default_rng(config.seed)
    params = [layer.init_params(rng, dtype) for layer in layers]
    names = tuple(class_names) if class_names else class_names_for(config.num_classes)
    if len(names) != config.num_classes:
        raise ConfigError(f"{len(names)} class names for {config.num_classes} classes")
    return Model(config, layers, params, names)


# --------------------------------------------------------------------------
# summary
# --------------------------------------------------------------------------

_DISPLAY_TYPE = {"Conv2D": "Conv2D", "MaxPool2": "MaxPooling2D", "Flatten": "Flatten", "Dense": "Dense"}
_BASE_NAME = {"Conv2D": "conv2d", "MaxPool2": "max_pooling2d", "Flatten": "flatten", "Dense": "dense"}


def layer_names(model: Model) -> list:
    seen: dict = {}
    names = []
    for layer in model.layers:
        base = _BASE_NAME[layer.kind]
        n = seen.get(base, 0)
        seen[base] = n + 1
        names.append(base if n == 0 else f"{base}_{n}")
    return names


def model_summary(model: Model) -> str:
    rows = []
    for name, layer, shape, count in zip(layer_names(model), model.layers,
                                         model.output_shapes(), model.layer_param_counts()):
        rows.append((f"{name} ({_DISPLAY_TYPE[layer.kind]})", "(None, " + ", ".join(map(str, shape)) + ")", count))
    total = model.total_params()
    lines = [
        'Model: "sequential"',
        "_" * 65,
        f"{'Layer (type)':<32}{'Output Shape':<24}Param #",
        "=" * 65,
    ]
    for i, (label, shape, count) in enumerate(rows):
        lines.append(f"{label:<32}{shape:<24}{count}")
        lines.append("=" * 65 if i == len(rows) - 1 else "_" * 65)
    lines += [
        f"Total params: {total:,}",
        f"Trainable params: {total:,}",
        "Non-trainable params: 0",
    ]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def prepare_input(model: Model, images: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(images)
    h, w, c = model.config.input_shape
    if not batched:
        x = x[None]
    if x.ndim == 3 and c == 1:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:] != (h, w, c):
        got = x.shape[1:] if x.ndim == 4 else x.shape
        raise ShapeError(f"model expects images of shape {(h, w, c)}, got {got}")
    return x.astype(model.dtype) / model.dtype.type(255)


def predict(model: Model, image: np.ndarray) -> np.ndarray:
    """Class probabilities for one uint8 image (pixels scaled by 1/255)."""
    probs = model.forward(prepare_input(model, image, batched=False))[0]
    return nn.check_finite(probs, "model output")


def predict_batch(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images)
    out = [model.forward(prepare_input(model, images[i:i + batch_size], batched=True))
           for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, model.config.num_classes), model.dtype)
    return nn.check_finite(np.concatenate(out), "model output")


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------

def model_to_bytes(model: Model) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack(f"<{_CONFIG_FIELDS}I", *model.config._as_u32())
    for p in model.parameters():
        buf += struct.pack("<I", p.ndim)
        buf += struct.pack(f"<{p.ndim}I", *p.shape)
        buf += np.ascontiguousarray(p, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf) & 0xFFFFFFFF)
    return bytes(buf)


def _expected_shapes(config: ModelConfig) -> list:
    return [s for layer in build_layers(config) for s in layer.param_shapes()]


def model_from_bytes(blob: bytes) -> Model:
    header = len(MAGIC) + 4 + 4 * _CONFIG_FIELDS
    if blob[:len(MAGIC)] != MAGIC:
        if len(blob) < len(MAGIC) and MAGIC.startswith(blob):
            raise TruncatedFile("file ends inside the magic")
        raise BadMagic(f"bad magic {bytes(blob[:len(MAGIC)])!r}")
    if len(blob) < len(MAGIC) + 4:
        raise TruncatedFile("file ends before the version field")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(blob) < header:
        raise TruncatedFile("file ends inside the config block")
    fields = struct.unpack_from(f"<{_CONFIG_FIELDS}I", blob, len(MAGIC) + 4)
    try:
        config = ModelConfig(*fields[:5], conv_channels=fields[5:8], dense_width=fields[8], seed=fields[9])
    except ConfigError as exc:
        raise CorruptFile(f"invalid config block: {exc}") from exc
    shapes = _expected_shapes(config)
    expected = header + sum(4 + 4 * len(s) + 4 * int(np.prod(s)) for s in shapes) + 4
    if len(blob) < expected:
        raise TruncatedFile(f"file has {len(blob)} bytes, config implies {expected}")
    if len(blob) > expected:
        raise CorruptFile(f"{len(blob) - expected} trailing bytes after the checksum")
    (stored,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[:expected - 4]) & 0xFFFFFFFF != stored:
        raise ChecksumMismatch("CRC-32 mismatch; file is corrupt")

    pos = header
    flat = []
    for shape in shapes:
        (rank,) = struct.unpack_from("<I", blob, pos)
        dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
        if tuple(dims) != tuple(shape):
            raise CorruptFile(f"tensor record {len(flat)} has shape {dims}, expected {shape}")
        pos += 4 + 4 * rank
        count = int(np.prod(shape))
        flat.append(np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape))
        pos += 4 * count

    layers = build_layers(config)
    params, i = [], 0
    for layer in layers:
        n = len(layer.param_shapes())
        params.append(flat[i:i + n])
        i += n
    return Model(config, layers, params, class_names_for(config.num_classes))


def save_model(model: Model, path: Union[str, PathLike]) -> None:
    """Write ``model`` as float32; float64 models are rounded on the way out."""
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: Union[str, PathLike]) -> Model:
    return model_from_bytes(Path(path).read_bytes())

