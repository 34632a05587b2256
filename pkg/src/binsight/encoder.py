"""Binary -> image encoders.

Two representations of a file:

* grayscale: byte ``i`` becomes pixel ``i`` of a ``side x side`` image in
  row-major order; longer files are truncated, shorter ones zero padded.
* entropy: ``side**2`` offsets spread evenly across the file, the Shannon
  entropy of a byte window around each, coloured by :func:`color_map` and laid
  out along a Hilbert curve so that nearby offsets land in nearby pixels.

Images are plain ``uint8`` numpy arrays: ``(side, side)`` for grayscale and
``(side, side, 3)`` for entropy.  Cell ``(x, y)`` of the curve is stored at
``image[y, x]``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError, IngestionError

DEFAULT_SIDE = 64
DEFAULT_WINDOW = 64
MODES = ("gray", "entropy")


@dataclass(frozen=True)
class RawBinary:
    data: bytes
    source_id: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        if len(self.data) < 1:
            raise IngestionError(f"empty input: {self.source_id}" if self.source_id else "empty input")

    def __len__(self):
        return len(self.data)

    @classmethod
    def from_path(cls, path: Union[str, PathLike], label: Optional[int] = None) -> "RawBinary":
        p = Path(path)
        return cls(p.read_bytes(), str(p), label)


def _as_array(data) -> np.ndarray:
    if isinstance(data, RawBinary):
        data = data.data
    arr = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    arr = np.ascontiguousarray(arr, dtype=np.uint8).reshape(-1)
    if arr.size == 0:
        raise IngestionError("empty input")
    return arr


def order_for_side(side: int) -> int:
    if side < 1 or side & (side - 1):
        raise ConfigError(f"side must be a power of two, got {side}")
    return side.bit_length() - 1


# --------------------------------------------------------------------------
# grayscale
# --------------------------------------------------------------------------

def bytes_to_gray(data, side: int = DEFAULT_SIDE, fit: str = "truncate") -> np.ndarray:
    """Row-major byte image.

    ``fit="truncate"`` keeps the first ``side**2`` bytes.  ``fit="stride"``
    instead samples offsets ``floor(i * len / side**2)`` when the file is
    longer than the image.  Either way short files are zero padded.
    """
    if side < 1:
        raise ConfigError(f"side must be >= 1, got {side}")
    arr = _as_array(data)
    cells = side * side
    img = np.zeros(cells, dtype=np.uint8)
    if fit == "stride" and arr.size > cells:
        img[:] = arr[(np.arange(cells, dtype=np.int64) * arr.size) // cells]
    elif fit in ("truncate", "stride"):
        k = min(arr.size, cells)
        img[:k] = arr[:k]
    else:
        raise ConfigError(f"unknown fit mode {fit!r}")
    return img.reshape(side, side)


# --------------------------------------------------------------------------
# Hilbert curve
# --------------------------------------------------------------------------

def _check_order(order: int) -> None:
    if order < 0 or order > 30:
        raise DomainError(f"order must be in [0, 30], got {order}")


def hilbert_d2xy(order: int, d: int) -> tuple[int, int]:
    """Cell ``(x, y)`` visited at step ``d`` of the order-``order`` curve."""
    _check_order(order)
    if not 0 <= d < 4 ** order:
        raise DomainError(f"curve index {d} outside [0, {4 ** order})")
    xs, ys = kernels.hilbert_d2xy(order, np.array([d], dtype=np.int64))
    return int(xs[0]), int(ys[0])


def hilbert_xy2d(order: int, x: int, y: int) -> int:
    _check_order(order)
    side = 1 << order
    if not (0 <= x < side and 0 <= y < side):
        raise DomainError(f"cell ({x}, {y}) outside a {side}x{side} grid")
    return int(kernels.hilbert_xy2d(order, np.array([x], np.int64), np.array([y], np.int64))[0])


@functools.lru_cache(maxsize=16)
def hilbert_table(order: int) -> tuple[np.ndarray, np.ndarray]:
    """All cells of the curve in visiting order, as read-only ``(xs, ys)``."""
    _check_order(order)
    xs, ys = kernels.hilbert_d2xy(order, np.arange(4 ** order, dtype=np.int64))
    xs.setflags(write=False)
    ys.setflags(write=False)
    return xs, ys


# --------------------------------------------------------------------------
# entropy
# --------------------------------------------------------------------------

def window_entropy(data, center: int, window: int = DEFAULT_WINDOW) -> float:
    """Shannon entropy in bits/byte of ``[center - w//2, center + ceil(w/2))``, clipped to the file."""
    arr = _as_array(data)
    if window < 1:
        raise DomainError(f"window must be >= 1, got {window}")
    return float(kernels.window_entropies(arr, np.array([center], dtype=np.int64), window)[0])


def color_map(e: float) -> tuple[int, int, int]:
    """Entropy -> RGB: black at 0, blue at 4, magenta at 8."""
    if not 0.0 <= e <= 8.0:
        raise DomainError(f"entropy {e} outside [0, 8]")
    rgb = color_map_array(np.array([e], dtype=np.float64))[0]
    return int(rgb[0]), int(rgb[1]), int(rgb[2])


def color_map_array(e: np.ndarray) -> np.ndarray:
    t = np.asarray(e, dtype=np.float64) / 8.0
    out = np.zeros(t.shape + (3,), dtype=np.uint8)
    # round half up
    out[..., 0] = np.floor(255.0 * np.clip(2.0 * t - 1.0, 0.0, 1.0) + 0.5)
    out[..., 2] = np.floor(255.0 * np.clip(2.0 * t, 0.0, 1.0) + 0.5)
    return out


def sample_offsets(length: int, cells: int) -> np.ndarray:
    return (np.arange(cells, dtype=np.int64) * length) // cells


def entropy_curve(data, side: int = DEFAULT_SIDE, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Entropies at the ``side**2`` sample offsets, in curve order."""
    arr = _as_array(data)
    order_for_side(side)
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    return kernels.window_entropies(arr, sample_offsets(arr.size, side * side), window)


def bytes_to_entropy_image(data, side: int = DEFAULT_SIDE, window: int = DEFAULT_WINDOW) -> np.ndarray:
    order = order_for_side(side)
    colors = color_map_array(entropy_curve(data, side, window))
    xs, ys = hilbert_table(order)
    img = np.zeros((side, side, 3), dtype=np.uint8)
    img[ys, xs] = colors
    return img


def encode(data, mode: str = "gray", side: int = DEFAULT_SIDE, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Encode with channel axis: ``(side, side, 1)`` for gray, ``(side, side, 3)`` for entropy."""
    if mode == "gray":
        return bytes_to_gray(data, side)[:, :, None]
    if mode == "entropy":
        return bytes_to_entropy_image(data, side, window)
    raise ConfigError(f"unknown encoding mode {mode!r}; expected one of {MODES}")


def channels_for_mode(mode: str) -> int:
    try:
        return {"gray": 1, "entropy": 3}[mode]
    except KeyError:
        raise ConfigError(f"unknown encoding mode {mode!r}") from None


def mode_for_channels(channels: int) -> str:
    try:
        return {1: "gray", 3: "entropy"}[channels]
    except KeyError:
        raise ConfigError(f"no encoding mode produces {channels} channels") from None


def save_png(image: np.ndarray, path: Union[str, PathLike]) -> None:
    """Write an 8-bit grayscale or RGB PNG (requires Pillow)."""
    from PIL import Image

    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Image.fromarray(img, mode="L" if img.ndim == 2 else "RGB").save(path, format="PNG")
