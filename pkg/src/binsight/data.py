"""Corpora: manifests, encoded datasets, splits, batches, a synthetic stand-in
corpus and byte-level obfuscation.

Manifest format (UTF-8, one entry per line)::

    # classes: mirai,gafgyt,goodware      (optional; declares label order)
    # meta	generator=binsight-synth	version=1	seed=7
    relative/path.bin<TAB>label[<TAB>sha256]

Other ``#`` lines and blank lines are ignored.  Paths are relative to the
manifest's directory.

The synthetic corpus is NOT real malware.  Its three families only mimic
coarse byte statistics (a repeating low-alphabet motif, alternating
zero/random blocks, near-uniform bytes) so the pipeline can be exercised
end to end without a malware collection.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import encoder
from .errors import ConfigError, CorpusError, DataError, ManifestError
from .model import DEFAULT_CLASSES

MANIFEST_NAME = "MANIFEST.tsv"
SYNTH_VERSION = 1
BLOCK = 256


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    index: int
    digest: Optional[str] = None


class Manifest(list):
    """A list of :class:`ManifestEntry` that also remembers the class order."""

    def __init__(self, entries: Iterable[ManifestEntry] = (), classes: Sequence[str] = DEFAULT_CLASSES,
                 meta: Optional[dict] = None):
        super().__init__(entries)
        self.classes = tuple(classes)
        self.meta = dict(meta or {})


def load_manifest(path: Union[str, PathLike], classes: Sequence[str] = DEFAULT_CLASSES) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    base = path.parent
    classes = tuple(classes)
    meta: dict = {}
    entries = []
    seen: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("classes:"):
                if entries:
                    raise ManifestError("class declaration must precede entries", lineno)
                classes = tuple(c.strip() for c in body.split(":", 1)[1].split(",") if c.strip())
                if len(set(classes)) != len(classes) or len(classes) < 2:
                    raise ManifestError("class list needs at least two distinct names", lineno)
            elif body.startswith("meta"):
                for item in body.split()[1:]:
                    key, _, value = item.partition("=")
                    meta[key] = value
            continue
        cols = raw.rstrip("\r\n").split("\t")
        if len(cols) not in (2, 3) or not cols[0].strip() or not cols[1].strip():
            raise ManifestError("expected '<path>\\t<label>[\\t<sha256>]'", lineno)
        rel, label = cols[0].strip(), cols[1].strip()
        if label not in classes:
            raise ManifestError(f"unknown label {label!r}; declared classes are {', '.join(classes)}", lineno)
        full = (base / rel).resolve()
        if full in seen:
            raise ManifestError(f"duplicate path {rel!r} (first listed on line {seen[full]})", lineno)
        if not full.is_file():
            raise ManifestError(f"missing file {rel!r}", lineno)
        seen[full] = lineno
        digest = cols[2].strip().lower() if len(cols) == 3 and cols[2].strip() else None
        entries.append(ManifestEntry(full, label, classes.index(label), digest))
    return Manifest(entries, classes, meta)


def write_manifest(path: Union[str, PathLike], entries: Sequence[ManifestEntry],
                   classes: Sequence[str] = DEFAULT_CLASSES, meta: Optional[dict] = None) -> None:
    path = Path(path)
    lines = ["# classes: " + ",".join(classes)]
    if meta:
        lines.append("# meta\t" + "\t".join(f"{k}={v}" for k, v in meta.items()))
    for e in entries:
        try:
            rel = Path(e.path).resolve().relative_to(path.parent.resolve())
        except ValueError:
            rel = Path(e.path).resolve()
        row = f"{rel.as_posix()}\t{e.label}"
        if e.digest:
            row += f"\t{e.digest}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    classes: tuple = DEFAULT_CLASSES
    mode: str = "gray"
    sources: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise DataError("label index outside the class list")
        if not self.sources:
            self.sources = tuple(str(i) for i in range(len(self.labels)))

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.mode,
                       tuple(self.sources[i] for i in idx))


def _encode_one(entry: ManifestEntry, mode: str, side: int, window: int) -> np.ndarray:
    raw = Path(entry.path).read_bytes()
    if entry.digest and hashlib.sha256(raw).hexdigest() != entry.digest:
        raise DataError("sha256 digest mismatch")
    return encoder.encode(encoder.RawBinary(raw, str(entry.path), entry.index), mode, side, window)


def encode_corpus(entries: Sequence[ManifestEntry], mode: str = "gray", side: int = encoder.DEFAULT_SIDE,
                  window: int = encoder.DEFAULT_WINDOW, classes: Optional[Sequence[str]] = None,
                  workers: int = 1) -> Dataset:
    """Encode every entry, in order.  Any failure aborts with the full list of offenders."""
    channels = encoder.channels_for_mode(mode)
    if classes is None:
        classes = getattr(entries, "classes", DEFAULT_CLASSES)

    def job(entry):
        try:
            return _encode_one(entry, mode, side, window), None
        except (OSError, ValueError) as exc:
            return None, str(exc) or type(exc).__name__

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, entries))
    else:
        results = [job(e) for e in entries]
    failures = [(str(e.path), err) for e, (_, err) in zip(entries, results) if err is not None]
    if failures:
        raise CorpusError(failures)
    images = np.stack([img for img, _ in results]) if results else np.zeros((0, side, side, channels), np.uint8)
    labels = np.array([e.index for e in entries], dtype=np.int64)
    return Dataset(images, labels, tuple(classes), mode, tuple(str(e.path) for e in entries))


# --------------------------------------------------------------------------
# splitting and batching
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    mode: str = "gray"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


def train_count(n: int, fraction: float) -> int:
    # round first so that e.g. 0.7 * 10 does not ceil to 8 via float noise
    return min(n, math.ceil(round(fraction * n, 9)))


def split_dataset(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(len(ds))
    k = train_count(len(ds), spec.train_fraction)
    return ds.subset(order[:k]), ds.subset(order[k:])


def epoch_order(n: int, config: TrainConfig, epoch: int) -> np.ndarray:
    return np.random.default_rng((config.seed, epoch)).permutation(n)


def make_batches(train: Dataset, config: TrainConfig, epoch: int) -> list:
    """Reshuffled ``(images, labels)`` batches for one epoch; the last may be short."""
    if len(train) == 0:
        raise DataError("no training samples")
    order = epoch_order(len(train), config, epoch)
    return [(train.images[idx], train.labels[idx])
            for idx in (order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size))]


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

MIN_SIZE = 2 * 1024
MAX_SIZE = 64 * 1024


def _mirai_like(rng: np.random.Generator, size: int) -> np.ndarray:
    # 16-byte motif over three low byte values, 5% of bytes replaced by noise
    alphabet = rng.choice(64, size=3, replace=False).astype(np.uint8)
    motif = alphabet[rng.integers(0, 3, size=16)]
    out = np.resize(motif, size)
    noisy = rng.random(size) < 0.05
    out[noisy] = rng.integers(0, 256, size=int(noisy.sum()), dtype=np.uint8)
    return out


def _gafgyt_like(rng: np.random.Generator, size: int) -> np.ndarray:
    # even 256-byte blocks are zero filler, odd ones uniform
    out = rng.integers(0, 256, size=size, dtype=np.uint8)
    out[(np.arange(size) // BLOCK) % 2 == 0] = 0
    return out


def _goodware_like(rng: np.random.Generator, size: int) -> np.ndarray:
    out = rng.integers(0, 256, size=size, dtype=np.uint8)
    starts = np.flatnonzero(rng.random(size) < 1 / 512)
    for s in starts:
        out[s:s + int(rng.integers(16, 65))] = 0
    return out


_FAMILIES = (_mirai_like, _gafgyt_like, _goodware_like)


def synth_bytes(class_index: int, seed: int, i: int) -> bytes:
    """File ``i`` of family ``class_index``; depends only on its arguments."""
    rng = np.random.default_rng((seed, class_index, i))
    size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
    return _FAMILIES[class_index](rng, size).tobytes()


def synth_corpus(n_per_class: int, seed: int, out_dir: Union[str, PathLike]) -> Manifest:
    """Write ``3 * n_per_class`` synthetic files plus ``MANIFEST.tsv``; return the loaded manifest."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for c, name in enumerate(DEFAULT_CLASSES):
        for i in range(n_per_class):
            blob = synth_bytes(c, seed, i)
            p = out / f"{name}_{i:05d}.bin"
            p.write_bytes(blob)
            entries.append(ManifestEntry(p, name, c, hashlib.sha256(blob).hexdigest()))
    meta = {"generator": "binsight-synth", "version": SYNTH_VERSION, "seed": seed, "n_per_class": n_per_class}
    write_manifest(out / MANIFEST_NAME, entries, DEFAULT_CLASSES, meta)
    return load_manifest(out / MANIFEST_NAME)


# --------------------------------------------------------------------------
# obfuscation
# --------------------------------------------------------------------------

OBFUSCATION_MODES = ("xor", "permute")


def block_permutation(n_blocks: int, seed: int) -> np.ndarray:
    """Output block ``j`` is input block ``perm[j]``."""
    return np.random.default_rng(seed).permutation(n_blocks)


def _blocks(arr: np.ndarray) -> list:
    return [arr[i:i + BLOCK] for i in range(0, arr.size, BLOCK)]


def obfuscate(data, mode: str, key: int = 0, seed: int = 0) -> bytes:
    """Length-preserving byte transform.

    ``xor`` XORs every byte with ``key``.  ``permute`` cuts the data into
    256-byte blocks (the last may be short) and reorders them with a seeded
    shuffle.  Both are undone by :func:`deobfuscate`.
    """
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    if arr.size == 0:
        raise DataError("cannot obfuscate empty input")
    if mode == "xor":
        if not 0 <= key <= 255:
            raise ConfigError("xor key must be a byte value")
        return (arr ^ np.uint8(key)).tobytes()
    if mode == "permute":
        blocks = _blocks(arr)
        perm = block_permutation(len(blocks), seed)
        return b"".join(blocks[j].tobytes() for j in perm)
    raise ConfigError(f"unknown obfuscation mode {mode!r}; expected one of {OBFUSCATION_MODES}")


def deobfuscate(data, mode: str, key: int = 0, seed: int = 0) -> bytes:
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    if mode == "xor":
        return obfuscate(data, "xor", key)
    if mode == "permute":
        n = arr.size
        sizes = [min(BLOCK, n - i) for i in range(0, n, BLOCK)]
        perm = block_permutation(len(sizes), seed)
        # the short block (if any) sits wherever the permutation put it
        pieces, pos = {}, 0
        for j in perm:
            pieces[j] = arr[pos:pos + sizes[j]]
            pos += sizes[j]
        return b"".join(pieces[j].tobytes() for j in range(len(sizes)))
    raise ConfigError(f"unknown obfuscation mode {mode!r}")


def obfuscate_corpus(entries: Sequence[ManifestEntry], out_dir: Union[str, PathLike], seed: int,
                     modes: Sequence[str] = OBFUSCATION_MODES, key: Optional[int] = None) -> Manifest:
    """Apply ``modes`` in order to every file and write a new manifest.

    One XOR key is used for the whole corpus (``key``, or one drawn from
    ``seed``), as a single protector configuration would; each file gets its
    own block-permutation seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = getattr(entries, "classes", DEFAULT_CLASSES)
    if key is None:
        key = int(np.random.default_rng(seed).integers(1, 256))
    written = []
    for i, e in enumerate(entries):
        perm_seed = int(np.random.default_rng((seed, i)).integers(0, 2**31))
        blob = Path(e.path).read_bytes()
        for mode in modes:
            blob = obfuscate(blob, mode, key=key, seed=perm_seed)
        p = out / f"obf_{i:05d}_{Path(e.path).name}"
        p.write_bytes(blob)
        written.append(ManifestEntry(p, e.label, e.index, hashlib.sha256(blob).hexdigest()))
    meta = {"obfuscation": "+".join(modes), "seed": seed, "key": key}
    write_manifest(out / MANIFEST_NAME, written, classes, meta)
    return load_manifest(out / MANIFEST_NAME, classes)
