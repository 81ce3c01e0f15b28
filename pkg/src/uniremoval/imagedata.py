"""Image I/O, normalization, patch cropping and mixed-degradation batches.

Images travel through the pipeline as channels-first ``float32`` arrays of
shape ``(3, H, W)`` with values in ``[-1, 1]``.  Physical degradation models
work in ``[0, 1]``; use :func:`denormalize` / :func:`normalize` to move
between the two.

On-disk layout::

    root/<kind>/degraded/*.png   paired synthetic inputs
    root/<kind>/clean/*.png      paired ground truth (same filenames)
    root/<kind>/real/*.png       unpaired real degraded images
    root/clear/*.png             unpaired real clear images
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DegradationKind(enum.IntEnum):
    HAZE = 0
    RAIN = 1
    BLUR = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "DegradationKind":
        if isinstance(value, DegradationKind):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown degradation kind {value!r}") from None


DEFAULT_KINDS = tuple(DegradationKind)


def parse_kinds(values: Iterable) -> tuple[DegradationKind, ...]:
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    kinds = tuple(DegradationKind.parse(v) for v in values)
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"duplicate degradation kinds in {values!r}")
    return kinds


# --------------------------------------------------------------------------
# normalization and file I/O
# --------------------------------------------------------------------------

def normalize(x01: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` values to ``[-1, 1]``."""
    return (np.asarray(x01, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def denormalize(x: np.ndarray) -> np.ndarray:
    """Map ``[-1, 1]`` values to ``[0, 1]``."""
    return ((np.asarray(x, dtype=np.float32) + 1.0) * 0.5).astype(np.float32)


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"{name} must have shape (3, H, W), got {img.shape}")
    if img.shape[1] == 0 or img.shape[2] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG/JPEG file as a normalized ``(3, H, W)`` array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ValueError(f"unsupported image format {im.format!r}: {path}")
            if im.width == 0 or im.height == 0:
                raise ValueError(f"zero-sized image: {path}")
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32)
    except UnidentifiedImageError as exc:
        raise ValueError(f"unsupported image format: {path}") from exc
    if pixels.size == 0:
        raise ValueError(f"zero-sized image: {path}")
    return (pixels.transpose(2, 0, 1) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a normalized image to an ``(H, W, 3)`` uint8 array."""
    img = check_image(img)
    pixels = np.rint((np.clip(img, -1.0, 1.0) + 1.0) * 127.5)
    return pixels.astype(np.uint8).transpose(1, 2, 0)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --------------------------------------------------------------------------
# cropping
# --------------------------------------------------------------------------

def crop_offsets(height: int, width: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if height < size or width < size:
        raise ValueError(f"image {height}x{width} is smaller than crop size {size}")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    top, left = crop_offsets(h, w, size, rng)
    return img[:, top:top + size, left:left + size]


def random_crop_pair(a: np.ndarray, b: np.ndarray, size: int, rng: np.random.Generator):
    """Crop two aligned images at the same offset."""
    if a.shape != b.shape:
        raise ValueError(f"paired images differ in shape: {a.shape} vs {b.shape}")
    _, h, w = a.shape
    top, left = crop_offsets(h, w, size, rng)
    return a[:, top:top + size, left:left + size], b[:, top:top + size, left:left + size]


def worker_rng(seed: int, worker: int = 0, epoch: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, worker, epoch) triple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(worker), int(epoch)]))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedDataset:
    """Synthetic (degraded, clean) pairs of a single degradation kind."""

    kind: DegradationKind
    entries: tuple[tuple[Path, Path], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_root(cls, root, kind) -> "PairedDataset":
        kind = DegradationKind.parse(kind)
        degraded_dir = Path(root) / kind.label / "degraded"
        clean_dir = Path(root) / kind.label / "clean"
        entries = []
        for degraded in list_images(degraded_dir):
            clean = clean_dir / degraded.name
            if not clean.is_file():
                raise FileNotFoundError(f"missing clean counterpart for {degraded}: {clean}")
            entries.append((degraded, clean))
        return cls(kind, tuple(entries))

    @cached_property
    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All pairs stacked as ``(degraded, clean)`` arrays (loaded once)."""
        if not self.entries:
            raise ValueError(f"paired dataset for {self.kind.label} is empty")
        degraded, clean = [], []
        for dpath, cpath in self.entries:
            d, c = load_image(dpath), load_image(cpath)
            if d.shape != c.shape:
                raise ValueError(f"pair dimensions differ: {dpath} {d.shape} vs {cpath} {c.shape}")
            degraded.append(d)
            clean.append(c)
        return _stack(degraded), _stack(clean)

    def subset(self, indices: Sequence[int]) -> "PairedDataset":
        return PairedDataset(self.kind, tuple(self.entries[i] for i in indices))

    def split(self, holdout_fraction: float, seed: int):
        train_idx, held_idx = holdout_split(len(self), holdout_fraction, seed, salt=int(self.kind))
        return self.subset(train_idx), self.subset(held_idx)


@dataclass(frozen=True)
class ImageSet:
    """Unlabelled list of image files, optionally tagged with a kind."""

    paths: tuple[Path, ...]
    kind: DegradationKind | None = None

    def __len__(self) -> int:
        return len(self.paths)

    @cached_property
    def arrays(self) -> np.ndarray:
        if not self.paths:
            raise ValueError("image set is empty")
        return _stack([load_image(p) for p in self.paths])

    def subset(self, indices: Sequence[int]) -> "ImageSet":
        return ImageSet(tuple(self.paths[i] for i in indices), self.kind)

    def split(self, holdout_fraction: float, seed: int):
        salt = 99 if self.kind is None else int(self.kind)
        train_idx, held_idx = holdout_split(len(self), holdout_fraction, seed, salt=salt)
        return self.subset(train_idx), self.subset(held_idx)


@dataclass(frozen=True)
class UnpairedDataset:
    """Real degraded images per kind plus a pool of real clear images."""

    degraded: dict[DegradationKind, ImageSet]
    clear: ImageSet

    @classmethod
    def from_root(cls, root, kinds: Iterable = DEFAULT_KINDS) -> "UnpairedDataset":
        root = Path(root)
        degraded = {}
        for kind in parse_kinds(kinds):
            degraded[kind] = ImageSet(tuple(list_images(root / kind.label / "real")), kind)
        clear = ImageSet(tuple(list_images(root / "clear")))
        return cls(degraded, clear)

    def validate(self) -> None:
        if not self.clear.paths:
            raise ValueError("unpaired dataset has no clear images")
        for kind, images in self.degraded.items():
            if not images.paths:
                raise ValueError(f"unpaired dataset has no real {kind.label} images")

    def split(self, holdout_fraction: float, seed: int):
        train_deg, held_deg = {}, {}
        for kind, images in self.degraded.items():
            train_deg[kind], held_deg[kind] = images.split(holdout_fraction, seed)
        train_clear, held_clear = self.clear.split(holdout_fraction, seed)
        return UnpairedDataset(train_deg, train_clear), UnpairedDataset(held_deg, held_clear)


def holdout_split(n: int, fraction: float, seed: int, salt: int = 0):
    """Seeded partition of ``range(n)`` into (train, held-out) index lists."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"holdout fraction must be in [0, 1), got {fraction}")
    order = worker_rng(seed, 1000 + salt, 0).permutation(n)
    n_held = int(round(n * fraction))
    if n_held == 0 and fraction > 0 and n > 1:
        n_held = 1
    held = sorted(int(i) for i in order[:n_held])
    train = sorted(int(i) for i in order[n_held:])
    return train, held


def load_manifest(path) -> list[dict]:
    """Read an optional dataset manifest (``{"entries": [...]}``) as records."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    entries = data["entries"] if isinstance(data, dict) else data
    base = Path(path).parent
    records = []
    for rec in entries:
        rec = dict(rec)
        if rec.get("kind") is not None:
            rec["kind"] = DegradationKind.parse(rec["kind"])
        for key in ("clean", "degraded"):
            if rec.get(key) is not None and not os.path.isabs(rec[key]):
                rec[key] = str(base / rec[key])
        records.append(rec)
    return records


def paired_from_manifest(path) -> dict[DegradationKind, PairedDataset]:
    grouped: dict[DegradationKind, list] = {}
    for rec in load_manifest(path):
        if rec.get("split", "paired") != "paired":
            continue
        grouped.setdefault(rec["kind"], []).append((Path(rec["degraded"]), Path(rec["clean"])))
    return {k: PairedDataset(k, tuple(v)) for k, v in sorted(grouped.items())}


def _stack(images: list[np.ndarray]) -> np.ndarray:
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images in a dataset must share a shape, found {sorted(shapes)}")
    out = np.stack(images).astype(np.float32)
    out.setflags(write=False)
    return out


# --------------------------------------------------------------------------
# mixed batches
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MixedBatch:
    images: np.ndarray                      # (b, 3, P, P)
    kinds: np.ndarray                       # (b,) int
    targets: np.ndarray | None = None       # paired ground truth
    clear_images: np.ndarray | None = None  # unpaired clear images

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def kind_set(self) -> tuple[DegradationKind, ...]:
        return tuple(DegradationKind(int(k)) for k in np.unique(self.kinds))


def _per_kind(b: int, k: int) -> int:
    if k < 1:
        raise ValueError("at least one degradation kind is required")
    if b <= 0 or b % k != 0:
        raise ValueError(f"batch size {b} is not divisible by the number of kinds {k}")
    return b // k


def make_mixed_batch(
    datasets: Mapping,
    b: int,
    rng: np.random.Generator,
    patch_size: int | None = None,
    indices: Mapping | None = None,
    clear: ImageSet | None = None,
) -> MixedBatch:
    """Compose a batch holding exactly ``b / k`` samples of each kind.

    ``datasets`` maps kinds to :class:`PairedDataset` (targets are returned)
    or :class:`ImageSet` (no targets).  Per-kind sample indices are drawn from
    ``rng`` unless given explicitly via ``indices``.  Samples are interleaved
    kind by kind, then shuffled.  With ``clear`` set, ``b`` clear images are
    attached as ``clear_images``.
    """
    kinds = sorted(DegradationKind.parse(k) for k in datasets)
    per_kind = _per_kind(b, len(kinds))
    by_kind = {DegradationKind.parse(k): v for k, v in datasets.items()}
    paired = isinstance(next(iter(by_kind.values())), PairedDataset)

    chosen = {}
    for kind in kinds:
        ds = by_kind[kind]
        n = len(ds)
        if n == 0:
            raise ValueError(f"no samples for kind {kind.label}")
        if indices is not None:
            idx = np.asarray(indices[kind], dtype=np.int64)
            if idx.shape != (per_kind,):
                raise ValueError(f"expected {per_kind} indices for {kind.label}, got {idx.shape}")
        else:
            idx = rng.choice(n, size=per_kind, replace=n < per_kind)
        chosen[kind] = idx

    images, targets, labels = [], [], []
    for slot in range(per_kind):
        for kind in kinds:
            i = int(chosen[kind][slot])
            if paired:
                degraded, clean = by_kind[kind].arrays
                x, y = degraded[i], clean[i]
                if patch_size is not None:
                    x, y = random_crop_pair(x, y, patch_size, rng)
                targets.append(y)
            else:
                x = by_kind[kind].arrays[i]
                if patch_size is not None:
                    x = random_crop(x, patch_size, rng)
            images.append(x)
            labels.append(int(kind))

    order = rng.permutation(b)
    images_arr = np.stack(images)[order]
    kinds_arr = np.asarray(labels, dtype=np.int64)[order]
    targets_arr = np.stack(targets)[order] if paired else None

    clear_arr = None
    if clear is not None:
        pool = clear.arrays
        pick = rng.choice(len(pool), size=b, replace=len(pool) < b)
        crops = [pool[int(i)] if patch_size is None else random_crop(pool[int(i)], patch_size, rng) for i in pick]
        clear_arr = np.stack(crops)
    return MixedBatch(images_arr.astype(np.float32), kinds_arr, targets_arr, clear_arr)


class EpochSampler:
    """Without-replacement index stream over per-kind datasets.

    One epoch is one pass over the smallest per-kind dataset; every step
    takes ``b / k`` fresh indices from each kind's per-epoch permutation.
    """

    def __init__(self, sizes: Mapping, b: int, seed: int):
        self.sizes = {DegradationKind.parse(k): int(n) for k, n in sizes.items()}
        self.kinds = sorted(self.sizes)
        self.per_kind = _per_kind(b, len(self.kinds))
        smallest = min(self.sizes.values())
        if smallest == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.steps_per_epoch = max(1, smallest // self.per_kind)
        self.seed = seed

    def epoch_of(self, iteration: int) -> int:
        return iteration // self.steps_per_epoch

    def indices(self, iteration: int) -> dict:
        epoch, step = divmod(iteration, self.steps_per_epoch)
        rng = worker_rng(self.seed, 0, epoch)
        out = {}
        for kind in self.kinds:
            perm = rng.permutation(self.sizes[kind])
            if len(perm) < self.per_kind:
                perm = np.resize(perm, self.per_kind)
            start = step * self.per_kind
            out[kind] = perm[start:start + self.per_kind]
        return out

    def batch_rng(self, iteration: int) -> np.random.Generator:
        return worker_rng(self.seed, 1, iteration)
