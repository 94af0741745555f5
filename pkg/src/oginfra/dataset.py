"""Labeled dataset assembly: decoding, resizing, augmentation and splits."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from oginfra.errors import ConfigError

SPLITS = ("train", "val", "test")


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class AugTag(str, Enum):
    IDENTITY = "identity"
    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit image stored row-major as an (height, width, channels) array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ValueError(f"expected (height, width, channels), got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RasterImage) and self.pixels.shape == other.pixels.shape and self.tobytes() == other.tobytes()

    @classmethod
    def from_png(cls, data: bytes | str | Path) -> RasterImage:
        src = io.BytesIO(data) if isinstance(data, bytes) else data
        with Image.open(src) as img:
            return cls(np.asarray(img.convert("RGB")))

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        mode = "RGB" if self.channels == 3 else "L"
        Image.fromarray(self.pixels if self.channels == 3 else self.pixels[:, :, 0], mode).save(buf, format="PNG")
        return buf.getvalue()


_TRANSFORMS = {
    AugTag.IDENTITY: lambda a: a,
    AugTag.HFLIP: lambda a: a[:, ::-1],
    AugTag.VFLIP: lambda a: a[::-1, :],
    AugTag.ROT90: lambda a: np.rot90(a, 1),
    AugTag.ROT180: lambda a: np.rot90(a, 2),
    AugTag.ROT270: lambda a: np.rot90(a, 3),
}


def transform(img: RasterImage, tag: AugTag) -> RasterImage:
    """Apply one lossless flip/rotation (rotations are counter-clockwise)."""
    return RasterImage(np.ascontiguousarray(_TRANSFORMS[AugTag(tag)](img.pixels)))


def augment(img: RasterImage) -> list[tuple[AugTag, RasterImage]]:
    """The six variants: identity, both flips and the three quarter-turn rotations."""
    return [(tag, transform(img, tag)) for tag in AugTag]


def _bilinear_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-centre alignment: output centre i maps to input coordinate (i + 0.5) * n_in / n_out - 0.5
    coord = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    coord = np.clip(coord, 0, n_in - 1)
    lo = np.floor(coord).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, coord - lo


def resize(img: RasterImage, w: int, h: int) -> RasterImage:
    """Bilinear resample to ``w`` x ``h`` with pixel-centre alignment.

    Interpolated values are rounded half up (``floor(v + 0.5)``), so a
    2x2 image of rows 0 and 255 becomes a single pixel of 128.
    """
    if w < 1 or h < 1:
        raise ConfigError(f"target size must be positive, got {w}x{h}")
    if (w, h) == (img.width, img.height):
        return RasterImage(img.pixels.copy())
    src = img.pixels.astype(np.float64)
    y0, y1, fy = _bilinear_weights(img.height, h)
    x0, x1, fx = _bilinear_weights(img.width, w)
    fy = fy[:, None, None]
    rows = src[y0] * (1 - fy) + src[y1] * fy
    fx = fx[None, :, None]
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    return RasterImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer split sizes summing to ``n``; ties in remainder go to the earlier split."""
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label
    source_id: str
    aug_tag: AugTag
    split: str

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "label": self.label.value,
            "source_id": self.source_id,
            "aug_tag": self.aug_tag.value,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    split_fractions: tuple[float, float, float]
    root: Path | None = field(default=None, compare=False)

    def write(self, dest: IO[str]) -> None:
        dest.write(json.dumps({"seed": self.seed, "split_fractions": list(self.split_fractions)}) + "\n")
        for entry in self.entries:
            dest.write(json.dumps(entry.to_dict()) + "\n")

    def dumps(self) -> str:
        buf = io.StringIO()
        self.write(buf)
        return buf.getvalue()

    @classmethod
    def read(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        with open(path, encoding="utf-8") as handle:
            header = json.loads(handle.readline())
            entries = []
            for line in handle:
                if line.strip():
                    obj = json.loads(line)
                    entries.append(
                        ManifestEntry(obj["path"], Label(obj["label"]), obj["source_id"], AugTag(obj["aug_tag"]), obj["split"])
                    )
        return cls(entries, int(header["seed"]), tuple(header["split_fractions"]), root=path.parent)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def _validate_fractions(fractions: Sequence[float]) -> tuple[float, float, float]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be three non-negative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    return tuple(float(f) for f in fractions)


def assign_splits(source_ids: Iterable[str], fractions: Sequence[float], seed: int) -> dict[str, str]:
    """Seeded shuffle of sorted ids, cut by largest-remainder sizes."""
    ids = sorted(source_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    sizes = largest_remainder(len(ids), fractions)
    assignment = {}
    cursor = 0
    for split, size in zip(SPLITS, sizes):
        for k in order[cursor : cursor + size]:
            assignment[ids[k]] = split
        cursor += size
    return assignment


def _load(source) -> RasterImage:
    if isinstance(source, RasterImage):
        return source
    return RasterImage.from_png(source if isinstance(source, bytes) else Path(source))


def build_dataset(
    positive_sources: Mapping[str, RasterImage | str | Path | bytes],
    negative_sources: Mapping[str, RasterImage | str | Path | bytes],
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    *,
    root: str | Path | None = None,
    size: tuple[int, int] | None = (64, 64),
) -> DatasetManifest:
    """Split sources per class, then expand positives six-fold.

    Splits are drawn per class from source ids before augmentation, so all
    variants of a source share one split. When ``root`` is given, samples are
    resized to ``size`` and written to ``<root>/<split>/<label>/<source_id>_<aug_tag>.png``.
    """
    fractions = _validate_fractions(fractions)
    if not positive_sources or not negative_sources:
        raise ConfigError("both positive and negative sources must be non-empty")
    overlap = set(positive_sources) & set(negative_sources)
    if overlap:
        raise ConfigError(f"source ids used for both classes: {sorted(overlap)[:5]}")
    root = Path(root) if root is not None else None

    entries = []
    for label, sources in ((Label.POSITIVE, positive_sources), (Label.NEGATIVE, negative_sources)):
        splits = assign_splits(sources, fractions, seed)
        for source_id in sorted(sources):
            split = splits[source_id]
            tags = list(AugTag) if label is Label.POSITIVE else [AugTag.IDENTITY]
            image = None
            if root is not None:
                image = _load(sources[source_id])
                if size is not None:
                    image = resize(image, *size)
            for tag in tags:
                rel = f"{split}/{label.value}/{source_id}_{tag.value}.png"
                if image is not None:
                    out = root / rel
                    out.parent.mkdir(parents=True, exist_ok=True)
                    out.write_bytes(transform(image, tag).to_png())
                entries.append(ManifestEntry(rel, label, source_id, tag, split))
    return DatasetManifest(entries, seed, fractions, root=root)


def class_balance_report(manifest: DatasetManifest) -> dict[str, dict]:
    """Per split: positive/negative counts and max/min class ratio (None if undefined)."""
    report = {}
    for split in SPLITS:
        counts = {label.value: 0 for label in Label}
        for e in manifest.entries:
            if e.split == split:
                counts[e.label.value] += 1
        lo = min(counts.values())
        ratio = max(counts.values()) / lo if lo > 0 else None
        report[split] = {**counts, "ratio": ratio}
    return report


def to_model_input(pixels: np.ndarray) -> np.ndarray:
    """Map a stack of (N, H, W, C) uint8 images to centred NCHW float64 in [-1, 1]."""
    x = np.asarray(pixels, dtype=np.float64).transpose(0, 3, 1, 2) / 127.5 - 1.0
    return np.ascontiguousarray(x)


def load_split(manifest: DatasetManifest, split: str, root: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Decode one split into model input (see ``to_model_input``) and 0/1 labels."""
    root = Path(root) if root is not None else manifest.root
    if root is None:
        raise ConfigError("manifest has no root directory; pass root=")
    entries = manifest.split(split)
    images = [RasterImage.from_png(root / e.path).pixels for e in entries]
    labels = np.array([1.0 if e.label is Label.POSITIVE else 0.0 for e in entries])
    if not images:
        return np.zeros((0, 3, 0, 0)), labels
    return to_model_input(np.stack(images)), labels
