"""Paired dataset ingestion, mask color coding, augmentation and subject folds.

On-disk layout::

    root/images/<id>.png      8-bit grayscale input
    root/masks/<id>.png       8-bit RGB mask painted with the anchor colors
    root/suppressed/<id>.png  8-bit grayscale target
    root/subjects.csv         optional, header ``id,subject``

In memory every image is ``float32`` H x W x 3 in [-1, 1].
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import (ConfigError, DecodeError, DuplicateIdError,
                     FoldConfigError, MissingPairError)

BACKGROUND, LEFT_LUNG, RIGHT_LUNG, HEART = 0, 1, 2, 3
CLASS_NAMES = {BACKGROUND: "background", LEFT_LUNG: "left_lung",
               RIGHT_LUNG: "right_lung", HEART: "heart"}

# Row index is the class id; row order doubles as the tie-break priority.
ANCHOR_COLORS = np.array([
    (0, 0, 0),      # background
    (0, 0, 255),    # left lung
    (0, 255, 0),    # right lung
    (255, 0, 0),    # heart
], dtype=np.uint8)

SUBDIRS = ("images", "masks", "suppressed")

# (transform id, kind, parameter); order fixes the output order of augment_dataset.
AUGMENTATIONS = (
    ("identity", "identity", None),
    ("rot+10", "rotate", 10.0),
    ("rot-5", "rotate", -5.0),
    ("shift+30+10", "shift", (30, 10)),
    ("shift-20-10", "shift", (-20, -10)),
)
FILL_VALUE = -1.0  # 8-bit 0 after normalization; also the background color


def normalize(values) -> np.ndarray:
    """Map 8-bit intensities linearly onto [-1, 1]."""
    return (np.asarray(values, dtype=np.float64) / 127.5 - 1.0).astype(np.float32)


def denormalize(values) -> np.ndarray:
    """Exact inverse of :func:`normalize`, rounded and clipped to uint8."""
    v = (np.asarray(values, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


@dataclass
class PairedSample:
    id: str
    subject: str
    X: np.ndarray
    Y1: np.ndarray
    Y2: np.ndarray
    origin: str = "original"
    transform: str = "identity"

    def __post_init__(self):
        shapes = {a.shape for a in (self.X, self.Y1, self.Y2)}
        if len(shapes) != 1:
            raise ConfigError(f"sample {self.id}: X/Y1/Y2 shapes differ: {shapes}")

    @property
    def target(self) -> np.ndarray:
        """Y1 and Y2 stacked on the channel axis (H x W x 6)."""
        return np.concatenate([self.Y1, self.Y2], axis=-1)

    @property
    def size(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class IndexEntry:
    id: str
    subject: str
    image: Path
    mask: Path
    suppressed: Path


@dataclass
class DatasetIndex:
    root: Path
    entries: list[IndexEntry]

    def __post_init__(self):
        self._by_id = {}
        for e in self.entries:
            if e.id in self._by_id:
                raise DuplicateIdError(f"duplicate id {e.id!r}")
            self._by_id[e.id] = e

    def __len__(self):
        return len(self.entries)

    def __contains__(self, sample_id):
        return sample_id in self._by_id

    def __getitem__(self, sample_id) -> IndexEntry:
        return self._by_id[sample_id]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})

    def ids_for(self, subjects: Iterable[str]) -> list[str]:
        wanted = set(subjects)
        return [e.id for e in self.entries if e.subject in wanted]


def _read_subjects(path: Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "subject"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected header 'id,subject'")
        for row in reader:
            sid = row["id"].strip()
            if sid in mapping:
                raise DuplicateIdError(f"{path}: id {sid!r} listed twice")
            mapping[sid] = row["subject"].strip()
    return mapping


def _png_stems(directory: Path) -> dict[str, Path]:
    stems: dict[str, Path] = {}
    if not directory.is_dir():
        return stems
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() != ".png" or not p.is_file():
            continue
        if p.stem in stems:
            raise DuplicateIdError(f"id {p.stem!r} appears twice in {directory}")
        stems[p.stem] = p
    return stems


def load_manifest(root) -> DatasetIndex:
    """Index every ``images/<id>.png`` together with its mask and suppressed image."""
    root = Path(root)
    if not (root / "images").is_dir():
        raise ConfigError(f"{root} has no images/ directory")
    images, masks, supp = (_png_stems(root / d) for d in SUBDIRS)
    subj_csv = root / "subjects.csv"
    subjects = _read_subjects(subj_csv) if subj_csv.exists() else {}

    entries = []
    for sid in sorted(images):
        if sid not in masks:
            raise MissingPairError(sid, "masks/")
        if sid not in supp:
            raise MissingPairError(sid, "suppressed/")
        entries.append(IndexEntry(sid, subjects.get(sid, sid), images[sid], masks[sid], supp[sid]))
    return DatasetIndex(root, entries)


def _open(path: Path, mode: str, size: int, resample) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            im = im.convert(mode)
            if im.size != (size, size):
                im = im.resize((size, size), resample=resample)
            return np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def _gray3(a: np.ndarray) -> np.ndarray:
    return np.repeat(a[..., None], 3, axis=-1)


def load_sample(index: DatasetIndex, sample_id: str, size: int = 512) -> PairedSample:
    """Read one triple from disk, resize to ``size`` x ``size`` and normalize."""
    if sample_id not in index:
        raise KeyError(sample_id)
    if size < 2 or size % 2:
        raise ConfigError(f"size must be a positive even integer, got {size}")
    e = index[sample_id]
    x = _open(e.image, "L", size, Image.BILINEAR)
    m = _open(e.mask, "RGB", size, Image.NEAREST)
    s = _open(e.suppressed, "L", size, Image.BILINEAR)
    m = encode_labels(decode_mask(m))
    return PairedSample(e.id, e.subject, normalize(_gray3(x)), normalize(m), normalize(_gray3(s)))


def load_samples(index: DatasetIndex, ids: Iterable[str] | None = None, size: int = 512) -> list[PairedSample]:
    ids = index.ids if ids is None else ids
    return [load_sample(index, i, size) for i in sorted(ids)]


def encode_labels(labels) -> np.ndarray:
    """Paint a class-id grid with the anchor colors (uint8 H x W x 3)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(ANCHOR_COLORS)):
        raise ConfigError("label map holds ids outside {0,1,2,3}")
    return ANCHOR_COLORS[labels]


def decode_mask(image) -> np.ndarray:
    """Nearest-anchor-color classification of every pixel.

    Works on any RGB array in the 8-bit range, including raw generator output.
    Exact ties go to the lower class id (background first).
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ConfigError(f"expected H x W x 3 image, got shape {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        diff = img[..., None, :].astype(np.int64) - ANCHOR_COLORS.astype(np.int64)
    else:
        diff = img[..., None, :].astype(np.float64) - ANCHOR_COLORS.astype(np.float64)
    dist = (diff * diff).sum(axis=-1)
    # argmin returns the first minimum, which is the priority order
    return np.argmin(dist, axis=-1).astype(np.uint8)


def snap_mask(Y1: np.ndarray) -> np.ndarray:
    """Re-snap a normalized mask image onto the anchor colors."""
    return normalize(encode_labels(decode_mask(denormalize(Y1))))


def label_map(Y1: np.ndarray) -> np.ndarray:
    """Class ids of a normalized mask image."""
    return decode_mask(denormalize(Y1))


def shift_image(img: np.ndarray, dx: int, dy: int, fill: float = FILL_VALUE) -> np.ndarray:
    """Integer translation: pixel (x, y) moves to (x + dx, y + dy)."""
    h, w = img.shape[:2]
    out = np.full_like(img, fill)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def rotate_image(img: np.ndarray, degrees: float, order: int, fill: float = FILL_VALUE) -> np.ndarray:
    """Rotate about the image center, counter-clockwise as displayed, no rescaling."""
    # ndimage with axes=(0, 1) turns counter-clockwise on a row-down display
    out = ndimage.rotate(img, degrees, axes=(0, 1), reshape=False, order=order,
                         mode="constant", cval=fill, prefilter=False)
    return out.astype(img.dtype, copy=False)


def _apply(sample: PairedSample, name: str, kind: str, param) -> PairedSample:
    if kind == "identity":
        return sample
    if kind == "shift":
        dx, dy = param
        X, Y1, Y2 = (shift_image(a, dx, dy) for a in (sample.X, sample.Y1, sample.Y2))
    else:
        X = rotate_image(sample.X, param, order=1)
        Y2 = rotate_image(sample.Y2, param, order=1)
        Y1 = snap_mask(rotate_image(sample.Y1, param, order=0))
    return PairedSample(f"{sample.id}__{name}", sample.subject, X, Y1, Y2,
                        origin="augmented", transform=name)


def augment_dataset(samples: Sequence[PairedSample]) -> list[PairedSample]:
    """Expand originals five-fold: identity, two rotations, two translations."""
    out = []
    for s in sorted(samples, key=lambda s: s.id):
        if s.origin != "original":
            raise ConfigError(f"sample {s.id} is already augmented")
        out.extend(_apply(s, *aug) for aug in AUGMENTATIONS)
    return out


@dataclass
class FoldSplit:
    k: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold_of(self, subject: str) -> int:
        return self.assignments[subject]

    def test_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def train_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f != fold)

    def fingerprint(self) -> str:
        blob = json.dumps({"k": self.k, "assignments": self.assignments}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"k": self.k, "assignments": dict(sorted(self.assignments.items()))}


def subject_kfold(index, k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle subjects with ``seed`` and deal them round-robin into ``k`` folds.

    ``index`` is a :class:`DatasetIndex` or an iterable of subject ids.
    ``k`` equal to the number of subjects gives leave-one-subject-out.
    """
    subjects = index.subjects() if isinstance(index, DatasetIndex) else sorted(set(index))
    if k < 2:
        raise FoldConfigError(f"k must be >= 2, got {k}")
    if k > len(subjects):
        raise FoldConfigError(f"k={k} exceeds the number of subjects ({len(subjects)})")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return FoldSplit(k, {subjects[j]: i % k for i, j in enumerate(order)})
