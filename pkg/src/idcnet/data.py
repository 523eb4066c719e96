"""Patch dataset handling: discovery, decoding, splits, and batching.

The on-disk layout is the public IDC one: one directory per patient with
``0/`` and ``1/`` subdirectories of 50x50 RGB patches whose filenames encode
patient, slide coordinates, and label, e.g. ``10253_idx5_x1351_y1101_class0.png``.
Slightly short patches (down to 48 pixels a side) are zero-padded at the
bottom/right; every image is then per-image standardized (global mean 0,
std 1).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor

PATCH_SIZE = 50
MIN_PATCH_SIZE = 48

PATCH_NAME_RE = re.compile(
    r"^(?P<patient>[A-Za-z0-9]+)_idx5_x(?P<x>\d+)_y(?P<y>\d+)_class(?P<label>[01])\.png$",
    re.IGNORECASE,
)


class DatasetError(RuntimeError):
    """Unreadable or structurally broken dataset content."""


@dataclass(frozen=True)
class PatchRecord:
    patient_id: str
    x: int
    y: int
    label: int
    path: str

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"patch coordinates must be non-negative, got ({self.x}, {self.y})")
        if self.label not in (0, 1):
            raise ValueError(f"patch label must be 0 or 1, got {self.label}")


def parse_patch_path(path) -> PatchRecord:
    """Extract patient/coordinates/label from a patch filename."""
    name = Path(path).name
    m = PATCH_NAME_RE.match(name)
    if m is None:
        raise ValueError(f"not a patch filename: {name!r}")
    return PatchRecord(
        patient_id=m.group("patient"),
        x=int(m.group("x")),
        y=int(m.group("y")),
        label=int(m.group("label")),
        path=str(path),
    )


def scan_dataset(root) -> tuple[list[PatchRecord], list[str]]:
    """Walk a dataset root; returns (records, skipped-file report).

    Files that do not match the patch naming convention are reported, never
    silently dropped.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    records: list[PatchRecord] = []
    skipped: list[str] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        try:
            records.append(parse_patch_path(path))
        except ValueError:
            skipped.append(str(path))
    return records, skipped


def pad_to_canonical(image: np.ndarray) -> np.ndarray:
    """Zero-pad a slightly short patch at the bottom/right to 50x50."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if not (MIN_PATCH_SIZE <= h <= PATCH_SIZE and MIN_PATCH_SIZE <= w <= PATCH_SIZE):
        raise ValueError(
            f"patch must be between {MIN_PATCH_SIZE} and {PATCH_SIZE} pixels a side, "
            f"got {h}x{w}"
        )
    if h == PATCH_SIZE and w == PATCH_SIZE:
        return image
    return np.pad(image, ((0, PATCH_SIZE - h), (0, PATCH_SIZE - w), (0, 0)))


def normalize_image(image: np.ndarray, per_channel: bool = False) -> np.ndarray:
    """Center to mean 0 and scale to std 1 (population), channel-first out.

    A constant image maps to zeros instead of dividing by ~0.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise ValueError(f"expected a {PATCH_SIZE}x{PATCH_SIZE}x3 image, got {img.shape}")
    chw = img.transpose(2, 0, 1)
    axes = (1, 2) if per_channel else None
    mean = chw.mean(axis=axes, keepdims=per_channel)
    std = chw.std(axis=axes, keepdims=per_channel)
    centered = chw - mean
    if per_channel:
        out = np.where(std < 1e-8, 0.0, centered / np.maximum(std, 1e-8))
    else:
        out = np.zeros_like(chw) if std < 1e-8 else centered / std
    return np.ascontiguousarray(out, dtype=np.float32)


def decode_patch(path) -> np.ndarray:
    """Read a patch file to a padded 50x50x3 uint8 array."""
    try:
        with Image.open(path) as im:
            raw = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DatasetError(f"patch file missing: {path}") from None
    except Exception as e:
        raise DatasetError(f"cannot decode patch file {path}: {e}") from e
    return pad_to_canonical(raw)


def load_patch(path, per_channel: bool = False) -> np.ndarray:
    """Decode -> pad -> scale to [0, 1] -> standardize; returns (3, 50, 50)."""
    return normalize_image(decode_patch(path).astype(np.float32) / 255.0, per_channel)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    """Disjoint train/val/test record sets; train and val are class-balanced.

    ``excluded`` is only populated by patient-level splits, where balancing
    inside patient groups can strand majority-class patches that cannot move
    to another split without leaking a patient.
    """

    train: list[PatchRecord]
    val: list[PatchRecord]
    test: list[PatchRecord]
    seed: int
    excluded: list[PatchRecord] = field(default_factory=list)

    def class_counts(self) -> dict[str, tuple[int, int]]:
        def count(records):
            pos = sum(r.label for r in records)
            return (len(records) - pos, pos)
        return {"train": count(self.train), "val": count(self.val), "test": count(self.test)}

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": [r.path for r in self.train],
            "val": [r.path for r in self.val],
            "test": [r.path for r in self.test],
            "excluded": [r.path for r in self.excluded],
            "class_counts": {k: list(v) for k, v in self.class_counts().items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SplitPlan":
        d = json.loads(Path(path).read_text())
        def parse_all(paths):
            return [parse_patch_path(p) for p in paths]
        return cls(
            train=parse_all(d["train"]),
            val=parse_all(d["val"]),
            test=parse_all(d["test"]),
            seed=int(d["seed"]),
            excluded=parse_all(d.get("excluded", [])),
        )


def _balanced_take(pos_idx: list[int], neg_idx: list[int], n: int) -> tuple[list[int], list[int]]:
    """Index lists for a balanced subset of size n (odd n gives class 0 the
    extra record)."""
    n_pos = n // 2
    n_neg = n - n_pos
    return pos_idx[:n_pos], neg_idx[:n_neg]


def make_split(records: Sequence[PatchRecord], seed: int,
               train_size: int | None = None, val_size: int | None = None,
               train_frac: float | None = None, val_frac: float | None = None,
               patient_level: bool = False) -> SplitPlan:
    """Deterministic balanced-train/balanced-val/natural-test split.

    Sizes may be absolute or fractions of the record count. Balancing
    subsamples the majority class; everything not drawn into train or val
    becomes the test set, keeping its natural class imbalance.
    """
    records = list(records)
    total = len(records)
    if total == 0:
        raise ValueError("make_split: no records")
    if train_size is None:
        if train_frac is None:
            raise ValueError("make_split: need train_size or train_frac")
        train_size = int(round(train_frac * total))
    if val_size is None:
        if val_frac is None:
            raise ValueError("make_split: need val_size or val_frac")
        val_size = int(round(val_frac * total))
    if train_size < 2 or val_size < 2:
        raise ValueError(f"make_split: train and val need >= 2 records each, "
                         f"got {train_size}/{val_size}")

    if patient_level:
        return _patient_level_split(records, seed, train_size, val_size)

    rng = np.random.default_rng(seed)
    labels = np.fromiter((r.label for r in records), dtype=np.int8, count=total)
    pos = rng.permutation(np.flatnonzero(labels == 1)).tolist()
    neg = rng.permutation(np.flatnonzero(labels == 0)).tolist()

    need_pos = train_size // 2 + val_size // 2
    need_neg = (train_size - train_size // 2) + (val_size - val_size // 2)
    if need_pos > len(pos) or need_neg > len(neg):
        max_bal = 2 * min(len(pos), len(neg))
        raise ValueError(
            f"make_split: balanced sizes infeasible: have {len(pos)} positive and "
            f"{len(neg)} negative records; at most {max_bal} balanced records are "
            f"available for train+val combined"
        )

    tr_pos, tr_neg = _balanced_take(pos, neg, train_size)
    va_pos, va_neg = _balanced_take(pos[len(tr_pos):], neg[len(tr_neg):], val_size)
    used = set(tr_pos) | set(tr_neg) | set(va_pos) | set(va_neg)
    test_idx = [i for i in range(total) if i not in used]
    return SplitPlan(
        train=[records[i] for i in sorted(tr_pos + tr_neg)],
        val=[records[i] for i in sorted(va_pos + va_neg)],
        test=[records[i] for i in test_idx],
        seed=seed,
    )


def _patient_level_split(records: list[PatchRecord], seed: int,
                         train_size: int, val_size: int) -> SplitPlan:
    """Patient-disjoint variant: whole patients are assigned to a split,
    then train/val are balanced by dropping majority-class surplus into
    ``excluded`` (not into test, which would leak the patient)."""
    rng = np.random.default_rng(seed)
    by_patient: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_patient.setdefault(r.patient_id, []).append(i)
    patients = sorted(by_patient)
    rng.shuffle(patients)

    groups: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    targets = {"train": train_size, "val": val_size}
    for patient in patients:
        idx = by_patient[patient]
        if len(groups["train"]) < targets["train"]:
            groups["train"].extend(idx)
        elif len(groups["val"]) < targets["val"]:
            groups["val"].extend(idx)
        else:
            groups["test"].extend(idx)

    excluded: list[int] = []

    def balance(idx_list: list[int]) -> list[int]:
        pos = [i for i in idx_list if records[i].label == 1]
        neg = [i for i in idx_list if records[i].label == 0]
        keep = min(len(pos), len(neg))
        if keep == 0:
            raise ValueError("make_split: a patient-level split has a single-class "
                             "train or val set; choose different sizes or seed")
        rng.shuffle(pos)
        rng.shuffle(neg)
        excluded.extend(pos[keep:])
        excluded.extend(neg[keep:])
        return sorted(pos[:keep] + neg[:keep])

    train = balance(groups["train"])
    val = balance(groups["val"])
    return SplitPlan(
        train=[records[i] for i in train],
        val=[records[i] for i in val],
        test=[records[i] for i in sorted(groups["test"])],
        seed=seed,
        excluded=[records[i] for i in sorted(excluded)],
    )


# ---------------------------------------------------------------------------
# datasets and batching


class ArrayDataset:
    """In-memory dataset of normalized (3, 50, 50) images."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images vs {len(labels)} labels")
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def load(self, i: int) -> np.ndarray:
        return self.images[i]


class PatchDataset:
    """File-backed dataset over patch records, with optional in-memory cache."""

    def __init__(self, records: Sequence[PatchRecord], cache: bool = False,
                 per_channel: bool = False):
        self.records = list(records)
        self.labels = np.fromiter((r.label for r in self.records), dtype=np.int64,
                                  count=len(self.records))
        self.per_channel = per_channel
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def load(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        img = load_patch(self.records[i].path, self.per_channel)
        if self._cache is not None:
            self._cache[i] = img
        return img


def batches(dataset, batch_size: int, epoch_seed: int) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Shuffled mini-batches covering the dataset once; the last batch may be
    short. The order is a pure function of ``epoch_seed``."""
    if batch_size < 1:
        raise ValueError(f"batches: batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = np.stack([dataset.load(i) for i in idx])
        yield Tensor(x), dataset.labels[idx]


# ---------------------------------------------------------------------------
# synthetic data (testing and smoke runs)


def synthetic_patch(label: int, rng: np.random.Generator) -> np.ndarray:
    """One 50x50x3 uint8 patch: noisy background plus a class-colored blob
    (blue-ish for 0, red-ish for 1). Linearly separable by color."""
    img = rng.integers(96, 160, size=(PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
    cy, cx = rng.integers(15, 35, size=2)
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE]
    blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= rng.integers(8, 13) ** 2
    strong, weak = (0, 2) if label == 1 else (2, 0)
    img[blob, strong] = 230
    img[blob, weak] = 40
    img[blob, 1] = 60
    return img


def synthetic_dataset(n: int, seed: int) -> ArrayDataset:
    """Balanced in-memory synthetic set, already normalized."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = np.stack([
        normalize_image(synthetic_patch(int(label), rng).astype(np.float32) / 255.0)
        for label in labels
    ])
    return ArrayDataset(images, labels)


def write_synthetic_dataset(root, n: int, seed: int, patients: int = 2) -> list[PatchRecord]:
    """Materialize a synthetic set as PNG files in the standard layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = i % 2
        patient = f"9{i % patients:04d}"
        x, y = (i // patients) * PATCH_SIZE, (i % patients) * PATCH_SIZE
        directory = root / patient / str(label)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{patient}_idx5_x{x}_y{y}_class{label}.png"
        Image.fromarray(synthetic_patch(label, rng)).save(path)
        records.append(parse_patch_path(path))
    return records
