"""Datasets: Gaussian blobs, IDX image files, and class-to-task assignment.

IDX layout (big-endian)::

    offset 0  u8 0, u8 0, u8 type (0x08 = unsigned byte), u8 ndim
    offset 4  ndim x u32 dimension sizes
    then      row-major unsigned bytes

Images use magic 0x00000803 ([count, rows, cols]); labels use 0x00000801.

The blob cache is a raw little-endian float64 matrix (``<name>.bin``)
next to a JSON manifest (``<name>.json``) holding shapes, labels file and
the generator parameters.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .taskpool import TaskSpec

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (len(inputs),):
            raise ValueError(f"inputs {inputs.shape} and labels {labels.shape} do not align")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, classes) -> "Dataset":
        mask = np.isin(self.labels, list(classes))
        return Dataset(self.inputs[mask], self.labels[mask], self.split)


# ---------------------------------------------------------------------------
# synthetic blobs


def generate_blobs(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    class_separation: float,
    noise_sigma: float,
    seed: int,
    max_tries: int = 1000,
) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters around centres on a sphere.

    Centres lie on a sphere of radius ``class_separation * sqrt(num_classes)``
    and are redrawn until every pair is at least ``class_separation`` apart.
    Each class is split 80/20 into train and test.
    """
    if num_classes < 1 or dim < 1 or samples_per_class < 2:
        raise ValueError("need num_classes >= 1, dim >= 1 and samples_per_class >= 2")
    if class_separation <= 0 or noise_sigma < 0:
        raise ValueError("class_separation must be positive and noise_sigma non-negative")
    rng = np.random.default_rng(seed)
    radius = class_separation * np.sqrt(num_classes)
    centers: list[np.ndarray] = []
    for c in range(num_classes):
        for _ in range(max_tries):
            v = rng.standard_normal(dim)
            v *= radius / np.linalg.norm(v)
            if all(np.linalg.norm(v - u) >= class_separation for u in centers):
                centers.append(v)
                break
        else:
            raise ValueError(
                f"could not place class {c} at separation {class_separation} in {dim} dims "
                f"after {max_tries} tries"
            )
    n_test = max(1, int(round(0.2 * samples_per_class)))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c, center in enumerate(centers):
        pts = center + noise_sigma * rng.standard_normal((samples_per_class, dim))
        tr_x.append(pts[n_test:])
        te_x.append(pts[:n_test])
        tr_y.append(np.full(samples_per_class - n_test, c))
        te_y.append(np.full(n_test, c))
    meta = {
        "kind": "blobs",
        "num-classes": num_classes,
        "dim": dim,
        "samples-per-class": samples_per_class,
        "class-separation": class_separation,
        "noise-sigma": noise_sigma,
        "seed": seed,
        "centers": np.array(centers).tolist(),
    }
    train = Dataset(np.concatenate(tr_x), np.concatenate(tr_y), "train", meta)
    test = Dataset(np.concatenate(te_x), np.concatenate(te_y), "test", meta)
    return train, test


def save_cache(dataset: Dataset, directory, name: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or dataset.split
    (directory / f"{name}.bin").write_bytes(np.ascontiguousarray(dataset.inputs, dtype="<f8").tobytes())
    manifest = {
        "split": dataset.split,
        "rows": len(dataset),
        "dim": dataset.dim,
        "dtype": "float64-le",
        "labels": dataset.labels.tolist(),
        "generator": {k: v for k, v in dataset.meta.items() if k != "centers"},
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest) + "\n")
    return path


def load_cache(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    raw = manifest_path.with_suffix(".bin").read_bytes()
    rows, dim = manifest["rows"], manifest["dim"]
    if len(raw) != 8 * rows * dim:
        raise FormatError(f"{manifest_path.with_suffix('.bin')}: expected {8 * rows * dim} bytes, found {len(raw)}")
    inputs = np.frombuffer(raw, dtype="<f8").reshape(rows, dim)
    return Dataset(inputs, manifest["labels"], manifest["split"], manifest.get("generator", {}))


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, name: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{name}: file too short for the magic number at offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"{name}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{name}: truncated dimension table at offset 4")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(
            f"{name}: header declares {count} data bytes at offset {header}, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(labels) != len(images):
        raise FormatError(
            f"{labels_path}: label count {len(labels)} at offset 4 does not match image count {len(images)}"
        )
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    meta = {"kind": "idx", "image-shape": list(images.shape[1:])}
    return Dataset(inputs, labels.astype(np.int64), split, meta)


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be [count, rows, cols], got {images.shape}")
    header = struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# protocol split


@dataclass(frozen=True)
class TaskAssignment:
    tasks: tuple[TaskSpec, ...]
    seed: int

    @property
    def base(self) -> TaskSpec:
        return self.tasks[0]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "tasks": [t.to_dict() for t in self.tasks]}


def base_class_count(num_classes: int, base_fraction: float) -> int:
    # round half up, so 0.5 * odd counts resolves predictably
    return int(np.floor(num_classes * base_fraction + 0.5))


def assign_tasks(num_classes: int, base_fraction: float, num_increments: int, seed: int | None) -> TaskAssignment:
    """Shuffle classes with ``seed`` (``None`` keeps natural order), then slice.

    The first slice forms the base task; the rest is cut into
    ``num_increments`` equal tasks.
    """
    base = base_class_count(num_classes, base_fraction)
    if not 1 <= base <= num_classes:
        raise ValueError(f"base task would hold {base} of {num_classes} classes")
    rest = num_classes - base
    if num_increments < 0 or (num_increments == 0 and rest) or (num_increments and rest % num_increments):
        raise ValueError(f"{rest} remaining classes cannot be split into {num_increments} equal increments")
    order = np.arange(num_classes)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(num_classes)
    tasks = [TaskSpec(0, tuple(int(c) for c in order[:base]))]
    if num_increments:
        per = rest // num_increments
        for t in range(num_increments):
            chunk = order[base + t * per : base + (t + 1) * per]
            tasks.append(TaskSpec(t + 1, tuple(int(c) for c in chunk)))
    return TaskAssignment(tuple(tasks), -1 if seed is None else int(seed))
