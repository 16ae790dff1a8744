"""Synthetic target distributions, the RFDS file format, and energy distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from . import _binary
from .flow import GaussianMixtureOracle
from .rng import Stream

NAMES = ("gauss2", "moons", "shapes16")
SHAPE_CLASSES = ("disk", "ring", "cross", "checker")
_MAGIC = b"RFDS"
_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "gauss2"
    size: int = 10_000
    seed: int = 0
    centers: tuple[tuple[float, ...], ...] = ((-2.0, 0.0), (2.0, 0.0))
    sigma: float = 0.3
    noise: float = 0.05
    image_size: int = 16

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown dataset {self.name!r}; expected one of {NAMES}")
        if self.size <= 0:
            raise ValueError("dataset size must be positive")

    @property
    def num_classes(self) -> int:
        """Conditional classes, excluding the null class."""
        if self.name == "gauss2":
            return len(self.centers)
        if self.name == "moons":
            return 2
        return len(SHAPE_CLASSES)

    @property
    def dim(self) -> int:
        if self.name == "gauss2":
            return len(self.centers[0])
        if self.name == "moons":
            return 2
        return self.image_size**2

    def oracle(self) -> GaussianMixtureOracle:
        if self.name != "gauss2":
            raise ValueError("only gauss2 has a closed-form flow oracle")
        c = np.asarray(self.centers, dtype=np.float64)
        return GaussianMixtureOracle(c, np.full_like(c, self.sigma**2))


@dataclass
class Dataset:
    x: np.ndarray  # (count, dim) float32
    class_ids: np.ndarray  # (count,) uint32, starting at 1
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.class_ids, other.class_ids)
        )

    def class_samples(self, class_id: int) -> np.ndarray:
        return self.x[self.class_ids == class_id].astype(np.float64)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    rng = Stream(spec.seed, stream_id=0xDA7A)
    n = spec.size
    if spec.name == "gauss2":
        centers = np.asarray(spec.centers, dtype=np.float64)
        cls = rng.integers(len(centers), n)
        x = centers[cls] + spec.sigma * rng.normal((n, centers.shape[1]))
    elif spec.name == "moons":
        cls = rng.integers(2, n)
        ang = np.pi * rng.uniform(n)
        upper = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        lower = np.stack([1.0 - np.cos(ang), 0.5 - np.sin(ang)], axis=1)
        x = np.where(cls[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
        x = x + spec.noise * rng.normal((n, 2))
    else:
        cls = rng.integers(len(SHAPE_CLASSES), n)
        x = np.stack([_shape_image(SHAPE_CLASSES[c], spec.image_size, rng) for c in cls])
    return Dataset(x.astype(np.float32), (cls + 1).astype(np.uint32), spec.num_classes, {"name": spec.name})


def _shape_image(kind: str, w: int, rng: Stream) -> np.ndarray:
    """Anti-aliased procedural shape in [-1, 1], background -1."""
    jitter = rng.uniform(2, low=-1.5, high=1.5)
    size = rng.uniform()
    cx, cy = (w - 1) / 2 + jitter[0], (w - 1) / 2 + jitter[1]
    ys, xs = np.mgrid[0:w, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    dist = np.hypot(dx, dy)
    if kind == "disk":
        radius = 3.0 + 2.5 * size
        cover = np.clip(0.5 + radius - dist, 0.0, 1.0)
    elif kind == "ring":
        radius = 4.0 + 2.0 * size
        cover = np.clip(0.5 + 1.0 - np.abs(dist - radius), 0.0, 1.0)
    elif kind == "cross":
        half_len, half_w = 4.0 + 2.5 * size, 1.0
        arm_h = np.minimum(0.5 + half_w - np.abs(dy), 0.5 + half_len - np.abs(dx))
        arm_v = np.minimum(0.5 + half_w - np.abs(dx), 0.5 + half_len - np.abs(dy))
        cover = np.clip(np.maximum(arm_h, arm_v), 0.0, 1.0)
    elif kind == "checker":
        cell = 3.0 + 2.0 * size
        cover = 0.5 + 0.5 * np.tanh(4.0 * np.sin(np.pi * dx / cell) * np.sin(np.pi * dy / cell))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return (2.0 * cover - 1.0).ravel()


def energy_distance(a, b, chunk: int = 2048) -> float:
    """V-statistic ``2 E|a-b| - E|a-a'| - E|b-b'|`` over all pairs."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")

    def mean_dist(p, q):
        total = 0.0
        for i in range(0, len(p), chunk):
            total += cdist(p[i : i + chunk], q).sum()
        return total / (len(p) * len(q))

    value = 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
    return max(value, 0.0)


def dataset_bytes(ds: Dataset) -> bytes:
    x = np.ascontiguousarray(ds.x, dtype="<f4")
    count, dim = x.shape
    head = _MAGIC + _binary.u32(_VERSION) + _binary.u32(dim) + _binary.u32(count) + _binary.u32(ds.num_classes)
    rec = np.empty(count, dtype=[("cls", "<u4"), ("x", "<f4", (dim,))])
    rec["cls"] = ds.class_ids
    rec["x"] = x
    return head + rec.tobytes()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    r = _binary.Reader(data, str(path))
    r.magic(_MAGIC)
    r.version(_VERSION)
    dim, count, num_classes = r.u32(), r.u32(), r.u32()
    dtype = np.dtype([("cls", "<u4"), ("x", "<f4", (dim,))])
    body = r.take(dtype.itemsize * count)
    r.finish()
    rec = np.frombuffer(body, dtype=dtype)
    return Dataset(rec["x"].astype(np.float32), rec["cls"].astype(np.uint32), num_classes)
