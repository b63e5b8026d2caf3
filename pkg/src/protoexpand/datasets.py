"""Dataset container, CSV/JSON file format and built-in toy generators."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROVENANCES = ("original", "synthetic", "merged")


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Labelled points ``x`` (n, d) with integer labels ``y``.

    ``source`` holds, for each synthetic sample, the index of the original
    sample it was generated from, and -1 for original samples.
    """

    x: np.ndarray
    y: np.ndarray
    class_names: list[str] | None = None
    provenance: str = "original"
    source: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise ValueError("samples must be a 2-D array")
        if len(self.x) != len(self.y):
            raise ValueError("samples and labels differ in length")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.source is None:
            self.source = np.full(len(self.y), -1, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.int64)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def __len__(self) -> int:
        return len(self.y)

    def select(self, mask) -> "Dataset":
        return Dataset(self.x[mask], self.y[mask], self.class_names, self.provenance,
                       self.source[mask], dict(self.meta))

    def merge(self, other: "Dataset") -> "Dataset":
        if other.d != self.d:
            raise ValueError("cannot merge datasets of different dimension")
        return Dataset(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            self.class_names,
            "merged",
            np.concatenate([self.source, other.source]),
        )

    def metadata(self) -> dict:
        doc = {
            "d": self.d,
            "classes": self.classes,
            "class_names": self.class_names,
            "provenance": self.provenance,
            "n": len(self),
        }
        if np.any(self.source >= 0):
            doc["seed_map"] = self.source.tolist()
        return doc | self.meta

    def write(self, path) -> None:
        """Write ``path`` (CSV) and its ``.json`` metadata sidecar."""
        path = Path(path)
        write_csv(path, self.x, self.y)
        path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=1, sort_keys=True))

    @classmethod
    def read(cls, path) -> "Dataset":
        path = Path(path)
        x, y = read_csv(path)
        meta_path = path.with_suffix(".json")
        if not meta_path.exists():
            return cls(x, y)
        meta = json.loads(meta_path.read_text())
        if meta.get("d", x.shape[1]) != x.shape[1]:
            raise DataFormatError("metadata dimension disagrees with CSV columns")
        extra = {k: v for k, v in meta.items()
                 if k not in ("d", "classes", "class_names", "provenance", "n", "seed_map")}
        return cls(x, y, meta.get("class_names"), meta.get("provenance", "original"),
                   meta.get("seed_map"), extra)


def _fmt(v: float) -> str:
    return format(v, ".17g")


def write_csv(path, x, y) -> None:
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"x{i}" for i in range(x.shape[1])])
        for xi, yi in zip(x, y):
            w.writerow([str(int(yi))] + [_fmt(v) for v in xi])


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a ``label,x0,...`` file; errors name the offending line."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "label":
        raise DataFormatError(f"{path}:1: header must start with 'label'")
    expected = [f"x{i}" for i in range(len(header) - 1)]
    if header[1:] != expected or not expected:
        raise DataFormatError(f"{path}:1: header must be label,x0,...,x{{d-1}}")
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ys.append(int(row[0]))
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise DataFormatError(f"{path}:{lineno}: non-finite value")
        xs.append(vals)
    if not xs:
        raise DataFormatError(f"{path}: no samples")
    return np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64)


# ---------------------------------------------------------------------------
# generators


def make_blobs(centers, n_per_cluster: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    pts = [c + spread * rng.standard_normal((n_per_cluster, centers.shape[1])) for c in centers]
    return np.concatenate(pts)


def mixture_dataset(num_classes=3, clusters_per_class=2, dim=2, n_per_class=20, spread=0.25,
                    radius=2.0, seed=0) -> Dataset:
    """Gaussian-mixture blobs; each class owns ``clusters_per_class`` modes."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-radius, radius, (num_classes, clusters_per_class, dim))
    xs, ys = [], []
    for c in range(num_classes):
        which = rng.integers(0, clusters_per_class, n_per_class)
        xs.append(centers[c, which] + spread * rng.standard_normal((n_per_class, dim)))
        ys.append(np.full(n_per_class, c))
    return Dataset(np.concatenate(xs), np.concatenate(ys), meta={"generator": "mixture"})


@dataclass
class ShiftScenario:
    """A broad diffusion training set and a narrower target task.

    Each class sits on a ring of ``num_modes`` modes. The target task uses
    only every other mode of its class, with a tight spread; the diffusion
    model is trained on all modes with a wider spread, so plain
    regeneration drifts away from the target manifold.
    """

    diffusion_train: Dataset
    target_train: Dataset
    target_test: Dataset
    target_centers: np.ndarray  # (classes, kept modes, dim)


def shift_scenario(num_classes=3, n_per_class=20, n_test_per_class=300, n_diffusion_per_class=1500,
                   num_modes=6, ring_radius=2.0, class_offset=2.5, target_spread=0.15,
                   broad_spread=0.35, dim=2, scale=1.0, seed=0) -> ShiftScenario:
    """Build the distribution-shift scenario (2-D by default).

    Class ``c`` has mode centres on a ring of radius ``ring_radius`` around
    an anchor placed ``class_offset`` from the origin; target data occupies
    modes 0, 2, 4, ... only. ``scale`` multiplies every length.
    """
    ring_radius, class_offset = scale * ring_radius, scale * class_offset
    target_spread, broad_spread = scale * target_spread, scale * broad_spread
    if dim < 2:
        raise ValueError("shift scenario needs at least two dimensions")
    rng = np.random.default_rng(seed)
    anchors = np.zeros((num_classes, dim))
    ang = 2 * np.pi * np.arange(num_classes) / num_classes
    anchors[:, 0] = class_offset * np.cos(ang)
    anchors[:, 1] = class_offset * np.sin(ang)
    phase = 2 * np.pi * np.arange(num_modes) / num_modes
    centers = np.zeros((num_classes, num_modes, dim))
    for c in range(num_classes):
        centers[c, :, 0] = anchors[c, 0] + ring_radius * np.cos(phase + ang[c])
        centers[c, :, 1] = anchors[c, 1] + ring_radius * np.sin(phase + ang[c])
    kept = centers[:, ::2]

    def draw(cent, n, spread):
        xs, ys = [], []
        for c in range(num_classes):
            which = rng.integers(0, cent.shape[1], n)
            xs.append(cent[c, which] + spread * rng.standard_normal((n, dim)))
            ys.append(np.full(n, c))
        return np.concatenate(xs), np.concatenate(ys)

    meta = {"generator": "shift", "seed": seed}
    broad = Dataset(*draw(centers, n_diffusion_per_class, broad_spread), meta=meta | {"role": "diffusion"})
    train = Dataset(*draw(kept, n_per_class, target_spread), meta=meta | {"role": "train"})
    test = Dataset(*draw(kept, n_test_per_class, target_spread), meta=meta | {"role": "test"})
    return ShiftScenario(broad, train, test, kept)
