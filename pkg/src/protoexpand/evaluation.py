"""Distribution-alignment metrics and downstream-classifier evaluation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .datasets import Dataset
from .prototypes import ClassifierTraining, FeatureExtractor, PrototypeSet, fit_classifier, hierarchical_distances

log = logging.getLogger(__name__)

PSD_TOL = 1e-8


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix."""
    m = 0.5 * (m + m.T)
    d = m.shape[0]
    if d == 1:
        if m[0, 0] < -PSD_TOL:
            raise FloatingPointError("matrix is not positive semi-definite")
        return np.sqrt(np.maximum(m, 0.0))
    if d == 2:
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        tr = m[0, 0] + m[1, 1]
        if det < -PSD_TOL or tr < -PSD_TOL:
            raise FloatingPointError("matrix is not positive semi-definite")
        s = np.sqrt(max(det, 0.0))
        denom = np.sqrt(max(tr + 2.0 * s, 0.0))
        if denom == 0.0:
            return np.zeros_like(m)
        return (m + s * np.eye(2)) / denom
    w, v = np.linalg.eigh(m)
    if w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise FloatingPointError("matrix is not positive semi-definite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Fréchet distance between two Gaussians given their moments.

    The cross term uses the symmetric form ``sqrt(sqrt(A) B sqrt(A))``,
    whose trace equals that of ``(A B)^(1/2)``.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(fd, 0.0)


def _moments(x: np.ndarray, ridge: float):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least two samples for a covariance")
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if n < d + 1:
        cov = cov + ridge * np.eye(d)
    return x.mean(axis=0), cov


def frechet_distance(a, b, ridge: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two sample sets."""
    mu_a, cov_a = _moments(a, ridge)
    mu_b, cov_b = _moments(b, ridge)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def median_bandwidth(a, b) -> float:
    pts = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)])
    return float(np.median(pdist(pts)))


def mmd2(a, b, bandwidth="median") -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel.

    ``k(x, y) = exp(-|x - y|^2 / (2 h^2))``; ``"median"`` sets ``h`` to the
    median pairwise distance over the pooled samples.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("mmd2 needs at least two samples per set")
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    if h <= 0:
        raise ValueError("degenerate kernel bandwidth (all points identical?)")

    def k(p, q):
        sq = ((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)
        return np.exp(-sq / (2.0 * h * h))

    return max(float(k(a, a).mean() + k(b, b).mean() - 2.0 * k(a, b).mean()), 0.0)


# ---------------------------------------------------------------------------
# downstream


@dataclass
class DownstreamResult:
    accuracies: list[float]
    seeds: list[int]
    n_train: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def sd(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "accuracies": self.accuracies,
                "seeds": self.seeds, "n_train": self.n_train}


def downstream_eval(train: Dataset, test: Dataset, config: ClassifierTraining | None = None,
                    seeds=(0, 1, 2), num_classes: int | None = None) -> DownstreamResult:
    """Train a fresh classifier per seed on ``train``; report test accuracy."""
    config = config or ClassifierTraining()
    if train.d != test.d:
        raise ValueError("train and test dimensions differ")
    num_classes = num_classes or int(max(train.y.max(), test.y.max())) + 1
    missing = set(test.classes) - set(train.classes)
    if missing:
        warnings.warn(f"classes {sorted(missing)} absent from the training set", stacklevel=2)
    accs = []
    for s in seeds:
        net = fit_classifier(train.x, train.y, num_classes, config, np.random.default_rng(s))
        accs.append(float(np.mean(np.argmax(net(test.x), axis=1) == test.y)))
    return DownstreamResult(accs, list(seeds), len(train))


# ---------------------------------------------------------------------------
# reports


def alignment(synthetic: Dataset, reference: Dataset, extractor: FeatureExtractor | None = None,
              space: str = "feature", max_samples: int = 3000, bandwidth="median",
              rng: np.random.Generator | None = None) -> dict:
    """Fréchet analog and MMD between two datasets, pooled over classes."""
    rng = rng or np.random.default_rng(0)

    def embed(ds: Dataset) -> np.ndarray:
        x = ds.x
        if len(x) > max_samples:
            x = x[np.sort(rng.choice(len(x), max_samples, replace=False))]
        if space == "feature":
            if extractor is None:
                raise ValueError("feature-space metrics need an extractor")
            return extractor.features(x)
        if space == "data":
            return x
        raise ValueError(f"unknown metric space {space!r}")

    a, b = embed(synthetic), embed(reference)
    return {"frechet": frechet_distance(a, b), "mmd2": mmd2(a, b, bandwidth),
            "n_synthetic": len(a), "n_reference": len(b), "space": space}


def energy_stats(ds: Dataset, extractor: FeatureExtractor, prototypes: PrototypeSet) -> dict:
    """Mean class and group distances of a dataset's features."""
    feats = extractor.features(ds.x)
    p_c, p_g, mask = prototypes.stacked(ds.y)
    d_c, d_g, _ = hierarchical_distances(feats, p_c, p_g, mask)
    return {"mean_dist_class": float(d_c.mean()), "mean_dist_group": float(d_g.mean())}


@dataclass
class MetricReport:
    frechet: float
    mmd2: float
    energy: dict
    downstream: dict
    config_fingerprint: str
    seed: int
    counts: dict = field(default_factory=dict)
    cell: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict:
        row = {f"cell.{k}": v for k, v in self.cell.items()}
        row.update({
            "seed": self.seed,
            "frechet": self.frechet,
            "mmd2": self.mmd2,
            "mean_dist_class": self.energy.get("mean_dist_class"),
            "mean_dist_group": self.energy.get("mean_dist_group"),
            "acc_original": self.downstream.get("acc_original"),
            "acc_expanded": self.downstream.get("acc_expanded"),
            "delta": self.downstream.get("delta"),
            "n_synthetic": self.counts.get("n_synthetic"),
            "n_reference": self.counts.get("n_reference"),
            "config_fingerprint": self.config_fingerprint,
        })
        return row
