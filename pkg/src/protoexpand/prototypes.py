"""Feature extractor, agglomerative grouping and class/group prototypes."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Mlp, Tape, Var, backward, forward, log_softmax, make_optimizer, norm

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    """Cosine similarity is undefined for a zero-norm vector."""


class ProvenanceError(ValueError):
    """Prototypes were built with a different extractor than the one supplied."""


def fingerprint_mlp(mlp: Mlp) -> str:
    return hashlib.sha256(mlp.dumps().encode()).hexdigest()[:16]


@dataclass
class FeatureExtractor:
    """A classifier whose penultimate activations serve as features."""

    backbone: Mlp
    train_accuracy: float | None = None

    @property
    def feature_layer(self) -> int:
        return len(self.backbone.layers) - 1

    @property
    def feature_dim(self) -> int:
        return self.backbone.layers[-2].weight.shape[1]

    @property
    def fingerprint(self) -> str:
        return fingerprint_mlp(self.backbone)

    def features(self, x, tape: Tape | None = None):
        return forward(self.backbone, x, tape, stop=self.feature_layer)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.backbone(x), axis=1)

    def to_dict(self) -> dict:
        return {"train_accuracy": self.train_accuracy, "weights": self.backbone.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureExtractor":
        return cls(Mlp.from_dict(doc["weights"]), doc.get("train_accuracy"))


@dataclass
class ClassifierTraining:
    epochs: int = 300
    lr: float = 5e-3
    batch: int = 64
    hidden: tuple = (64, 64)
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0


def fit_classifier(x, y, num_classes: int, config: ClassifierTraining, rng: np.random.Generator) -> Mlp:
    """Cross-entropy training of a tanh MLP ``d -> hidden... -> num_classes``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    net = Mlp.init([d, *config.hidden, num_classes], rng)
    params = net.arrays()
    opt = make_optimizer(config.optimizer, params, config.lr, config.momentum)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            tape = Tape()
            logits = forward(net, x[idx], tape, trainable=True)
            logp = log_softmax(logits)
            loss = -logp[np.arange(len(idx)), y[idx]].mean()
            grads = backward(tape, loss)
            g = [grads[p] for p in tape.params]
            if config.weight_decay:
                g = [gi + config.weight_decay * p for gi, p in zip(g, params)]
            opt.step(g)
    return net


def train_extractor(x, y, config: ClassifierTraining | None = None, rng=None,
                    num_classes: int | None = None) -> FeatureExtractor:
    """Train the guidance classifier; its penultimate layer gives the features."""
    config = config or ClassifierTraining()
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(np.unique(y)) < 2:
        raise ValueError("feature extractor needs at least two classes")
    if len(config.hidden) < 1:
        raise ValueError("extractor needs a hidden layer to expose features")
    num_classes = int(y.max()) + 1 if num_classes is None else num_classes
    net = fit_classifier(x, y, num_classes, config, rng)
    acc = float(np.mean(np.argmax(net(x), axis=1) == y))
    log.info("extractor training accuracy %.3f", acc)
    return FeatureExtractor(net, acc)


# ---------------------------------------------------------------------------
# clustering


def agglomerative_cluster(features, K: int) -> np.ndarray:
    """Average-linkage agglomerative clustering down to ``K`` groups.

    Distances are Euclidean. Among equally close pairs the one with the
    lexicographically smallest (smaller cluster id, larger cluster id) is
    merged first, where a cluster's id is its smallest member index.

    Returns:
        Group index per sample, numbered by order of each group's smallest
        member.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > n:
        raise ValueError(f"cannot form {K} groups from {n} samples")

    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    # Sum of pairwise distances between clusters; average = sum / (|A| |B|).
    link = dist.copy()
    size = np.ones(n)
    alive = np.ones(n, dtype=bool)
    assign = np.arange(n)
    np.fill_diagonal(link, np.inf)

    for _ in range(n - K):
        ids = np.flatnonzero(alive)
        sub = link[np.ix_(ids, ids)] / np.outer(size[ids], size[ids])
        np.fill_diagonal(sub, np.inf)
        best = sub.min()
        # Row-major scan over ids sorted ascending gives the lexicographic tie-break.
        ii, jj = np.nonzero(np.triu(sub == best, 1))
        a, b = ids[ii[0]], ids[jj[0]]
        link[a, :] += link[b, :]
        link[:, a] += link[:, b]
        link[a, a] = np.inf
        size[a] += size[b]
        alive[b] = False
        assign[assign == b] = a

    roots = np.flatnonzero(alive)  # ascending, and each root is its cluster's min index
    return np.searchsorted(roots, assign)


# ---------------------------------------------------------------------------
# prototypes


@dataclass
class ClassPrototypes:
    p_c: np.ndarray
    p_g: np.ndarray  # (K_c, feature_dim)
    group_sizes: list[int]
    members: np.ndarray | None = None  # group index per class sample

    @property
    def K(self) -> int:
        return len(self.p_g)


@dataclass
class PrototypeSet:
    K: int
    feature_dim: int
    extractor_fingerprint: str
    classes: dict[int, ClassPrototypes]
    warnings: list[str] = field(default_factory=list)

    def check_extractor(self, extractor: FeatureExtractor) -> None:
        if extractor.fingerprint != self.extractor_fingerprint:
            raise ProvenanceError(
                f"prototypes were built with extractor {self.extractor_fingerprint}, "
                f"got {extractor.fingerprint}"
            )

    def stacked(self, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-sample class prototypes, padded group prototypes and a group mask."""
        labels = np.asarray(labels, dtype=np.int64)
        kmax = max(c.K for c in self.classes.values())
        pc = np.empty((len(labels), self.feature_dim))
        pg = np.zeros((len(labels), kmax, self.feature_dim))
        mask = np.zeros((len(labels), kmax), dtype=bool)
        for lab in np.unique(labels):
            if int(lab) not in self.classes:
                raise KeyError(f"no prototypes for class {lab}")
            proto = self.classes[int(lab)]
            rows = labels == lab
            pc[rows] = proto.p_c
            pg[rows, : proto.K] = proto.p_g
            mask[rows, : proto.K] = True
        return pc, pg, mask

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "feature_dim": self.feature_dim,
            "extractor_fingerprint": self.extractor_fingerprint,
            "classes": {
                str(c): {
                    "p_c": p.p_c.tolist(),
                    "p_g": p.p_g.tolist(),
                    "group_sizes": list(p.group_sizes),
                }
                for c, p in sorted(self.classes.items())
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PrototypeSet":
        classes = {
            int(c): ClassPrototypes(
                np.array(p["p_c"], dtype=np.float64),
                np.array(p["p_g"], dtype=np.float64).reshape(len(p["p_g"]), -1),
                list(p["group_sizes"]),
            )
            for c, p in doc["classes"].items()
        }
        return cls(doc["K"], doc["feature_dim"], doc["extractor_fingerprint"], classes,
                   list(doc.get("warnings", [])))


def build_prototypes(x, y, extractor: FeatureExtractor, K: int = 3) -> PrototypeSet:
    """Class means and K group means per class in extractor feature space.

    A class with fewer than ``K`` samples gets ``K' = class size`` groups;
    this is reported through :mod:`warnings` and recorded on the result.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    feats = extractor.features(x)
    classes = {}
    notes = []
    for c in np.unique(y):
        f = feats[y == c]
        k = K
        if len(f) < K:
            k = len(f)
            msg = f"class {c} has {len(f)} samples < K={K}; using K={k}"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
        groups = agglomerative_cluster(f, k)
        p_g = np.stack([f[groups == j].mean(axis=0) for j in range(k)])
        classes[int(c)] = ClassPrototypes(
            f.mean(axis=0), p_g, [int(np.sum(groups == j)) for j in range(k)], groups
        )
    return PrototypeSet(K, extractor.feature_dim, extractor.fingerprint, classes, notes)


def dist_class(feature, p_c) -> float:
    """Euclidean distance from a feature to its class prototype."""
    return float(np.linalg.norm(np.asarray(feature, dtype=np.float64) - np.asarray(p_c, dtype=np.float64)))


def select_group(feature, p_g) -> int:
    """Index of the group prototype with the highest cosine similarity (first on ties)."""
    feature = np.asarray(feature, dtype=np.float64)
    p_g = np.atleast_2d(np.asarray(p_g, dtype=np.float64))
    fn = np.linalg.norm(feature)
    pn = np.linalg.norm(p_g, axis=1)
    if fn == 0.0 or np.any(pn == 0.0):
        raise DegenerateInputError("cosine similarity needs non-zero vectors")
    return int(np.argmax(p_g @ feature / (pn * fn)))


def dist_group(feature, p_g) -> tuple[float, int]:
    """Distance to the cosine-selected group prototype, and its index.

    The chosen prototype need not be the Euclidean-nearest one.
    """
    j = select_group(feature, p_g)
    return dist_class(feature, np.atleast_2d(p_g)[j]), j


def batched_select(features: np.ndarray, p_g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise :func:`select_group` for padded prototype stacks."""
    fn = np.linalg.norm(features, axis=1)
    pn = np.linalg.norm(p_g, axis=2)
    if np.any(fn == 0.0) or np.any(pn[mask] == 0.0):
        raise DegenerateInputError("cosine similarity needs non-zero vectors")
    cos = np.einsum("nkd,nd->nk", p_g, features) / (np.where(mask, pn, 1.0) * fn[:, None])
    cos = np.where(mask, cos, -np.inf)
    return np.argmax(cos, axis=1)


def hierarchical_distances(features, p_c, p_g, mask, tape: Tape | None = None):
    """Per-sample class and group distances for a batch of features.

    ``features`` may be a tape Var; the cosine selection itself is not
    differentiated.
    """
    value = features.value if isinstance(features, Var) else np.asarray(features)
    j = batched_select(value, p_g, mask)
    chosen = p_g[np.arange(len(j)), j]
    if isinstance(features, Var):
        return norm(features - p_c, axis=1), norm(features - chosen, axis=1), j
    return np.linalg.norm(value - p_c, axis=1), np.linalg.norm(value - chosen, axis=1), j
