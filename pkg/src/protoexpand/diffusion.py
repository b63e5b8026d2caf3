"""Noise schedule, epsilon-prediction denoiser and reverse samplers."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Mlp, Tape, Var, backward, concat, forward, make_optimizer, square

log = logging.getLogger(__name__)

NULL_LABEL = -1
RADICAND_TOL = 1e-12


class ConfigurationWarning(UserWarning):
    """A setting combination that runs but is probably not what was meant."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta diffusion schedule.

    ``alpha_bars[t]`` is the cumulative product up to step ``t`` with the
    convention ``alpha_bars[0] == 1`` (clean data), so arrays are indexed
    directly by step number ``0..T``.
    """

    betas: np.ndarray  # betas[t] for t in 1..T; betas[0] is 0 and unused
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return float(self._ab[t])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return float(self.betas[t])

    def __post_init__(self):
        object.__setattr__(self, "_ab", np.cumprod(1.0 - self.betas))

    def header(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    sched = NoiseSchedule(betas, beta_start, beta_end)
    ab = sched.alpha_bars[1:]
    if not (np.all(np.diff(ab) < 0) and ab[0] < 1.0 and ab[-1] > 0.0):
        raise ValueError("cumulative alphas are not strictly decreasing inside (0, 1)")
    return sched


def q_sample(x0, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    """Noise clean data to step ``t``: ``sqrt(ab) * x0 + sqrt(1 - ab) * noise``."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} != data shape {x0.shape}")
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def predict_x0(z_t, t: int, eps_hat, sched: NoiseSchedule):
    """Clean-point estimate from a noisy latent and a noise prediction.

    Works on plain arrays and on tape :class:`Var` values alike.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar(t)
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) * (1.0 / np.sqrt(ab))


def time_embedding(t, T: int, dim: int = 8) -> np.ndarray:
    """Sinusoidal features of ``t / T``; ``dim`` must be even."""
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    s = np.asarray(t, dtype=np.float64)[..., None] / T
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    return np.concatenate([np.sin(s * freqs), np.cos(s * freqs)], axis=-1)


@dataclass
class Denoiser:
    """Noise predictor ``eps(z_t, t, label)``.

    The network input is ``[z_t, time features, one-hot label]`` where the
    one-hot has ``num_classes + 1`` slots; the last slot is the null label
    used for the unconditional branch.
    """

    net: Mlp
    num_classes: int
    schedule: NoiseSchedule
    time_embed_dim: int = 8
    cfg_dropout: float = 0.1
    train_loss: float | None = None

    @property
    def dim(self) -> int:
        return self.net.output_dim

    def _condition(self, n: int, t, labels) -> np.ndarray:
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        if np.any((labels < NULL_LABEL) | (labels >= self.num_classes)):
            raise ValueError("label out of range")
        onehot = np.zeros((n, self.num_classes + 1))
        slot = np.where(labels == NULL_LABEL, self.num_classes, labels)
        onehot[np.arange(n), slot] = 1.0
        temb = np.broadcast_to(time_embedding(t, self.schedule.T, self.time_embed_dim), (n, self.time_embed_dim))
        return np.concatenate([temb, onehot], axis=1)

    def eps(self, z, t, labels, tape: Tape | None = None):
        """Noise prediction for a batch ``z`` of shape (n, d)."""
        value = z.value if isinstance(z, Var) else np.asarray(z, dtype=np.float64)
        if value.ndim != 2 or value.shape[1] != self.dim:
            raise ValueError(f"expected latents of shape (n, {self.dim}), got {value.shape}")
        cond = self._condition(value.shape[0], t, labels)
        if tape is None:
            return self.net(np.concatenate([value, cond], axis=1))
        return forward(self.net, concat([z, cond], axis=1), tape)

    def to_dict(self) -> dict:
        header = self.schedule.header() | {
            "num_classes": self.num_classes,
            "time_embed_dim": self.time_embed_dim,
            "cfg_dropout": self.cfg_dropout,
            "train_loss": self.train_loss,
        }
        return {"header": header, "weights": self.net.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Denoiser":
        h = doc["header"]
        return cls(
            Mlp.from_dict(doc["weights"]),
            h["num_classes"],
            build_schedule(h["T"], h["beta_start"], h["beta_end"]),
            h["time_embed_dim"],
            h.get("cfg_dropout", 0.1),
            h.get("train_loss"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "Denoiser":
        return cls.from_dict(json.loads(text))


def cfg_eps(denoiser: Denoiser, z, t, labels, scale: float, tape: Tape | None = None):
    """Classifier-free guided noise: ``uncond + scale * (cond - uncond)``.

    ``scale == 1`` returns the conditional branch and ``scale == 0`` the
    unconditional one without touching the other network pass.
    """
    if scale < 0:
        raise ValueError("guidance scale must be non-negative")
    labels = np.asarray(labels)
    if np.any(labels == NULL_LABEL):
        raise ValueError("classifier-free guidance needs a class label")
    if scale != 1.0 and denoiser.cfg_dropout == 0.0:
        warnings.warn(
            "denoiser was trained without label dropout; its unconditional branch is untrained",
            ConfigurationWarning,
            stacklevel=2,
        )
    if scale == 1.0:
        return denoiser.eps(z, t, labels, tape)
    uncond = denoiser.eps(z, t, NULL_LABEL, tape)
    if scale == 0.0:
        return uncond
    cond = denoiser.eps(z, t, labels, tape)
    return uncond + (cond - uncond) * scale


@dataclass
class DenoiserTraining:
    epochs: int = 200
    batch: int = 128
    lr: float = 2e-3
    cfg_dropout: float = 0.1
    hidden: tuple = (128, 128)
    time_embed_dim: int = 8
    optimizer: str = "adam"
    momentum: float = 0.9
    losses: list = field(default_factory=list)


def train_denoiser(x, y, sched: NoiseSchedule, config: DenoiserTraining, rng: np.random.Generator,
                   num_classes: int | None = None) -> Denoiser:
    """Fit an epsilon-prediction network by mean squared error.

    Labels are swapped for the null label with probability
    ``config.cfg_dropout`` so the same network also learns the
    unconditional score. Per-epoch mean losses are appended to
    ``config.losses``; the final-epoch mean is stored on the result.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("training set must be a non-empty (n, d) array")
    if not 0.0 <= config.cfg_dropout < 1.0:
        raise ValueError("cfg_dropout must lie in [0, 1)")
    n, d = x.shape
    num_classes = int(y.max()) + 1 if num_classes is None else num_classes
    dims = [d + config.time_embed_dim + num_classes + 1, *config.hidden, d]
    net = Mlp.init(dims, rng)
    den = Denoiser(net, num_classes, sched, config.time_embed_dim, config.cfg_dropout)
    opt = make_optimizer(config.optimizer, net.arrays(), config.lr, config.momentum)

    config.losses.clear()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            m = len(idx)
            t = rng.integers(1, sched.T + 1, size=m)
            noise = rng.standard_normal((m, d))
            ab = sched.alpha_bars[t][:, None]
            z = np.sqrt(ab) * x[idx] + np.sqrt(1.0 - ab) * noise
            labels = np.where(rng.random(m) < config.cfg_dropout, NULL_LABEL, y[idx])

            tape = Tape()
            cond = den._condition(m, t, labels)
            pred = forward(net, np.concatenate([z, cond], axis=1), tape, trainable=True)
            loss = square(pred - noise).mean()
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = backward(tape, loss)
            opt.step([grads[p] for p in tape.params])
            total += float(loss.value) * m
        config.losses.append(total / n)
    den.train_loss = config.losses[-1] if config.losses else None
    log.info("denoiser trained: final loss %.4f", den.train_loss or float("nan"))
    return den


def ddim_timesteps(T: int, n_steps: int = 50) -> np.ndarray:
    """Uniform-stride grid ``[0, T/n, 2T/n, ..., T]``; index i has i steps left."""
    if T % n_steps:
        raise ValueError("T must be a multiple of the number of sampling steps")
    return np.arange(0, T + 1, T // n_steps)


def _sqrt_nonneg(x: float, what: str) -> float:
    if x < 0.0:
        if x < -RADICAND_TOL:
            raise FloatingPointError(f"negative radicand {x:.3e} in {what}")
        x = 0.0
    return np.sqrt(x)


def ddim_step(z_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule, eta: float = 0.0, rng=None):
    """One DDIM update from step ``t`` down to ``t_prev`` (0 means clean)."""
    if not 0 <= t_prev < t:
        raise ValueError("need 0 <= t_prev < t")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0 = predict_x0(z_t, t, eps_hat, sched)
    sigma = 0.0
    if eta > 0:
        sigma = eta * _sqrt_nonneg((1.0 - ab_prev) / (1.0 - ab_t), "sigma") * \
            _sqrt_nonneg(1.0 - ab_t / ab_prev, "sigma")
    direction = _sqrt_nonneg(1.0 - ab_prev - sigma**2, "ddim direction")
    out = np.sqrt(ab_prev) * x0 + direction * eps_hat
    if sigma > 0:
        out = out + sigma * rng.standard_normal(np.shape(z_t))
    return out


def ancestral_step(z_next, t: int, score, sched: NoiseSchedule, rng=None):
    """The reverse update ``(1 + beta/2) z + beta * score + sqrt(beta) * noise``.

    Moves from step ``t + 1`` to ``t``. ``score`` is either the score value
    at ``(z_next, t + 1)`` or a callable computing it. No noise is added
    when ``t == 0``.
    """
    if not 0 <= t < sched.T:
        raise ValueError(f"step {t} outside [0, {sched.T})")
    beta = sched.beta(t + 1)
    if callable(score):
        score = score(z_next, t + 1)
    z_next = np.asarray(z_next, dtype=np.float64)
    out = (1.0 + 0.5 * beta) * z_next + beta * np.asarray(score)
    if t > 0:
        out = out + np.sqrt(beta) * rng.standard_normal(z_next.shape)
    return out


def score_from_eps(eps_hat, t: int, sched: NoiseSchedule):
    """Score estimate ``-eps / sqrt(1 - ab_t)``."""
    return -np.asarray(eps_hat) / np.sqrt(1.0 - sched.alpha_bar(t))
