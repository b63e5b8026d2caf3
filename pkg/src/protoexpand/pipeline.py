"""Dataset expansion: partial noising, guided reverse sampling, assembly."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .diffusion import (
    Denoiser,
    ancestral_step,
    cfg_eps,
    ddim_step,
    ddim_timesteps,
    q_sample,
    score_from_eps,
)
from .guidance import EnergyModel, GuidanceConfig, TransformParams, guided_update
from .prototypes import FeatureExtractor, PrototypeSet

log = logging.getLogger(__name__)

SAMPLERS = ("ddim", "ancestral")


@dataclass
class SamplerConfig:
    n_steps: int = 50
    strength: float = 0.5
    cfg_scale: float = 7.5
    eta: float = 0.0
    sampler: str = "ddim"

    def validate(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.cfg_scale < 0 or self.eta < 0:
            raise ValueError("cfg_scale and eta must be non-negative")


@dataclass
class ExpansionModels:
    denoiser: Denoiser
    extractor: FeatureExtractor | None = None
    prototypes: PrototypeSet | None = None

    def energy_model(self, cfg_scale: float) -> EnergyModel:
        if self.extractor is None or self.prototypes is None:
            raise ValueError("guidance needs an extractor and prototypes")
        return EnergyModel(self.denoiser, self.extractor, self.prototypes, cfg_scale)


class RowRngs:
    """Stack of per-sample generators that draws one row from each.

    Lets batched code consume randomness exactly as if every sample were
    processed alone, so outputs do not depend on how samples are batched.
    """

    def __init__(self, rngs):
        self.rngs = list(rngs)

    def _draw(self, method: str, shape):
        shape = tuple(np.atleast_1d(shape))
        if shape[0] != len(self.rngs):
            raise ValueError("leading dimension must equal the number of generators")
        return np.stack([getattr(r, method)(shape[1:]) for r in self.rngs])

    def standard_normal(self, shape):
        return self._draw("standard_normal", shape)

    def random(self, shape):
        return self._draw("random", shape)


def sample_rng(seed: int, index: int, replica: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, replica])


def start_index(strength: float, n_steps: int) -> int:
    """Grid index to noise a seed to; 0 only when strength is 0."""
    if strength <= 0:
        return 0
    return max(1, min(n_steps, int(np.floor(strength * n_steps + 0.5))))


@dataclass
class Telemetry:
    sample_id: int
    guided_steps: list
    energy_before: list
    energy_after: list
    clipped_fraction: list
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "guided_steps": self.guided_steps,
            "energy_before": self.energy_before,
            "energy_after": self.energy_after,
            "clipped_fraction": self.clipped_fraction,
            "fallback": self.fallback,
        }


def expand_batch(x, y, models: ExpansionModels, sampler: SamplerConfig, guidance: GuidanceConfig,
                 rng, ids=None):
    """Regenerate every row of ``x`` once.

    ``rng`` is a generator or :class:`RowRngs`. Randomness is consumed in a
    fixed order per row: start noise, then per guided step the transform
    draws, then any sampler noise for that step.

    Returns:
        ``(new_x, telemetry)`` with one :class:`Telemetry` per row.
    """
    sampler.validate()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    ids = np.arange(n) if ids is None else np.asarray(ids)
    tele = [Telemetry(int(i), [], [], [], []) for i in ids]
    k = start_index(sampler.strength, sampler.n_steps)
    if k == 0:
        return x.copy(), tele

    den = models.denoiser
    sched = den.schedule
    grid = ddim_timesteps(sched.T, sampler.n_steps)
    guided = []
    if guidance.mode != "off":
        guidance.validate(sampler.n_steps)
        guided = [m for m in guidance.guided_indices() if m <= k]
        if len(guided) < guidance.steps:
            log.warning("guided step(s) above the start index %d are skipped", k)
        energy_model = models.energy_model(sampler.cfg_scale)

    z = q_sample(x, int(grid[k]), rng.standard_normal((n, d)), sched)
    params: TransformParams | None = None
    fallback = np.zeros(n, dtype=bool)

    def guide(z, idx):
        nonlocal params
        t = int(grid[idx])
        prior = params if guidance.persist else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            new, rec, params = guided_update(z, t, y, guidance, energy_model, rng, prior)
        fallback[rec.failed] = True
        for row, tl in enumerate(tele):
            tl.guided_steps.append(idx)
            tl.energy_before.append(float(rec.energy_before[row]))
            tl.energy_after.append(float(rec.energy_after[row]))
            tl.clipped_fraction.append(float(rec.clipped_fraction[row]))
        return new

    if k in guided:
        z = guide(z, k)
    if sampler.sampler == "ddim":
        for i in range(k, 0, -1):
            eps = cfg_eps(den, z, int(grid[i]), y, sampler.cfg_scale)
            z = ddim_step(z, int(grid[i]), int(grid[i - 1]), eps, sched, sampler.eta, rng)
            if i - 1 in guided:
                z = guide(z, i - 1)
    else:
        guided_t = {int(grid[m]): m for m in guided}
        for t in range(int(grid[k]) - 1, -1, -1):
            eps = cfg_eps(den, z, t + 1, y, sampler.cfg_scale)
            z = ancestral_step(z, t, score_from_eps(eps, t + 1, sched), sched, rng)
            if t in guided_t and t != int(grid[k]):
                z = guide(z, guided_t[t])

    if fallback.any():
        warnings.warn(f"{int(fallback.sum())} sample(s) fell back to unguided sampling", stacklevel=2)
        for row in np.flatnonzero(fallback):
            tele[row].fallback = True
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("expansion produced non-finite samples")
    return z, tele


def expand_sample(x, y: int, models: ExpansionModels, sampler: SamplerConfig, guidance: GuidanceConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Regenerate a single seed sample ``x`` of class ``y``."""
    out, _ = expand_batch(np.asarray(x, dtype=np.float64)[None], np.array([y]), models, sampler,
                          guidance, RowRngs([rng]))
    return out[0]


@dataclass
class ExpansionResult:
    synthetic: Dataset
    merged: Dataset
    telemetry: list = field(default_factory=list)


def expand_dataset(original: Dataset, factor: int, models: ExpansionModels, sampler: SamplerConfig,
                   guidance: GuidanceConfig, seed: int, threads: int = 1, chunk: int = 256) -> ExpansionResult:
    """Produce ``factor`` synthetic samples per original sample.

    Sample ``i``'s replica ``r`` draws from its own generator seeded by
    ``(seed, i, r)``; chunks of work run on up to ``threads`` workers and
    are reassembled in order, so the output does not depend on ``threads``.
    """
    if factor < 0:
        raise ValueError("expansion factor must be non-negative")
    jobs = [(i, r) for i in range(len(original)) for r in range(factor)]
    chunks = [jobs[s:s + chunk] for s in range(0, len(jobs), chunk)]

    def run(part):
        idx = np.array([i for i, _ in part], dtype=np.int64)
        rngs = RowRngs([sample_rng(seed, i, r) for i, r in part])
        return expand_batch(original.x[idx], original.y[idx], models, sampler, guidance, rngs, ids=idx)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    if results:
        xs = np.concatenate([r[0] for r in results])
        tele = [t for r in results for t in r[1]]
    else:
        xs, tele = np.zeros((0, original.d)), []
    source = np.array([i for i, _ in jobs], dtype=np.int64)
    synthetic = Dataset(xs, original.y[source] if len(source) else np.zeros(0, dtype=np.int64),
                        original.class_names, "synthetic", source)
    for sid, tl in enumerate(tele):
        tl.sample_id = sid
    return ExpansionResult(synthetic, original.merge(synthetic), tele)
