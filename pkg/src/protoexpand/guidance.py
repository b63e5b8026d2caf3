"""Prototype energy guidance of intermediate diffusion latents.

The latent at a chosen denoising step is perturbed by a residual
multiplicative transform ``(1 + e) * z + b``. The transform parameters are
moved down the gradient of a hierarchical energy, the distance of the
predicted clean point's features to the class prototype plus the distance
to the best-matching group prototype, and the result is projected back into
an L-infinity ball around the original latent.

All functions operate on batches: latents are ``(n, d)`` arrays and every
row carries its own label and transform parameters. Because the total
energy is a sum of per-row terms, one backward pass yields each row's own
gradient.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tape, backward
from .diffusion import Denoiser, cfg_eps, predict_x0
from .prototypes import FeatureExtractor, PrototypeSet, hierarchical_distances

log = logging.getLogger(__name__)

MODES = ("transform", "direct-latent", "off")


class GuidanceWarning(UserWarning):
    pass


@dataclass
class TransformParams:
    e: np.ndarray
    b: np.ndarray
    epsilon: float = 0.2

    def __post_init__(self):
        if self.e.shape != self.b.shape:
            raise ValueError("scale and offset must share a shape")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def copy(self) -> "TransformParams":
        return TransformParams(self.e.copy(), self.b.copy(), self.epsilon)


@dataclass
class GuidanceConfig:
    mode: str = "transform"
    rho: float = 10.0
    M: int = 20
    steps: int = 1
    inner_iters: int = 1
    lambda_c: float = 1.0
    lambda_g: float = 1.0
    epsilon: float = 0.2
    persist: bool = False

    def validate(self, n_steps: int | None = None) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.steps < 1 or self.inner_iters < 1:
            raise ValueError("steps and inner_iters must be at least 1")
        if self.lambda_c < 0 or self.lambda_g < 0:
            raise ValueError("energy weights must be non-negative")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.M < 1 or (n_steps is not None and self.M > n_steps):
            raise ValueError(f"M must lie in [1, {n_steps}]")

    def guided_indices(self) -> list[int]:
        """Remaining-step indices at which guidance fires, latest first."""
        return [m for m in range(self.M, self.M - self.steps, -1) if m >= 1]


def init_transform(d: int, rng, epsilon: float = 0.2, n: int | None = None) -> TransformParams:
    """Scale ``e ~ U[0, 1)`` and offset ``b ~ N(0, 1)`` per dimension.

    With ``n`` given the parameters have shape ``(n, d)``; the scale block
    is drawn before the offset block.
    """
    if d < 1:
        raise ValueError("dimension must be at least 1")
    shape = (d,) if n is None else (n, d)
    e = rng.random(shape)
    b = rng.standard_normal(shape)
    return TransformParams(e, b, epsilon)


def ball_bounds(z: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounds ``lo, hi`` with ``|bound - z| <= epsilon`` holding in floating point."""
    z = np.asarray(z, dtype=np.float64)
    lo = z - epsilon
    hi = z + epsilon
    # z +/- eps can round one ulp outward; pull such bounds back in.
    while np.any(bad := (hi - z) > epsilon):
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    while np.any(bad := (z - lo) > epsilon):
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    return lo, hi


def project(u, z, epsilon: float) -> np.ndarray:
    lo, hi = ball_bounds(z, epsilon)
    return np.minimum(np.maximum(u, lo), hi)


def apply_transform(z, params: TransformParams) -> np.ndarray:
    """Projected residual multiplicative transform of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if params.e.shape[-1] != z.shape[-1]:
        raise ValueError(f"transform dimension {params.e.shape[-1]} != latent dimension {z.shape[-1]}")
    return project((1.0 + params.e) * z + params.b, z, params.epsilon)


@dataclass
class EnergyModel:
    """Bundle of the trained networks that define the guidance energy."""

    denoiser: Denoiser
    extractor: FeatureExtractor
    prototypes: PrototypeSet
    cfg_scale: float = 7.5

    def __post_init__(self):
        self.prototypes.check_extractor(self.extractor)

    def energy(self, z, t: int, labels, lambda_c=1.0, lambda_g=1.0, tape: Tape | None = None):
        """Per-row energy of latents ``z`` at step ``t``.

        Returns ``(energy, class_distance, group_distance)``; with a tape the
        values are Vars differentiable back to ``z``.
        """
        labels = np.asarray(labels, dtype=np.int64)
        eps = cfg_eps(self.denoiser, z, t, labels, self.cfg_scale, tape)
        x0 = predict_x0(z, t, eps, self.denoiser.schedule)
        feats = self.extractor.features(x0, tape)
        p_c, p_g, mask = self.prototypes.stacked(labels)
        d_c, d_g, _ = hierarchical_distances(feats, p_c, p_g, mask)
        return d_c * lambda_c + d_g * lambda_g, d_c, d_g


def energy(z_t, t, label, denoiser, extractor, prototypes, lambda_g=1.0, lambda_c=1.0, cfg_scale=7.5):
    """Hierarchical energy of one latent or a batch of latents (numpy)."""
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    model = EnergyModel(denoiser, extractor, prototypes, cfg_scale)
    labels = np.broadcast_to(np.asarray(label), (len(z),))
    e, _, _ = model.energy(z, t, labels, lambda_c, lambda_g)
    return float(e[0]) if np.ndim(z_t) == 1 else e


@dataclass
class GuideRecord:
    """Per-row telemetry of one guided step."""

    step: int
    energy_before: np.ndarray
    energy_after: np.ndarray
    clipped_fraction: np.ndarray
    failed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _energy_grad(model: EnergyModel, z, t, labels, config, wrt: str, params=None):
    """Energy per row and its gradient w.r.t. the latent or the transform."""
    tape = Tape()
    if wrt == "latent":
        zv = tape.variable(z)
        total, _, _ = model.energy(zv, t, labels, config.lambda_c, config.lambda_g, tape)
        grads = backward(tape, total.sum())
        return total.value, grads[zv]
    e = tape.variable(params.e)
    b = tape.variable(params.b)
    u = (e + 1.0) * z + b
    total, _, _ = model.energy(u, t, labels, config.lambda_c, config.lambda_g, tape)
    grads = backward(tape, total.sum())
    return total.value, (grads[e], grads[b])


def _rowwise(fn, n: int):
    """Evaluate ``fn(rows)`` on all rows, isolating rows that fail numerically.

    Returns the list of successful results and a per-row failure mask.
    """
    try:
        return [fn(np.arange(n))], np.zeros(n, dtype=bool)
    except FloatingPointError:
        pass
    results, failed = [], np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            results.append(fn(np.array([i])))
        except FloatingPointError:
            failed[i] = True
    return results, failed


def guide_step(z_t, t: int, labels, params: TransformParams, config: GuidanceConfig,
               model: EnergyModel) -> tuple[TransformParams, GuideRecord]:
    """``inner_iters`` gradient steps of size ``rho`` on ``(e, b)``.

    The energy is evaluated on the unprojected transform. Rows whose
    energy or gradient turns non-finite keep their original parameters.
    """
    z = np.asarray(z_t, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(z)
    e, b = params.e.copy(), params.b.copy()
    before = np.full(n, np.nan)
    failed = np.zeros(n, dtype=bool)
    for it in range(config.inner_iters):
        ok = np.flatnonzero(~failed)
        if len(ok) == 0:
            break

        def step(rows, ok=ok):
            r = ok[rows]
            sub = TransformParams(e[r], b[r], params.epsilon)
            val, (ge, gb) = _energy_grad(model, z[r], t, labels[r], config, "transform", sub)
            if not (np.all(np.isfinite(ge)) and np.all(np.isfinite(gb))):
                raise NonFiniteError("non-finite guidance gradient")
            return r, val, ge, gb

        chunks, bad = _rowwise(step, len(ok))
        for r, val, ge, gb in chunks:
            if it == 0:
                before[r] = val
            e[r] -= config.rho * ge
            b[r] -= config.rho * gb
        failed[ok[bad]] = True

    if failed.any():
        warnings.warn(f"guidance failed for {int(failed.sum())} row(s); keeping initial transform",
                      GuidanceWarning, stacklevel=2)
        e[failed] = params.e[failed]
        b[failed] = params.b[failed]
    new = TransformParams(e, b, params.epsilon)
    after = np.full(n, np.nan)
    ok = np.flatnonzero(~failed)
    if len(ok):
        def measure(rows):
            r = ok[rows]
            val = model.energy((1.0 + e[r]) * z[r] + b[r], t, labels[r], config.lambda_c, config.lambda_g)[0]
            return r, val

        for r, val in _rowwise(measure, len(ok))[0]:
            after[r] = val
    unprojected = (1.0 + e) * z + b
    clipped = np.mean(np.abs(unprojected - z) >= params.epsilon, axis=1)
    return new, GuideRecord(t, before, after, clipped, failed)


def guided_update(z_t, t: int, labels, config: GuidanceConfig, model: EnergyModel, rng,
                  params: TransformParams | None = None):
    """Apply guidance to latents at step ``t``.

    Transform mode draws fresh ``(e, b)`` (unless ``params`` is passed in),
    optimizes them with :func:`guide_step` and returns the projected
    transformed latent. Direct-latent mode instead takes ``inner_iters``
    plain gradient steps on ``z`` itself, with no transform or projection.

    Returns:
        ``(new_latent, record, params)``; ``params`` is None in direct mode.
    """
    z = np.asarray(z_t, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = z.shape
    if config.mode == "direct-latent":
        return _direct_update(z, t, labels, config, model) + (None,)
    if config.mode != "transform":
        raise ValueError(f"guided_update called with mode {config.mode!r}")
    if params is None:
        params = init_transform(d, rng, config.epsilon, n=n)
    elif params.e.shape != z.shape:
        raise ValueError("transform parameters do not match the latent batch")
    new, record = guide_step(z, t, labels, params, config, model)
    return apply_transform(z, new), record, new


def _direct_update(z, t, labels, config, model):
    n = len(z)
    cur = z.copy()
    before = np.full(n, np.nan)
    failed = np.zeros(n, dtype=bool)
    for it in range(config.inner_iters):
        ok = np.flatnonzero(~failed)

        def step(rows, ok=ok):
            r = ok[rows]
            val, g = _energy_grad(model, cur[r], t, labels[r], config, "latent")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite guidance gradient")
            return r, val, g

        chunks, bad = _rowwise(step, len(ok))
        for r, val, g in chunks:
            if it == 0:
                before[r] = val
            cur[r] -= config.rho * g
        failed[ok[bad]] = True
    cur[failed] = z[failed]
    after = np.full(n, np.nan)
    ok = np.flatnonzero(~failed)
    if len(ok):
        try:
            after[ok] = model.energy(cur[ok], t, labels[ok], config.lambda_c, config.lambda_g)[0]
        except FloatingPointError:
            pass
    if failed.any():
        warnings.warn(f"guidance failed for {int(failed.sum())} row(s)", GuidanceWarning, stacklevel=3)
    return cur, GuideRecord(t, before, after, np.zeros(n), failed)
