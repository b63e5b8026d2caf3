"""End-to-end runs: data, model training, expansion, metrics and ablation grids."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .datasets import Dataset, mixture_dataset, shift_scenario
from .diffusion import Denoiser, build_schedule, train_denoiser
from .evaluation import MetricReport, alignment, downstream_eval, energy_stats
from .pipeline import ExpansionModels, ExpansionResult, expand_dataset
from .prototypes import FeatureExtractor, PrototypeSet, build_prototypes, train_extractor

log = logging.getLogger(__name__)

# Offsets keep the streams of different components apart for one run seed.
_DENOISER_STREAM = 1
_EXTRACTOR_STREAM = 2
_EVAL_EXTRACTOR_STREAM = 3


def stream(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng([seed, component])


@dataclass
class Workspace:
    """Data and trained models for one seed of a run."""

    config: RunConfig
    original: Dataset
    reference: Dataset
    diffusion_train: Dataset
    denoiser: Denoiser
    extractor: FeatureExtractor
    prototypes: PrototypeSet
    eval_extractor: FeatureExtractor

    @property
    def models(self) -> ExpansionModels:
        return ExpansionModels(self.denoiser, self.extractor, self.prototypes)


def generate_data(config: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """``(diffusion_train, original, test)`` from the data section."""
    d = config.data
    if d.generator == "shift":
        sc = shift_scenario(d.num_classes, d.n_per_class, d.n_test_per_class, d.n_diffusion_per_class,
                            d.num_modes, d.ring_radius, d.class_offset, d.target_spread, d.broad_spread,
                            dim=d.dim, scale=d.scale, seed=config.seed)
        return sc.diffusion_train, sc.target_train, sc.target_test
    if d.generator == "mixture":
        full = mixture_dataset(d.num_classes, d.clusters_per_class, d.dim,
                               d.n_per_class + d.n_test_per_class + d.n_diffusion_per_class,
                               d.target_spread, seed=config.seed)
        rng = np.random.default_rng([config.seed, 0])
        parts = {c: rng.permutation(np.flatnonzero(full.y == c)) for c in full.classes}
        a, b = d.n_per_class, d.n_per_class + d.n_test_per_class
        pick = lambda lo, hi: np.sort(np.concatenate([p[lo:hi] for p in parts.values()]))
        return full.select(pick(b, None)), full.select(pick(0, a)), full.select(pick(a, b))
    raise ValueError(f"unknown data generator {d.generator!r}")


def train_models(config: RunConfig, diffusion_train: Dataset, original: Dataset):
    sched = build_schedule(config.diffusion.T, config.diffusion.beta_start, config.diffusion.beta_end)
    num_classes = max(diffusion_train.classes + original.classes) + 1
    den = train_denoiser(diffusion_train.x, diffusion_train.y, sched, config.diffusion.training(),
                         stream(config.seed, _DENOISER_STREAM), num_classes=num_classes)
    ext = train_extractor(original.x, original.y, config.extractor.training(),
                          stream(config.seed, _EXTRACTOR_STREAM), num_classes=num_classes)
    return den, ext


def prepare(config: RunConfig, data: tuple[Dataset, Dataset, Dataset] | None = None) -> Workspace:
    """Generate (or take) data and train every model a run needs."""
    diffusion_train, original, test = data if data is not None else generate_data(config)
    den, ext = train_models(config, diffusion_train, original)
    protos = build_prototypes(original.x, original.y, ext, config.prototypes.K)
    eval_ext = train_extractor(original.x, original.y, config.extractor.training(),
                               stream(config.seed, _EVAL_EXTRACTOR_STREAM),
                               num_classes=ext.backbone.output_dim)
    return Workspace(config, original, test, diffusion_train, den, ext, protos, eval_ext)


def expand(ws: Workspace, config: RunConfig | None = None, threads: int = 1) -> ExpansionResult:
    config = config or ws.config
    protos = ws.prototypes
    if config.prototypes.K != protos.K:
        protos = build_prototypes(ws.original.x, ws.original.y, ws.extractor, config.prototypes.K)
    models = ExpansionModels(ws.denoiser, ws.extractor, protos)
    return expand_dataset(ws.original, config.expansion.factor, models, config.sampler(), config.guidance,
                          config.seed, threads=threads, chunk=config.expansion.chunk)


def evaluate(ws: Workspace, result: ExpansionResult, config: RunConfig | None = None,
             downstream: bool = True, cell: dict | None = None) -> MetricReport:
    """Alignment of the synthetic set with the held-out target data, plus downstream accuracy."""
    config = config or ws.config
    ev = config.evaluation
    metric_rng = np.random.default_rng([config.seed, 7])
    align = alignment(result.synthetic, ws.reference, ws.eval_extractor, ev.space, ev.max_samples,
                      ev.bandwidth, metric_rng)
    stats = energy_stats(result.synthetic, ws.extractor, ws.prototypes) if len(result.synthetic) else {}
    down = {}
    if downstream:
        base = downstream_eval(ws.original, ws.reference, ev.classifier(), ev.seeds)
        exp = downstream_eval(result.merged, ws.reference, ev.classifier(), ev.seeds)
        down = {"acc_original": base.mean, "acc_original_sd": base.sd, "acc_expanded": exp.mean,
                "acc_expanded_sd": exp.sd, "delta": exp.mean - base.mean,
                "runs_original": base.accuracies, "runs_expanded": exp.accuracies, "seeds": list(ev.seeds)}
    counts = {"n_original": len(ws.original), "n_synthetic": align["n_synthetic"],
              "n_reference": align["n_reference"], "n_merged": len(result.merged)}
    return MetricReport(align["frechet"], align["mmd2"], stats, down, config.fingerprint(), config.seed,
                        counts, dict(cell or {}), {"space": ev.space})


# ---------------------------------------------------------------------------
# ablation grids

NO_PROTOTYPES = {"guidance.lambda_c": 0.0, "guidance.lambda_g": 0.0}

GRIDS = {
    "prototypes": [
        {"label": "none", "overrides": NO_PROTOTYPES},
        {"label": "p_g", "overrides": {"guidance.lambda_c": 0.0, "guidance.lambda_g": 1.0}},
        {"label": "p_c", "overrides": {"guidance.lambda_c": 1.0, "guidance.lambda_g": 0.0}},
        {"label": "both", "overrides": {"guidance.lambda_c": 1.0, "guidance.lambda_g": 1.0}},
    ],
    "M": [{"label": f"M={m}", "overrides": {"guidance.M": m}} for m in (1, 10, 20, 25)],
    "K": [{"label": f"K={k}", "overrides": {"prototypes.K": k}} for k in (2, 3, 4, 5)],
    "steps": [{"label": f"steps={s}", "overrides": {"guidance.steps": s}} for s in (1, 2, 3, 4)],
    "rho": [{"label": f"rho={r}", "overrides": {"guidance.rho": r}} for r in (0.1, 1.0, 10.0, 20.0)],
    "lambda_g": [{"label": f"lambda_g={w}", "overrides": {"guidance.lambda_g": w}}
                 for w in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0, 2.0)],
    "mode": [{"label": m, "overrides": {"guidance.mode": m}} for m in ("off", "transform", "direct-latent")],
}


def load_grid(spec) -> tuple[str, list[dict]]:
    """A grid is a built-in name, a path to a JSON file, or an already-parsed dict."""
    if isinstance(spec, str) and spec in GRIDS:
        return spec, GRIDS[spec]
    if isinstance(spec, str):
        with open(spec) as fh:
            spec = json.load(fh)
    cells = spec["cells"]
    labels = [c["label"] for c in cells]
    if len(set(labels)) != len(labels):
        raise ValueError("grid cell labels must be unique")
    return spec.get("name", "custom"), cells


@dataclass
class AblationResult:
    name: str
    reports: list[MetricReport]
    flags: dict = field(default_factory=dict)

    def summary(self) -> dict[str, dict]:
        """Per-cell means over seeds."""
        out = {}
        for rep in self.reports:
            cell = out.setdefault(rep.cell["label"], {"frechet": [], "mmd2": [], "delta": []})
            cell["frechet"].append(rep.frechet)
            cell["mmd2"].append(rep.mmd2)
            if rep.downstream:
                cell["delta"].append(rep.downstream["delta"])
        return {k: {m: float(np.mean(v)) if v else None for m, v in d.items()} for k, d in out.items()}

    def csv_text(self) -> str:
        rows = [r.flat() for r in self.reports]
        cols = ["cell.label", "cell.overrides", "seed", *REPORT_COLUMNS]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            row["cell.overrides"] = json.dumps(row.get("cell.overrides", {}), sort_keys=True)
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"name": self.name, "summary": self.summary(), "flags": self.flags,
                "reports": [r.to_dict() for r in self.reports]}


REPORT_COLUMNS = ["frechet", "mmd2", "mean_dist_class", "mean_dist_group", "acc_original", "acc_expanded",
                  "delta", "n_synthetic", "n_reference", "config_fingerprint"]


def trend_flags(name: str, summary: dict) -> dict:
    """Informational checks of each grid's expected direction."""
    fd = {k: v["frechet"] for k, v in summary.items()}
    if name == "prototypes" and set(fd) >= {"none", "p_c", "p_g", "both"}:
        return {
            "both_le_single": fd["both"] <= min(fd["p_c"], fd["p_g"]),
            "guided_beat_none": all(fd[k] < fd["none"] for k in ("p_c", "p_g", "both")),
        }
    return {"best_frechet_cell": min(fd, key=fd.get)} if fd else {}


def run_ablation(grid, base: RunConfig, seeds=(0, 1, 2), threads: int = 1, downstream: bool = False,
                 workspaces: dict | None = None) -> AblationResult:
    """Evaluate every grid cell for every seed.

    One workspace (data plus trained models) is prepared per seed and
    shared by all cells; cells only change expansion-time settings, or
    ``prototypes.K`` which is rebuilt on the fly.
    """
    name, cells = load_grid(grid)
    for cell in cells:
        base.with_overrides(cell["overrides"])  # reject bad cells before any work
    workspaces = {} if workspaces is None else workspaces
    for s in seeds:
        if s not in workspaces:
            workspaces[s] = prepare(base.with_overrides({"seed": s}))

    jobs = [(cell, s) for cell in cells for s in seeds]

    def run(job):
        cell, s = job
        cfg = base.with_overrides({"seed": s, **cell["overrides"]})
        ws = workspaces[s]
        result = expand(ws, cfg)
        return evaluate(ws, result, cfg, downstream, {"label": cell["label"], "overrides": cell["overrides"]})

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(run, jobs))
    else:
        reports = [run(j) for j in jobs]

    seen = [(r.cell["label"], r.seed) for r in reports]
    if sorted(seen) != sorted((c["label"], s) for c, s in jobs):
        raise RuntimeError("ablation report is missing cells")
    result = AblationResult(name, reports)
    result.flags = trend_flags(name, result.summary())
    return result
