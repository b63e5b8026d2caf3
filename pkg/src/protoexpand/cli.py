"""Command-line interface.

Every command takes ``--config FILE`` (JSON run configuration) and any
number of ``--set section.key=value`` overrides, applied in that order on
top of the defaults. Dedicated flags such as ``--m`` or ``--rho`` are
shorthands for the matching ``--set`` and win over both.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or inconsistent inputs), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import experiment
from .config import ConfigError, RunConfig, from_dict, load
from .datasets import DataFormatError, Dataset
from .diffusion import Denoiser
from .evaluation import MetricReport, alignment, downstream_eval, energy_stats
from .pipeline import ExpansionModels, expand_dataset
from .prototypes import FeatureExtractor, PrototypeSet, ProvenanceError, build_prototypes

log = logging.getLogger("protoexpand")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# artifacts


def _canon(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def digest(doc) -> str:
    return hashlib.sha256(_canon(doc).encode()).hexdigest()[:16]


def write_artifact(path, kind: str, payload: dict, config: RunConfig, links: dict | None = None) -> str:
    """Write a JSON artifact that embeds the config snapshot; returns its payload digest."""
    doc = {
        "kind": kind,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "payload_digest": digest(payload),
        "links": links or {},
        "payload": payload,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc["payload_digest"]


def read_artifact(path, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataFormatError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("kind") != kind:
        raise DataFormatError(f"{path}: expected a {kind!r} artifact, found {doc.get('kind')!r}")
    if digest(doc["payload"]) != doc.get("payload_digest"):
        raise ProvenanceError(f"{path}: payload does not match its recorded digest")
    return doc


def write_dataset(path, ds: Dataset, config: RunConfig, links: dict | None = None) -> None:
    ds.meta = dict(ds.meta) | {"seed": config.seed, "config": config.to_dict(),
                               "config_fingerprint": config.fingerprint(), "links": links or {}}
    ds.write(path)


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: no such file")
    return Dataset.read(path)


def load_denoiser(path) -> tuple[Denoiser, str]:
    doc = read_artifact(path, "denoiser")
    return Denoiser.from_dict(doc["payload"]), doc["payload_digest"]


def load_extractor(path) -> FeatureExtractor:
    return FeatureExtractor.from_dict(read_artifact(path, "extractor")["payload"])


def load_prototypes(path) -> PrototypeSet:
    return PrototypeSet.from_dict(read_artifact(path, "prototypes")["payload"])


# ---------------------------------------------------------------------------
# commands


def _config(args, shorthands: dict | None = None) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    for key, value in (shorthands or {}).items():
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_data(args) -> None:
    cfg = _config(args)
    out = _out_dir(args.out_dir)
    diffusion_train, original, test = experiment.generate_data(cfg)
    for name, ds in (("diffusion_train", diffusion_train), ("original", original), ("test", test)):
        write_dataset(out / f"{name}.csv", ds, cfg)
        print(f"wrote {out / name}.csv ({len(ds)} samples)")


def cmd_train_diffusion(args) -> None:
    cfg = _config(args)
    data = read_dataset(args.data)
    num_classes = args.num_classes or max(data.classes) + 1
    training = cfg.diffusion.training()
    from .diffusion import build_schedule, train_denoiser

    sched = build_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    den = train_denoiser(data.x, data.y, sched, training,
                         experiment.stream(cfg.seed, experiment._DENOISER_STREAM), num_classes)
    write_artifact(args.out, "denoiser", den.to_dict(), cfg)
    loss_path = Path(args.loss_log) if args.loss_log else Path(args.out).with_suffix(".loss.csv")
    loss_path.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(training.losses)))
    print(f"wrote {args.out}; final loss {den.train_loss:.5f}; loss log {loss_path}")


def cmd_train_extractor(args) -> None:
    cfg = _config(args)
    data = read_dataset(args.data)
    from .prototypes import train_extractor

    ext = train_extractor(data.x, data.y, cfg.extractor.training(),
                          experiment.stream(cfg.seed, experiment._EXTRACTOR_STREAM),
                          args.num_classes or max(data.classes) + 1)
    write_artifact(args.out, "extractor", ext.to_dict(), cfg, {"extractor_fingerprint": ext.fingerprint})
    print(f"wrote {args.out}; training accuracy {ext.train_accuracy:.3f}; fingerprint {ext.fingerprint}")


def cmd_build_prototypes(args) -> None:
    cfg = _config(args, {"prototypes.K": args.k})
    data = read_dataset(args.data)
    ext = load_extractor(args.extractor)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        protos = build_prototypes(data.x, data.y, ext, cfg.prototypes.K)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_artifact(args.out, "prototypes", protos.to_dict(), cfg,
                   {"extractor_fingerprint": ext.fingerprint})
    print(f"wrote {args.out}; K={protos.K} for {len(protos.classes)} classes")


def cmd_expand(args) -> None:
    cfg = _config(args, {
        "expansion.factor": args.factor, "guidance.mode": args.mode, "guidance.M": args.m,
        "guidance.rho": args.rho, "guidance.epsilon": args.eps, "prototypes.K": args.k,
        "expansion.strength": args.strength, "guidance.steps": args.steps,
        "guidance.lambda_g": args.lambda_g,
    })
    original = read_dataset(args.data)
    den, den_digest = load_denoiser(args.denoiser)
    if den.dim != original.d:
        raise ProvenanceError(f"denoiser works in {den.dim} dimensions, data has {original.d}")
    if max(original.classes) >= den.num_classes:
        raise ProvenanceError("data contains labels the denoiser was not trained on")
    ext = protos = None
    if cfg.guidance.mode != "off":
        if not (args.extractor and args.prototypes):
            raise UsageError("guided expansion needs --extractor and --prototypes")
        ext = load_extractor(args.extractor)
        protos = load_prototypes(args.prototypes)
        protos.check_extractor(ext)
        if protos.K != cfg.prototypes.K:
            log.warning("rebuilding prototypes with K=%d (file has K=%d)", cfg.prototypes.K, protos.K)
            protos = build_prototypes(original.x, original.y, ext, cfg.prototypes.K)
        missing = set(original.classes) - set(protos.classes)
        if missing:
            raise ProvenanceError(f"prototypes have no entry for classes {sorted(missing)}")
    models = ExpansionModels(den, ext, protos)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = expand_dataset(original, cfg.expansion.factor, models, cfg.sampler(), cfg.guidance,
                                cfg.seed, threads=args.threads, chunk=cfg.expansion.chunk)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = _out_dir(args.out_dir)
    links = {"denoiser_digest": den_digest,
             "extractor_fingerprint": ext.fingerprint if ext else None}
    write_dataset(out / "synthetic.csv", result.synthetic, cfg, links)
    write_dataset(out / "merged.csv", result.merged, cfg, links)
    write_artifact(out / "telemetry.json", "telemetry", {"samples": [t.to_dict() for t in result.telemetry]},
                   cfg, links)
    print(f"wrote {len(result.synthetic)} synthetic samples to {out}")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    original = read_dataset(args.original)
    expanded = read_dataset(args.expanded)
    test = read_dataset(args.test)
    reference = read_dataset(args.reference) if args.reference else original
    if len({original.d, expanded.d, test.d, reference.d}) != 1:
        raise DataFormatError("datasets differ in dimension")
    synthetic = expanded.select(expanded.source >= 0) if np.any(expanded.source >= 0) else expanded
    ev = cfg.evaluation
    ext = load_extractor(args.extractor) if args.extractor else None
    if ext is None and ev.space == "feature":
        from .prototypes import train_extractor

        ext = train_extractor(original.x, original.y, cfg.extractor.training(),
                              experiment.stream(cfg.seed, experiment._EVAL_EXTRACTOR_STREAM),
                              max(original.classes + test.classes) + 1)
    align = alignment(synthetic, reference, ext, ev.space, ev.max_samples, ev.bandwidth,
                      np.random.default_rng([cfg.seed, 7]))
    stats = {}
    if args.prototypes and ext is not None:
        protos = load_prototypes(args.prototypes)
        protos.check_extractor(ext)
        stats = energy_stats(synthetic, ext, protos)
    num_classes = max(original.classes + expanded.classes + test.classes) + 1
    base = downstream_eval(original, test, ev.classifier(), ev.seeds, num_classes)
    exp = downstream_eval(expanded, test, ev.classifier(), ev.seeds, num_classes)
    down = {"acc_original": base.mean, "acc_original_sd": base.sd, "acc_expanded": exp.mean,
            "acc_expanded_sd": exp.sd, "delta": exp.mean - base.mean, "runs_original": base.accuracies,
            "runs_expanded": exp.accuracies, "seeds": list(ev.seeds)}
    counts = {"n_original": len(original), "n_synthetic": align["n_synthetic"],
              "n_reference": align["n_reference"], "n_expanded": len(expanded), "n_test": len(test)}
    report = MetricReport(align["frechet"], align["mmd2"], stats, down, cfg.fingerprint(), cfg.seed, counts,
                          {}, {"space": ev.space})
    out = _out_dir(args.out_dir)
    write_artifact(out / "report.json", "report", report.to_dict(), cfg)
    row = report.flat()
    cols = ["seed", *experiment.REPORT_COLUMNS]
    (out / "report.csv").write_text(",".join(cols) + "\n" + ",".join(_cell(row.get(c)) for c in cols) + "\n")
    print(f"frechet={report.frechet:.6g} mmd2={report.mmd2:.6g} "
          f"acc {base.mean:.4f} -> {exp.mean:.4f} (delta {exp.mean - base.mean:+.4f})")


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    try:
        name, cells = experiment.load_grid(args.grid)
    except FileNotFoundError:
        raise DataFormatError(f"{args.grid}: not a built-in grid ({', '.join(experiment.GRIDS)}) "
                              "nor a readable file") from None
    seeds = args.seeds if args.seeds else [cfg.seed]
    result = experiment.run_ablation({"name": name, "cells": cells}, cfg, seeds, args.threads,
                                     downstream=args.downstream)
    out = _out_dir(args.out_dir)
    (out / f"ablation_{name}.csv").write_text(result.csv_text())
    write_artifact(out / f"ablation_{name}.json", "ablation", result.to_dict(), cfg)
    for label, row in result.summary().items():
        print(f"{label:>16}  frechet={row['frechet']:.6g}  mmd2={row['mmd2']:.6g}")
    for flag, value in result.flags.items():
        print(f"flag {flag}: {value}")


def verify_run(directory) -> list[str]:
    """Cross-check artifacts in a run directory; returns a list of problems."""
    problems = []
    extractors, denoisers = set(), set()
    docs = []
    for path in sorted(Path(directory).rglob("*.json")):
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            problems.append(f"{path}: unreadable ({exc})")
            continue
        if not isinstance(doc, dict) or "config" not in doc:
            continue
        docs.append((path, doc))
        if "seed" not in doc:
            problems.append(f"{path}: no seed recorded")
        try:
            snapshot = from_dict(doc["config"])
            if snapshot.fingerprint() != doc.get("config_fingerprint"):
                problems.append(f"{path}: config snapshot does not match its fingerprint")
        except ConfigError as exc:
            problems.append(f"{path}: invalid config snapshot ({exc})")
        if "payload" in doc:
            if digest(doc["payload"]) != doc.get("payload_digest"):
                problems.append(f"{path}: payload does not match its digest")
            if doc.get("kind") == "extractor":
                extractors.add(FeatureExtractor.from_dict(doc["payload"]).fingerprint)
            if doc.get("kind") == "denoiser":
                denoisers.add(doc["payload_digest"])
    for path, doc in docs:
        links = doc.get("links") or {}
        fp = links.get("extractor_fingerprint")
        if fp and extractors and fp not in extractors:
            problems.append(f"{path}: refers to extractor {fp}, not found in the run directory")
        dd = links.get("denoiser_digest")
        if dd and denoisers and dd not in denoisers:
            problems.append(f"{path}: refers to denoiser {dd}, not found in the run directory")
        if doc.get("kind") == "prototypes" and doc["payload"]["extractor_fingerprint"] != fp:
            problems.append(f"{path}: prototype metadata disagrees with its link")
    if not docs:
        problems.append(f"{directory}: no artifacts found")
    return problems


def cmd_verify(args) -> None:
    problems = verify_run(args.run_dir)
    for p in problems:
        print(p)
    if problems:
        raise ProvenanceError(f"{len(problems)} problem(s) found")
    print("all artifacts consistent")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable; VALUE is parsed as JSON when possible)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker cap; 1 is bit-reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="protoexpand", description="Prototype-guided diffusion dataset expansion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", parents=[common], help="write the built-in toy datasets")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train-diffusion", parents=[common], help="train the conditional denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log", help="loss CSV path (default: next to --out)")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("train-extractor", parents=[common], help="train the feature extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_train_extractor)

    p = sub.add_parser("build-prototypes", parents=[common], help="class and group prototypes")
    p.add_argument("--data", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_build_prototypes)

    p = sub.add_parser("expand", parents=[common], help="generate synthetic samples")
    p.add_argument("--data", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--extractor")
    p.add_argument("--prototypes")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--factor", type=int)
    p.add_argument("--mode", choices=["transform", "direct-latent", "off"])
    p.add_argument("--m", type=int, help="guided step index (steps remaining)")
    p.add_argument("--rho", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--strength", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda-g", type=float)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("evaluate", parents=[common], help="alignment metrics and downstream accuracy")
    p.add_argument("--original", required=True)
    p.add_argument("--expanded", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--reference", help="alignment target (default: the original dataset)")
    p.add_argument("--extractor", help="feature space for metrics (default: a fresh one)")
    p.add_argument("--prototypes", help="also report prototype distances")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid end to end")
    p.add_argument("--grid", required=True, help=f"grid JSON file or one of {', '.join(experiment.GRIDS)}")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--downstream", action="store_true", help="also train downstream classifiers")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="re-check fingerprints across a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return exc.code
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ProvenanceError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
