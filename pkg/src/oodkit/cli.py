"""Command-line orchestration: fit, eval, score, synth, filter-categories,
report.

Exit codes: 0 success, 1 validation error (bad config, manifest, or request),
2 runtime error.  Parallelism for the evaluation grid comes from --jobs, the
OODKIT_JOBS environment variable, or defaults to 1; workers only compute,
all files are written from the main thread after a deterministic merge.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .arrayio import ManifestError, load_manifest, write_array
from .calibration import (
    DEFAULT_DICE_RHOS,
    DEFAULT_REACT_TAUS,
    CalibrationError,
    fit_all,
    load_artifacts,
    save_artifacts,
)
from .categories import filter_overlap, removals_to_lines
from .detector import (
    DetectorError,
    calibrate_threshold,
    detect,
    detections_to_table,
)
from .metrics import (
    EvalCell,
    MetricsError,
    auroc,
    build_report,
    report_to_chart_svg,
    report_to_csv,
    report_to_table,
)
from .scoring import METHODS, ScoringError, score_method
from .synthetic import SyntheticSpec, write_synthetic

JOBS_ENV_VAR = "OODKIT_JOBS"


class ConfigError(ValueError):
    pass


VALIDATION_ERRORS = (
    ConfigError, ManifestError, CalibrationError, ScoringError,
    MetricsError, DetectorError, ValueError, FileNotFoundError,
)

SWEPT_METHODS = ("react", "dice")


@dataclass
class RunConfig:
    manifest: str
    out: str = "oodkit-out"
    seed: int = 0
    jobs: int | None = None
    target_tpr: float = 0.95
    calibrate_on: str = "id_test"          # or "id_train_holdout"
    holdout_fraction: float = 0.2
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(
                f"unknown methods {unknown}; known: {list(METHODS)}")
        if not 0 < self.target_tpr < 1:
            raise ConfigError(
                f"target_tpr must be in (0, 1), got {self.target_tpr}")
        if self.calibrate_on not in ("id_test", "id_train_holdout"):
            raise ConfigError(
                f"calibrate_on must be id_test or id_train_holdout, "
                f"got {self.calibrate_on!r}")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError(
                f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}")
        bad = [m for m in self.hyperparams if m not in METHODS]
        if bad:
            raise ConfigError(f"hyperparams for unknown methods {bad}")

    @property
    def effective_jobs(self) -> int:
        if self.jobs is not None:
            return max(1, self.jobs)
        env = os.environ.get(JOBS_ENV_VAR)
        return max(1, int(env)) if env else 1


def load_config(path, overrides=None) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    known = {f for f in RunConfig.__dataclass_fields__}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    if "manifest" not in doc:
        raise ConfigError("config must name a manifest")
    # paths inside the config resolve relative to the config file
    base = os.path.dirname(os.path.abspath(path))
    doc["manifest"] = os.path.join(base, doc["manifest"])
    if "out" in doc:
        doc["out"] = os.path.join(base, doc["out"])
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    return RunConfig(**doc)


def artifacts_dir(config: RunConfig) -> str:
    return os.path.join(config.out, "artifacts")


def cmd_fit(config: RunConfig) -> str:
    """Fit calibration artifacts from the manifest's ID train split."""
    manifest = load_manifest(config.manifest)
    hp = config.hyperparams
    art = fit_all(
        manifest.id_train.features,
        manifest.id_train.logits,
        manifest.id_train.labels,
        head=_manifest_head(manifest),
        shrinkage=hp.get("mahalanobis", {}).get("shrinkage", 1e-6),
        eta=hp.get("openmax", {}).get("eta", 20),
        epsilon_clamp=hp.get("kl_matching", {}).get("epsilon_clamp", 1e-12),
        group_by=hp.get("kl_matching", {}).get("group_by", "predicted"),
        principal_dim=hp.get("vim", {}).get("principal_dim"),
        dice_rhos=hp.get("dice", {}).get("rho", DEFAULT_DICE_RHOS),
        react_taus=hp.get("react", {}).get("tau", DEFAULT_REACT_TAUS),
        react_percentiles=hp.get("react", {}).get("percentiles", ()),
    )
    out = artifacts_dir(config)
    save_artifacts(art, out)
    return out


def _manifest_head(manifest):
    from .calibration import ClassifierHead
    return ClassifierHead(W=manifest.W, b=manifest.b)


def _expand_variants(config: RunConfig, artifacts):
    """One scoring task per method variant: (base method, tag, hyper dict)."""
    variants = []
    for m in config.methods:
        if m == "react":
            for tau in artifacts.react_taus:
                variants.append((m, f"react@tau={tau:g}", {"tau": tau}))
        elif m == "dice":
            for rho in sorted(artifacts.dice_masks):
                variants.append((m, f"dice@rho={rho:g}", {"rho": rho}))
        else:
            variants.append((m, m, dict(config.hyperparams.get(m, {}))))
    return variants


def _calibration_scores(config, manifest, artifacts, base, hyper, test_scores):
    if config.calibrate_on == "id_test":
        return test_scores
    n = manifest.id_train.features.shape[0]
    k = max(1, int(round(config.holdout_fraction * n)))
    idx = np.random.default_rng(config.seed).permutation(n)[:k]
    sv = score_method(
        base,
        logits=manifest.id_train.logits[idx],
        features=manifest.id_train.features[idx],
        artifacts=artifacts, hyper=hyper)
    return sv.scores


def _check_dimension_drift(manifest, artifacts):
    if (manifest.feature_dim != artifacts.head.feature_dim
            or manifest.n_classes != artifacts.head.n_classes):
        raise ConfigError(
            f"dimension drift between fit and eval inputs: artifacts expect "
            f"d={artifacts.head.feature_dim}, C={artifacts.head.n_classes}; "
            f"manifest has d={manifest.feature_dim}, C={manifest.n_classes}")


def cmd_eval(config: RunConfig) -> dict:
    """Score every (method variant, OOD set) pair and write report files."""
    manifest = load_manifest(config.manifest)
    art_dir = artifacts_dir(config)
    if not os.path.exists(os.path.join(art_dir, "index.json")):
        raise ConfigError(
            f"missing artifacts at {art_dir}; run `oodkit fit` first")
    artifacts = load_artifacts(art_dir)
    _check_dimension_drift(manifest, artifacts)

    variants = _expand_variants(config, artifacts)

    def eval_variant(task):
        base, tag, hyper = task
        test_sv = score_method(
            base, logits=manifest.id_test.logits,
            features=manifest.id_test.features,
            artifacts=artifacts, hyper=hyper)
        cal_scores = _calibration_scores(
            config, manifest, artifacts, base, hyper, test_sv.scores)
        threshold = calibrate_threshold(cal_scores, config.target_tpr, tag)
        cells = []
        for name in sorted(manifest.ood_sets):
            split = manifest.ood_sets[name]
            ood_sv = score_method(
                base, logits=split.logits, features=split.features,
                artifacts=artifacts, hyper=hyper)
            cell = evaluate_pair(
                tag, name, cal_scores, ood_sv.scores,
                target_tpr=config.target_tpr,
                group=manifest.ood_groups.get(name, "default"))
            # AUROC always compares the ID test split against the OOD set
            cell = EvalCell(
                method=cell.method, ood_dataset=cell.ood_dataset,
                fpr95=cell.fpr95,
                auroc=__import__("oodkit.metrics", fromlist=["auroc"]).auroc(
                    test_sv.scores, ood_sv.scores),
                n_id=test_sv.scores.size, n_ood=cell.n_ood,
                group=cell.group, flags=cell.flags)
            cells.append(cell)
        return tag, threshold, cells

    jobs = config.effective_jobs
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(eval_variant, variants))
    else:
        results = [eval_variant(v) for v in variants]
    results.sort(key=lambda r: r[0])

    all_cells = [c for _, _, cells in results for c in cells]
    report = build_report(all_cells)

    os.makedirs(config.out, exist_ok=True)
    paths = {
        "cells": os.path.join(config.out, "report.tsv"),
        "table": os.path.join(config.out, "report.txt"),
        "chart": os.path.join(config.out, "report.svg"),
        "thresholds": os.path.join(config.out, "thresholds.tsv"),
        "best": os.path.join(config.out, "best.tsv"),
    }
    _write_text(paths["cells"], report_to_csv(report))
    _write_text(paths["table"], report_to_table(report))
    report_to_chart_svg(report, paths["chart"])
    _write_text(paths["thresholds"], _thresholds_table(results))
    _write_text(paths["best"], _best_summary(config.methods, report))
    return paths


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _thresholds_table(results) -> str:
    lines = ["method\tlambda\ttarget_tpr\tn_calibration"]
    for tag, threshold, _ in results:
        lines.append(
            f"{tag}\t{threshold.lambda_!r}\t{threshold.target_tpr:g}"
            f"\t{threshold.n_calibration}")
    return "\n".join(lines) + "\n"


def _variant_hyper_value(tag: str) -> float:
    return float(tag.split("=", 1)[1]) if "=" in tag else 0.0


def _best_summary(methods, report) -> str:
    """Per base method, the variant with minimal average FPR95; ties break to
    higher average AUROC, then to the smaller hyperparameter value."""
    lines = ["method\tbest_variant\tavg_fpr95\tavg_auroc"]
    for base in sorted(set(methods)):
        tags = [m for m in report.methods
                if m == base or m.startswith(base + "@")]
        if not tags:
            continue
        best = min(tags, key=lambda t: (
            report.averages[t][0], -report.averages[t][1],
            _variant_hyper_value(t)))
        avg_f, avg_a = report.averages[best]
        lines.append(f"{base}\t{best}\t{avg_f!r}\t{avg_a!r}")
    return "\n".join(lines) + "\n"


def cmd_score(config: RunConfig, methods=None) -> str:
    """Write per-split score arrays and detection tables for each variant."""
    manifest = load_manifest(config.manifest)
    artifacts = load_artifacts(artifacts_dir(config))
    _check_dimension_drift(manifest, artifacts)
    if methods:
        config = RunConfig(**{**config.__dict__, "methods": list(methods)})

    score_root = os.path.join(config.out, "scores")
    detect_root = os.path.join(config.out, "detections")
    for base, tag, hyper in _expand_variants(config, artifacts):
        os.makedirs(os.path.join(score_root, tag), exist_ok=True)
        os.makedirs(os.path.join(detect_root, tag), exist_ok=True)
        splits = {"id_test": manifest.id_test}
        splits.update({f"ood_{k}": v for k, v in sorted(manifest.ood_sets.items())})
        test_sv = score_method(
            base, logits=manifest.id_test.logits,
            features=manifest.id_test.features, artifacts=artifacts,
            hyper=hyper)
        cal_scores = _calibration_scores(
            config, manifest, artifacts, base, hyper, test_sv.scores)
        threshold = calibrate_threshold(cal_scores, config.target_tpr, tag)
        for split_name, split in splits.items():
            sv = (test_sv if split_name == "id_test" else score_method(
                base, logits=split.logits, features=split.features,
                artifacts=artifacts, hyper=hyper))
            write_array(sv.scores,
                        os.path.join(score_root, tag, f"{split_name}.npy"))
            dets = detect(sv.scores, split.logits, threshold)
            _write_text(os.path.join(detect_root, tag, f"{split_name}.tsv"),
                        detections_to_table(dets, tag))
    return score_root


def cmd_synth(spec: SyntheticSpec, out: str, ood_group: str = "default") -> str:
    return write_synthetic(spec, out, ood_group=ood_group)


def cmd_filter_categories(ood_path, id_path, out=None) -> tuple[list[str], str]:
    with open(ood_path) as fh:
        ood = [line.strip() for line in fh if line.strip()]
    with open(id_path) as fh:
        ids = [line.strip() for line in fh if line.strip()]
    kept, removals = filter_overlap(ood, ids)
    log = removals_to_lines(removals)
    if out:
        os.makedirs(out, exist_ok=True)
        _write_text(os.path.join(out, "kept.txt"), "\n".join(kept) + "\n")
        _write_text(os.path.join(out, "removals.tsv"), log)
    return kept, log


def cmd_report(cells_path, out) -> dict:
    """Re-render table and chart from a machine-readable cells file."""
    cells = []
    with open(cells_path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        idx = {name: i for i, name in enumerate(header)}
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if parts[idx["ood_dataset"]] == "__average__":
                continue
            cells.append(EvalCell(
                method=parts[idx["method"]],
                ood_dataset=parts[idx["ood_dataset"]],
                fpr95=float(parts[idx["fpr95"]]),
                auroc=float(parts[idx["auroc"]]),
                n_id=int(parts[idx["n_id"]]),
                n_ood=int(parts[idx["n_ood"]]),
                group=parts[idx["group"]] or "default",
                flags=parts[idx["flags"]] if "flags" in idx else ""))
    report = build_report(cells)
    os.makedirs(out, exist_ok=True)
    paths = {"table": os.path.join(out, "report.txt"),
             "chart": os.path.join(out, "report.svg")}
    _write_text(paths["table"], report_to_table(report))
    report_to_chart_svg(report, paths["chart"])
    return paths


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="Post-hoc OOD scoring, detection and evaluation over "
                    "exported feature/logit arrays.")
    parser.add_argument("--config", help="run config JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=None,
                        help=f"parallel workers (default ${JOBS_ENV_VAR} or 1)")
    parser.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fit", help="fit calibration artifacts from the ID train split")
    sub.add_parser("eval", help="run the full (method x OOD set) grid")

    p_score = sub.add_parser("score", help="write score arrays and detections")
    p_score.add_argument("--method", action="append", dest="methods",
                         help="restrict to a method (repeatable)")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--classes", type=int, default=5)
    p_synth.add_argument("--dim", type=int, default=16)
    p_synth.add_argument("--per-class", type=int, default=400)
    p_synth.add_argument("--separation", type=float, default=6.0)
    p_synth.add_argument("--scale", type=float, default=1.0)
    p_synth.add_argument("--shift", type=float, default=10.0)
    p_synth.add_argument("--n-ood", type=int, default=None)
    p_synth.add_argument("--ood-group", default="default")

    p_filter = sub.add_parser("filter-categories",
                              help="drop OOD categories that exactly match ID ones")
    p_filter.add_argument("--ood-list", required=True,
                          help="file with one OOD category per line")
    p_filter.add_argument("--id-list", required=True,
                          help="file with one ID category per line")

    p_report = sub.add_parser("report", help="re-render reports from a cells file")
    p_report.add_argument("--cells", required=True, help="report.tsv path")
    return parser


def _config_from_args(args) -> RunConfig:
    if not args.config:
        raise ConfigError(f"`{args.command}` requires --config")
    return load_config(args.config, overrides={
        "seed": args.seed, "jobs": args.jobs, "out": args.out})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            out = cmd_fit(_config_from_args(args))
            print(f"artifacts written to {out}")
        elif args.command == "eval":
            paths = cmd_eval(_config_from_args(args))
            for kind, path in paths.items():
                print(f"{kind}: {path}")
        elif args.command == "score":
            out = cmd_score(_config_from_args(args), methods=args.methods)
            print(f"scores written under {out}")
        elif args.command == "synth":
            spec = SyntheticSpec(
                n_classes=args.classes, feature_dim=args.dim,
                n_per_class=args.per_class, class_separation=args.separation,
                within_scale=args.scale, ood_shift=args.shift,
                n_ood=args.n_ood, seed=args.seed or 0)
            path = cmd_synth(spec, args.out or "synthetic",
                             ood_group=args.ood_group)
            print(f"manifest: {path}")
        elif args.command == "filter-categories":
            kept, log = cmd_filter_categories(
                args.ood_list, args.id_list, out=args.out)
            sys.stdout.write("\n".join(kept) + ("\n" if kept else ""))
            sys.stderr.write(log)
        elif args.command == "report":
            if not args.out:
                raise ConfigError("`report` requires --out")
            paths = cmd_report(args.cells, args.out)
            for kind, path in paths.items():
                print(f"{kind}: {path}")
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
