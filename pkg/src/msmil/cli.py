"""Command-line interface: one subcommand per pipeline stage.

Stages compose on the declared file formats::

    sample -> featurize -> fit-codebook -> aggregate -> train -> evaluate

plus ``experiment`` (repeated splits over a feature cache), ``synth``
(synthetic feature caches) and ``report`` (CSV + SVG over result files).

All randomness flows from ``--seed``; every command is deterministic given
its flags and input files.  Exit codes: 0 success, 2 usage, 3 data or
format error, 4 numerical failure.  Each invocation that writes files also
writes ``<out>.manifest.json`` recording the tool version, resolved
configuration, input/output hashes and the manifest hash of the producing
recipe.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, aggregate, classify, harness, report
from .errors import DataError, FormatError, MsmilError, UsageError
from .features import (FeatureBag, extract_features, load_cnn_backend,
                       read_cache, stats_backend, write_cache)
from .slide import (SCALES, PatchSpec, PatchTriple, dump_patches, extract_patch,
                    load_slide, sample_bag, write_bag_manifest)

CONFIG_KEYS = {
    "method": str, "k": int, "classifier": str, "gamma": float,
    "cost": float, "np": int, "repetitions": int, "train_fraction": float,
    "aug1": bool, "seed": int, "restarts": int,
}

_CONFIG_HELP = ("config file keys (flat key=value lines, # comments): "
                + ", ".join(sorted(CONFIG_KEYS)))


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def parse_config(path: str | Path) -> dict:
    """Flat key=value config; unknown keys are rejected by name."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        caster = CONFIG_KEYS[key]
        try:
            values[key] = _parse_bool(value) if caster is bool else caster(value)
        except ValueError:
            raise UsageError(
                f"{path}:{lineno}: bad value {value!r} for key {key!r}"
            ) from None
    return values


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(command: str, out_path: Path, seed: int,
                       config: dict, inputs: list[Path],
                       outputs: list[Path], started: str) -> str:
    """Sidecar JSON next to the primary output; returns the manifest hash.

    The hash covers the producing recipe (tool version, command, seed,
    resolved config, input digests) and is therefore identical across
    reruns; timestamps and output digests are recorded but not hashed.
    """
    core = {
        "tool": "msmil",
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": [{"path": str(p), "sha256": _sha256(Path(p))}
                   for p in inputs],
    }
    manifest_hash = hashlib.sha256(
        json.dumps(core, sort_keys=True).encode()).hexdigest()
    core["outputs"] = [{"path": str(p), "sha256": _sha256(Path(p))}
                      for p in outputs]
    core["manifest_hash"] = manifest_hash
    core["started_utc"] = started
    core["finished_utc"] = datetime.now(timezone.utc).isoformat()
    Path(f"{out_path}.manifest.json").write_text(
        json.dumps(core, sort_keys=True, indent=2) + "\n")
    return manifest_hash


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _read_labels_csv(path: str | Path) -> dict[str, str]:
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "slide_id":
                continue
            if len(row) < 2:
                raise FormatError(f"{path}: label rows need slide_id,label")
            labels[row[0]] = row[1]
    return labels


def _slide_label(slide_path: Path, slide_id: str,
                 labels: dict[str, str] | None) -> str | None:
    if labels is not None:
        if slide_id not in labels:
            raise DataError(f"no label for slide {slide_id!r} in labels file")
        return labels[slide_id]
    parent = slide_path.parent.name
    return parent if parent in ("FN", "PC") else None


def _slide_seed(master_seed: int, slide_id: str) -> int:
    digest = hashlib.sha256(
        b"msmil-slide" + int(master_seed).to_bytes(8, "little")
        + slide_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _resolve_seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    return config.get("seed", 0)


def _load_config(args) -> dict:
    return parse_config(args.config) if args.config else {}


def _make_backend(spec: str, default_seed: int):
    kind, _, arg = spec.partition(":")
    if kind == "test":
        return stats_backend(int(arg) if arg else default_seed)
    if kind == "onnx":
        if not arg:
            raise UsageError("onnx backend needs a model path: onnx:PATH")
        return load_cnn_backend(arg)
    raise UsageError(f"unknown backend {spec!r}; expected test[:SEED] "
                     f"or onnx:PATH")


def _parse_ids(spec: str | None) -> list[str] | None:
    if spec is None:
        return None
    if spec.startswith("@"):
        return [line.strip() for line in Path(spec[1:]).read_text().splitlines()
                if line.strip()]
    return [s for s in spec.split(",") if s]


def _select_bags(bags: list[FeatureBag], ids: list[str] | None):
    if ids is None:
        return bags
    by_id = {bag.slide_id: bag for bag in bags}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"ids not present in cache: {', '.join(missing)}")
    return [by_id[i] for i in ids]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_sample(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    n_patches = args.np if args.np is not None else config.get("np", 100)
    if args.out is None:
        raise UsageError("sample needs --out for the bag manifest")
    labels = _read_labels_csv(args.labels) if args.labels else None
    started = _utc_now()
    bags = []
    for slide_path in args.slides:
        path = Path(slide_path)
        slide = load_slide(path)
        slide.label = _slide_label(path, slide.id, labels)
        rng = np.random.Generator(np.random.PCG64(_slide_seed(seed, slide.id)))
        triples = sample_bag(slide, n_patches, rng,
                             max_attempts=args.max_attempts)
        bags.append((slide.id, triples))
        if args.dump_dir:
            dump_patches(args.dump_dir, slide.id, triples)
    write_bag_manifest(args.out, bags)
    write_run_manifest("sample", Path(args.out), seed,
                       {"np": n_patches}, [Path(p) for p in args.slides],
                       [Path(args.out)], started)
    print(f"wrote bag manifest for {len(bags)} slide(s) to {args.out}")
    return 0


_SCALE_BY_NAME = {"1": 1.0, "1/2": 0.5, "1/4": 0.25}


def _read_bag_manifest(path: str | Path) -> dict[str, list[list[PatchSpec]]]:
    """Manifest rows grouped into per-slide lists of spec triples."""
    slides: dict[str, dict[int, dict[float, PatchSpec]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["slide_id", "patch_index", "scale",
                      "origin_x", "origin_y", "extent"]:
            raise FormatError(f"{path}: not a bag manifest (bad header)")
        for line, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise FormatError(f"{path}:{line}: malformed row")
            slide_id, idx, scale_name = row[0], int(row[1]), row[2]
            if scale_name not in _SCALE_BY_NAME:
                raise FormatError(f"{path}:{line}: unknown scale {scale_name!r}")
            scale = _SCALE_BY_NAME[scale_name]
            spec = PatchSpec(int(row[3]), int(row[4]), int(row[5]), scale)
            slides.setdefault(slide_id, {}).setdefault(idx, {})[scale] = spec
    out: dict[str, list[list[PatchSpec]]] = {}
    for slide_id, by_index in slides.items():
        triples = []
        for idx in sorted(by_index):
            specs = by_index[idx]
            if set(specs) != set(SCALES):
                raise FormatError(
                    f"{path}: slide {slide_id!r} patch {idx} is missing scales"
                )
            triples.append([specs[s] for s in SCALES])
        out[slide_id] = triples
    return out


def cmd_featurize(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    if args.out is None:
        raise UsageError("featurize needs --out for the feature cache")
    backend = _make_backend(args.backend, seed)
    labels = _read_labels_csv(args.labels) if args.labels else None
    manifest = _read_bag_manifest(args.manifest)
    slides_by_id = {}
    for slide_path in args.slides:
        path = Path(slide_path)
        slide = load_slide(path)
        slide.label = _slide_label(path, slide.id, labels)
        slides_by_id[slide.id] = slide
    started = _utc_now()
    bags = []
    for slide_id in manifest:
        if slide_id not in slides_by_id:
            raise DataError(f"manifest references slide {slide_id!r} "
                            f"not given on the command line")
        slide = slides_by_id[slide_id]
        if slide.label is None:
            raise DataError(f"slide {slide_id!r} has no FN/PC label; "
                            f"use --labels or FN/PC parent directories")
        triples = []
        for specs in manifest[slide_id]:
            pixels = tuple(extract_patch(slide, spec) for spec in specs)
            triples.append(PatchTriple(specs=tuple(specs), pixels=pixels))
        bags.append(extract_features(backend, triples, slide_id, slide.label))
    write_cache(args.out, bags)
    write_run_manifest(
        "featurize", Path(args.out), seed, {"backend": args.backend},
        [Path(args.manifest)] + [Path(p) for p in args.slides],
        [Path(args.out)], started)
    print(f"wrote feature cache with {len(bags)} bag(s) to {args.out}")
    return 0


def _codebook_paths(out: Path, method: str) -> list[Path]:
    if method != "MM":
        return [out]
    return [out.with_name(f"{out.stem}_s{d}{out.suffix}") for d in (1, 2, 4)]


def cmd_fit_codebook(args) -> int:
    from .codebook import write_codebook

    config = _load_config(args)
    seed = _resolve_seed(args, config)
    method = args.method or config.get("method", "baseline")
    k = args.k if args.k is not None else config.get("k", 32)
    if args.out is None:
        raise UsageError("fit-codebook needs --out")
    bags = _select_bags(read_cache(args.cache), _parse_ids(args.ids))
    started = _utc_now()
    model = aggregate.fit_aggregator(method, bags, k, seed,
                                     restarts=config.get("restarts", 1))
    paths = _codebook_paths(Path(args.out), method)
    for path, cb in zip(paths, model.codebooks):
        write_codebook(path, cb)
    write_run_manifest("fit-codebook", Path(args.out), seed,
                       {"method": method, "k": k}, [Path(args.cache)],
                       paths, started)
    print(f"fitted {method} codebook(s), k={k}, inertia "
          + ", ".join(f"{cb.inertia:.6g}" for cb in model.codebooks))
    return 0


def cmd_aggregate(args) -> int:
    from .codebook import read_codebook

    config = _load_config(args)
    seed = _resolve_seed(args, config)
    method = args.method or config.get("method", "baseline")
    if args.out is None:
        raise UsageError("aggregate needs --out for the histogram CSV")
    expected = 3 if method == "MM" else 1
    if len(args.codebook) != expected:
        raise UsageError(f"{method} needs {expected} --codebook file(s), "
                         f"got {len(args.codebook)}")
    codebooks = tuple(read_codebook(p) for p in args.codebook)
    model = aggregate.AggregationModel(method=method, k=codebooks[0].k,
                                       codebooks=codebooks)
    bags = _select_bags(read_cache(args.cache), _parse_ids(args.ids))
    started = _utc_now()
    hists = [aggregate.histogram(model, bag) for bag in bags]
    aggregate.write_histograms(args.out, hists)
    write_run_manifest(
        "aggregate", Path(args.out), seed, {"method": method, "k": model.k},
        [Path(args.cache)] + [Path(p) for p in args.codebook],
        [Path(args.out)], started)
    print(f"wrote {len(hists)} histogram(s) of width {hists[0].width} "
          f"to {args.out}")
    return 0


def _hists_to_xy(hists):
    x = np.vstack([h.values for h in hists])
    missing = [h.slide_id for h in hists if h.label not in classify.LABEL_TO_SIGN]
    if missing:
        raise DataError(f"histograms without FN/PC labels: "
                        f"{', '.join(missing)}")
    y = np.array([classify.LABEL_TO_SIGN[h.label] for h in hists],
                 dtype=np.float64)
    return x, y


def cmd_train(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    classifier = args.classifier or config.get("classifier", "linear")
    cost = args.cost if args.cost is not None else config.get("cost", 1.0)
    gamma = args.gamma if args.gamma is not None else config.get("gamma", 1e-3)
    if args.out is None:
        raise UsageError("train needs --out for the model file")
    hists = aggregate.read_histograms(args.hists)
    x, y = _hists_to_xy(hists)
    started = _utc_now()
    grid_report = None
    if classifier == "linear":
        model = classify.train_svm(x, y, "linear", cost)
    elif classifier == "rbf":
        model = classify.train_svm(x, y, "rbf", cost, gamma)
    elif classifier == "optimized":
        rng = np.random.Generator(np.random.PCG64(seed))
        model, grid_report = classify.train_optimized(x, y, rng)
    else:
        raise UsageError(f"unknown classifier {classifier!r}")
    classify.write_model(args.out, model)
    outputs = [Path(args.out)]
    if args.grid_report:
        if grid_report is None:
            raise UsageError("--grid-report is only valid with "
                             "--classifier optimized")
        grid_report.write_csv(args.grid_report)
        outputs.append(Path(args.grid_report))
    write_run_manifest(
        "train", Path(args.out), seed,
        {"classifier": classifier, "cost": cost, "gamma": gamma},
        [Path(args.hists)], outputs, started)
    print(f"trained {model.kernel} SVM with "
          f"{model.support_vectors.shape[0]} support vector(s)")
    return 0


def cmd_evaluate(args) -> int:
    model = classify.read_model(args.model)
    hists = aggregate.read_histograms(args.hists)
    x, y = _hists_to_xy(hists)
    pred, decisions = classify.predict(model, x)
    accuracy = float(np.mean(pred == y))
    if args.out:
        started = _utc_now()
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slide_id", "label", "predicted", "decision"])
            for h, p, d in zip(hists, pred, decisions):
                writer.writerow([h.slide_id, h.label,
                                 classify.SIGN_TO_LABEL[int(p)], f"{d:.9g}"])
        write_run_manifest("evaluate", Path(args.out), 0, {},
                           [Path(args.hists), Path(args.model)],
                           [Path(args.out)], started)
    print(f"accuracy {accuracy:.9g}")
    return 0


def _experiment_config(args, config: dict) -> harness.ExperimentConfig:
    base = harness.ExperimentConfig(
        method=config.get("method", "baseline"),
        k=config.get("k", 32),
        classifier=config.get("classifier", "linear"),
        gamma=config.get("gamma", 1e-3),
        cost=config.get("cost", 1.0),
        n_patches=config.get("np", 100),
        repetitions=config.get("repetitions", 512),
        train_fraction=config.get("train_fraction", 0.8),
        aug1=config.get("aug1", False),
        seed=config.get("seed", 0),
        restarts=config.get("restarts", 1),
    )
    return harness.with_overrides(
        base, method=args.method, k=args.k, classifier=args.classifier,
        repetitions=args.reps, cost=args.cost, gamma=args.gamma,
        aug1=args.aug1, seed=args.seed,
        threads=args.threads, n_patches=args.np,
    ).validate()


def cmd_experiment(args) -> int:
    config_values = _load_config(args)
    cfg = _experiment_config(args, config_values)
    if args.out is None:
        raise UsageError("experiment needs --out for the results CSV")
    bags = read_cache(args.cache)
    if args.np is None and "np" not in config_values and bags:
        cfg = harness.with_overrides(cfg, n_patches=bags[0].n_patches)
    started = _utc_now()
    result = harness.run_experiment(bags, cfg)
    rows = [report.result_row(result, include_timing=args.record_timing)]
    report.write_results_csv(args.out, rows)
    outputs = [Path(args.out)]
    if args.per_rep:
        report.write_per_repetition_csv(args.per_rep, result)
        outputs.append(Path(args.per_rep))
    write_run_manifest("experiment", Path(args.out), cfg.seed,
                       {k: v for k, v in asdict(cfg).items()
                        if k not in ("threads",)},
                       [Path(args.cache)], outputs, started)
    print(f"{cfg.method} k={cfg.k} {cfg.classifier}: "
          f"mean_acc {result.mean_acc:.4f} std {result.std_acc:.4f} "
          f"({cfg.repetitions} repetitions, {result.wall_seconds:.1f}s)")
    return 0


def cmd_synth(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    if args.out is None:
        raise UsageError("synth needs --out for the feature cache")
    spec = harness.synthetic_preset(
        args.preset, slides_per_class=args.slides_per_class,
        n_patches=args.np if args.np is not None else config.get("np"),
        seed=seed)
    started = _utc_now()
    bags = harness.generate_synthetic_dataset(spec)
    write_cache(args.out, bags)
    write_run_manifest(
        "synth", Path(args.out), seed,
        {"preset": args.preset, "slides_per_class": spec.slides_per_class,
         "np": spec.n_patches,
         "scale_separation": {str(k): v
                              for k, v in spec.scale_separation.items()}},
        [], [Path(args.out)], started)
    print(f"wrote synthetic cache ({args.preset}, "
          f"{2 * spec.slides_per_class} slides) to {args.out}")
    return 0


def cmd_report(args) -> int:
    if args.out is None:
        raise UsageError("report needs --out PREFIX")
    rows = []
    for path in args.results:
        rows.extend(report.read_results_csv(path))
    started = _utc_now()
    csv_path = Path(f"{args.out}.csv")
    svg_path = Path(f"{args.out}.svg")
    report.write_results_csv(csv_path, rows)
    svg = report.render_report_svg(rows, baseline_mean=args.baseline_mean)
    manifest_hash = write_run_manifest(
        "report", csv_path, 0,
        {"baseline_mean": args.baseline_mean},
        [Path(p) for p in args.results], [csv_path], started)
    svg_path.write_text(f"<!-- manifest:{manifest_hash} -->\n" + svg)
    print(f"wrote {csv_path} and {svg_path} ({len(rows)} bars)")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msmil",
        description="Multi-scale multiple-instance-learning pipeline for "
                    "whole-slide-image classification.",
        epilog=_CONFIG_HELP,
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (default: config seed, else 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="parallelism cap; 1 reproduces any N bit-exactly")
    common.add_argument("--config", default=None, help=_CONFIG_HELP)
    common.add_argument("--out", default=None, help="primary output path")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", parents=[common],
                       help="sample multi-scale patch triples from slides")
    p.add_argument("slides", nargs="+", help="slide raster files (PNG/TIFF)")
    p.add_argument("--np", type=int, default=None,
                   help="patch triples per slide (default 100)")
    p.add_argument("--labels", default=None,
                   help="CSV mapping slide_id,label")
    p.add_argument("--dump-dir", default=None,
                   help="write the patches as PNG files here")
    p.add_argument("--max-attempts", type=int, default=None,
                   help="consecutive-rejection budget (default 1000*np)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("featurize", parents=[common],
                       help="extract per-patch features into a cache file")
    p.add_argument("slides", nargs="+", help="slide raster files")
    p.add_argument("--manifest", required=True, help="bag manifest CSV")
    p.add_argument("--backend", default="test",
                   help="feature backend: test[:SEED] or onnx:PATH")
    p.add_argument("--labels", default=None, help="CSV mapping slide_id,label")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("fit-codebook", parents=[common],
                       help="fit k-means codebook(s) on cached features")
    p.add_argument("--cache", required=True, help="feature cache file")
    p.add_argument("--method", default=None,
                   help="baseline | MC | MA | MM (default from config)")
    p.add_argument("--k", type=int, default=None, help="cluster count")
    p.add_argument("--ids", default=None,
                   help="comma-separated slide ids or @file (training subset)")
    p.set_defaults(func=cmd_fit_codebook)

    p = sub.add_parser("aggregate", parents=[common],
                       help="build bag-of-words histograms")
    p.add_argument("--cache", required=True)
    p.add_argument("--method", default=None)
    p.add_argument("--codebook", nargs="+", required=True,
                   help="codebook file(s); MM takes three in scale order")
    p.add_argument("--ids", default=None)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train", parents=[common], help="train an SVM")
    p.add_argument("--hists", required=True, help="histogram CSV")
    p.add_argument("--classifier", default=None,
                   help="linear | rbf | optimized")
    p.add_argument("--cost", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--grid-report", default=None,
                   help="grid-search report CSV (optimized only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score histograms against a trained model")
    p.add_argument("--hists", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common],
                       help="repeated-split experiment over a feature cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--method", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--classifier", default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--np", type=int, default=None)
    p.add_argument("--cost", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--aug1", action="store_const", const=True, default=None)
    p.add_argument("--per-rep", default=None,
                   help="also write per-repetition accuracies here")
    p.add_argument("--record-timing", action="store_true",
                   help="record wall time in the results CSV (makes the "
                        "file differ between runs)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic feature cache")
    p.add_argument("--preset", required=True,
                   choices=sorted(harness.SYNTH_PRESETS))
    p.add_argument("--slides-per-class", type=int, default=None)
    p.add_argument("--np", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", parents=[common],
                       help="render results CSVs into a table and bar chart")
    p.add_argument("results", nargs="+", help="results CSV files")
    p.add_argument("--baseline-mean", type=float, default=None,
                   help="horizontal reference rule, e.g. 0.875")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MsmilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
