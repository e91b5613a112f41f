"""Repeated-split experiments and the synthetic-data oracle.

Each repetition draws a stratified 80/20 slide-level split, fits the
aggregation codebook(s) on the training bags only, trains the configured
SVM on (optionally Aug1-augmented) training histograms and scores the held
out slides.  All randomness flows from one master seed; repetition r uses
a seed derived by hashing (master seed, r), so repetitions are independent
and reproducible in any execution order.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .aggregate import (METHODS, AggregationModel, augment_aug1,
                        fit_aggregator, histogram, quantize_histogram)
from .classify import (LABEL_TO_SIGN, GridSearchReport, SvmModel, predict,
                       train_optimized, train_svm)
from .errors import DataError, FormatError, SizeError
from .features import FEATURE_DIM, FeatureBag
from .slide import SCALES

CLASSIFIERS = ("linear", "rbf", "optimized")


@dataclass
class ExperimentConfig:
    """Knobs of one experiment; defaults follow the evaluation protocol."""

    method: str = "baseline"
    k: int = 32
    classifier: str = "linear"
    gamma: float = 1e-3          # fixed-kernel RBF runs
    cost: float = 1.0            # fixed-kernel runs
    n_patches: int = 100
    repetitions: int = 512
    train_fraction: float = 0.8
    aug1: bool = False
    seed: int = 0
    threads: int = 1
    restarts: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise FormatError(f"unknown method {self.method!r}")
        if self.classifier not in CLASSIFIERS:
            raise FormatError(f"unknown classifier {self.classifier!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )
        if self.repetitions < 1:
            raise SizeError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.k < 1:
            raise SizeError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.seed < 2 ** 64:
            raise DataError("seed must fit in an unsigned 64-bit integer")
        return self


@dataclass
class SplitResult:
    accuracy: float
    train_idx: np.ndarray
    test_idx: np.ndarray
    aggregation: AggregationModel = field(repr=False)
    model: SvmModel = field(repr=False)
    grid_report: GridSearchReport | None = field(default=None, repr=False)

    @property
    def chosen(self) -> tuple | None:
        if self.grid_report is None:
            return None
        cell = self.grid_report.chosen_cell()
        return (cell.kernel, cell.gamma, cell.c)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    accuracies: np.ndarray
    mean_acc: float
    std_acc: float
    wall_seconds: float
    chosen: list[tuple | None] = field(default_factory=list, repr=False)


def repetition_seed(master_seed: int, rep: int) -> int:
    """Stable per-repetition seed: first 8 bytes (little-endian) of
    SHA-256 over b"msmil-rep" + master seed + repetition index, both as
    unsigned 64-bit little-endian."""
    digest = hashlib.sha256(
        b"msmil-rep"
        + int(master_seed).to_bytes(8, "little")
        + int(rep).to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest[:8], "little")


def stratified_split(signs: np.ndarray, train_fraction: float,
                     rng: np.random.Generator):
    """Slide-level stratified split; per-class train count is
    round(train_fraction * class size), clamped to keep both sides
    non-empty.  Classes are processed in sign order (-1 then +1)."""
    train, test = [], []
    for cls in (-1, 1):
        idx = np.flatnonzero(signs == cls)
        if idx.size < 2:
            raise SizeError(
                f"need at least 2 slides per class, class {cls} has {idx.size}"
            )
        perm = rng.permutation(idx)
        n_train = round(train_fraction * idx.size)
        n_train = min(max(n_train, 1), idx.size - 1)
        train.extend(perm[:n_train])
        test.extend(perm[n_train:])
    return np.sort(np.array(train)), np.sort(np.array(test))


def _bag_signs(bags: Sequence[FeatureBag]) -> np.ndarray:
    signs = []
    for bag in bags:
        if bag.label not in LABEL_TO_SIGN:
            raise DataError(f"bag {bag.slide_id!r} has no FN/PC label")
        signs.append(LABEL_TO_SIGN[bag.label])
    return np.array(signs, dtype=np.int64)


def _train_classifier(x, y, config: ExperimentConfig, rng):
    if config.classifier == "linear":
        return train_svm(x, y, "linear", config.cost), None
    if config.classifier == "rbf":
        return train_svm(x, y, "rbf", config.cost, config.gamma), None
    model, report = train_optimized(x, y, rng)
    return model, report


def run_split(bags: Sequence[FeatureBag], config: ExperimentConfig,
              rng: np.random.Generator, split=None) -> SplitResult:
    """One stratified split, trained and scored.

    Randomness consumption order: split draw (unless ``split`` is given),
    one 63-bit integer for the codebook seed, Aug1 subsamples per training
    slide in ascending index order, then grid-search fold shuffling for
    the optimized classifier.
    """
    config.validate()
    signs = _bag_signs(bags)
    if split is None:
        train_idx, test_idx = stratified_split(signs, config.train_fraction, rng)
    else:
        train_idx, test_idx = (np.asarray(s, dtype=np.int64) for s in split)
    fit_seed = int(rng.integers(0, 2 ** 63))

    train_bags = [bags[i] for i in train_idx]
    aggregation = fit_aggregator(config.method, train_bags, config.k, fit_seed,
                                 restarts=config.restarts)

    x_train, y_train = [], []
    for i in train_idx:
        x_train.append(quantize_histogram(histogram(aggregation, bags[i]).values))
        y_train.append(signs[i])
        if config.aug1:
            for copy in augment_aug1(bags[i], rng):
                x_train.append(
                    quantize_histogram(histogram(aggregation, copy).values))
                y_train.append(signs[i])
    x_train = np.vstack(x_train)
    y_train = np.array(y_train, dtype=np.float64)

    x_test = np.vstack([
        quantize_histogram(histogram(aggregation, bags[i]).values)
        for i in test_idx
    ])
    y_test = signs[test_idx].astype(np.float64)

    model, report = _train_classifier(x_train, y_train, config, rng)
    stored = model.storage_precision()
    pred, _ = predict(stored, x_test)
    accuracy = float(np.mean(pred == y_test))
    return SplitResult(accuracy=accuracy, train_idx=train_idx,
                       test_idx=test_idx, aggregation=aggregation,
                       model=stored, grid_report=report)


def run_experiment(bags: Sequence[FeatureBag],
                   config: ExperimentConfig) -> ExperimentResult:
    """Repeat :func:`run_split` ``config.repetitions`` times.

    Repetition r runs on ``Generator(PCG64(repetition_seed(seed, r)))``;
    results are keyed by repetition index, so any thread schedule yields
    identical output.
    """
    config.validate()
    started = time.perf_counter()

    def one(rep: int) -> SplitResult:
        rng = np.random.Generator(
            np.random.PCG64(repetition_seed(config.seed, rep)))
        return run_split(bags, config, rng)

    reps = range(config.repetitions)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, reps))
    else:
        results = [one(r) for r in reps]

    accuracies = np.array([r.accuracy for r in results], dtype=np.float64)
    mean_acc = float(np.mean(accuracies))
    std_acc = float(np.sqrt(np.mean((accuracies - mean_acc) ** 2)))
    return ExperimentResult(
        config=config, accuracies=accuracies, mean_acc=mean_acc,
        std_acc=std_acc, wall_seconds=time.perf_counter() - started,
        chosen=[r.chosen for r in results],
    )


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic feature dataset with per-scale class signal.

    ``scale_separation`` maps each scale to the distance between the two
    class-conditional mixture means, in units of the within-component
    standard deviation; 0 marks the scale as class-independent noise.
    """

    slides_per_class: int
    n_patches: int
    scale_separation: dict[float, float]
    components: int = 4
    component_spread: float = 2.0
    dim: int = FEATURE_DIM
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.slides_per_class < 1 or self.n_patches < 1:
            raise SizeError("slides_per_class and n_patches must be >= 1")
        if set(self.scale_separation) != set(SCALES):
            raise DataError(
                f"scale_separation must cover scales {SCALES}, "
                f"got {sorted(self.scale_separation)}"
            )
        if any(s < 0 for s in self.scale_separation.values()):
            raise DataError("separations must be non-negative")
        if self.components < 1 or self.dim < 1:
            raise SizeError("components and dim must be >= 1")
        return self


def _scale_params(spec: SyntheticSpec, rng: np.random.Generator):
    """Per-scale mixture parameters, drawn before any slide data."""
    params = {}
    for scale in SCALES:
        direction = rng.standard_normal(spec.dim)
        direction /= np.sqrt((direction ** 2).sum())
        centers = rng.standard_normal((spec.components, spec.dim)) \
            * spec.component_spread
        params[scale] = (direction, centers)
    return params


def synthetic_scale_params(spec: SyntheticSpec):
    """Expose the generator's per-scale (direction, component centers)."""
    spec.validate()
    return _scale_params(spec, np.random.Generator(np.random.PCG64(spec.seed)))


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[FeatureBag]:
    """Draw the dataset described by ``spec`` (deterministic in its seed).

    Per slide, each patch triple draws one mixture component, shared by
    all three scales (co-located patches show the same structure at every
    scale); each scale has its own component centers.  A patch row at a
    scale is ``center[component] + class_sign * (separation / 2) *
    direction + N(0, I)``.  Draw order: scale parameters first, then
    slides FN before PC; per slide the component indices, then per scale
    (1, 1/2, 1/4) the noise.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    params = _scale_params(spec, rng)
    bags = []
    for sign, name in ((-1, "FN"), (1, "PC")):
        for i in range(spec.slides_per_class):
            comp = rng.integers(0, spec.components, size=spec.n_patches)
            per_scale = {}
            for scale in SCALES:
                direction, centers = params[scale]
                offset = sign * (spec.scale_separation[scale] / 2.0) * direction
                noise = rng.standard_normal((spec.n_patches, spec.dim))
                rows = centers[comp] + offset + noise
                per_scale[scale] = rows.astype(np.float32)
            bags.append(FeatureBag(slide_id=f"{name}{i:03d}", label=name,
                                   per_scale=per_scale))
    return bags


SYNTH_PRESETS = {
    # every scale carries strong signal: all methods should separate
    "separable": dict(scale_separation={1.0: 10.0, 0.5: 10.0, 0.25: 10.0},
                      slides_per_class=20, n_patches=50,
                      components=4, component_spread=2.0),
    # strong signal only at the base scale
    "scale1-signal": dict(scale_separation={1.0: 10.0, 0.5: 0.0, 0.25: 0.0},
                          slides_per_class=20, n_patches=50,
                          components=4, component_spread=2.0),
    # no signal anywhere: chance-level control
    "all-noise": dict(scale_separation={1.0: 0.0, 0.5: 0.0, 0.25: 0.0},
                      slides_per_class=20, n_patches=50,
                      components=2, component_spread=1.0),
    # moderate base-scale signal, lower scales pure noise
    "probe-dilution": dict(scale_separation={1.0: 2.0, 0.5: 0.0, 0.25: 0.0},
                           slides_per_class=16, n_patches=100,
                           components=2, component_spread=1.0),
    # complementary independent signal at the lowest scale
    "probe-complement": dict(scale_separation={1.0: 2.0, 0.5: 0.0, 0.25: 2.0},
                             slides_per_class=16, n_patches=100,
                             components=2, component_spread=1.0),
}


def synthetic_preset(name: str, slides_per_class: int | None = None,
                     n_patches: int | None = None, seed: int = 0,
                     **overrides) -> SyntheticSpec:
    """Named :data:`SYNTH_PRESETS` entry as a ready spec.

    Arguments override the preset defaults when given.
    """
    if name not in SYNTH_PRESETS:
        raise FormatError(
            f"unknown synthetic preset {name!r}; "
            f"expected one of {sorted(SYNTH_PRESETS)}"
        )
    params = dict(SYNTH_PRESETS[name])
    params["scale_separation"] = dict(params["scale_separation"])
    if slides_per_class is not None:
        params["slides_per_class"] = slides_per_class
    if n_patches is not None:
        params["n_patches"] = n_patches
    params.update(overrides)
    return SyntheticSpec(seed=seed, **params).validate()


def with_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Config copy with non-None overrides applied."""
    return replace(config,
                   **{k: v for k, v in overrides.items() if v is not None})
