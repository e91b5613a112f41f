"""Per-patch feature extraction through pluggable backends.

Every backend is a pure function of the patch pixels (and its own fixed
parameters), producing one 512-wide float32 vector per patch.  The
deterministic statistics backend lets the full pipeline run and be tested
without a CNN model file; the ONNX backend loads an externally supplied
network in the open interchange format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BackendError, DimensionError, ModelShapeError, SizeError
from ..slide import PATCH_SIZE, SCALES, PatchTriple

FEATURE_DIM = 512

# Standard image-net channel statistics applied before CNN inference.
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float64)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float64)


@dataclass
class FeatureBag:
    """Per-slide feature matrices, one per scale, row-aligned across scales."""

    slide_id: str
    label: str | None
    per_scale: dict[float, np.ndarray] = field(repr=False)

    def __post_init__(self):
        rows = {s: m.shape[0] for s, m in self.per_scale.items()}
        if set(self.per_scale) != set(SCALES):
            raise DimensionError(
                f"bag {self.slide_id!r}: expected scales {SCALES}, "
                f"got {sorted(self.per_scale)}"
            )
        if len(set(rows.values())) != 1:
            raise DimensionError(
                f"bag {self.slide_id!r}: row counts differ across scales: {rows}"
            )
        for s, m in self.per_scale.items():
            if m.ndim != 2 or m.shape[1] != FEATURE_DIM or m.dtype != np.float32:
                raise DimensionError(
                    f"bag {self.slide_id!r} scale {s}: expected "
                    f"(n, {FEATURE_DIM}) float32, got {m.shape} {m.dtype}"
                )

    @property
    def n_patches(self) -> int:
        return self.per_scale[SCALES[0]].shape[0]


class FeatureBackend:
    """Base class: subclasses implement ``_compute(patch) -> (512,) float32``."""

    def features(self, patches) -> np.ndarray:
        out = np.empty((len(patches), FEATURE_DIM), dtype=np.float32)
        for i, patch in enumerate(patches):
            try:
                vec = self._compute(patch)
            except Exception as exc:
                raise BackendError(f"inference failed on patch {i}: {exc}") from exc
            vec = np.asarray(vec, dtype=np.float32).reshape(-1)
            if vec.shape != (FEATURE_DIM,):
                raise BackendError(
                    f"patch {i}: backend returned shape {vec.shape}, "
                    f"expected ({FEATURE_DIM},)"
                )
            if not np.all(np.isfinite(vec)):
                raise BackendError(f"patch {i}: backend returned non-finite values")
            out[i] = vec
        return out

    def _compute(self, patch: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class DeterministicStatsBackend(FeatureBackend):
    """Seeded cell-statistics backend, the test stand-in for a CNN.

    Formula (recomputable independently):

    1. ``x = patch / 255`` as float64, shape (256, 256, 3).
    2. Partition into an 8x8 grid of 32x32-pixel cells.  Per cell and RGB
       channel compute the mean and the population variance, giving
       ``means`` and ``vars`` of shape (8, 8, 3).
    3. ``stats = concat(means.ravel(), vars.ravel())``, length 384,
       C-order (cell row, cell column, channel).
    4. ``M = Generator(PCG64(seed)).standard_normal((512, 384)) / sqrt(384)``.
    5. Feature vector = ``(M @ stats)`` cast to float32.
    """

    CELL_GRID = 8

    def __init__(self, seed: int):
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        self._projection = rng.standard_normal((FEATURE_DIM, 384)) / np.sqrt(384.0)

    def _compute(self, patch: np.ndarray) -> np.ndarray:
        if patch.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise DimensionError(f"expected 256x256 RGB patch, got {patch.shape}")
        g = self.CELL_GRID
        cell = PATCH_SIZE // g
        x = patch.astype(np.float64) / 255.0
        cells = x.reshape(g, cell, g, cell, 3)
        means = cells.mean(axis=(1, 3))
        variances = cells.var(axis=(1, 3))
        stats = np.concatenate([means.ravel(), variances.ravel()])
        return (self._projection @ stats).astype(np.float32)


def stats_backend(seed: int) -> DeterministicStatsBackend:
    """Deterministic pipeline-testing backend for the given seed."""
    return DeterministicStatsBackend(seed)


def area_resize(channel: np.ndarray, out_size: int) -> np.ndarray:
    """Exact fractional box-average resize of one 2-d channel (float64)."""
    in_size = channel.shape[0]
    if channel.shape != (in_size, in_size):
        raise DimensionError(f"expected square channel, got {channel.shape}")
    ratio = in_size / out_size
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        lo, hi = i * ratio, (i + 1) * ratio
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, in_size)):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    weights /= ratio
    return weights @ channel @ weights.T


class OnnxCnnBackend(FeatureBackend):
    """CNN feature extractor loaded from an ONNX graph.

    Preprocessing: RGB scaled to [0, 1], resized to the model's input side
    by area averaging when it is not 256, then normalized with the
    image-net channel means and deviations, fed as (1, 3, H, W) float32.
    """

    def __init__(self, graph, input_size: int):
        self._graph = graph
        self.input_size = input_size

    def _compute(self, patch: np.ndarray) -> np.ndarray:
        x = patch.astype(np.float64) / 255.0
        if self.input_size != PATCH_SIZE:
            x = np.stack(
                [area_resize(x[:, :, c], self.input_size) for c in range(3)],
                axis=2,
            )
        x = (x - IMAGENET_MEAN) / IMAGENET_STD
        x = np.ascontiguousarray(x.transpose(2, 0, 1)[None], dtype=np.float32)
        return self._graph.run(x).reshape(-1)


def load_cnn_backend(model_file) -> OnnxCnnBackend:
    """Load an ONNX feature extractor and validate its interface.

    The graph must take one (N, 3, 224, 224) or (N, 3, 256, 256) input and
    produce a 512-wide output; anything else raises
    :class:`~msmil.errors.ModelShapeError` listing expected vs found.
    """
    from .onnx_graph import load_graph

    graph = load_graph(model_file)
    dims = graph.input_dims  # (C, H, W) after dropping the batch axis
    if len(dims) != 3 or dims[0] != 3 or dims[1] != dims[2] or \
            dims[1] not in (224, 256):
        raise ModelShapeError(
            f"{model_file}: expected input 3x224x224 or 3x256x256, "
            f"found {'x'.join(str(d) for d in dims)}"
        )
    size = dims[1]
    probe = graph.run(np.zeros((1, 3, size, size), dtype=np.float32))
    width = int(np.prod(probe.shape[1:])) if probe.ndim > 1 else probe.size
    if width != FEATURE_DIM:
        raise ModelShapeError(
            f"{model_file}: expected {FEATURE_DIM}-wide output, found {width}"
        )
    return OnnxCnnBackend(graph, size)


def extract_features(backend: FeatureBackend, triples: list[PatchTriple],
                     slide_id: str, label: str | None = None) -> FeatureBag:
    """One 512-d vector per patch and scale; row order equals triple order."""
    if not triples:
        raise SizeError("cannot extract features from an empty triple list")
    per_scale = {}
    for idx, scale in enumerate(SCALES):
        patches = [t.pixels[idx] for t in triples]
        per_scale[scale] = backend.features(patches)
    return FeatureBag(slide_id=slide_id, label=label, per_scale=per_scale)
