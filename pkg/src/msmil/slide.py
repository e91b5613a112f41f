"""Slide rasters and multi-scale patch sampling.

A patch triple consists of three square regions: the base 256-pixel patch
plus two co-centered regions of 512 and 1024 pixels (scales 1/2 and 1/4),
each downscaled to 256x256 by exact area averaging.  Base origins are drawn
uniformly; a patch qualifies as tissue when its mean green value is below
the acceptance threshold.  Lower-scale regions that stick out of the slide
are shifted toward the image center in quarter-extent steps until they fit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (DimensionError, FormatError, GeometryError, SizeError,
                     TissueScarcityError)

PATCH_SIZE = 256
SCALES = (1.0, 0.5, 0.25)
EXTENTS = (256, 512, 1024)
GREEN_MEAN_THRESHOLD = 190
LABELS = ("FN", "PC")


@dataclass(frozen=True)
class PatchSpec:
    """Square source region at full resolution, resampled to 256x256."""

    origin_x: int
    origin_y: int
    extent: int
    scale: float
    output_size: int = PATCH_SIZE

    def __post_init__(self):
        if round(self.extent * self.scale) != self.output_size:
            raise DimensionError(
                f"extent {self.extent} does not match scale {self.scale}"
            )


@dataclass
class SlideImage:
    """Addressable RGB raster with an identifier and optional class label."""

    id: str
    pixels: np.ndarray  # (height, width, 3) uint8
    label: str | None = None

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise DimensionError(
                f"slide {self.id!r}: expected (h, w, 3) uint8 pixels, got "
                f"shape {p.shape} dtype {p.dtype}"
            )
        if self.label is not None and self.label not in LABELS:
            raise FormatError(f"slide {self.id!r}: unknown label {self.label!r}")
        self.pixels.setflags(write=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class PatchTriple:
    """Co-located patches at scales 1, 1/2 and 1/4, each 256x256."""

    specs: tuple[PatchSpec, PatchSpec, PatchSpec]
    pixels: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)


def synthetic_slide(width: int, height: int, rgb: Sequence[int],
                    slide_id: str = "synthetic",
                    label: str | None = None) -> SlideImage:
    """Solid-color in-memory slide, mainly for tests and demos."""
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:] = np.asarray(rgb, dtype=np.uint8)
    return SlideImage(id=slide_id, pixels=pixels, label=label)


def load_slide(path: str | Path, slide_id: str | None = None,
               label: str | None = None) -> SlideImage:
    """Load an 8-bit RGB PNG or TIFF raster."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise FormatError(f"cannot read slide {path}: {exc}") from None
    if img.mode != "RGB":
        raise FormatError(
            f"slide {path}: expected 8-bit RGB raster, got mode {img.mode!r}"
        )
    pixels = np.asarray(img, dtype=np.uint8)
    return SlideImage(id=slide_id or path.stem, pixels=pixels, label=label)


def sample_origin(slide: SlideImage, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform base-patch origin; x in [0, width-256], y in [0, height-256]."""
    if slide.width < PATCH_SIZE or slide.height < PATCH_SIZE:
        raise DimensionError(
            f"slide {slide.id!r} is {slide.width}x{slide.height}; "
            f"needs at least {PATCH_SIZE} in both dimensions"
        )
    x = int(rng.integers(0, slide.width - PATCH_SIZE, endpoint=True))
    y = int(rng.integers(0, slide.height - PATCH_SIZE, endpoint=True))
    return x, y


def tissue_check(pixels: np.ndarray) -> bool:
    """True iff the mean green value is strictly below 190.

    Computed in integer arithmetic, so a mean of exactly 190 is rejected
    without floating-point ambiguity.
    """
    if pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise DimensionError(
            f"tissue check expects a {PATCH_SIZE}x{PATCH_SIZE} RGB block, "
            f"got shape {pixels.shape}"
        )
    green_sum = int(pixels[:, :, 1].sum(dtype=np.uint64))
    return green_sum < GREEN_MEAN_THRESHOLD * PATCH_SIZE * PATCH_SIZE


def _fit_axis(start: int, extent: int, dim: int) -> int:
    """Shift a 1-d interval into [0, dim) in quarter-extent steps.

    Steps move toward the image center, as many as needed.  If a step
    overshoots straight into the opposite violation (possible when the
    slack dim - extent is smaller than the step), the interval is clamped
    to the nearest valid position instead of oscillating.
    """
    step = extent // 4
    while not 0 <= start <= dim - extent:
        if start < 0:
            start += step
            if start > dim - extent:  # overshot across the valid window
                return max(0, min(start, dim - extent))
        else:
            start -= step
            if start < 0:
                return max(0, min(start, dim - extent))
    return start


def build_multiscale_specs(origin: tuple[int, int],
                           slide_dims: tuple[int, int]) -> list[PatchSpec]:
    """Specs for one patch triple from a base origin.

    The 512- and 1024-pixel regions are centered on the base patch
    (start = origin - extent/2 + 128 per axis), then repositioned per axis
    with :func:`_fit_axis` if they extend past a slide boundary.
    """
    x, y = origin
    w, h = slide_dims
    if w < EXTENTS[-1] or h < EXTENTS[-1]:
        raise DimensionError(
            f"slide is {w}x{h}; the 1024-pixel region cannot fit "
            f"(needs at least {EXTENTS[-1]} in both dimensions)"
        )
    if not (0 <= x <= w - PATCH_SIZE and 0 <= y <= h - PATCH_SIZE):
        raise GeometryError(f"base origin ({x}, {y}) outside slide {w}x{h}")
    specs = [PatchSpec(x, y, PATCH_SIZE, 1.0)]
    for extent, scale in zip(EXTENTS[1:], SCALES[1:]):
        cx = _fit_axis(x - extent // 2 + PATCH_SIZE // 2, extent, w)
        cy = _fit_axis(y - extent // 2 + PATCH_SIZE // 2, extent, h)
        specs.append(PatchSpec(cx, cy, extent, scale))
    return specs


def extract_patch(slide: SlideImage, spec: PatchSpec) -> np.ndarray:
    """Cut the spec region and downscale to 256x256 by area averaging.

    The averaging blocks are non-overlapping extent/256 squares; the mean
    is rounded half-to-even on the final 8-bit value.  Scale-1 regions are
    returned as byte-identical copies.
    """
    x, y, e = spec.origin_x, spec.origin_y, spec.extent
    if not (0 <= x and x + e <= slide.width and 0 <= y and y + e <= slide.height):
        raise GeometryError(
            f"region ({x}, {y})+{e} outside slide {slide.id!r} "
            f"({slide.width}x{slide.height})"
        )
    region = slide.pixels[y:y + e, x:x + e]
    factor = e // PATCH_SIZE
    if factor == 1:
        return region.copy()
    blocks = region.reshape(PATCH_SIZE, factor, PATCH_SIZE, factor, 3)
    sums = blocks.sum(axis=(1, 3), dtype=np.uint32)
    n = factor * factor
    q, r = np.divmod(sums, n)
    round_up = (2 * r > n) | ((2 * r == n) & (q % 2 == 1))
    return (q + round_up).astype(np.uint8)


def sample_bag(slide: SlideImage, n_patches: int, rng: np.random.Generator,
               max_attempts: int | None = None) -> list[PatchTriple]:
    """Sample ``n_patches`` tissue-positive patch triples with rejection.

    The tissue check applies to the scale-1 patch only; overlapping patches
    are allowed.  Raises :class:`TissueScarcityError` after more than
    ``max_attempts`` (default ``1000 * n_patches``) consecutive rejections.
    """
    if n_patches < 1:
        raise SizeError(f"n_patches must be >= 1, got {n_patches}")
    if max_attempts is None:
        max_attempts = 1000 * n_patches
    dims = (slide.width, slide.height)
    triples: list[PatchTriple] = []
    rejections = 0
    while len(triples) < n_patches:
        origin = sample_origin(slide, rng)
        base = extract_patch(slide, PatchSpec(origin[0], origin[1], PATCH_SIZE, 1.0))
        if not tissue_check(base):
            rejections += 1
            if rejections > max_attempts:
                raise TissueScarcityError(slide.id, rejections)
            continue
        rejections = 0
        specs = build_multiscale_specs(origin, dims)
        pixels = (base, extract_patch(slide, specs[1]), extract_patch(slide, specs[2]))
        triples.append(PatchTriple(specs=tuple(specs), pixels=pixels))
    return triples


_SCALE_NAMES = {1.0: "1", 0.5: "1/2", 0.25: "1/4"}


def write_bag_manifest(path: str | Path,
                       bags: Iterable[tuple[str, Sequence[PatchTriple]]]) -> None:
    """CSV manifest: slide_id, patch_index, scale, origin_x, origin_y, extent."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "patch_index", "scale",
                         "origin_x", "origin_y", "extent"])
        for slide_id, triples in bags:
            for idx, triple in enumerate(triples):
                for spec in triple.specs:
                    writer.writerow([slide_id, idx, _SCALE_NAMES[spec.scale],
                                     spec.origin_x, spec.origin_y, spec.extent])


def dump_patches(directory: str | Path, slide_id: str,
                 triples: Sequence[PatchTriple]) -> list[Path]:
    """Write patches as ``<slideid>_<patchindex>_s<1|2|4>.png`` files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for idx, triple in enumerate(triples):
        for spec, pixels in zip(triple.specs, triple.pixels):
            denom = round(1.0 / spec.scale)
            path = directory / f"{slide_id}_{idx}_s{denom}.png"
            Image.fromarray(pixels, mode="RGB").save(path)
            written.append(path)
    return written
