"""Overlapped tile/window grids and central-crop merging of detections.

Grids stride by ``size - overlap``; a last row/column that would overrun
the image is clamped to ``dim - size``. Merging keeps each detection in
exactly one region: every region owns the part of the image closer to its
centre than to a neighbour's, with the boundary placed half the overlap
inside the shared band (half-open intervals, so a centroid on a boundary
belongs to exactly one side). The same rule applies between windows inside
a tile and between tiles across a slide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._kernels import keep_in_rect
from .annotations import AnnotationSet

Rect = tuple[float, float, float, float]  # x, y, w, h; half-open on both axes


@dataclass(frozen=True)
class Detection:
    """One predicted nucleus: centroid and box in some pixel frame,
    class index, and confidence score."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box sides must be positive")

    def translated(self, dx: float, dy: float) -> "Detection":
        return Detection(self.cx + dx, self.cy + dy, self.w, self.h, self.class_id, self.score)


@dataclass(frozen=True)
class CropRule:
    margin: float
    outer_rect: Rect

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    overlap: int
    origins: tuple[tuple[int, int], ...]
    slide_rect: Rect


@dataclass(frozen=True)
class WindowGrid:
    window_size: int
    overlap: int
    origins: tuple[tuple[int, int], ...]
    tile_rect: Rect


def detections_to_arrays(dets: Sequence[Detection]) -> np.ndarray:
    """(N, 6) float64 array with columns cx, cy, w, h, class_id, score."""
    if not dets:
        return np.empty((0, 6), dtype=np.float64)
    return np.array(
        [(d.cx, d.cy, d.w, d.h, d.class_id, d.score) for d in dets], dtype=np.float64
    )


def arrays_to_detections(arr: np.ndarray) -> list[Detection]:
    return [
        Detection(float(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4]), float(r[5]))
        for r in arr
    ]


def sort_detection_array(arr: np.ndarray) -> np.ndarray:
    """Canonical output order: (cy, cx, class_id, score)."""
    if len(arr) == 0:
        return arr
    order = np.lexsort((arr[:, 5], arr[:, 4], arr[:, 0], arr[:, 1]))
    return arr[order]


def grid_origins(dim: int, size: int, overlap: int) -> list[int]:
    """1-D origins: k*(size-overlap) while the region fits, then a final
    origin clamped to dim-size when needed (deduplicated)."""
    if size <= 0:
        raise ValueError("size must be positive")
    if overlap < 0 or overlap >= size:
        raise ValueError("overlap must satisfy 0 <= overlap < size")
    if overlap % 2 != 0:
        raise ValueError("overlap must be even")
    if dim <= size:
        return [0]
    stride = size - overlap
    origins = []
    pos = 0
    while pos + size <= dim:
        origins.append(pos)
        pos += stride
    if origins[-1] + size < dim:
        origins.append(dim - size)
    return origins


def _tissue_fractions(
    mask_grid: np.ndarray, scale: float, rects: list[Rect]
) -> np.ndarray:
    """Fraction of mask-true pixels under each rect footprint (rects in the
    pixel space ``scale`` maps the mask grid to)."""
    grid = np.asarray(mask_grid, dtype=np.float64)
    mh, mw = grid.shape
    integral = np.zeros((mh + 1, mw + 1), dtype=np.float64)
    integral[1:, 1:] = grid.cumsum(axis=0).cumsum(axis=1)
    out = np.empty(len(rects), dtype=np.float64)
    for i, (x, y, w, h) in enumerate(rects):
        x0 = min(max(int(np.floor(x / scale)), 0), mw)
        y0 = min(max(int(np.floor(y / scale)), 0), mh)
        x1 = min(max(int(np.ceil((x + w) / scale)), 0), mw)
        y1 = min(max(int(np.ceil((y + h) / scale)), 0), mh)
        area = (x1 - x0) * (y1 - y0)
        if area <= 0:
            out[i] = 0.0
            continue
        true_count = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
        out[i] = true_count / area
    return out


def enumerate_tiles(
    mask,
    slide_dims: tuple[int, int],
    tile_size: int = 1024,
    overlap: int = 64,
    min_tissue_fraction: float = 0.05,
) -> TileGrid:
    """Tile origins over the slide, dropping tiles whose tissue fraction
    under ``mask`` falls below ``min_tissue_fraction``. ``mask`` is a
    TissueMask (or None to keep every tile); its grid/scale must refer to
    the same pixel space as ``slide_dims``."""
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise ValueError("min_tissue_fraction must be in [0, 1]")
    width, height = slide_dims
    xs = grid_origins(width, tile_size, overlap)
    ys = grid_origins(height, tile_size, overlap)
    origins = [(x, y) for y in ys for x in xs]
    if mask is not None and min_tissue_fraction > 0.0:
        rects = [(float(x), float(y), float(tile_size), float(tile_size)) for x, y in origins]
        frac = _tissue_fractions(mask.grid, mask.scale, rects)
        origins = [o for o, f in zip(origins, frac) if f >= min_tissue_fraction]
    return TileGrid(
        tile_size=tile_size,
        overlap=overlap,
        origins=tuple(origins),
        slide_rect=(0.0, 0.0, float(width), float(height)),
    )


def partition_windows(tile_size: int, window_size: int = 256, overlap: int = 64) -> WindowGrid:
    """Window origins inside a tile, same stride/clamp rule as tiles."""
    if window_size > tile_size:
        raise ValueError("window_size must not exceed tile_size")
    if overlap >= window_size:
        raise ValueError("overlap must be smaller than window_size")
    xs = grid_origins(tile_size, window_size, overlap)
    origins = tuple((x, y) for y in xs for x in xs)
    return WindowGrid(
        window_size=window_size,
        overlap=overlap,
        origins=origins,
        tile_rect=(0.0, 0.0, float(tile_size), float(tile_size)),
    )


def central_crop_filter(
    dets: Sequence[Detection], region_rect: Rect, crop: CropRule
) -> list[Detection]:
    """Keep detections whose centroid lies in the region shrunk by
    ``crop.margin`` on every side that is strictly inside
    ``crop.outer_rect`` (half-open keep interval)."""
    rx, ry, rw, rh = region_rect
    ox, oy, ow, oh = crop.outer_rect
    x_lo = rx + crop.margin if rx > ox else rx
    y_lo = ry + crop.margin if ry > oy else ry
    x_hi = rx + rw - crop.margin if rx + rw < ox + ow else rx + rw
    y_hi = ry + rh - crop.margin if ry + rh < oy + oh else ry + rh
    arr = detections_to_arrays(dets)
    if len(arr) == 0:
        return []
    mask = keep_in_rect(arr[:, 0], arr[:, 1], x_lo, x_hi, y_lo, y_hi)
    return [d for d, keep in zip(dets, mask) if keep]


def _axis_bounds(origins: list[float], size: float, lo: float, hi: float, margin: float) -> np.ndarray:
    """Ownership boundaries along one axis: region i keeps
    [bounds[i], bounds[i+1]). Interior boundaries sit ``margin`` inside the
    overlap band, clamped so a wide (clamped-grid) overlap is still split
    without double ownership; the outermost edges extend to the outer rect."""
    n = len(origins)
    bounds = np.empty(n + 1, dtype=np.float64)
    bounds[0] = lo
    bounds[n] = hi
    for i in range(n - 1):
        bounds[i + 1] = min(origins[i] + size - margin, origins[i + 1] + margin)
    return bounds


def _merge_regions(
    per_region: Sequence[tuple[Rect, Sequence[Detection]]],
    outer_rect: Rect,
    overlap: int,
) -> list[Detection]:
    """Translate region-local detections into the outer frame and keep each
    inside its region's ownership rectangle. Regions must form a product
    grid of uniform size."""
    if not per_region:
        return []
    sizes_w = {r[2] for r, _ in per_region}
    sizes_h = {r[3] for r, _ in per_region}
    if len(sizes_w) != 1 or len(sizes_h) != 1:
        raise ValueError("regions must have uniform size")
    size_w = sizes_w.pop()
    size_h = sizes_h.pop()
    margin = overlap / 2.0
    ox, oy, ow, oh = outer_rect
    xs = sorted({r[0] for r, _ in per_region})
    ys = sorted({r[1] for r, _ in per_region})
    x_bounds = _axis_bounds(xs, size_w, ox, ox + ow, margin)
    y_bounds = _axis_bounds(ys, size_h, oy, oy + oh, margin)
    x_index = {x: i for i, x in enumerate(xs)}
    y_index = {y: i for i, y in enumerate(ys)}

    chunks = []
    for rect, dets in per_region:
        arr = detections_to_arrays(dets)
        if len(arr) == 0:
            continue
        arr[:, 0] += rect[0]
        arr[:, 1] += rect[1]
        ix = x_index[rect[0]]
        iy = y_index[rect[1]]
        mask = keep_in_rect(
            arr[:, 0], arr[:, 1],
            x_bounds[ix], x_bounds[ix + 1],
            y_bounds[iy], y_bounds[iy + 1],
        )
        if mask.any():
            chunks.append(arr[mask])
    if not chunks:
        return []
    merged = sort_detection_array(np.concatenate(chunks, axis=0))
    return arrays_to_detections(merged)


def merge_windows(
    per_window: Sequence[tuple[Rect, Sequence[Detection]]],
    tile_rect: Rect,
    overlap: int,
) -> list[Detection]:
    """Merge window-local detections into tile coordinates, one owner per
    centroid, sorted by (cy, cx, class_id, score)."""
    return _merge_regions(per_window, tile_rect, overlap)


def merge_tiles(
    per_tile: Sequence[tuple[Rect, Sequence[Detection]]],
    slide_rect: Rect,
    overlap: int,
) -> list[Detection]:
    """Same rule as merge_windows with the slide as the outer rect."""
    return _merge_regions(per_tile, slide_rect, overlap)


def oversized_fraction(annotations: AnnotationSet, overlap: float) -> float:
    """Fraction of nuclei whose longer box side exceeds the overlap; these
    are the ones the merge rule cannot guarantee to deduplicate."""
    if len(annotations) == 0:
        return 0.0
    longer = np.maximum(annotations.w, annotations.h)
    return float(np.mean(longer > overlap))
