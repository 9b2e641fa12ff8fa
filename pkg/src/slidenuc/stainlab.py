"""Optical-density stain separation (RGB <-> HED), tissue masking, and the
training-time augmentation pipeline.

Stains absorb light multiplicatively, so they add linearly in optical
density: OD = -log10((c + eps) / 255) per channel with eps = 1 to keep
black pixels finite. A pixel's stain concentrations are OD times the
inverse stain matrix. The shipped matrix holds the standard H&E-DAB
absorption vectors (row-normalized to unit length); pass a custom matrix
for other stain sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

OD_EPS = 1.0

_RUIFROK_ROWS = np.array(
    [
        [0.65, 0.70, 0.29],  # hematoxylin
        [0.07, 0.99, 0.11],  # eosin
        [0.27, 0.57, 0.78],  # DAB
    ]
)


class StainMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class StainMatrix:
    """3x3 matrix of unit-norm stain absorption vectors (rows H, E, DAB)."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise StainMatrixError("stain matrix must be 3x3")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise StainMatrixError("stain vectors must have unit norm")
        if np.linalg.cond(rows) >= 1e6:
            raise StainMatrixError("stain matrix is singular or near-singular")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_rows(cls, rows) -> "StainMatrix":
        rows = np.asarray(rows, dtype=np.float64)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise StainMatrixError("stain vectors must be nonzero")
        return cls(rows / norms)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.rows)


DEFAULT_STAIN_MATRIX = StainMatrix.from_rows(_RUIFROK_ROWS)


@dataclass
class HedImage:
    """Per-pixel stain concentrations, (h, w, 3) float64."""

    width: int
    height: int
    densities: np.ndarray

    def __post_init__(self) -> None:
        self.densities = np.asarray(self.densities, dtype=np.float64)
        if self.densities.shape != (self.height, self.width, 3):
            raise ValueError("density array does not match dimensions")


@dataclass
class TissueMask:
    """Binary tissue map at thumbnail resolution; ``scale`` converts mask
    pixels to the slide pixel frame (slide px per mask px)."""

    grid: np.ndarray
    scale: float

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=bool)

    @property
    def tissue_fraction(self) -> float:
        return float(self.grid.mean()) if self.grid.size else 0.0

    def area_mm2(self, mpp: float) -> float:
        """Tissue area given the mpp of the slide frame ``scale`` refers to."""
        return float(self.grid.sum()) * (self.scale * mpp) ** 2 / 1e6


def optical_density(img) -> np.ndarray:
    """OD = -log10((c + eps)/255), float64, any (h, w, 3) input."""
    arr = np.asarray(img, dtype=np.float64)
    return -np.log10((arr + OD_EPS) / 255.0)


def rgb_to_hed(img, matrix: StainMatrix = DEFAULT_STAIN_MATRIX) -> HedImage:
    """Stain concentrations of an RGB image (accepts uint8 or float arrays)."""
    od = optical_density(img)
    densities = od @ matrix.inverse
    h, w = densities.shape[:2]
    return HedImage(width=w, height=h, densities=densities)


def hed_to_rgb(hed: HedImage | np.ndarray, matrix: StainMatrix = DEFAULT_STAIN_MATRIX) -> np.ndarray:
    """Invert rgb_to_hed: c = clip(255*10^-(d @ M) - eps, 0, 255), uint8."""
    densities = hed.densities if isinstance(hed, HedImage) else np.asarray(hed, dtype=np.float64)
    od = densities @ matrix.rows
    rgb = np.clip(255.0 * np.power(10.0, -od) - OD_EPS, 0.0, 255.0)
    return np.rint(rgb).astype(np.uint8)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx**2 + yy**2) <= r**2


def compute_tissue_mask(
    thumb,
    thresholds: Sequence[float] = (0.05, 0.05, np.inf),
    open_radius: int = 2,
    close_radius: int = 2,
    matrix: StainMatrix = DEFAULT_STAIN_MATRIX,
    scale: float = 1.0,
) -> TissueMask:
    """True where any stain concentration exceeds its threshold, cleaned by
    a morphological open then close. Use ``inf`` to ignore a channel."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (3,):
        raise ValueError("need one threshold per stain channel")
    if np.any(thresholds[np.isfinite(thresholds)] < 0):
        raise ValueError("thresholds must be >= 0")
    densities = rgb_to_hed(thumb, matrix).densities
    grid = np.any(densities > thresholds, axis=2)
    if open_radius > 0:
        grid = ndimage.binary_opening(grid, structure=_disk(open_radius))
    if close_radius > 0:
        grid = ndimage.binary_closing(grid, structure=_disk(close_radius))
    return TissueMask(grid=grid, scale=scale)


def hed_augment(
    img,
    alpha: float,
    beta: float,
    rng: np.random.Generator,
    matrix: StainMatrix = DEFAULT_STAIN_MATRIX,
) -> np.ndarray:
    """Perturb each stain channel as c' = c*(1+u1) + u2 with u1 ~ U(-a, a)
    and u2 ~ U(-b, b) drawn per channel, then convert back to RGB."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")
    hed = rgb_to_hed(img, matrix)
    u1 = rng.uniform(-alpha, alpha, size=3)
    u2 = rng.uniform(-beta, beta, size=3)
    perturbed = hed.densities * (1.0 + u1) + u2
    return hed_to_rgb(perturbed, matrix)


# --------------------------------------------------------------------------
# Geometric / photometric augmentations. Boxes are (N, 5) float arrays of
# (cx, cy, w, h, class_id) in the continuous pixel frame of the image.
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationParams:
    elastic_p: float = 0.2
    elastic_alpha: float = 0.5
    elastic_sigma: float = 0.25
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotate_p: float = 1.0
    rotate_angles: tuple[int, ...] = (0, 90, 180, 270)
    blur_p: float = 0.2
    blur_kernel: int = 9
    blur_sigma: tuple[float, float] = (0.2, 1.0)
    hed_p: float = 0.2
    hed_alpha: float = 0.04
    hed_beta: float = 0.04
    crop_p: float = 0.2
    crop_size: int = 256
    crop_scale: tuple[float, float] = (0.8, 1.0)

    def __post_init__(self) -> None:
        for name in ("elastic_p", "hflip_p", "vflip_p", "rotate_p", "blur_p", "hed_p", "crop_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if min(self.elastic_alpha, self.elastic_sigma, self.hed_alpha, self.hed_beta) < 0:
            raise ValueError("alpha/beta/sigma must be >= 0")
        if any(a % 90 != 0 for a in self.rotate_angles):
            raise ValueError("rotation angles must be multiples of 90")


def _as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 5)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ValueError("boxes must be (N, 5): cx, cy, w, h, class_id")
    return arr


def hflip(img, boxes) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(img)
    out_boxes = _as_boxes(boxes).copy()
    if len(out_boxes):
        out_boxes[:, 0] = arr.shape[1] - out_boxes[:, 0]
    return np.flip(arr, axis=1).copy(), out_boxes


def vflip(img, boxes) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(img)
    out_boxes = _as_boxes(boxes).copy()
    if len(out_boxes):
        out_boxes[:, 1] = arr.shape[0] - out_boxes[:, 1]
    return np.flip(arr, axis=0).copy(), out_boxes


def rotate90(img, boxes, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rotate image and boxes by k quarter turns counterclockwise."""
    arr = np.asarray(img)
    out_boxes = _as_boxes(boxes).copy()
    for _ in range(k % 4):
        w = arr.shape[1]
        arr = np.rot90(arr)
        if len(out_boxes):
            x = out_boxes[:, 0].copy()
            out_boxes[:, 0] = out_boxes[:, 1]
            out_boxes[:, 1] = w - x
            out_boxes[:, [2, 3]] = out_boxes[:, [3, 2]]
    return arr.copy(), out_boxes


def gaussian_blur(img, sigma: float, kernel: int = 9) -> np.ndarray:
    """Separable Gaussian blur with an explicit odd kernel width."""
    if kernel % 2 != 1 or kernel < 1:
        raise ValueError("kernel must be odd and positive")
    radius = kernel // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma**2))
    weights /= weights.sum()
    out = np.asarray(img, dtype=np.float64)
    out = ndimage.convolve1d(out, weights, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, weights, axis=1, mode="reflect")
    return np.rint(np.clip(out, 0, 255)).astype(np.uint8)


def elastic_warp(
    img, boxes, alpha: float, sigma: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed random displacement field; centroids follow the field,
    box sizes are preserved."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    dx = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    dy = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([rows + dy, cols + dx])
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[..., c] = ndimage.map_coordinates(arr[..., c], coords, order=1, mode="reflect")
    out_boxes = _as_boxes(boxes).copy()
    if len(out_boxes):
        sample = np.stack(
            [np.clip(out_boxes[:, 1], 0, h - 1), np.clip(out_boxes[:, 0], 0, w - 1)]
        )
        out_boxes[:, 0] -= ndimage.map_coordinates(dx, sample, order=1, mode="nearest")
        out_boxes[:, 1] -= ndimage.map_coordinates(dy, sample, order=1, mode="nearest")
    return np.rint(np.clip(out, 0, 255)).astype(np.uint8), out_boxes


def resized_crop(
    img, boxes, crop_rect: tuple[int, int, int, int], out_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Crop ``crop_rect`` (x, y, side, side) and resize to out_size square;
    boxes with no intersection with the crop are dropped."""
    arr = np.asarray(img)
    x0, y0, side_w, side_h = crop_rect
    crop = arr[y0 : y0 + side_h, x0 : x0 + side_w]
    if (side_w, side_h) == (out_size, out_size):
        out = crop.copy()
    else:
        out = np.asarray(Image.fromarray(crop).resize((out_size, out_size), Image.BILINEAR))
    out_boxes = _as_boxes(boxes).copy()
    if len(out_boxes):
        fx = out_size / side_w
        fy = out_size / side_h
        keep = (
            (out_boxes[:, 0] + out_boxes[:, 2] / 2 > x0)
            & (out_boxes[:, 0] - out_boxes[:, 2] / 2 < x0 + side_w)
            & (out_boxes[:, 1] + out_boxes[:, 3] / 2 > y0)
            & (out_boxes[:, 1] - out_boxes[:, 3] / 2 < y0 + side_h)
        )
        out_boxes = out_boxes[keep]
        out_boxes[:, 0] = (out_boxes[:, 0] - x0) * fx
        out_boxes[:, 1] = (out_boxes[:, 1] - y0) * fy
        out_boxes[:, 2] *= fx
        out_boxes[:, 3] *= fy
    return out, out_boxes


def apply_augmentations(
    img,
    boxes,
    params: AugmentationParams,
    rng: np.random.Generator,
    matrix: StainMatrix = DEFAULT_STAIN_MATRIX,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the full augmentation stack in a fixed order (elastic, flips,
    rotation, blur, stain perturbation, resized crop). Geometric steps move
    boxes with the pixels; photometric steps leave them untouched."""
    arr = np.asarray(img)
    out_boxes = _as_boxes(boxes).copy()

    if rng.uniform() < params.elastic_p:
        arr, out_boxes = elastic_warp(arr, out_boxes, params.elastic_alpha, params.elastic_sigma, rng)
    if rng.uniform() < params.hflip_p:
        arr, out_boxes = hflip(arr, out_boxes)
    if rng.uniform() < params.vflip_p:
        arr, out_boxes = vflip(arr, out_boxes)
    if rng.uniform() < params.rotate_p:
        angle = params.rotate_angles[int(rng.integers(0, len(params.rotate_angles)))]
        arr, out_boxes = rotate90(arr, out_boxes, angle // 90)
    if rng.uniform() < params.blur_p:
        sigma = rng.uniform(*params.blur_sigma)
        arr = gaussian_blur(arr, sigma, params.blur_kernel)
    if rng.uniform() < params.hed_p:
        arr = hed_augment(arr, params.hed_alpha, params.hed_beta, rng, matrix)
    if rng.uniform() < params.crop_p:
        h, w = arr.shape[:2]
        scale = rng.uniform(*params.crop_scale)
        side = max(1, round(np.sqrt(scale) * min(w, h)))
        x0 = int(rng.integers(0, w - side + 1))
        y0 = int(rng.integers(0, h - side + 1))
        arr, out_boxes = resized_crop(arr, out_boxes, (x0, y0, side, side), params.crop_size)
    return arr, out_boxes
