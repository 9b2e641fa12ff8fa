"""Uniform access to pyramidal TIFF and plain PNG slides, plus a
deterministic synthetic slide generator for desk-scale runs.

A plain raster is treated as a one-level pyramid so the full engine can
run without pyramid tooling. Pixel spacing (mpp, micrometers per pixel)
must come from file metadata or an explicit override; there is no guessed
default. Out-of-bounds region reads are filled white, the appearance of
slide background, so tile geometry stays uniform at slide edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import AnnotationSet, save_annotations

Image.MAX_IMAGE_PIXELS = None

WHITE = 255

# Eosin-like background and hematoxylin-like nuclei, expressed as optical
# densities so the stain math downstream sees realistic values.
_BG_EOSIN_OD = 0.15
_NUCLEUS_H_OD_RANGE = (0.55, 0.95)
_H_VEC = np.array([0.65, 0.70, 0.29])
_E_VEC = np.array([0.07, 0.99, 0.11])


class SlideIOError(Exception):
    """Unreadable or unsupported slide input."""


@dataclass
class RasterImage:
    """8-bit RGB raster; ``pixels`` is the row-major (h, w, 3) array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError("pixel buffer does not match width*height*3")

    def __array__(self, dtype=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)


class SlideSource:
    """Handle to one slide file. Confine a handle to one worker at a time;
    open independent handles for concurrent readers."""

    def __init__(
        self,
        path: Path,
        mpp: float,
        levels: list[tuple[float, int, int]],
        kind: str,
    ) -> None:
        self.path = path
        self.mpp = mpp
        self.levels = levels
        self.kind = kind
        self.width_l0 = levels[0][1]
        self.height_l0 = levels[0][2]
        self._level_cache: dict[int, np.ndarray] = {}

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def area_mm2(self) -> float:
        return self.width_l0 * self.height_l0 * self.mpp**2 / 1e6

    def _level_array(self, level: int) -> np.ndarray:
        if level not in self._level_cache:
            with Image.open(self.path) as img:
                if self.kind == "tiff":
                    img.seek(level)
                self._level_cache[level] = np.asarray(img.convert("RGB"))
        return self._level_cache[level]


def _mpp_from_tiff_tags(img: Image.Image) -> float | None:
    tags = getattr(img, "tag_v2", None)
    if tags is None:
        return None
    unit = tags.get(296)
    xres = tags.get(282)
    if not xres:
        return None
    xres = float(xres)
    if xres <= 0:
        return None
    if unit == 2:  # inch
        return 25400.0 / xres
    if unit == 3:  # centimeter
        return 10000.0 / xres
    return None


def _mpp_from_png_info(img: Image.Image) -> float | None:
    dpi = img.info.get("dpi")
    if not dpi:
        return None
    xdpi = float(dpi[0])
    if xdpi <= 0:
        return None
    return 25400.0 / xdpi


def open_slide(path: str | Path, mpp: float | None = None) -> SlideSource:
    """Open a pyramidal TIFF or plain PNG; ``mpp`` overrides file metadata.

    Raises SlideIOError for unreadable files, unsupported formats, missing
    pixel spacing, or a malformed pyramid.
    """
    path = Path(path)
    if not path.exists():
        raise SlideIOError(f"no such file: {path}")
    try:
        img = Image.open(path)
    except Exception as exc:
        raise SlideIOError(f"unsupported format: {path}") from exc
    with img:
        fmt = (img.format or "").upper()
        if fmt == "PNG":
            kind = "png"
            file_mpp = _mpp_from_png_info(img)
            dims = [img.size]
        elif fmt == "TIFF":
            kind = "tiff"
            file_mpp = _mpp_from_tiff_tags(img)
            dims = []
            for frame in range(getattr(img, "n_frames", 1)):
                img.seek(frame)
                dims.append(img.size)
        else:
            raise SlideIOError(f"unsupported format: {path} ({fmt or 'unknown'})")

    resolved_mpp = mpp if mpp is not None else file_mpp
    if resolved_mpp is None:
        raise SlideIOError(
            f"{path}: no pixel spacing metadata; pass an explicit mpp override"
        )
    if resolved_mpp <= 0:
        raise SlideIOError("mpp must be positive")

    w0, h0 = dims[0]
    levels: list[tuple[float, int, int]] = []
    prev_ds = 0.0
    for w, h in dims:
        ds = ((w0 / w) + (h0 / h)) / 2.0
        if ds <= prev_ds:
            raise SlideIOError(f"{path}: level downsamples must be strictly increasing")
        if math.ceil(w0 / ds) != w or math.ceil(h0 / ds) != h:
            raise SlideIOError(f"{path}: inconsistent pyramid level dimensions {w}x{h}")
        levels.append((ds, w, h))
        prev_ds = ds
    if abs(levels[0][0] - 1.0) > 1e-9:
        raise SlideIOError(f"{path}: first level must be full resolution")
    return SlideSource(path=path, mpp=resolved_mpp, levels=levels, kind=kind)


def read_region(
    slide: SlideSource,
    origin_l0: tuple[int, int],
    size: tuple[int, int],
    level: int = 0,
) -> RasterImage:
    """Read a (w, h) region at ``level``; origin given in level-0 pixels.
    Pixels outside the slide are white."""
    if not 0 <= level < slide.level_count:
        raise SlideIOError(f"invalid level index {level}")
    w, h = size
    if w <= 0 or h <= 0:
        raise SlideIOError("empty region")
    ds, lw, lh = slide.levels[level]
    lx = int(origin_l0[0] // ds)
    ly = int(origin_l0[1] // ds)
    out = np.full((h, w, 3), WHITE, dtype=np.uint8)
    sx0 = max(lx, 0)
    sy0 = max(ly, 0)
    sx1 = min(lx + w, lw)
    sy1 = min(ly + h, lh)
    if sx1 > sx0 and sy1 > sy0:
        arr = slide._level_array(level)
        out[sy0 - ly : sy1 - ly, sx0 - lx : sx1 - lx] = arr[sy0:sy1, sx0:sx1]
    return RasterImage(width=w, height=h, pixels=out)


def thumbnail(slide: SlideSource, max_dim: int) -> tuple[RasterImage, float]:
    """Whole-slide thumbnail with longest side <= max_dim, plus the scale
    in level-0 pixels per thumbnail pixel."""
    if max_dim < 16:
        raise SlideIOError("max_dim must be >= 16")
    w0, h0 = slide.width_l0, slide.height_l0
    if max(w0, h0) <= max_dim:
        arr = slide._level_array(0)
        return RasterImage(width=w0, height=h0, pixels=arr.copy()), 1.0
    if w0 >= h0:
        tw = max_dim
        th = max(1, round(h0 * max_dim / w0))
    else:
        th = max_dim
        tw = max(1, round(w0 * max_dim / h0))
    # Read from the smallest level that still oversamples the thumbnail.
    level = 0
    for i, (_, lw, lh) in enumerate(slide.levels):
        if lw >= tw and lh >= th:
            level = i
    arr = slide._level_array(level)
    img = Image.fromarray(arr).resize((tw, th), Image.BILINEAR)
    return RasterImage(width=tw, height=th, pixels=np.asarray(img)), w0 / tw


@dataclass(frozen=True)
class SyntheticSlideSpec:
    """Recipe for a reproducible annotated test slide."""

    width: int
    height: int
    mpp: float
    nucleus_count: int
    nucleus_diameter_range: tuple[int, int] = (8, 20)
    class_weights: tuple[float, ...] = (0.3, 0.25, 0.2, 0.15, 0.1)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        dmin, dmax = self.nucleus_diameter_range
        if dmin <= 0 or dmax < dmin:
            raise ValueError("diameters must be positive with min <= max")
        if self.mpp <= 0:
            raise ValueError("mpp must be positive")
        if self.nucleus_count < 0:
            raise ValueError("nucleus_count must be >= 0")
        if any(w < 0 for w in self.class_weights) or abs(sum(self.class_weights) - 1.0) > 1e-9:
            raise ValueError("class_weights must be nonnegative and sum to 1")


def _od_to_rgb(od: np.ndarray) -> tuple[int, int, int]:
    rgb = np.clip(255.0 * np.power(10.0, -od) - 1.0, 0, 255)
    return tuple(int(round(c)) for c in rgb)


class PlacementError(SlideIOError):
    """Could not place all nuclei within the overlap-attempt budget."""


def render_synthetic(
    spec: SyntheticSlideSpec, max_attempts_per_nucleus: int = 200
) -> tuple[np.ndarray, AnnotationSet]:
    """Render the slide raster and its annotations in memory.

    Nuclei are non-overlapping filled ellipses with hematoxylin-like color
    on an eosin-like background; output is a pure function of the recipe.
    """
    from PIL import ImageDraw

    rng = np.random.default_rng(spec.rng_seed)
    bg = _od_to_rgb(_BG_EOSIN_OD * _E_VEC)
    img = Image.new("RGB", (spec.width, spec.height), bg)
    draw = ImageDraw.Draw(img)

    dmin, dmax = spec.nucleus_diameter_range
    n_classes = len(spec.class_weights)
    cell = dmax + 2
    occupied: dict[tuple[int, int], list[tuple[int, int, int, int]]] = {}

    def collides(x0: int, y0: int, dx: int, dy: int) -> bool:
        cx0, cy0 = (x0 - 1) // cell, (y0 - 1) // cell
        cx1, cy1 = (x0 + dx + 1) // cell, (y0 + dy + 1) // cell
        for gy in range(cy0, cy1 + 1):
            for gx in range(cx0, cx1 + 1):
                for bx0, by0, bx1, by1 in occupied.get((gx, gy), ()):
                    if x0 - 1 < bx1 and x0 + dx + 1 > bx0 and y0 - 1 < by1 and y0 + dy + 1 > by0:
                        return True
        return False

    cxs, cys, ws, hs, classes = [], [], [], [], []
    for _ in range(spec.nucleus_count):
        placed = False
        for _attempt in range(max_attempts_per_nucleus):
            dx = int(rng.integers(dmin, dmax + 1))
            dy = int(rng.integers(dmin, dmax + 1))
            if spec.width < dx or spec.height < dy:
                continue
            x0 = int(rng.integers(0, spec.width - dx + 1))
            y0 = int(rng.integers(0, spec.height - dy + 1))
            if collides(x0, y0, dx, dy):
                continue
            h_od = rng.uniform(*_NUCLEUS_H_OD_RANGE)
            cls = int(rng.choice(n_classes, p=spec.class_weights))
            color = _od_to_rgb(h_od * _H_VEC + 0.05 * _E_VEC)
            draw.ellipse((x0, y0, x0 + dx - 1, y0 + dy - 1), fill=color)
            key_box = (x0, y0, x0 + dx, y0 + dy)
            for gy in range((y0 - 1) // cell, (y0 + dy + 1) // cell + 1):
                for gx in range((x0 - 1) // cell, (x0 + dx + 1) // cell + 1):
                    occupied.setdefault((gx, gy), []).append(key_box)
            cxs.append(x0 + dx / 2.0)
            cys.append(y0 + dy / 2.0)
            ws.append(float(dx))
            hs.append(float(dy))
            classes.append(cls)
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place nucleus {len(cxs) + 1}/{spec.nucleus_count} "
                f"within {max_attempts_per_nucleus} attempts; lower the density"
            )

    annotations = AnnotationSet(
        cx=np.array(cxs),
        cy=np.array(cys),
        w=np.array(ws),
        h=np.array(hs),
        class_id=np.array(classes, dtype=np.int64),
        mpp=spec.mpp,
    )
    return np.asarray(img), annotations


def generate_synthetic_slide(
    spec: SyntheticSlideSpec,
    slide_path: str | Path,
    annotations_path: str | Path,
    max_attempts_per_nucleus: int = 200,
) -> tuple[Path, Path]:
    """Write the synthetic slide as PNG (with embedded pixel spacing) and
    its annotations as JSONL. Byte-identical for identical specs."""
    raster, annotations = render_synthetic(spec, max_attempts_per_nucleus)
    slide_path = Path(slide_path)
    annotations_path = Path(annotations_path)
    dpi = 25400.0 / spec.mpp
    Image.fromarray(raster).save(slide_path, format="PNG", dpi=(dpi, dpi), compress_level=3)
    save_annotations(annotations_path, annotations)
    return slide_path, annotations_path
