"""End-to-end slide processing: tissue masking, parallel tile inference
with windowed detection, central-crop merging, per-stage timing, and the
output formats.

One coordinator enumerates tissue tiles and feeds a pool of workers; each
worker owns its slide handle and (when the backend is not shareable) its
own backend instance. Workers emit (tile, detections, duration) records to
a single reducer, which merges and sorts after all tiles finish, so the
result is independent of worker count and scheduling for deterministic
backends.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import __version__
from .annotations import DEFAULT_CLASS_NAMES, AnnotationSet
from .detector import (
    AdapterBackend,
    BackendError,
    DetectorConfig,
    JitterBackend,
    NoiseSpec,
    OracleBackend,
    detect,
    filter_by_confidence,
)
from .slide_io import SlideSource, open_slide, read_region, thumbnail
from .stainlab import DEFAULT_STAIN_MATRIX, StainMatrix, TissueMask, compute_tissue_mask
from .tiler import (
    Detection,
    Rect,
    detections_to_arrays,
    arrays_to_detections,
    enumerate_tiles,
    merge_tiles,
    merge_windows,
    partition_windows,
)


class PipelineError(Exception):
    def __init__(self, message: str, exit_code: int = 2, partial_path: Path | None = None) -> None:
        super().__init__(message)
        self.exit_code = exit_code
        self.partial_path = partial_path


@dataclass(frozen=True)
class BackendSpec:
    """Picklable recipe for building a detector backend inside a worker."""

    kind: str  # "oracle" | "jitter" | "adapter"
    annotations: AnnotationSet | None = None
    noise: NoiseSpec | None = None
    adapter_command: tuple[str, ...] = ()

    def build(self, det_cfg: DetectorConfig, process_scale: float, window_rects_l0=None):
        if self.kind == "oracle":
            if self.annotations is None:
                raise PipelineError("oracle backend requires annotations", exit_code=1)
            ann = self.annotations if process_scale == 1.0 else self.annotations.scaled(process_scale)
            return OracleBackend(ann)
        if self.kind == "jitter":
            if self.annotations is None:
                raise PipelineError("jitter backend requires annotations", exit_code=1)
            ann = self.annotations if process_scale == 1.0 else self.annotations.scaled(process_scale)
            return JitterBackend(ann, self.noise or NoiseSpec(), len(det_cfg.class_names))
        if self.kind == "adapter":
            if not self.adapter_command:
                raise PipelineError("adapter backend requires a command", exit_code=1)
            return AdapterBackend(self.adapter_command, det_cfg, window_rects=window_rects_l0)
        raise PipelineError(f"unknown backend kind {self.kind!r}", exit_code=1)


@dataclass(frozen=True)
class PipelineConfig:
    tile_size: int = 1024
    tile_overlap: int = 64
    window_size: int = 256
    window_overlap: int = 64
    mpp_target: float = 0.25
    min_tissue_fraction: float = 0.05
    worker_count: int = 1
    batch_size: int = 0  # windows per backend call; 0 = whole tile at once
    thumb_max_dim: int = 1024
    tissue_thresholds: tuple[float, float, float] = (0.05, 0.05, float("inf"))
    morph_open_radius: int = 2
    morph_close_radius: int = 2
    stain_matrix: StainMatrix = DEFAULT_STAIN_MATRIX
    detector: DetectorConfig = DetectorConfig()
    detections_out: Path | None = None
    manifest_out: Path | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.tile_overlap != self.window_overlap:
            raise ValueError("tile_overlap must equal window_overlap")
        if self.window_size > self.tile_size:
            raise ValueError("window_size must not exceed tile_size")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.mpp_target <= 0:
            raise ValueError("mpp_target must be positive")
        if self.detector.window_size != self.window_size or self.detector.mpp != self.mpp_target:
            object.__setattr__(
                self,
                "detector",
                replace(self.detector, window_size=self.window_size, mpp=self.mpp_target),
            )

    def to_dict(self) -> dict:
        return {
            "tile_size": self.tile_size,
            "tile_overlap": self.tile_overlap,
            "window_size": self.window_size,
            "window_overlap": self.window_overlap,
            "mpp_target": self.mpp_target,
            "min_tissue_fraction": self.min_tissue_fraction,
            "worker_count": self.worker_count,
            "thumb_max_dim": self.thumb_max_dim,
            "tissue_thresholds": [float(t) for t in self.tissue_thresholds],
            "morph_open_radius": self.morph_open_radius,
            "morph_close_radius": self.morph_close_radius,
            "stain_matrix": self.stain_matrix.rows.tolist(),
            "detector": {
                "window_size": self.detector.window_size,
                "mpp": self.detector.mpp,
                "num_queries": self.detector.num_queries,
                "top_k": self.detector.top_k,
                "confidence_threshold": self.detector.confidence_threshold,
                "class_names": list(self.detector.class_names),
            },
            "rng_seed": self.rng_seed,
        }


@dataclass(frozen=True)
class TimingReport:
    preprocess_s: float
    inference_s: float
    postprocess_s: float
    total_s: float
    tissue_area_mm2: float
    throughput_mm2_per_s: float

    def __post_init__(self) -> None:
        for name in ("preprocess_s", "inference_s", "postprocess_s"):
            if getattr(self, name) > self.total_s + 1e-9:
                raise ValueError(f"{name} exceeds total_s")

    def to_dict(self) -> dict:
        return {
            "preprocess_s": self.preprocess_s,
            "inference_s": self.inference_s,
            "postprocess_s": self.postprocess_s,
            "total_s": self.total_s,
            "tissue_area_mm2": self.tissue_area_mm2,
            "throughput_mm2_per_s": self.throughput_mm2_per_s,
        }


@dataclass
class RunManifest:
    config: dict
    slide_path: str
    slide_sha256: str
    code_version: str
    timing: dict
    tile_count: int
    window_count: int
    detection_count: int
    tile_wall_time_total_s: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _sha256(path: Path, chunk: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def _read_tile_raster(
    slide: SlideSource, origin_proc: tuple[int, int], tile_size: int, scale: float
) -> np.ndarray:
    """Tile pixels at processing resolution; reads level 0 and resamples
    when the processing mpp differs from the slide mpp."""
    if scale == 1.0:
        return read_region(slide, origin_proc, (tile_size, tile_size)).pixels
    l0_origin = (round(origin_proc[0] / scale), round(origin_proc[1] / scale))
    l0_size = round(tile_size / scale)
    raster = read_region(slide, l0_origin, (l0_size, l0_size)).pixels
    img = Image.fromarray(raster).resize((tile_size, tile_size), Image.BILINEAR)
    return np.asarray(img)


def _run_tile(
    slide: SlideSource,
    backend,
    cfg: PipelineConfig,
    tile_origin: tuple[int, int],
    tile_index: int,
    windows_per_tile: int,
    window_origins: Sequence[tuple[int, int]],
    scale: float,
) -> tuple[tuple[int, int], np.ndarray, float]:
    t0 = time.perf_counter()
    raster = _read_tile_raster(slide, tile_origin, cfg.tile_size, scale)
    ws = cfg.window_size
    batch = []
    rects_abs: list[Rect] = []
    for widx, (wx, wy) in enumerate(window_origins):
        batch.append((tile_index * windows_per_tile + widx, raster[wy : wy + ws, wx : wx + ws]))
        rects_abs.append((tile_origin[0] + wx, tile_origin[1] + wy, float(ws), float(ws)))
    step = cfg.batch_size if cfg.batch_size > 0 else len(batch)
    raw = []
    for start in range(0, len(batch), max(step, 1)):
        raw.extend(
            detect(backend, batch[start : start + step], cfg.detector,
                   rects_abs[start : start + step])
        )
    tau = cfg.detector.confidence_threshold
    if tau > 0.0:
        raw = [filter_by_confidence(dets, tau) for dets in raw]
    per_window = list(
        zip([(float(wx), float(wy), float(ws), float(ws)) for wx, wy in window_origins], raw)
    )
    tile_rect = (0.0, 0.0, float(cfg.tile_size), float(cfg.tile_size))
    tile_dets = merge_windows(per_window, tile_rect, cfg.window_overlap)
    return tile_origin, detections_to_arrays(tile_dets), time.perf_counter() - t0


_WORKER_STATE: dict = {}


def _worker_init(slide_path, mpp, backend_spec, cfg, window_rects_l0, scale):
    slide = open_slide(slide_path, mpp)
    backend = backend_spec.build(cfg.detector, scale, window_rects_l0)
    _WORKER_STATE.update(
        slide=slide, backend=backend, cfg=cfg, scale=scale, window_rects_l0=window_rects_l0
    )


def _worker_tile(task):
    tile_index, tile_origin, windows_per_tile, window_origins = task
    return _run_tile(
        _WORKER_STATE["slide"],
        _WORKER_STATE["backend"],
        _WORKER_STATE["cfg"],
        tile_origin,
        tile_index,
        windows_per_tile,
        window_origins,
        _WORKER_STATE["scale"],
    )


def run_slide(
    cfg: PipelineConfig, slide: SlideSource, backend_spec: BackendSpec
) -> tuple[list[Detection], TimingReport, RunManifest]:
    """Process one slide: tissue mask, tile enumeration, windowed detection
    on each tile, and the final merge. Detections come back in level-0
    pixels, sorted canonically; a deterministic backend gives identical
    output for any worker count."""
    t_start = time.perf_counter()

    thumb, thumb_scale = thumbnail(slide, cfg.thumb_max_dim)
    mask_l0 = compute_tissue_mask(
        thumb,
        cfg.tissue_thresholds,
        cfg.morph_open_radius,
        cfg.morph_close_radius,
        cfg.stain_matrix,
        scale=thumb_scale,
    )
    scale = slide.mpp / cfg.mpp_target  # processing px per level-0 px
    proc_dims = (round(slide.width_l0 * scale), round(slide.height_l0 * scale))
    mask_proc = TissueMask(grid=mask_l0.grid, scale=mask_l0.scale * scale)
    grid = enumerate_tiles(
        mask_proc, proc_dims, cfg.tile_size, cfg.tile_overlap, cfg.min_tissue_fraction
    )
    wgrid = partition_windows(cfg.tile_size, cfg.window_size, cfg.window_overlap)
    windows_per_tile = len(wgrid.origins)
    window_rects_l0 = {
        tile_index * windows_per_tile + widx: (
            (tx + wx) / scale,
            (ty + wy) / scale,
            cfg.window_size / scale,
            cfg.window_size / scale,
        )
        for tile_index, (tx, ty) in enumerate(grid.origins)
        for widx, (wx, wy) in enumerate(wgrid.origins)
    }
    preprocess_s = time.perf_counter() - t_start

    t_infer = time.perf_counter()
    tasks = [
        (tile_index, origin, windows_per_tile, wgrid.origins)
        for tile_index, origin in enumerate(grid.origins)
    ]
    tile_results: list[tuple[tuple[int, int], np.ndarray, float]] = []
    partial_note: Path | None = None
    try:
        if cfg.worker_count == 1 or len(tasks) <= 1:
            backend = backend_spec.build(cfg.detector, scale, window_rects_l0)
            try:
                for task in tasks:
                    tile_results.append(
                        _run_tile(slide, backend, cfg, task[1], task[0], task[2], task[3], scale)
                    )
            finally:
                backend.close()
        else:
            with ProcessPoolExecutor(
                max_workers=cfg.worker_count,
                initializer=_worker_init,
                initargs=(slide.path, slide.mpp, backend_spec, cfg, window_rects_l0, scale),
            ) as pool:
                for result in pool.map(_worker_tile, tasks):
                    tile_results.append(result)
    except BackendError as exc:
        if cfg.detections_out is not None:
            partial_note = Path(str(cfg.detections_out) + ".partial")
            partial = _merge_tile_results(tile_results, grid, proc_dims, cfg, scale)
            write_detections(partial, partial_note, "jsonl", cfg.detector.class_names)
        raise PipelineError(
            f"backend failed: {exc}", exit_code=2, partial_path=partial_note
        ) from exc
    inference_s = time.perf_counter() - t_infer

    t_post = time.perf_counter()
    merged = _merge_tile_results(tile_results, grid, proc_dims, cfg, scale)
    postprocess_s = time.perf_counter() - t_post

    total_s = time.perf_counter() - t_start
    area = mask_l0.area_mm2(slide.mpp)
    timing = TimingReport(
        preprocess_s=preprocess_s,
        inference_s=inference_s,
        postprocess_s=postprocess_s,
        total_s=total_s,
        tissue_area_mm2=area,
        throughput_mm2_per_s=area / total_s if total_s > 0 else 0.0,
    )
    manifest = RunManifest(
        config=cfg.to_dict(),
        slide_path=str(slide.path),
        slide_sha256=_sha256(slide.path),
        code_version=__version__,
        timing=timing.to_dict(),
        tile_count=len(grid.origins),
        window_count=len(grid.origins) * windows_per_tile,
        detection_count=len(merged),
        tile_wall_time_total_s=float(sum(t for _, _, t in tile_results)),
    )
    return merged, timing, manifest


def _merge_tile_results(tile_results, grid, proc_dims, cfg: PipelineConfig, scale: float):
    per_tile = [
        (
            (float(ox), float(oy), float(cfg.tile_size), float(cfg.tile_size)),
            arrays_to_detections(arr),
        )
        for (ox, oy), arr, _ in tile_results
    ]
    slide_rect = (0.0, 0.0, float(proc_dims[0]), float(proc_dims[1]))
    merged = merge_tiles(per_tile, slide_rect, cfg.tile_overlap)
    if scale != 1.0:
        merged = [
            Detection(d.cx / scale, d.cy / scale, d.w / scale, d.h / scale, d.class_id, d.score)
            for d in merged
        ]
    return merged


def run_bench(
    cfg: PipelineConfig,
    slide_paths: Sequence[str | Path],
    backend_specs: BackendSpec | Sequence[BackendSpec],
    csv_path: str | Path,
    mpp_override: float | None = None,
) -> tuple[list[dict], dict]:
    """Run the pipeline over each slide, write the per-slide timing CSV,
    and fit time-versus-area regression lines for the inference,
    post-processing, and total stages."""
    if not slide_paths:
        raise ValueError("bench needs at least one slide")
    if isinstance(backend_specs, BackendSpec):
        backend_specs = [backend_specs] * len(slide_paths)
    if len(backend_specs) != len(slide_paths):
        raise ValueError("one backend spec per slide (or a single shared one)")

    rows: list[dict] = []
    for path, spec in zip(slide_paths, backend_specs):
        slide = open_slide(path, mpp_override)
        _, timing, _ = run_slide(cfg, slide, spec)
        rows.append(
            {
                "slide": str(path),
                "area_mm2": timing.tissue_area_mm2,
                "preprocess_s": timing.preprocess_s,
                "inference_s": timing.inference_s,
                "postprocess_s": timing.postprocess_s,
                "total_s": timing.total_s,
                "throughput_mm2_per_s": timing.throughput_mm2_per_s,
            }
        )

    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    areas = np.array([r["area_mm2"] for r in rows])
    fits: dict = {}
    for stage in ("inference_s", "postprocess_s", "total_s"):
        times = np.array([r[stage] for r in rows])
        if len(rows) >= 2 and np.ptp(areas) > 0:
            slope, intercept = np.polyfit(areas, times, 1)
        else:
            slope, intercept = float("nan"), float(times.mean())
        fits[stage] = {"slope_s_per_mm2": float(slope), "intercept_s": float(intercept)}
    return rows, fits


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_detections(
    dets: Sequence[Detection],
    path: str | Path,
    fmt: str = "jsonl",
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
) -> Path:
    """Serialize detections (level-0 pixels) as jsonl, csv, or geojson,
    with stable 9-significant-digit float formatting."""
    path = Path(path)
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for d in dets:
                fh.write(
                    f'{{"cx":{_fmt(d.cx)},"cy":{_fmt(d.cy)},"w":{_fmt(d.w)},"h":{_fmt(d.h)},'
                    f'"class":{d.class_id},"class_name":{json.dumps(class_names[d.class_id])},'
                    f'"score":{_fmt(d.score)}}}\n'
                )
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cx", "cy", "w", "h", "class", "class_name", "score"])
            for d in dets:
                writer.writerow(
                    [_fmt(d.cx), _fmt(d.cy), _fmt(d.w), _fmt(d.h), d.class_id,
                     class_names[d.class_id], _fmt(d.score)]
                )
    elif fmt == "geojson":
        features = [
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(_fmt(d.cx)), float(_fmt(d.cy))]},
                "properties": {
                    "class": d.class_id,
                    "class_name": class_names[d.class_id],
                    "score": float(_fmt(d.score)),
                    "w": float(_fmt(d.w)),
                    "h": float(_fmt(d.h)),
                },
            }
            for d in dets
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"type": "FeatureCollection", "features": features}, fh)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def read_detections(path: str | Path) -> list[Detection]:
    """Read detections from the JSONL format written by write_detections."""
    out: list[Detection] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                Detection(
                    cx=float(rec["cx"]),
                    cy=float(rec["cy"]),
                    w=float(rec["w"]),
                    h=float(rec["h"]),
                    class_id=int(rec["class"]),
                    score=float(rec["score"]),
                )
            )
    return out
