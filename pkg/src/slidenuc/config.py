"""TOML configuration schema.

One file configures the whole engine; every CLI flag overrides its config
key. Sections: [pipeline] (geometry, workers, resolution), [stain]
(matrix, tissue thresholds, morphology), [detector] (backend and its
knobs, optional [detector.noise]), and [augment] whose sub-tables mirror
the augmentation hyperparameter names (p, alpha, beta, sigma, kernel,
angles, size, scale).
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .annotations import DEFAULT_CLASS_NAMES
from .detector import DetectorConfig, NoiseSpec
from .pipeline import PipelineConfig
from .stainlab import DEFAULT_STAIN_MATRIX, AugmentationParams, StainMatrix


def load_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _threshold(value) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "none", "ignore"):
        return math.inf
    return float(value)


def stain_from_config(section: dict) -> tuple[StainMatrix, tuple[float, float, float], int, int]:
    matrix = (
        StainMatrix.from_rows(section["matrix"]) if "matrix" in section else DEFAULT_STAIN_MATRIX
    )
    thr = section.get("tissue_thresholds", [0.05, 0.05, math.inf])
    thresholds = tuple(_threshold(t) for t in thr)
    if len(thresholds) != 3:
        raise ValueError("tissue_thresholds needs exactly 3 entries")
    return (
        matrix,
        thresholds,
        int(section.get("open_radius", 2)),
        int(section.get("close_radius", 2)),
    )


def detector_from_config(section: dict, window_size: int, mpp: float) -> DetectorConfig:
    return DetectorConfig(
        window_size=window_size,
        mpp=mpp,
        num_queries=int(section.get("num_queries", 900)),
        top_k=int(section.get("top_k", 300)),
        confidence_threshold=float(section.get("confidence_threshold", 0.0)),
        class_names=tuple(section.get("classes", DEFAULT_CLASS_NAMES)),
    )


def noise_from_config(section: dict, seed: int | None = None) -> NoiseSpec:
    return NoiseSpec(
        drop_prob=float(section.get("drop_prob", 0.0)),
        jitter_sigma=float(section.get("jitter_sigma", 0.0)),
        class_flip_prob=float(section.get("class_flip_prob", 0.0)),
        score_range_true=tuple(section.get("score_range_true", (0.9, 1.0))),
        score_range_false=tuple(section.get("score_range_false", (0.1, 0.5))),
        rng_seed=int(section.get("rng_seed", 0) if seed is None else seed),
    )


def augmentation_from_config(section: dict) -> AugmentationParams:
    elastic = section.get("elastic", {})
    blur = section.get("blur", {})
    hed = section.get("hed", {})
    crop = section.get("resized_crop", {})
    rotate = section.get("rotate", {})
    return AugmentationParams(
        elastic_p=float(elastic.get("p", 0.2)),
        elastic_alpha=float(elastic.get("alpha", 0.5)),
        elastic_sigma=float(elastic.get("sigma", 0.25)),
        hflip_p=float(section.get("hflip", {}).get("p", 0.5)),
        vflip_p=float(section.get("vflip", {}).get("p", 0.5)),
        rotate_p=float(rotate.get("p", 1.0)),
        rotate_angles=tuple(int(a) for a in rotate.get("angles", (0, 90, 180, 270))),
        blur_p=float(blur.get("p", 0.2)),
        blur_kernel=int(blur.get("kernel", 9)),
        blur_sigma=tuple(float(s) for s in blur.get("sigma", (0.2, 1.0))),
        hed_p=float(hed.get("p", 0.2)),
        hed_alpha=float(hed.get("alpha", 0.04)),
        hed_beta=float(hed.get("beta", 0.04)),
        crop_p=float(crop.get("p", 0.2)),
        crop_size=int(crop.get("size", 256)),
        crop_scale=tuple(float(s) for s in crop.get("scale", (0.8, 1.0))),
    )


def pipeline_from_config(file_cfg: dict, **overrides) -> PipelineConfig:
    """Build a PipelineConfig from the [pipeline]/[stain]/[detector]
    sections; keyword overrides (CLI flags) win when not None."""
    sec = file_cfg.get("pipeline", {})
    det_sec = file_cfg.get("detector", {})
    stain_sec = file_cfg.get("stain", {})

    def pick(name, default):
        val = overrides.get(name)
        if val is not None:
            return val
        return sec.get(name, default)

    matrix, thresholds, open_r, close_r = stain_from_config(stain_sec)
    window_size = int(pick("window_size", 256))
    mpp_target = float(pick("mpp_target", 0.25))
    detector = detector_from_config(det_sec, window_size, mpp_target)
    if overrides.get("confidence_threshold") is not None:
        detector = replace(detector, confidence_threshold=float(overrides["confidence_threshold"]))
    return PipelineConfig(
        tile_size=int(pick("tile_size", 1024)),
        tile_overlap=int(pick("tile_overlap", 64)),
        window_size=window_size,
        window_overlap=int(pick("window_overlap", pick("tile_overlap", 64))),
        mpp_target=mpp_target,
        min_tissue_fraction=float(pick("min_tissue_fraction", 0.05)),
        worker_count=int(pick("worker_count", 1)),
        batch_size=int(pick("batch_size", 0)),
        thumb_max_dim=int(pick("thumb_max_dim", 1024)),
        tissue_thresholds=thresholds,
        morph_open_radius=open_r,
        morph_close_radius=close_r,
        stain_matrix=matrix,
        detector=detector,
        detections_out=overrides.get("detections_out"),
        manifest_out=overrides.get("manifest_out"),
        rng_seed=int(pick("rng_seed", 0) if overrides.get("rng_seed") is None else overrides["rng_seed"]),
    )
