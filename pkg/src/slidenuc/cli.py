"""Command-line entry points.

Subcommands: synth (generate a test slide), mask (tissue mask + stats),
tiles (grid JSON), detect (full pipeline), eval (metrics report),
sweep-threshold, bench (timing CSV + regression fit). A TOML config file
supplies defaults; any flag overrides its config key. Exit codes:
0 success, 1 usage error, 2 backend/protocol failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import DEFAULT_CLASS_NAMES, load_annotations
from .config import load_toml, noise_from_config, pipeline_from_config
from .detector import BackendError
from .metrics import MetricsReport, evaluate, per_tissue_report, sweep_threshold
from .pipeline import (
    BackendSpec,
    PipelineError,
    read_detections,
    run_bench,
    run_slide,
    write_detections,
)
from .slide_io import (
    SlideIOError,
    SyntheticSlideSpec,
    generate_synthetic_slide,
    open_slide,
    thumbnail,
)
from .stainlab import compute_tissue_mask
from .tiler import enumerate_tiles


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _file_cfg(args) -> dict:
    return load_toml(args.config) if getattr(args, "config", None) else {}


def _build_pipeline_config(args):
    return pipeline_from_config(
        _file_cfg(args),
        tile_size=getattr(args, "tile_size", None),
        tile_overlap=getattr(args, "overlap", None),
        window_size=getattr(args, "window_size", None),
        window_overlap=getattr(args, "overlap", None),
        mpp_target=getattr(args, "mpp_target", None),
        min_tissue_fraction=getattr(args, "min_tissue_fraction", None),
        worker_count=getattr(args, "workers", None),
        confidence_threshold=getattr(args, "threshold", None),
        detections_out=Path(args.out) if getattr(args, "out", None) else None,
        manifest_out=Path(args.manifest) if getattr(args, "manifest", None) else None,
        rng_seed=getattr(args, "seed", None),
    )


def _backend_spec(args, cfg, slide_mpp: float) -> BackendSpec:
    kind = args.backend
    if kind in ("oracle", "jitter"):
        if not args.annotations:
            raise ValueError(f"--annotations is required for the {kind} backend")
        annotations = load_annotations(args.annotations, slide_mpp)
        if kind == "oracle":
            return BackendSpec(kind="oracle", annotations=annotations)
        noise = noise_from_config(
            _file_cfg(args).get("detector", {}).get("noise", {}), seed=args.seed
        )
        return BackendSpec(kind="jitter", annotations=annotations, noise=noise)
    if kind == "adapter":
        if not args.adapter_cmd:
            raise ValueError("--adapter-cmd is required for the adapter backend")
        return BackendSpec(kind="adapter", adapter_command=tuple(shlex.split(args.adapter_cmd)))
    raise ValueError(f"unknown backend {kind!r}")


def _print_report(report: MetricsReport) -> None:
    print(f"{'':<14}{'P':>8}{'R':>8}{'F1':>8}")
    print(f"{'detection':<14}{report.p_det:>8.3f}{report.r_det:>8.3f}{report.f_det:>8.3f}")
    for name, (p, r, f) in report.per_class.items():
        print(f"{name:<14}{p:>8.3f}{r:>8.3f}{f:>8.3f}")
    print(f"macro F1: {report.macro_f:.3f}")
    if report.flags:
        print("flags: " + "; ".join(report.flags))
    for tissue, sub in report.per_tissue.items():
        print(f"-- tissue: {tissue} "
              f"(F_det {sub.f_det:.3f}, macro F1 {sub.macro_f:.3f})")


def cmd_synth(args) -> int:
    weights = tuple(float(w) for w in args.class_weights.split(",")) if args.class_weights else (
        0.3, 0.25, 0.2, 0.15, 0.1)
    spec = SyntheticSlideSpec(
        width=args.width,
        height=args.height,
        mpp=args.mpp,
        nucleus_count=args.nuclei,
        nucleus_diameter_range=(args.diameter_min, args.diameter_max),
        class_weights=weights,
        rng_seed=args.seed if args.seed is not None else 0,
    )
    slide_path, ann_path = generate_synthetic_slide(spec, args.out, args.annotations)
    print(f"wrote {slide_path} and {ann_path}")
    return 0


def cmd_mask(args) -> int:
    cfg = _build_pipeline_config(args)
    slide = open_slide(args.slide, args.mpp)
    thumb, scale = thumbnail(slide, cfg.thumb_max_dim)
    mask = compute_tissue_mask(
        thumb,
        cfg.tissue_thresholds,
        cfg.morph_open_radius,
        cfg.morph_close_radius,
        cfg.stain_matrix,
        scale=scale,
    )
    if args.out:
        Image.fromarray((mask.grid * np.uint8(255))).save(args.out)
    stats = {
        "mask_width": int(mask.grid.shape[1]),
        "mask_height": int(mask.grid.shape[0]),
        "scale_l0_px_per_mask_px": scale,
        "tissue_fraction": mask.tissue_fraction,
        "tissue_area_mm2": mask.area_mm2(slide.mpp),
    }
    print(json.dumps(stats, indent=2))
    return 0


def cmd_tiles(args) -> int:
    cfg = _build_pipeline_config(args)
    slide = open_slide(args.slide, args.mpp)
    thumb, scale = thumbnail(slide, cfg.thumb_max_dim)
    mask = compute_tissue_mask(
        thumb, cfg.tissue_thresholds, cfg.morph_open_radius, cfg.morph_close_radius,
        cfg.stain_matrix, scale=scale,
    )
    proc_scale = slide.mpp / cfg.mpp_target
    proc_dims = (round(slide.width_l0 * proc_scale), round(slide.height_l0 * proc_scale))
    from .stainlab import TissueMask

    grid = enumerate_tiles(
        TissueMask(mask.grid, mask.scale * proc_scale),
        proc_dims,
        cfg.tile_size,
        cfg.tile_overlap,
        cfg.min_tissue_fraction,
    )
    payload = {
        "tile_size": grid.tile_size,
        "overlap": grid.overlap,
        "mpp_target": cfg.mpp_target,
        "width": proc_dims[0],
        "height": proc_dims[1],
        "origins": [[int(x), int(y)] for x, y in grid.origins],
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_detect(args) -> int:
    cfg = _build_pipeline_config(args)
    slide = open_slide(args.slide, args.mpp)
    spec = _backend_spec(args, cfg, slide.mpp)
    dets, timing, manifest = run_slide(cfg, slide, spec)
    out = Path(args.out)
    write_detections(dets, out, args.format, cfg.detector.class_names)
    if args.manifest:
        Path(args.manifest).write_text(
            json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    print(
        f"{len(dets)} detections -> {out} | "
        f"pre {timing.preprocess_s:.2f}s, infer {timing.inference_s:.2f}s, "
        f"post {timing.postprocess_s:.2f}s, total {timing.total_s:.2f}s, "
        f"{timing.throughput_mm2_per_s:.2f} mm^2/s"
    )
    return 0


def _classes(args) -> tuple[str, ...]:
    if getattr(args, "classes", None):
        return tuple(args.classes.split(","))
    return DEFAULT_CLASS_NAMES


def cmd_eval(args) -> int:
    annotations = load_annotations(args.annotations, args.mpp)
    detections = read_detections(args.predictions)
    report = evaluate(
        annotations,
        detections,
        radius_um=args.radius_um,
        class_names=_classes(args),
        threshold=args.threshold,
        strategy="greedy" if args.greedy else "optimal",
    )
    if args.per_tissue:
        report.per_tissue = per_tissue_report(
            annotations, detections, radius_um=args.radius_um, class_names=_classes(args)
        )
    _print_report(report)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return 0


def _parse_grid(spec: str) -> list[float]:
    if ":" in spec:
        start, stop, count = spec.split(":")
        return [float(t) for t in np.linspace(float(start), float(stop), int(count))]
    return [float(t) for t in spec.split(",")]


def cmd_sweep(args) -> int:
    annotations = load_annotations(args.annotations, args.mpp)
    detections = read_detections(args.predictions)
    result = sweep_threshold(
        detections, annotations, _parse_grid(args.grid),
        radius_um=args.radius_um, class_names=_classes(args),
    )
    print(f"{'tau':>8}{'F_det':>10}{'macro-F':>10}{'harmonic':>10}")
    for tau, f_det, macro_f, h in result.curve:
        print(f"{tau:>8.3f}{f_det:>10.4f}{macro_f:>10.4f}{h:>10.4f}")
    print(f"best tau: {result.best_tau:.3f}")
    for flag in result.flags:
        print(f"flag: {flag}")
    if args.out:
        payload = {
            "best_tau": result.best_tau,
            "curve": [
                {"tau": t, "f_det": fd, "macro_f": mf, "harmonic_mean": h}
                for t, fd, mf, h in result.curve
            ],
            "flags": list(result.flags),
        }
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    cfg = _build_pipeline_config(args)
    ann_paths = args.annotations or []
    if args.backend in ("oracle", "jitter"):
        if len(ann_paths) == 1:
            ann_paths = ann_paths * len(args.slides)
        if len(ann_paths) != len(args.slides):
            raise ValueError("need one --annotations per slide (or a single shared file)")
        specs = []
        for slide_path, ann_path in zip(args.slides, ann_paths):
            mpp = args.mpp if args.mpp else open_slide(slide_path).mpp
            ns = argparse.Namespace(**{**vars(args), "annotations": ann_path})
            specs.append(_backend_spec(ns, cfg, mpp))
    else:
        specs = [_backend_spec(args, cfg, args.mpp or 0.25)] * len(args.slides)
    rows, fits = run_bench(cfg, args.slides, specs, args.csv, mpp_override=args.mpp)
    for row in rows:
        print(
            f"{row['slide']}: area {row['area_mm2']:.2f} mm^2, "
            f"infer {row['inference_s']:.2f}s, post {row['postprocess_s']:.2f}s, "
            f"total {row['total_s']:.2f}s, {row['throughput_mm2_per_s']:.2f} mm^2/s"
        )
    for stage, fit in fits.items():
        print(f"fit {stage}: slope {fit['slope_s_per_mm2']:.4g} s/mm^2, "
              f"intercept {fit['intercept_s']:.4g} s")
    if args.fit_out:
        Path(args.fit_out).write_text(json.dumps(fits, indent=2) + "\n", encoding="utf-8")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="slidenuc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness")

    p = sub.add_parser("synth", help="generate a synthetic annotated slide")
    common(p)
    p.add_argument("--out", required=True, help="output slide PNG")
    p.add_argument("--annotations", required=True, help="output annotation JSONL")
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--height", type=int, default=2048)
    p.add_argument("--mpp", type=float, default=0.25)
    p.add_argument("--nuclei", type=int, default=1000)
    p.add_argument("--diameter-min", type=int, default=8)
    p.add_argument("--diameter-max", type=int, default=20)
    p.add_argument("--class-weights", help="comma-separated class probabilities")
    p.set_defaults(func=cmd_synth)

    for name, func, extra_out in (
        ("mask", cmd_mask, "mask PNG"),
        ("tiles", cmd_tiles, "grid JSON"),
    ):
        p = sub.add_parser(name, help=f"compute tissue {name} and write {extra_out}")
        common(p)
        p.add_argument("--slide", required=True)
        p.add_argument("--mpp", type=float, default=None, help="override pixel spacing")
        p.add_argument("--mpp-target", type=float, default=None)
        p.add_argument("--tile-size", type=int, default=None)
        p.add_argument("--overlap", type=int, default=None)
        p.add_argument("--min-tissue-fraction", type=float, default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("detect", help="run the full detection pipeline")
    common(p)
    p.add_argument("--slide", required=True)
    p.add_argument("--mpp", type=float, default=None)
    p.add_argument("--mpp-target", type=float, default=None)
    p.add_argument("--backend", choices=("oracle", "jitter", "adapter"), default="oracle")
    p.add_argument("--annotations", help="annotation JSONL for oracle/jitter backends")
    p.add_argument("--adapter-cmd", help="external adapter command line")
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--window-size", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--min-tissue-fraction", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None, help="confidence threshold")
    p.add_argument("--out", required=True, help="detections output file")
    p.add_argument("--format", choices=("jsonl", "csv", "geojson"), default="jsonl")
    p.add_argument("--manifest", help="run manifest JSON path")
    p.set_defaults(func=cmd_detect)

    for name, func in (("eval", cmd_eval), ("sweep-threshold", cmd_sweep)):
        p = sub.add_parser(name, help=f"{name} predictions against annotations")
        common(p)
        p.add_argument("--annotations", required=True)
        p.add_argument("--predictions", required=True)
        p.add_argument("--mpp", type=float, required=True)
        p.add_argument("--radius-um", type=float, default=3.0)
        p.add_argument("--classes", help="comma-separated class names")
        p.add_argument("--out", help="JSON report path")
        if name == "eval":
            p.add_argument("--threshold", type=float, default=None)
            p.add_argument("--greedy", action="store_true", help="greedy matching variant")
            p.add_argument("--per-tissue", action="store_true")
        else:
            p.add_argument("--grid", required=True, help='"0.1,0.2,..." or "start:stop:count"')
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="timing benchmark over slides")
    common(p)
    p.add_argument("--slides", nargs="+", required=True)
    p.add_argument("--annotations", nargs="*", help="per-slide annotation JSONL (oracle/jitter)")
    p.add_argument("--mpp", type=float, default=None)
    p.add_argument("--mpp-target", type=float, default=None)
    p.add_argument("--backend", choices=("oracle", "jitter", "adapter"), default="oracle")
    p.add_argument("--adapter-cmd")
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--window-size", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--min-tissue-fraction", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--csv", required=True, help="timing CSV output")
    p.add_argument("--fit-out", help="regression fit JSON output")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.partial_path:
            print(f"partial results: {exc.partial_path}", file=sys.stderr)
        return exc.exit_code
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    except SlideIOError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
