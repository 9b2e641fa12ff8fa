from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from slidenuc._kernels import pure

try:
    from slidenuc._kernels import _native
except ImportError:
    _native = None

from slidenuc.annotations import AnnotationSet
from slidenuc.slide_io import SyntheticSlideSpec, generate_synthetic_slide, render_synthetic

KERNEL_IMPLS = [pure] if _native is None else [pure, _native]
KERNEL_IDS = ["pure"] if _native is None else ["pure", "native"]


@pytest.fixture(params=KERNEL_IMPLS, ids=KERNEL_IDS)
def kernels(request):
    return request.param


@pytest.fixture(scope="session")
def small_spec() -> SyntheticSlideSpec:
    return SyntheticSlideSpec(
        width=1536, height=1280, mpp=0.25, nucleus_count=300, rng_seed=11
    )


@pytest.fixture(scope="session")
def small_slide(tmp_path_factory, small_spec):
    """(slide_path, annotations_path, raster, annotations) for a shared
    synthetic slide."""
    root = tmp_path_factory.mktemp("slides")
    slide_path = root / "small.png"
    ann_path = root / "small.jsonl"
    generate_synthetic_slide(small_spec, slide_path, ann_path)
    raster, annotations = render_synthetic(small_spec)
    return slide_path, ann_path, raster, annotations


def make_annotations(
    points, classes=None, mpp: float = 0.25, box: float = 10.0, tissue=None
) -> AnnotationSet:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    classes = np.zeros(n, dtype=np.int64) if classes is None else np.asarray(classes, dtype=np.int64)
    return AnnotationSet(
        cx=pts[:, 0],
        cy=pts[:, 1],
        w=np.full(n, box),
        h=np.full(n, box),
        class_id=classes,
        mpp=mpp,
        tissue=list(tissue) if tissue is not None else [],
    )


def write_pyramid_tiff(path, level0: np.ndarray, downsamples=(1, 4, 16), mpp: float | None = 0.25):
    """Multi-page TIFF with each page a downsampled level; resolution tags
    encode the mpp when given."""
    import math

    h, w = level0.shape[:2]
    pages = []
    for ds in downsamples:
        lw, lh = math.ceil(w / ds), math.ceil(h / ds)
        pages.append(Image.fromarray(level0).resize((lw, lh), Image.BILINEAR))
    kwargs = {}
    if mpp is not None:
        kwargs["dpi"] = (25400.0 / mpp, 25400.0 / mpp)
    pages[0].save(path, format="TIFF", save_all=True, append_images=pages[1:], **kwargs)
    return path
