"""Nucleus annotation records and their JSONL serialization.

One record per nucleus: ``{"cx":float,"cy":float,"w":float,"h":float,
"class":int,"tissue":str?}`` with coordinates in level-0 pixels. This is
the single annotation schema used across the engine and by external
adapter processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_CLASS_NAMES = (
    "neoplastic",
    "epithelial",
    "inflammatory",
    "connective",
    "necrosis",
)


@dataclass
class AnnotationSet:
    """Ground-truth nuclei: centroids, tight boxes, class ids, optional
    per-record tissue tags, and the pixel spacing the coordinates live at."""

    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray
    class_id: np.ndarray
    mpp: float
    tissue: list[str | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.cx = np.asarray(self.cx, dtype=np.float64)
        self.cy = np.asarray(self.cy, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        self.class_id = np.asarray(self.class_id, dtype=np.int64)
        n = len(self.cx)
        if not (len(self.cy) == len(self.w) == len(self.h) == len(self.class_id) == n):
            raise ValueError("annotation arrays must have equal length")
        if not self.tissue:
            self.tissue = [None] * n
        if len(self.tissue) != n:
            raise ValueError("tissue tags must match record count")
        if self.mpp <= 0:
            raise ValueError("mpp must be positive")

    def __len__(self) -> int:
        return len(self.cx)

    @property
    def points(self) -> np.ndarray:
        """(N, 2) centroid array, x then y."""
        return np.stack([self.cx, self.cy], axis=1) if len(self) else np.empty((0, 2))

    def subset(self, index: np.ndarray | Sequence[int]) -> "AnnotationSet":
        idx = np.asarray(index)
        return AnnotationSet(
            cx=self.cx[idx],
            cy=self.cy[idx],
            w=self.w[idx],
            h=self.h[idx],
            class_id=self.class_id[idx],
            mpp=self.mpp,
            tissue=[self.tissue[int(i)] for i in np.atleast_1d(idx)]
            if idx.dtype != np.bool_
            else [t for t, keep in zip(self.tissue, idx) if keep],
        )

    def scaled(self, factor: float) -> "AnnotationSet":
        """Coordinates multiplied by ``factor``; mpp divided accordingly."""
        return AnnotationSet(
            cx=self.cx * factor,
            cy=self.cy * factor,
            w=self.w * factor,
            h=self.h * factor,
            class_id=self.class_id.copy(),
            mpp=self.mpp / factor,
            tissue=list(self.tissue),
        )


def empty_annotation_set(mpp: float) -> AnnotationSet:
    z = np.empty(0, dtype=np.float64)
    return AnnotationSet(cx=z, cy=z, w=z, h=z, class_id=np.empty(0, dtype=np.int64), mpp=mpp)


def save_annotations(path: str | Path, annotations: AnnotationSet) -> None:
    """Write one JSON record per nucleus, floats at 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(annotations)):
            rec = (
                f'{{"cx":{annotations.cx[i]:.9g},"cy":{annotations.cy[i]:.9g},'
                f'"w":{annotations.w[i]:.9g},"h":{annotations.h[i]:.9g},'
                f'"class":{int(annotations.class_id[i])}'
            )
            tag = annotations.tissue[i]
            if tag is not None:
                rec += f',"tissue":{json.dumps(tag)}'
            fh.write(rec + "}\n")


def load_annotations(path: str | Path, mpp: float) -> AnnotationSet:
    cx, cy, w, h, cls, tissue = [], [], [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: malformed annotation record") from exc
            cx.append(float(rec["cx"]))
            cy.append(float(rec["cy"]))
            w.append(float(rec["w"]))
            h.append(float(rec["h"]))
            cls.append(int(rec["class"]))
            tissue.append(rec.get("tissue"))
    return AnnotationSet(
        cx=np.array(cx, dtype=np.float64),
        cy=np.array(cy, dtype=np.float64),
        w=np.array(w, dtype=np.float64),
        h=np.array(h, dtype=np.float64),
        class_id=np.array(cls, dtype=np.int64),
        mpp=mpp,
        tissue=tissue,
    )
