"""Pluggable window detector contract, reference backends, confidence
filtering, and the external-adapter wire protocol client.

Backends see fixed-size windows and return window-local detections. The
reference backends are annotation-driven: ``oracle`` answers with the
ground truth (for verifying the geometry of the surrounding pipeline) and
``jitter`` corrupts it with configurable noise (for exercising metrics).
Real models live out of process behind the newline-delimited JSON protocol
spoken by ``AdapterBackend``.
"""

from __future__ import annotations

import base64
import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from ._kernels import keep_in_rect
from .annotations import DEFAULT_CLASS_NAMES, AnnotationSet
from .tiler import Detection, Rect

WindowBatch = Sequence[tuple[int, np.ndarray]]


class BackendError(Exception):
    """A backend failed for a batch; carries the affected window ids."""

    def __init__(self, message: str, window_ids: Sequence[int] = ()) -> None:
        super().__init__(message)
        self.window_ids = tuple(window_ids)


class ProtocolError(BackendError):
    """Malformed or out-of-order adapter message; payload is logged in the text."""


@dataclass(frozen=True)
class DetectorConfig:
    window_size: int = 256
    mpp: float = 0.25
    num_queries: int = 900
    top_k: int = 300
    confidence_threshold: float = 0.0
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self) -> None:
        if self.window_size <= 0:
            raise ValueError("window_size must be positive")
        if self.top_k > self.num_queries:
            raise ValueError("top_k must not exceed num_queries")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption model for the jitter backend: independent detection
    drops, Gaussian centroid jitter, uniform class flips, and scores drawn
    from score_range_true (class kept) or score_range_false (class
    flipped)."""

    drop_prob: float = 0.0
    jitter_sigma: float = 0.0
    class_flip_prob: float = 0.0
    score_range_true: tuple[float, float] = (0.9, 1.0)
    score_range_false: tuple[float, float] = (0.1, 0.5)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("drop_prob", "class_flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for lo, hi in (self.score_range_true, self.score_range_false):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("score ranges must be within [0, 1]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")


class DetectorBackend(Protocol):
    shareable: bool

    def detect(
        self, batch: WindowBatch, rects: Sequence[Rect], cfg: DetectorConfig
    ) -> list[list[Detection]]: ...

    def close(self) -> None: ...


def oracle_detect(annotations: AnnotationSet, window_rect: Rect) -> list[Detection]:
    """All annotated nuclei whose centroid lies in the window (half-open on
    the max side only), translated to window-local coordinates, score 1."""
    x0, y0, w, h = window_rect
    mask = keep_in_rect(annotations.cx, annotations.cy, x0, x0 + w, y0, y0 + h)
    idx = np.nonzero(mask)[0]
    return [
        Detection(
            cx=float(annotations.cx[i] - x0),
            cy=float(annotations.cy[i] - y0),
            w=float(annotations.w[i]),
            h=float(annotations.h[i]),
            class_id=int(annotations.class_id[i]),
            score=1.0,
        )
        for i in idx
    ]


def jitter_detect(
    annotations: AnnotationSet,
    window_rect: Rect,
    noise: NoiseSpec,
    num_classes: int | None = None,
) -> list[Detection]:
    """Oracle output corrupted per ``noise``. Deterministic for a given
    seed and window rect, independent of batching."""
    base = oracle_detect(annotations, window_rect)
    if num_classes is None:
        num_classes = int(annotations.class_id.max()) + 1 if len(annotations) else 1
    x0, y0 = window_rect[0], window_rect[1]
    rng = np.random.default_rng([noise.rng_seed, int(round(x0)), int(round(y0))])
    n = len(base)
    if n == 0:
        return []
    u_drop = rng.uniform(size=n)
    jit = rng.normal(0.0, noise.jitter_sigma, size=(n, 2)) if noise.jitter_sigma > 0 else np.zeros((n, 2))
    u_flip = rng.uniform(size=n)
    flip_to = rng.integers(0, max(num_classes - 1, 1), size=n)
    u_score = rng.uniform(size=n)

    w = window_rect[2]
    h = window_rect[3]
    hi_x = np.nextafter(w, -np.inf)
    hi_y = np.nextafter(h, -np.inf)
    out: list[Detection] = []
    for i, det in enumerate(base):
        if u_drop[i] < noise.drop_prob:
            continue
        cx = float(np.clip(det.cx + jit[i, 0], 0.0, hi_x))
        cy = float(np.clip(det.cy + jit[i, 1], 0.0, hi_y))
        cls = det.class_id
        flipped = num_classes > 1 and u_flip[i] < noise.class_flip_prob
        if flipped:
            cls = int(flip_to[i]) + (int(flip_to[i]) >= det.class_id)
        lo, hi = noise.score_range_false if flipped else noise.score_range_true
        score = float(lo + (hi - lo) * u_score[i])
        out.append(Detection(cx=cx, cy=cy, w=det.w, h=det.h, class_id=cls, score=score))
    return out


def filter_by_confidence(dets: Sequence[Detection], tau: float) -> list[Detection]:
    """Keep detections with score >= tau, preserving order."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    return [d for d in dets if d.score >= tau]


def detect(
    backend: DetectorBackend,
    batch: WindowBatch,
    cfg: DetectorConfig,
    rects: Sequence[Rect] | None = None,
) -> list[list[Detection]]:
    """Run a backend over a window batch and enforce the contract: at most
    top_k detections per window, scores descending, coordinates inside the
    window. Backend failures surface as BackendError with the window ids."""
    wids = [wid for wid, _ in batch]
    if rects is None:
        rects = [(0.0, 0.0, float(cfg.window_size), float(cfg.window_size))] * len(batch)
    for wid, img in batch:
        arr = np.asarray(img)
        if arr.shape[:2] != (cfg.window_size, cfg.window_size):
            raise BackendError(f"window {wid} does not match window_size", [wid])
    try:
        raw = backend.detect(batch, rects, cfg)
    except BackendError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise BackendError(f"backend failure for windows {wids}: {exc}", wids) from exc
    if len(raw) != len(batch):
        raise BackendError("backend returned wrong number of window results", wids)
    out: list[list[Detection]] = []
    for (wid, _), dets in zip(batch, raw):
        ordered = sorted(dets, key=lambda d: -d.score)[: cfg.top_k]
        for d in ordered:
            if not (0.0 <= d.cx < cfg.window_size and 0.0 <= d.cy < cfg.window_size):
                raise BackendError(f"window {wid}: detection outside window", [wid])
        out.append(ordered)
    return out


class OracleBackend:
    """Serves the annotation set verbatim; window rects must be in the
    annotation coordinate space."""

    shareable = True

    def __init__(self, annotations: AnnotationSet) -> None:
        self.annotations = annotations

    def detect(self, batch, rects, cfg):
        return [oracle_detect(self.annotations, rect) for rect in rects]

    def close(self) -> None:
        pass


class JitterBackend:
    """Noise-injected oracle for metric and threshold-sweep testing."""

    shareable = True

    def __init__(self, annotations: AnnotationSet, noise: NoiseSpec, num_classes: int | None = None) -> None:
        self.annotations = annotations
        self.noise = noise
        self.num_classes = num_classes

    def detect(self, batch, rects, cfg):
        n_cls = self.num_classes if self.num_classes is not None else len(cfg.class_names)
        return [jitter_detect(self.annotations, rect, self.noise, n_cls) for rect in rects]

    def close(self) -> None:
        pass


def _encode_window(wid: int, img: np.ndarray) -> dict:
    arr = np.ascontiguousarray(np.asarray(img, dtype=np.uint8))
    h, w = arr.shape[:2]
    return {"wid": wid, "w": w, "h": h, "rgb_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


class AdapterBackend:
    """Client side of the external-detector protocol: newline-delimited
    JSON over the adapter process's stdin/stdout.

        -> {"type":"hello","window_size":...,"mpp":...,"classes":[...],
            "window_rects_path":...?}
        <- {"type":"ready","max_batch":N}
        -> {"type":"infer","id":k,"windows":[{"wid","w","h","rgb_b64"},...]}
        <- {"type":"result","id":k,"detections":[[...],...]}
        -> {"type":"shutdown"}

    The optional window_rects_path names a sidecar JSON file mapping wid to
    [x, y, w, h] in annotation space, for adapters that serve detections
    from annotation files. Any malformed or out-of-order reply aborts the
    run with the offending payload in the error message.
    """

    shareable = False

    def __init__(
        self,
        command: Sequence[str],
        cfg: DetectorConfig,
        window_rects: Mapping[int, Rect] | None = None,
        workdir: str | Path | None = None,
    ) -> None:
        self._cfg = cfg
        self._next_id = 0
        self._sidecar: Path | None = None
        if window_rects is not None:
            fd = tempfile.NamedTemporaryFile(
                "w", suffix=".json", dir=workdir, delete=False, encoding="utf-8"
            )
            with fd:
                json.dump({str(k): list(map(float, v)) for k, v in window_rects.items()}, fd)
            self._sidecar = Path(fd.name)
        try:
            self._proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise BackendError(f"cannot launch adapter {command!r}: {exc}") from exc
        hello = {
            "type": "hello",
            "window_size": cfg.window_size,
            "mpp": cfg.mpp,
            "classes": list(cfg.class_names),
        }
        if self._sidecar is not None:
            hello["window_rects_path"] = str(self._sidecar)
        self._send(hello)
        ready = self._recv()
        if ready.get("type") != "ready" or "max_batch" not in ready:
            raise ProtocolError(f"expected ready, got: {json.dumps(ready)}")
        self.max_batch = int(ready["max_batch"])
        if self.max_batch < 1:
            raise ProtocolError(f"invalid max_batch in: {json.dumps(ready)}")

    def _send(self, msg: dict) -> None:
        stdin = self._proc.stdin
        assert stdin is not None
        try:
            stdin.write(json.dumps(msg) + "\n")
            stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ProtocolError(f"adapter pipe closed while sending {msg.get('type')}") from exc

    def _recv(self) -> dict:
        stdout = self._proc.stdout
        assert stdout is not None
        line = stdout.readline()
        if not line:
            raise ProtocolError("adapter closed its output stream")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed adapter message: {line.strip()!r}") from exc
        if not isinstance(msg, dict) or "type" not in msg:
            raise ProtocolError(f"malformed adapter message: {line.strip()!r}")
        if msg["type"] == "error":
            raise ProtocolError(f"adapter error: {json.dumps(msg)}")
        return msg

    def detect(self, batch, rects, cfg):
        results: list[list[Detection]] = []
        batch = list(batch)
        for start in range(0, len(batch), self.max_batch):
            chunk = batch[start : start + self.max_batch]
            self._next_id += 1
            req_id = self._next_id
            self._send(
                {
                    "type": "infer",
                    "id": req_id,
                    "windows": [_encode_window(wid, img) for wid, img in chunk],
                }
            )
            msg = self._recv()
            if msg.get("type") != "result" or msg.get("id") != req_id:
                raise ProtocolError(f"out-of-order or invalid reply: {json.dumps(msg)}")
            dets = msg.get("detections")
            if not isinstance(dets, list) or len(dets) != len(chunk):
                raise ProtocolError(f"result shape mismatch: {json.dumps(msg)}")
            for (wid, _), window_dets in zip(chunk, dets):
                try:
                    results.append(
                        [
                            Detection(
                                cx=float(d["cx"]),
                                cy=float(d["cy"]),
                                w=float(d["w"]),
                                h=float(d["h"]),
                                class_id=int(d["class"]),
                                score=float(d["score"]),
                            )
                            for d in window_dets
                        ]
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise ProtocolError(
                        f"bad detection record for window {wid}: {json.dumps(window_dets)}"
                    ) from exc
        return results

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._send({"type": "shutdown"})
            except ProtocolError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._proc.stdin:
            self._proc.stdin.close()
        if self._proc.stdout:
            self._proc.stdout.close()
        if self._sidecar is not None and self._sidecar.exists():
            self._sidecar.unlink()

    def __enter__(self) -> "AdapterBackend":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
