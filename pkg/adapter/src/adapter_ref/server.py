"""Reference adapter process for the detector stdio protocol.

The engine speaks newline-delimited JSON over this process's stdin/stdout:

    -> {"type":"hello","window_size":S,"mpp":M,"classes":[...],
        "window_rects_path": "sidecar.json"?}
    <- {"type":"ready","max_batch":N}
    -> {"type":"infer","id":k,"windows":[{"wid","w","h","rgb_b64"},...]}
    <- {"type":"result","id":k,"detections":[[{...},...],...]}
    -> {"type":"shutdown"}

The stub backend ignores the pixels and answers from an annotation JSONL
file (one object per nucleus: cx, cy, w, h, class, optional tissue, in
annotation-space pixels). The sidecar maps each window id to its
[x, y, w, h] rect in that same space; detections are returned
window-local, rescaled to the model's window size. Every infer is
answered in order with the same id. A malformed or out-of-order message
produces {"type":"error","msg":...} and exit code 2.

To wrap a real model, subclass StubBackend (or pass any object with its
``infer(windows)`` signature to ``serve``): decode ``rgb_b64`` into the
window raster and return one detection list per window.
"""

from __future__ import annotations

import base64
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path


class ProtocolViolation(Exception):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    annotation_path: Path
    latency_ms: float = 0.0
    max_batch: int = 8

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")


def load_annotations(path: Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                records.append(
                    {
                        "cx": float(rec["cx"]),
                        "cy": float(rec["cy"]),
                        "w": float(rec["w"]),
                        "h": float(rec["h"]),
                        "class": int(rec["class"]),
                    }
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad annotation record") from exc
    return records


class StubBackend:
    """Annotation-file detector: perfect recall inside each window rect."""

    def __init__(self, annotations: list[dict], window_size: int, rects: dict[int, list[float]]):
        self.annotations = annotations
        self.window_size = window_size
        self.rects = rects

    def infer(self, windows: list[dict]) -> list[list[dict]]:
        out = []
        for win in windows:
            wid = int(win["wid"])
            if wid not in self.rects:
                raise ProtocolViolation(f"no rect for window id {wid}")
            x0, y0, rw, rh = self.rects[wid]
            fx = self.window_size / rw
            fy = self.window_size / rh
            dets = [
                {
                    "cx": (a["cx"] - x0) * fx,
                    "cy": (a["cy"] - y0) * fy,
                    "w": a["w"] * fx,
                    "h": a["h"] * fy,
                    "class": a["class"],
                    "score": 1.0,
                }
                for a in self.annotations
                if x0 <= a["cx"] < x0 + rw and y0 <= a["cy"] < y0 + rh
            ]
            out.append(dets)
        return out

    @staticmethod
    def decode_window(win: dict) -> bytes:
        """Raw row-major RGB bytes of one window (hook for real models)."""
        return base64.b64decode(win["rgb_b64"])


def _write(msg: dict, stdout) -> None:
    stdout.write(json.dumps(msg) + "\n")
    stdout.flush()


def serve(config: AdapterConfig, stdin=None, stdout=None, backend_factory=None) -> int:
    """Run the request loop until shutdown or EOF. Returns the exit code:
    0 on clean shutdown, 2 after an error reply."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def fail(message: str) -> int:
        _write({"type": "error", "msg": message}, stdout)
        return 2

    try:
        annotations = load_annotations(config.annotation_path)
    except (OSError, ValueError) as exc:
        return fail(f"cannot load annotations: {exc}")

    first = stdin.readline()
    if not first:
        return fail("no hello received")
    try:
        hello = json.loads(first)
    except json.JSONDecodeError:
        return fail(f"malformed message: {first.strip()!r}")
    if not isinstance(hello, dict) or hello.get("type") != "hello":
        return fail(f"expected hello, got: {first.strip()!r}")
    try:
        window_size = int(hello["window_size"])
    except (KeyError, TypeError, ValueError):
        return fail("hello missing window_size")

    rects: dict[int, list[float]] = {}
    rects_path = hello.get("window_rects_path")
    if rects_path:
        try:
            with open(rects_path, "r", encoding="utf-8") as fh:
                rects = {int(k): [float(v) for v in rect] for k, rect in json.load(fh).items()}
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            return fail(f"cannot load window rects sidecar: {exc}")

    if backend_factory is None:
        backend = StubBackend(annotations, window_size, rects)
    else:
        backend = backend_factory(annotations, window_size, rects)

    _write({"type": "ready", "max_batch": config.max_batch}, stdout)

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            return fail(f"malformed message: {line!r}")
        if not isinstance(msg, dict):
            return fail(f"malformed message: {line!r}")
        kind = msg.get("type")
        if kind == "shutdown":
            return 0
        if kind != "infer":
            return fail(f"unexpected message type: {kind!r}")
        if "id" not in msg or not isinstance(msg.get("windows"), list):
            return fail("infer requires id and windows")
        if len(msg["windows"]) > config.max_batch:
            return fail(f"batch of {len(msg['windows'])} exceeds max_batch {config.max_batch}")
        if config.latency_ms > 0:
            time.sleep(config.latency_ms / 1000.0)
        try:
            detections = backend.infer(msg["windows"])
        except (ProtocolViolation, KeyError, TypeError, ValueError) as exc:
            return fail(f"infer failed: {exc}")
        _write({"type": "result", "id": msg["id"], "detections": detections}, stdout)

    return 0  # engine closed the pipe without shutdown; treat as clean end
