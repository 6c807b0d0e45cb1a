"""Deterministic expert needing no model assets.

Every answer is a pure function of (image_ref, prompt). The image reference
seeds a small scene of named shapes drawn from the arbiter's class
vocabulary; a text prompt picks one shape, a point prompt returns the shapes
under the point padded with disks around it. Useful for protocol tests,
offline pipelines, and CI.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict

import numpy as np

from maskarbiter import Mask, encode_rle, rle_to_json
from maskarbiter.synth import CLASS_VOCABULARY

from .config import BridgeConfig, RequestProblem

_MAX_K = 64  # caps per-request work; real callers use single digits


def _digest(*parts: object) -> int:
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _take(entropy: int, lo: int, hi: int) -> tuple[int, int]:
    # Draw one value in [lo, hi] and return the remaining entropy.
    span = hi - lo + 1
    return lo + entropy % span, entropy // span


def _ellipse(width: int, height: int, cx: int, cy: int, rx: int, ry: int) -> np.ndarray:
    ys, xs = np.ogrid[:height, :width]
    return ((xs - cx) * ry) ** 2 + ((ys - cy) * rx) ** 2 <= (rx * ry) ** 2


class StubExpert:
    """Answers point and text requests deterministically."""

    def __init__(self, config: BridgeConfig | None = None) -> None:
        self.config = config if config is not None else BridgeConfig()
        self._scenes: OrderedDict[str, dict[str, np.ndarray]] = OrderedDict()
        self._lock = threading.Lock()

    # The scene plays the role of the image embedding: computed once per
    # image_ref and shared by point and text requests.
    def _scene(self, image_ref: str) -> dict[str, np.ndarray]:
        with self._lock:
            cached = self._scenes.get(image_ref)
            if cached is not None:
                self._scenes.move_to_end(image_ref)
                return cached
        w, h = self.config.width, self.config.height
        scene: dict[str, np.ndarray] = {}
        for name in CLASS_VOCABULARY:
            d = _digest(image_ref, name)
            rx, d = _take(d, 3, 8)
            ry, d = _take(d, 3, 8)
            cx, d = _take(d, rx + 1, w - rx - 2)
            cy, d = _take(d, ry + 1, h - ry - 2)
            kind, d = _take(d, 0, 1)
            if kind:
                arr = np.zeros((h, w), dtype=bool)
                arr[cy - ry : cy + ry + 1, cx - rx : cx + rx + 1] = True
            else:
                arr = _ellipse(w, h, cx, cy, rx, ry)
            arr.setflags(write=False)
            scene[name] = arr
        with self._lock:
            self._scenes[image_ref] = scene
            self._scenes.move_to_end(image_ref)
            while len(self._scenes) > self.config.cache_size:
                self._scenes.popitem(last=False)
        return scene

    def answer(self, payload: dict) -> dict:
        rid = payload.get("id")
        if not isinstance(rid, str) or not rid:
            raise RequestProblem("request needs a non-empty string id")
        image_ref = payload.get("image")
        if not isinstance(image_ref, str) or not image_ref:
            raise RequestProblem("request needs a non-empty image reference")
        kind = payload.get("kind")
        if kind == "point":
            masks, confidences = self._answer_point(image_ref, payload)
        elif kind == "text":
            masks, confidences = self._answer_text(image_ref, payload)
        else:
            raise RequestProblem(f"kind must be 'point' or 'text', got {kind!r}")
        return {
            "id": rid,
            "masks": [rle_to_json(encode_rle(Mask.from_array(m))) for m in masks],
            "confidences": confidences,
        }

    def _answer_point(self, image_ref: str, payload: dict):
        point = payload.get("point")
        if (
            not isinstance(point, (list, tuple))
            or len(point) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in point)
        ):
            raise RequestProblem("point must be [x, y] with non-negative integers")
        k = payload.get("k", 1)
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise RequestProblem(f"k must be a positive integer, got {k!r}")
        if k > _MAX_K:
            raise RequestProblem(f"k is capped at {_MAX_K}, got {k}")
        x, y = point
        w, h = self.config.width, self.config.height
        scene = self._scene(image_ref)
        hits = []
        for name, arr in scene.items():
            if y < h and x < w and arr[y, x]:
                hits.append((int(arr.sum()), name, arr))
        hits.sort(key=lambda t: (t[0], t[1]))  # smallest object first, like tight-to-loose
        masks = [arr for _, _, arr in hits[:k]]
        j = 0
        while len(masks) < k:
            d = _digest(image_ref, "point", x, y, j)
            radius, _ = _take(d, 3, 14)
            masks.append(_ellipse(w, h, min(x, w - 1), min(y, h - 1), radius, radius))
            j += 1
        scores = []
        for i in range(k):
            d = _digest(image_ref, "score", x, y, i)
            scores.append((700 + d % 300) / 1000.0)
        scores.sort(reverse=True)
        return masks, scores

    def _answer_text(self, image_ref: str, payload: dict):
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise RequestProblem("text must be a non-empty string")
        name = text if text in CLASS_VOCABULARY else CLASS_VOCABULARY[_digest(text) % len(CLASS_VOCABULARY)]
        scene = self._scene(image_ref)
        # No model score exists here, so the confidence defaults to 1.0.
        return [scene[name]], [1.0]
