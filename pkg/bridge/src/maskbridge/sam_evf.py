"""Adapter answering the wire protocol with real model checkpoints.

Point requests run a SAM predictor with multimask output and return its
quality scores as confidences; text requests run EVF-SAM. Image references
are treated as paths to image files. None of this is exercised in CI: it
requires torch, both model codebases, and downloaded checkpoints. Import
and construction fail with actionable messages when anything is missing.

Inference resolution and the mask binarization threshold follow the
upstream defaults of each codebase; both are echoed in the response under
"meta" so downstream runs can record them.
"""

from __future__ import annotations

import threading
from collections import OrderedDict

import numpy as np

from maskarbiter import Mask, encode_rle, rle_to_json

from .config import BridgeConfig, BridgeDependencyError, RequestProblem

_BINARY_THRESHOLD = 0.0  # upstream default: logits > 0


class SamEvfExpert:
    """Lazily loads SAM and EVF-SAM and serves them behind the protocol."""

    def __init__(self, config: BridgeConfig) -> None:
        if not config.sam_checkpoint or not config.evf_checkpoint:
            raise BridgeDependencyError(
                "sam_evf mode needs --sam-checkpoint and --evf-checkpoint"
            )
        try:
            import torch
            from PIL import Image
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise BridgeDependencyError(
                "sam_evf mode needs torch, pillow and segment-anything "
                f"(pip install 'maskbridge[sam]'): {exc}"
            ) from exc
        try:
            from evf_sam.inference import EvfSamPredictor  # not on PyPI
        except ImportError as exc:
            raise BridgeDependencyError(
                "sam_evf mode needs the EVF-SAM codebase on PYTHONPATH; "
                f"clone it next to this package and install its requirements: {exc}"
            ) from exc

        self.config = config
        self._torch = torch
        self._image_cls = Image
        sam = sam_model_registry[config.sam_model_type](checkpoint=config.sam_checkpoint)
        sam.to(config.device)
        self._sam = SamPredictor(sam)
        self._evf = EvfSamPredictor(config.evf_checkpoint, device=config.device)
        self._images: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self._current_ref: str | None = None

    def _pixels(self, image_ref: str) -> np.ndarray:
        with self._lock:
            cached = self._images.get(image_ref)
            if cached is not None:
                self._images.move_to_end(image_ref)
                return cached
        try:
            with self._image_cls.open(image_ref) as img:
                pixels = np.asarray(img.convert("RGB"))
        except OSError as exc:
            raise RequestProblem(f"cannot read image {image_ref!r}: {exc}") from exc
        with self._lock:
            self._images[image_ref] = pixels
            while len(self._images) > self.config.cache_size:
                self._images.popitem(last=False)
        return pixels

    def _set_image(self, image_ref: str) -> np.ndarray:
        # SamPredictor keeps one embedding at a time; recompute only when
        # the reference changes.
        pixels = self._pixels(image_ref)
        if self._current_ref != image_ref:
            self._sam.set_image(pixels)
            self._current_ref = image_ref
        return pixels

    def answer(self, payload: dict) -> dict:
        rid = payload.get("id")
        if not isinstance(rid, str) or not rid:
            raise RequestProblem("request needs a non-empty string id")
        image_ref = payload.get("image")
        if not isinstance(image_ref, str) or not image_ref:
            raise RequestProblem("request needs a non-empty image reference")
        kind = payload.get("kind")
        with self._lock:
            if kind == "point":
                masks, scores = self._answer_point(image_ref, payload)
            elif kind == "text":
                masks, scores = self._answer_text(image_ref, payload)
            else:
                raise RequestProblem(f"kind must be 'point' or 'text', got {kind!r}")
        return {
            "id": rid,
            "masks": [rle_to_json(encode_rle(Mask.from_array(m))) for m in masks],
            "confidences": scores,
            "meta": {"device": self.config.device, "threshold": _BINARY_THRESHOLD},
        }

    def _answer_point(self, image_ref: str, payload: dict):
        point = payload.get("point")
        if not isinstance(point, (list, tuple)) or len(point) != 2:
            raise RequestProblem("point must be [x, y]")
        k = payload.get("k", 3)
        self._set_image(image_ref)
        masks, scores, _ = self._sam.predict(
            point_coords=np.array([point], dtype=np.float64),
            point_labels=np.array([1]),
            multimask_output=True,
        )
        if k > len(masks):
            raise RequestProblem(f"point expert produces {len(masks)} masks, requested {k}")
        order = np.argsort(-scores)[:k]
        return [masks[i].astype(bool) for i in order], [float(scores[i]) for i in order]

    def _answer_text(self, image_ref: str, payload: dict):
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise RequestProblem("text must be a non-empty string")
        pixels = self._pixels(image_ref)
        prediction = self._evf.predict(pixels, text)
        mask = np.asarray(prediction.mask) > _BINARY_THRESHOLD
        score = getattr(prediction, "score", None)
        return [mask], [float(score) if score is not None else 1.0]
