"""Deterministic synthetic scenes with mock point and text experts.

Each scene is a small canvas of overlapping rectangles and ellipses with
distinct class names. Instances come in two flavors: the query point lands
either in a region covered by the target alone, or in a region the target
shares with a strictly larger occluding object. The mock point expert is
built to be decisively wrong on shared-region points (its top-confidence
candidate is the union of both objects), while the mock text expert returns
the named object with light boundary noise. Selecting candidates by overlap
with the text guide therefore recovers the target where confidence ranking
cannot, which gives the package a model-free oracle for its selection logic.

All randomness flows from one explicitly specified PRNG (splitmix64 for seed
expansion, xoshiro256** for draws), so generated suites are byte-identical
on every platform. A suite on disk is a standard evaluation manifest plus
PBM ground-truth masks plus a file-backend manifest with the mock experts'
precomputed responses.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .arbiter import CandidateSet, Guide
from .errors import InvalidConfig, PointOutsideObjects, UnknownClassName
from .evaluation import InstanceRecord
from .experts import PointPrompt, TextPrompt
from .mask import Mask, area, decode_rle, encode_rle, rle_to_json, save_mask
from .rng import SplitMix64, Xoshiro256StarStar

# Frozen constants: candidate confidences descend so the confidence ranking
# is unambiguous, and the guide confidence stays below all of them.
POINT_CONFIDENCES = (0.9, 0.8, 0.7)
TEXT_CONFIDENCE = 0.75
GENERIC_TEXT = "object"

CLASS_VOCABULARY = (
    "anchor",
    "bolt",
    "clamp",
    "dowel",
    "flange",
    "gasket",
    "hinge",
    "rivet",
)

_TARGET_RECT = (6, 14)
_TARGET_RADIUS = (3, 7)
_OCCLUDER_RECT = (16, 26)
_OCCLUDER_RADIUS = (9, 13)
_MIN_OBJECT_AREA = 16
_MAX_SCENE_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneObject:
    index: int  # creation order; doubles as z-order
    class_name: str
    kind: str  # "rect" or "ellipse"
    params: tuple[int, ...]  # rect: x0, y0, w, h; ellipse: cx, cy, rx, ry
    mask: Mask


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    rng_seed: int
    objects: tuple[SceneObject, ...]

    @property
    def object_count(self) -> int:
        return len(self.objects)


@dataclass(frozen=True)
class SynthInstance:
    """An evaluation record plus how it was made."""

    record: InstanceRecord
    scene: SceneSpec
    target_index: int
    overlap: bool
    noise_seed: int


# -- rasterization -------------------------------------------------------------


def _raster_rect(x0: int, y0: int, w: int, h: int, width: int, height: int) -> np.ndarray:
    arr = np.zeros((height, width), dtype=bool)
    arr[y0 : y0 + h, x0 : x0 + w] = True
    return arr


def _raster_ellipse(cx: int, cy: int, rx: int, ry: int, width: int, height: int) -> np.ndarray:
    # Integer test, clipped at the canvas: ((x-cx)ry)^2 + ((y-cy)rx)^2 <= (rx*ry)^2
    ys, xs = np.ogrid[0:height, 0:width]
    return ((xs - cx) * ry) ** 2 + ((ys - cy) * rx) ** 2 <= (rx * ry) ** 2


def _dilate4(arr: np.ndarray) -> np.ndarray:
    out = arr.copy()
    out[1:, :] |= arr[:-1, :]
    out[:-1, :] |= arr[1:, :]
    out[:, 1:] |= arr[:, :-1]
    out[:, :-1] |= arr[:, 1:]
    return out


def _boundary_band(arr: np.ndarray) -> np.ndarray:
    """Object pixels touching background plus background pixels touching
    the object, both via 4-neighborhood."""
    return _dilate4(arr) & ~(_erode4(arr))


def _erode4(arr: np.ndarray) -> np.ndarray:
    # Pixels whose existing 4-neighbors are all set; neighbors beyond the
    # canvas border do not count as background.
    out = arr.copy()
    out[1:, :] &= arr[:-1, :]
    out[:-1, :] &= arr[1:, :]
    out[:, 1:] &= arr[:, :-1]
    out[:, :-1] &= arr[:, 1:]
    return out


# -- scene generation ----------------------------------------------------------


def _draw_small_shape(rng: Xoshiro256StarStar, width: int, height: int) -> tuple[str, tuple[int, ...], np.ndarray]:
    if rng.below(2) == 0:
        w = rng.randint(*_TARGET_RECT)
        h = rng.randint(*_TARGET_RECT)
        x0 = rng.randint(0, width - w)
        y0 = rng.randint(0, height - h)
        return "rect", (x0, y0, w, h), _raster_rect(x0, y0, w, h, width, height)
    rx = rng.randint(*_TARGET_RADIUS)
    ry = rng.randint(*_TARGET_RADIUS)
    cx = rng.randint(rx, width - 1 - rx)
    cy = rng.randint(ry, height - 1 - ry)
    return "ellipse", (cx, cy, rx, ry), _raster_ellipse(cx, cy, rx, ry, width, height)


def _draw_occluder(
    rng: Xoshiro256StarStar, ax: int, ay: int, width: int, height: int
) -> tuple[str, tuple[int, ...], np.ndarray]:
    """A large shape guaranteed to cover the anchor pixel (ax, ay)."""
    if rng.below(2) == 0:
        w = rng.randint(*_OCCLUDER_RECT)
        h = rng.randint(*_OCCLUDER_RECT)
        x0 = rng.randint(max(0, ax - w + 1), min(ax, width - w))
        y0 = rng.randint(max(0, ay - h + 1), min(ay, height - h))
        return "rect", (x0, y0, w, h), _raster_rect(x0, y0, w, h, width, height)
    rx = rng.randint(*_OCCLUDER_RADIUS)
    ry = rng.randint(*_OCCLUDER_RADIUS)
    # Center within half a radius of the anchor; may clip at the canvas,
    # which the caller's area check guards against.
    cx = rng.randint(ax - rx // 2, ax + rx // 2)
    cy = rng.randint(ay - ry // 2, ay + ry // 2)
    return "ellipse", (cx, cy, rx, ry), _raster_ellipse(cx, cy, rx, ry, width, height)


def _try_scene(
    rng: Xoshiro256StarStar, seed: int, overlap: bool, width: int, height: int
) -> tuple[SceneSpec, PointPrompt] | None:
    object_count = rng.randint(2, 5)
    names = list(CLASS_VOCABULARY)
    rng.shuffle(names)
    shapes: list[tuple[str, tuple[int, ...], np.ndarray]] = []
    target_kind, target_params, target_arr = _draw_small_shape(rng, width, height)
    shapes.append((target_kind, target_params, target_arr))
    if overlap:
        tgt_indices = np.flatnonzero(target_arr.ravel())
        anchor = int(tgt_indices[rng.below(len(tgt_indices))])
        ay, ax = divmod(anchor, width)
        occ_kind, occ_params, occ_arr = _draw_occluder(rng, ax, ay, width, height)
        if int(occ_arr.sum()) <= int(target_arr.sum()):
            return None  # clipped too hard to dominate the target
        shapes.append((occ_kind, occ_params, occ_arr))
    while len(shapes) < object_count:
        shapes.append(_draw_small_shape(rng, width, height))
    if any(int(arr.sum()) < _MIN_OBJECT_AREA for _, _, arr in shapes):
        return None
    others = np.zeros((height, width), dtype=bool)
    for _, _, arr in shapes[(2 if overlap else 1):]:
        others |= arr
    if overlap:
        region = target_arr & shapes[1][2] & ~others
    else:
        region = target_arr & ~others
    flat = np.flatnonzero(region.ravel())
    if len(flat) == 0:
        return None
    y, x = divmod(int(flat[rng.below(len(flat))]), width)
    objects = tuple(
        SceneObject(
            index=i,
            class_name=names[i],
            kind=kind,
            params=params,
            mask=Mask.from_array(arr),
        )
        for i, (kind, params, arr) in enumerate(shapes)
    )
    return SceneSpec(width=width, height=height, rng_seed=seed, objects=objects), PointPrompt(x, y)


def _gen_scene(seed: int, overlap: bool, width: int, height: int) -> tuple[SceneSpec, PointPrompt]:
    rng = Xoshiro256StarStar(seed)
    for _ in range(_MAX_SCENE_ATTEMPTS):
        produced = _try_scene(rng, seed, overlap, width, height)
        if produced is not None:
            return produced
    raise RuntimeError(f"no valid scene after {_MAX_SCENE_ATTEMPTS} attempts (seed {seed})")


def _overlap_flags(n: int, fraction: float) -> list[bool]:
    """Exactly round(fraction*n) flags, spread evenly across the suite."""
    target = int(np.floor(fraction * n + 0.5))  # round half up
    flags = []
    acc = 0
    for i in range(n):
        nxt = ((i + 1) * target) // n
        flags.append(nxt > acc)
        acc = nxt
    return flags


def gen_instances(
    seed: int,
    n_instances: int,
    overlap_fraction: float,
    width: int = 64,
    height: int = 64,
) -> list[SynthInstance]:
    """Generate the suite in memory; same seed, same instances, always."""
    if n_instances < 1:
        raise InvalidConfig("n_instances must be >= 1")
    if not 0.0 <= overlap_fraction <= 1.0:
        raise InvalidConfig("overlap_fraction must be in [0, 1]")
    if width < 32 or height < 32:
        raise InvalidConfig("canvas must be at least 32x32 to fit occluders")
    sm = SplitMix64(seed)
    flags = _overlap_flags(n_instances, overlap_fraction)
    instances = []
    for i in range(n_instances):
        scene_seed = sm.next_u64()
        noise_seed = sm.next_u64()
        scene, point = _gen_scene(scene_seed, flags[i], width, height)
        target = scene.objects[0]
        record = InstanceRecord(
            id=f"inst-{i:04d}",
            image_ref=f"scene-{i:04d}",
            point=point,
            text=TextPrompt(target.class_name),
            gt=encode_rle(target.mask),
            class_name=target.class_name,
        )
        instances.append(
            SynthInstance(
                record=record,
                scene=scene,
                target_index=0,
                overlap=flags[i],
                noise_seed=noise_seed,
            )
        )
    return instances


# -- mock experts ----------------------------------------------------------------


def mock_point_expert(scene: SceneSpec, point: PointPrompt, k: int = 3) -> CandidateSet:
    """Candidates for a point: the smallest containing object, the union of
    all containing objects, and dilations of the smallest.

    On points covered by two or more objects the union outranks the exact
    object in confidence, so a confidence-only consumer picks the union and
    overshoots; everywhere else the exact object ranks first.
    """
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    containing = [
        obj for obj in scene.objects if obj.mask.to_array()[point.y, point.x]
    ]
    if not containing:
        raise PointOutsideObjects(f"point ({point.x}, {point.y}) lies on no object")
    smallest = min(containing, key=lambda o: (area(o.mask), o.index))
    union_arr = np.zeros((scene.height, scene.width), dtype=bool)
    for obj in containing:
        union_arr |= obj.mask.to_array()
    exact = smallest.mask
    union = Mask.from_array(union_arr)
    dilated = Mask.from_array(_dilate4(exact.to_array()))
    in_overlap = len(containing) >= 2
    ordered = [union, exact, dilated] if in_overlap else [exact, union, dilated]
    confidences = list(POINT_CONFIDENCES)
    # Past the canonical three, keep dilating the exact object with strictly
    # lower confidence.
    grow = dilated.to_array()
    for extra in range(3, k):
        grow = _dilate4(grow)
        ordered.append(Mask.from_array(grow))
        confidences.append(max(0.7 - 0.1 * (extra - 2), 0.0))
    return CandidateSet(ordered[:k], confidences[:k])


def mock_text_expert(
    scene: SceneSpec, text: str, noise_rate: float = 0.05, seed: int = 0
) -> Guide:
    """The named object's mask with boundary pixels flipped at noise_rate.

    The band covers object pixels with a background 4-neighbor and
    background pixels 4-adjacent to the object; each band pixel flips
    independently, in row-major order, under the given seed.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise InvalidConfig("noise_rate must be in [0, 1]")
    matches = [obj for obj in scene.objects if obj.class_name == text]
    if len(matches) != 1:
        raise UnknownClassName(
            f"text {text!r} names {len(matches)} objects, expected exactly 1"
        )
    arr = matches[0].mask.to_array().copy()
    band = _boundary_band(arr)
    rng = Xoshiro256StarStar(seed)
    ys, xs = np.nonzero(band)  # row-major order
    for y, x in zip(ys.tolist(), xs.tolist()):
        if rng.uniform() < noise_rate:
            arr[y, x] = not arr[y, x]
    return Guide(Mask.from_array(arr), confidence=TEXT_CONFIDENCE)


def _class_noise_seeds(instance: SynthInstance) -> tuple[dict[str, int], int]:
    """Per-class noise seeds plus the generic-prompt seed, all derived from
    the instance's noise seed in object creation order."""
    stream = SplitMix64(instance.noise_seed)
    by_class = {obj.class_name: stream.next_u64() for obj in instance.scene.objects}
    return by_class, stream.next_u64()


# -- suite emission --------------------------------------------------------------


def write_suite(
    instances: list[SynthInstance],
    out_dir: str | os.PathLike,
    noise_rate: float = 0.05,
    k: int = 3,
) -> dict[str, str]:
    """Write manifest, ground-truth PBMs, and the mock expert backend.

    The backend answers the point prompt of every instance, a text prompt
    for every class name in each scene, and the generic prompt "object"
    (answered with the scene's largest object) so constant text templates
    still get a guide.
    """
    out_dir = os.fspath(out_dir)
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(masks_dir, exist_ok=True)
    manifest_instances = []
    responses = []
    for inst in instances:
        rec = inst.record
        gt_name = f"{rec.id}_gt.pbm"
        save_mask(decode_rle(rec.gt), os.path.join(masks_dir, gt_name))
        manifest_instances.append(
            {
                "id": rec.id,
                "image": rec.image_ref,
                "point": [rec.point.x, rec.point.y],
                "text": rec.text.text,
                "class": rec.class_name,
                "gt": {"path": f"masks/{gt_name}"},
                "synth": {"overlap": inst.overlap, "target": inst.target_index},
            }
        )
        cands = mock_point_expert(inst.scene, rec.point, k=k)
        responses.append(
            {
                "image": rec.image_ref,
                "kind": "point",
                "point": [rec.point.x, rec.point.y],
                "masks": [rle_to_json(encode_rle(m)) for m in cands.masks],
                "confidences": list(cands.confidences),
            }
        )
        class_seeds, generic_seed = _class_noise_seeds(inst)
        for obj in inst.scene.objects:
            guide = mock_text_expert(
                inst.scene, obj.class_name, noise_rate, class_seeds[obj.class_name]
            )
            responses.append(
                {
                    "image": rec.image_ref,
                    "kind": "text",
                    "text": obj.class_name,
                    "masks": [rle_to_json(encode_rle(guide.mask))],
                    "confidences": [guide.confidence],
                }
            )
        largest = max(inst.scene.objects, key=lambda o: (area(o.mask), -o.index))
        generic = mock_text_expert(inst.scene, largest.class_name, noise_rate, generic_seed)
        responses.append(
            {
                "image": rec.image_ref,
                "kind": "text",
                "text": GENERIC_TEXT,
                "masks": [rle_to_json(encode_rle(generic.mask))],
                "confidences": [generic.confidence],
            }
        )
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump({"instances": manifest_instances}, fh, indent=2)
        fh.write("\n")
    backend_path = os.path.join(out_dir, "expert_backend.json")
    with open(backend_path, "w", encoding="utf-8") as fh:
        json.dump({"responses": responses}, fh, indent=2)
        fh.write("\n")
    return {"manifest": manifest_path, "backend": backend_path, "masks": masks_dir}


def gen_suite(
    seed: int,
    n_instances: int,
    overlap_fraction: float,
    out_dir: str | os.PathLike,
    noise_rate: float = 0.05,
    width: int = 64,
    height: int = 64,
    k: int = 3,
) -> dict[str, str]:
    """Generate and write a complete suite; deterministic given the inputs."""
    instances = gen_instances(seed, n_instances, overlap_fraction, width, height)
    return write_suite(instances, out_dir, noise_rate=noise_rate, k=k)


__all__ = [
    "CLASS_VOCABULARY",
    "GENERIC_TEXT",
    "POINT_CONFIDENCES",
    "TEXT_CONFIDENCE",
    "SceneObject",
    "SceneSpec",
    "SynthInstance",
    "gen_instances",
    "gen_suite",
    "mock_point_expert",
    "mock_text_expert",
    "write_suite",
]
