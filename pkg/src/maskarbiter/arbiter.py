"""Candidate mask selection against a guide mask.

The core decision: given k candidate masks from a point-prompted expert and
one guide mask from a text-prompted expert, score each candidate and pick the
winner. The default scoring is pure overlap (IoU) between candidate and
guide; a weighted joint score can also mix in the two experts' confidences:

    score_i = w_text * guide_confidence
            + w_point * candidate_confidence_i
            + w_iou * IoU(guide, candidate_i)

Ties break to the lowest candidate index. When the guide carries no signal
(empty guide mask, or every overlap is zero under pure-IoU weights) a
configurable fallback policy decides instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .errors import DimensionMismatch, InvalidConfig
from .mask import Mask, area, iou


class FallbackPolicy(str, Enum):
    """What to do when the guide cannot discriminate between candidates."""

    POINT_CONFIDENCE = "point_confidence"
    GUIDE = "guide"
    FIRST = "first"


@dataclass(frozen=True)
class CandidateSet:
    """Ordered candidate masks with per-candidate confidences."""

    masks: tuple[Mask, ...]
    confidences: tuple[float, ...]

    def __init__(self, masks: Sequence[Mask], confidences: Sequence[float]) -> None:
        masks = tuple(masks)
        confidences = tuple(float(c) for c in confidences)
        if len(masks) < 1:
            raise InvalidConfig("candidate set must contain at least one mask")
        if len(masks) != len(confidences):
            raise InvalidConfig(
                f"{len(masks)} masks but {len(confidences)} confidences"
            )
        first = masks[0]
        for m in masks[1:]:
            if m.width != first.width or m.height != first.height:
                raise DimensionMismatch("candidate masks must share one shape")
        for c in confidences:
            if not 0.0 <= c <= 1.0:
                raise InvalidConfig(f"confidence {c} outside [0, 1]")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "confidences", confidences)

    def __len__(self) -> int:
        return len(self.masks)


@dataclass(frozen=True)
class Guide:
    """Single guide mask with its confidence."""

    mask: Mask
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidConfig(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FusionWeights:
    """Non-negative weights for the joint score; default is pure IoU."""

    w_text: float = 0.0
    w_point: float = 0.0
    w_iou: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_text", "w_point", "w_iou"):
            v = getattr(self, name)
            if v < 0:
                raise InvalidConfig(f"{name} must be non-negative, got {v}")
        if self.w_text == 0 and self.w_point == 0 and self.w_iou == 0:
            raise InvalidConfig("at least one weight must be positive")


@dataclass(frozen=True)
class SelectionResult:
    chosen_index: int
    scores: tuple[float, ...]
    similarity: tuple[float, ...]
    fallback_used: str  # one of: none, point_confidence, guide, first


def _argmax_lowest(values: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def best_by_confidence(c: CandidateSet) -> int:
    """Index of the most confident candidate, lowest index on ties."""
    return _argmax_lowest(c.confidences)


def candidate_similarity(c: CandidateSet, g: Guide) -> tuple[float, ...]:
    """IoU of each candidate against the guide mask."""
    if g.mask.width != c.masks[0].width or g.mask.height != c.masks[0].height:
        raise DimensionMismatch("guide mask shape differs from candidate shape")
    return tuple(iou(g.mask, m) for m in c.masks)


def score_candidates(
    c: CandidateSet, g: Guide, w: FusionWeights = FusionWeights()
) -> tuple[float, ...]:
    """Joint score per candidate; equals the IoUs exactly under (0, 0, 1)."""
    sims = candidate_similarity(c, g)
    return tuple(
        w.w_text * g.confidence + w.w_point * conf + w.w_iou * sim
        for conf, sim in zip(c.confidences, sims)
    )


def select(
    c: CandidateSet,
    g: Guide,
    w: FusionWeights = FusionWeights(),
    fallback: FallbackPolicy = FallbackPolicy.POINT_CONFIDENCE,
) -> SelectionResult:
    """Pick the candidate with the highest score, lowest index on ties.

    Fallback applies when the guide mask is empty, or when weights are pure
    IoU and every candidate has zero overlap with the guide; in either case
    the guide cannot rank candidates at all.
    """
    sims = candidate_similarity(c, g)
    scores = tuple(
        w.w_text * g.confidence + w.w_point * conf + w.w_iou * sim
        for conf, sim in zip(c.confidences, sims)
    )
    guide_empty = area(g.mask) == 0
    pure_iou = w.w_text == 0 and w.w_point == 0
    no_signal = pure_iou and all(s == 0.0 for s in sims)
    if guide_empty or no_signal:
        by_confidence = _argmax_lowest(c.confidences)
        if fallback is FallbackPolicy.GUIDE:
            return SelectionResult(
                chosen_index=by_confidence,
                scores=scores,
                similarity=(0.0,) * len(c),
                fallback_used="guide",
            )
        if fallback is FallbackPolicy.FIRST:
            return SelectionResult(
                chosen_index=0, scores=scores, similarity=sims, fallback_used="first"
            )
        return SelectionResult(
            chosen_index=by_confidence,
            scores=scores,
            similarity=sims,
            fallback_used="point_confidence",
        )
    return SelectionResult(
        chosen_index=_argmax_lowest(scores),
        scores=scores,
        similarity=sims,
        fallback_used="none",
    )


def selected_mask(c: CandidateSet, g: Guide, result: SelectionResult) -> Mask:
    """The mask a SelectionResult stands for.

    Under the guide fallback the guide mask itself is the answer; every other
    path returns the chosen candidate.
    """
    if result.fallback_used == "guide":
        return g.mask
    return c.masks[result.chosen_index]


def ablate_single_modality(c: CandidateSet, g: Guide) -> tuple[Mask, Mask]:
    """Single-expert baselines: (best candidate by confidence, guide mask)."""
    return c.masks[best_by_confidence(c)], g.mask
