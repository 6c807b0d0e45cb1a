"""Dataset evaluation: manifests, variants, aggregation, and reports.

An evaluation runs each manifest instance through up to three variants:

* ``dual``       - point candidates scored against the text guide, winner
                   measured against ground truth;
* ``point_only`` - the point expert's highest-confidence candidate;
* ``text_only``  - the text expert's guide mask as-is.

Instances evaluate concurrently up to a parallelism bound, but results are
always aggregated in manifest order, so a report is byte-identical across
runs and parallelism settings. Instances whose backend calls fail are
excluded from the means and listed with their reasons; an evaluation only
raises when every instance failed.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .arbiter import (
    CandidateSet,
    FallbackPolicy,
    FusionWeights,
    Guide,
    best_by_confidence,
    select,
    selected_mask,
)
from .errors import (
    AllInstancesFailed,
    BackendError,
    DimensionMismatch,
    InvalidConfig,
    MalformedFile,
    MalformedManifest,
    MalformedRle,
    MissingClassName,
)
from .experts import (
    DEFAULT_K,
    Backend,
    ExpertRequest,
    ExpertResponse,
    FileBackend,
    PointPrompt,
    TextPrompt,
    parse_backend_spec,
    query_point_expert,
    query_text_expert,
)
from .mask import RleMask, decode_rle, dice, encode_rle, iou, load_mask, rle_from_json

DEFAULT_PARALLELISM = 4
VALID_VARIANTS = ("dual", "point_only", "text_only")


@dataclass(frozen=True)
class InstanceRecord:
    """One evaluation case: an image with a point, a text, and ground truth."""

    id: str
    image_ref: str
    point: PointPrompt
    text: TextPrompt
    gt: RleMask
    class_name: str | None = None


@dataclass(frozen=True)
class InstanceResult:
    id: str
    variant: str
    dice: float
    iou: float
    chosen_index: int | None  # None for text_only
    similarity: tuple[float, ...]  # empty for single-modality variants
    fallback_used: str


@dataclass(frozen=True)
class EvalFailure:
    id: str
    error: str


@dataclass(frozen=True)
class VariantAggregate:
    mdice: float | None
    miou: float | None
    count: int


@dataclass(frozen=True)
class EvalConfig:
    """Snapshot of everything that shaped a report's numbers.

    backend_label is whatever string the caller wants recorded; it is not
    interpreted, so replaying identical responses through a different
    transport can carry the same label and produce an identical report.
    """

    weights: tuple[float, float, float]
    fallback: str
    backend_label: str
    prompt_template: str | None
    variants: tuple[str, ...]
    k: int


@dataclass(frozen=True)
class EvalReport:
    config: EvalConfig
    total_instances: int
    results: tuple[InstanceResult, ...]
    failures: tuple[EvalFailure, ...]
    aggregates: dict[str, VariantAggregate]
    per_class: dict[str, dict[str, VariantAggregate]] | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EvalReport):
            return NotImplemented
        return report_to_json_dict(self) == report_to_json_dict(other)


class ExpertBackends:
    """The pair of backends an evaluation talks to (they may be one object)."""

    def __init__(self, point: Backend, text: Backend) -> None:
        self.point = point
        self.text = text

    @classmethod
    def from_specs(
        cls, point_spec: str, text_spec: str, timeout: float | None = None
    ) -> "ExpertBackends":
        kwargs = {} if timeout is None else {"timeout": timeout}
        point = parse_backend_spec(point_spec, **kwargs)
        text = point if text_spec == point_spec else parse_backend_spec(text_spec, **kwargs)
        return cls(point, text)

    def close(self) -> None:
        self.point.close()
        if self.text is not self.point:
            self.text.close()

    def __enter__(self) -> "ExpertBackends":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -- manifest ingestion --------------------------------------------------------


def load_manifest(path: str | os.PathLike) -> list[InstanceRecord]:
    """Read and validate an evaluation manifest.

    Layout: {"instances": [{"id", "image", "point": [x, y], "text",
    "class" (optional), "gt": <rle-json or {"path": "mask.pbm"}>}, ...]}
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("instances"), list):
        raise MalformedManifest(f"{path}: expected an instances list")
    records: list[InstanceRecord] = []
    seen: set[str] = set()
    for i, raw in enumerate(data["instances"]):
        where = f"{path}: instances[{i}]"
        if not isinstance(raw, dict):
            raise MalformedManifest(f"{where}: not an object")
        records.append(_parse_instance(raw, where, base_dir, seen))
    return records


def _parse_instance(raw: dict, where: str, base_dir: str, seen: set[str]) -> InstanceRecord:
    rid = raw.get("id")
    if not isinstance(rid, str) or not rid:
        raise MalformedManifest(f"{where}: id must be a non-empty string")
    if rid in seen:
        raise MalformedManifest(f"{where}: duplicate id {rid!r}")
    seen.add(rid)
    image = raw.get("image")
    if not isinstance(image, str) or not image:
        raise MalformedManifest(f"{where} (id {rid!r}): image must be a non-empty string")
    point_raw = raw.get("point")
    if (
        not isinstance(point_raw, list)
        or len(point_raw) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in point_raw)
    ):
        raise MalformedManifest(f"{where} (id {rid!r}): point must be [x, y] integers")
    text_raw = raw.get("text")
    if not isinstance(text_raw, str) or not text_raw.strip():
        raise MalformedManifest(f"{where} (id {rid!r}): text must be a non-empty string")
    class_name = raw.get("class")
    if class_name is not None and not isinstance(class_name, str):
        raise MalformedManifest(f"{where} (id {rid!r}): class must be a string")
    gt_raw = raw.get("gt")
    try:
        if isinstance(gt_raw, dict) and "path" in gt_raw:
            gt = encode_rle(load_mask(os.path.join(base_dir, gt_raw["path"])))
        else:
            gt = rle_from_json(gt_raw, source=f"{where} (id {rid!r}) gt")
    except (OSError, MalformedFile, MalformedRle) as exc:
        raise MalformedManifest(f"{where} (id {rid!r}): bad gt: {exc}") from exc
    x, y = point_raw
    if not (0 <= x < gt.width and 0 <= y < gt.height):
        raise MalformedManifest(
            f"{where} (id {rid!r}): point ({x}, {y}) outside "
            f"{gt.width}x{gt.height} ground truth"
        )
    return InstanceRecord(
        id=rid,
        image_ref=image,
        point=PointPrompt(x, y),
        text=TextPrompt(text_raw),
        gt=gt,
        class_name=class_name,
    )


# -- per-instance evaluation ---------------------------------------------------


def _normalize_variants(variants: Iterable[str]) -> tuple[str, ...]:
    requested = set(variants)
    unknown = requested - set(VALID_VARIANTS)
    if unknown:
        raise InvalidConfig(f"unknown variants: {sorted(unknown)}")
    return tuple(v for v in VALID_VARIANTS if v in requested)


def eval_instance(
    rec: InstanceRecord,
    backends: ExpertBackends,
    w: FusionWeights | None = None,
    variants: Iterable[str] = VALID_VARIANTS,
    fallback: FallbackPolicy = FallbackPolicy.POINT_CONFIDENCE,
    k: int = DEFAULT_K,
) -> list[InstanceResult]:
    """Evaluate one instance; backend errors carry the instance id."""
    w = w if w is not None else FusionWeights()
    wanted = _normalize_variants(variants)
    gt = decode_rle(rec.gt)
    try:
        cands: CandidateSet | None = None
        guide: Guide | None = None
        if "dual" in wanted or "point_only" in wanted:
            cands = query_point_expert(
                backends.point,
                ExpertRequest(
                    id=f"{rec.id}:point",
                    image_ref=rec.image_ref,
                    kind="point",
                    point=rec.point,
                    k=k,
                ),
            )
        if "dual" in wanted or "text_only" in wanted:
            guide = query_text_expert(
                backends.text,
                ExpertRequest(
                    id=f"{rec.id}:text",
                    image_ref=rec.image_ref,
                    kind="text",
                    text=rec.text,
                ),
            )
        out: list[InstanceResult] = []
        for variant in wanted:
            if variant == "dual":
                assert cands is not None and guide is not None
                decision = select(cands, guide, w, fallback)
                chosen = selected_mask(cands, guide, decision)
                out.append(
                    InstanceResult(
                        id=rec.id,
                        variant="dual",
                        dice=dice(chosen, gt),
                        iou=iou(chosen, gt),
                        chosen_index=decision.chosen_index,
                        similarity=decision.similarity,
                        fallback_used=decision.fallback_used,
                    )
                )
            elif variant == "point_only":
                assert cands is not None
                best = best_by_confidence(cands)
                mask = cands.masks[best]
                out.append(
                    InstanceResult(
                        id=rec.id,
                        variant="point_only",
                        dice=dice(mask, gt),
                        iou=iou(mask, gt),
                        chosen_index=best,
                        similarity=(),
                        fallback_used="none",
                    )
                )
            else:
                assert guide is not None
                out.append(
                    InstanceResult(
                        id=rec.id,
                        variant="text_only",
                        dice=dice(guide.mask, gt),
                        iou=iou(guide.mask, gt),
                        chosen_index=None,
                        similarity=(),
                        fallback_used="none",
                    )
                )
        return out
    except (BackendError, DimensionMismatch) as exc:
        raise type(exc)(f"instance {rec.id!r}: {exc}") from exc


# -- dataset evaluation --------------------------------------------------------


def run_eval(
    records: Sequence[InstanceRecord],
    backends: ExpertBackends,
    w: FusionWeights | None = None,
    variants: Iterable[str] = VALID_VARIANTS,
    parallelism: int = DEFAULT_PARALLELISM,
    *,
    fallback: FallbackPolicy = FallbackPolicy.POINT_CONFIDENCE,
    k: int = DEFAULT_K,
    backend_label: str = "",
    prompt_template: str | None = None,
    include_per_class: bool = False,
    on_result: Callable[[str, str | None], None] | None = None,
) -> EvalReport:
    """Evaluate a whole manifest and aggregate into a report.

    on_result, when given, is called from the coordinating thread as each
    instance finishes, with (instance_id, error_or_None); useful for
    progress reporting.
    """
    w = w if w is not None else FusionWeights()
    wanted = _normalize_variants(variants)
    if parallelism < 1:
        raise InvalidConfig(f"parallelism must be >= 1, got {parallelism}")
    outcomes: dict[int, list[InstanceResult] | EvalFailure] = {}
    if wanted and records:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = {
                pool.submit(eval_instance, rec, backends, w, wanted, fallback, k): idx
                for idx, rec in enumerate(records)
            }
            pending = set(futures)
            while pending:
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    idx = futures[fut]
                    rec = records[idx]
                    try:
                        outcomes[idx] = fut.result()
                        error = None
                    except (BackendError, DimensionMismatch) as exc:
                        outcomes[idx] = EvalFailure(id=rec.id, error=str(exc))
                        error = str(exc)
                    if on_result is not None:
                        on_result(rec.id, error)
    else:
        outcomes = {idx: [] for idx in range(len(records))}
    # Aggregation is single-threaded and walks the manifest order, never the
    # completion order.
    results: list[InstanceResult] = []
    failures: list[EvalFailure] = []
    for idx in range(len(records)):
        outcome = outcomes[idx]
        if isinstance(outcome, EvalFailure):
            failures.append(outcome)
        else:
            results.extend(outcome)
    if records and wanted and len(failures) == len(records):
        summary = "; ".join(f.error for f in failures[:3])
        raise AllInstancesFailed(
            f"all {len(records)} instances failed (first reasons: {summary})"
        )
    aggregates = {v: _aggregate(results, v) for v in wanted}
    per_class: dict[str, dict[str, VariantAggregate]] | None = None
    if include_per_class:
        by_class: dict[str, list[InstanceRecord]] = {}
        for rec in records:
            if rec.class_name is not None:
                by_class.setdefault(rec.class_name, []).append(rec)
        ids_by_class = {
            cls: {r.id for r in recs} for cls, recs in sorted(by_class.items())
        }
        per_class = {
            cls: {
                v: _aggregate([r for r in results if r.id in ids], v) for v in wanted
            }
            for cls, ids in ids_by_class.items()
        }
    config = EvalConfig(
        weights=(w.w_text, w.w_point, w.w_iou),
        fallback=fallback.value,
        backend_label=backend_label,
        prompt_template=prompt_template,
        variants=wanted,
        k=k,
    )
    return EvalReport(
        config=config,
        total_instances=len(records),
        results=tuple(results),
        failures=tuple(failures),
        aggregates=aggregates,
        per_class=per_class,
    )


def _aggregate(results: Sequence[InstanceResult], variant: str) -> VariantAggregate:
    dices = [r.dice for r in results if r.variant == variant]
    ious = [r.iou for r in results if r.variant == variant]
    if not dices:
        return VariantAggregate(mdice=None, miou=None, count=0)
    return VariantAggregate(
        mdice=sum(dices) / len(dices), miou=sum(ious) / len(ious), count=len(dices)
    )


# -- prompt template sweeps ----------------------------------------------------


class _MemoPointBackend(Backend):
    """Caches point responses so a sweep queries each point once."""

    def __init__(self, inner: Backend) -> None:
        self._inner = inner
        self._memo: dict[tuple, ExpertResponse] = {}
        self._lock = threading.Lock()

    def query(self, req: ExpertRequest) -> ExpertResponse:
        if req.kind != "point":
            return self._inner.query(req)
        assert req.point is not None
        key = (req.image_ref, req.point.x, req.point.y, req.k)
        with self._lock:
            cached = self._memo.get(key)
        if cached is not None:
            return ExpertResponse(req.id, cached.masks, cached.confidences)
        resp = self._inner.query(req)
        with self._lock:
            self._memo[key] = resp
        return resp


def render_template(template: str, rec: InstanceRecord) -> str:
    """Substitute {class} with the record's class name."""
    if "{class}" not in template:
        return template
    if rec.class_name is None:
        raise MissingClassName(
            f"template {template!r} needs a class name but instance "
            f"{rec.id!r} has none"
        )
    return template.replace("{class}", rec.class_name)


def run_prompt_sweep(
    records: Sequence[InstanceRecord],
    backends: ExpertBackends,
    templates: Sequence[str],
    w: FusionWeights | None = None,
    variants: Iterable[str] = VALID_VARIANTS,
    parallelism: int = DEFAULT_PARALLELISM,
    *,
    fallback: FallbackPolicy = FallbackPolicy.POINT_CONFIDENCE,
    k: int = DEFAULT_K,
    backend_label: str = "",
    include_per_class: bool = False,
) -> list[EvalReport]:
    """One report per text template, candidates shared across templates."""
    if not templates:
        raise InvalidConfig("sweep needs at least one template")
    # Fail before any backend traffic if a template cannot be rendered.
    swapped_by_template = {
        tpl: [
            dataclasses.replace(rec, text=TextPrompt(render_template(tpl, rec)))
            for rec in records
        ]
        for tpl in templates
    }
    sweep_backends = backends
    if isinstance(backends.point, FileBackend):
        sweep_backends = ExpertBackends(_MemoPointBackend(backends.point), backends.text)
    reports = []
    for tpl in templates:
        swapped = swapped_by_template[tpl]
        reports.append(
            run_eval(
                swapped,
                sweep_backends,
                w,
                variants,
                parallelism,
                fallback=fallback,
                k=k,
                backend_label=backend_label,
                prompt_template=tpl,
                include_per_class=include_per_class,
            )
        )
    return reports


# -- report emission -----------------------------------------------------------


def _aggregate_to_json(agg: VariantAggregate) -> dict:
    return {"mdice": agg.mdice, "miou": agg.miou, "count": agg.count}


def report_to_json_dict(report: EvalReport) -> dict:
    payload: dict = {
        "schema": 1,
        "config": {
            "weights": list(report.config.weights),
            "fallback": report.config.fallback,
            "backend": report.config.backend_label,
            "prompt_template": report.config.prompt_template,
            "variants": list(report.config.variants),
            "k": report.config.k,
        },
        "counts": {
            "instances": report.total_instances,
            "succeeded": report.total_instances - len(report.failures),
            "failed": len(report.failures),
        },
        "aggregates": {
            v: _aggregate_to_json(report.aggregates[v]) for v in report.config.variants
        },
        "results": [
            {
                "id": r.id,
                "variant": r.variant,
                "dice": r.dice,
                "iou": r.iou,
                "chosen_index": r.chosen_index,
                "similarity": list(r.similarity),
                "fallback": r.fallback_used,
            }
            for r in report.results
        ],
        "failures": [{"id": f.id, "error": f.error} for f in report.failures],
    }
    if report.per_class is not None:
        payload["per_class"] = {
            cls: {v: _aggregate_to_json(agg) for v, agg in variants.items()}
            for cls, variants in report.per_class.items()
        }
    return payload


def report_from_json_dict(payload: dict) -> EvalReport:
    if payload.get("schema") != 1:
        raise MalformedFile(f"unsupported report schema: {payload.get('schema')!r}")
    cfg = payload["config"]
    config = EvalConfig(
        weights=tuple(cfg["weights"]),
        fallback=cfg["fallback"],
        backend_label=cfg["backend"],
        prompt_template=cfg["prompt_template"],
        variants=tuple(cfg["variants"]),
        k=cfg["k"],
    )
    results = tuple(
        InstanceResult(
            id=r["id"],
            variant=r["variant"],
            dice=r["dice"],
            iou=r["iou"],
            chosen_index=r["chosen_index"],
            similarity=tuple(r["similarity"]),
            fallback_used=r["fallback"],
        )
        for r in payload["results"]
    )
    failures = tuple(
        EvalFailure(id=f["id"], error=f["error"]) for f in payload["failures"]
    )
    aggregates = {
        v: VariantAggregate(mdice=a["mdice"], miou=a["miou"], count=a["count"])
        for v, a in payload["aggregates"].items()
    }
    per_class = None
    if "per_class" in payload:
        per_class = {
            cls: {
                v: VariantAggregate(mdice=a["mdice"], miou=a["miou"], count=a["count"])
                for v, a in variants.items()
            }
            for cls, variants in payload["per_class"].items()
        }
    return EvalReport(
        config=config,
        total_instances=payload["counts"]["instances"],
        results=results,
        failures=failures,
        aggregates=aggregates,
        per_class=per_class,
    )


def format_percent(value: float) -> str:
    """Render a [0, 1] ratio the way the summary tables expect."""
    return f"{100.0 * value:.2f}%"


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report_to_json_dict(report), indent=2) + "\n"


def report_to_markdown(report: EvalReport) -> str:
    lines = [
        "| variant | mDice | mIoU | instances |",
        "| --- | --- | --- | --- |",
    ]
    for variant in report.config.variants:
        agg = report.aggregates[variant]
        mdice = format_percent(agg.mdice) if agg.mdice is not None else "-"
        miou = format_percent(agg.miou) if agg.miou is not None else "-"
        lines.append(f"| {variant} | {mdice} | {miou} | {agg.count} |")
    return "\n".join(lines) + "\n"


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "variant", "dice", "iou", "chosen_index", "fallback"])
    for r in report.results:
        writer.writerow(
            [
                r.id,
                r.variant,
                repr(r.dice),
                repr(r.iou),
                "" if r.chosen_index is None else r.chosen_index,
                r.fallback_used,
            ]
        )
    return buf.getvalue()


def emit_report(report: EvalReport, path: str | os.PathLike, format: str = "json") -> None:
    """Write a report as json (lossless), csv (per-instance), or markdown."""
    if format == "json":
        text = report_to_json(report)
    elif format == "csv":
        text = report_to_csv(report)
    elif format == "markdown":
        text = report_to_markdown(report)
    else:
        raise InvalidConfig(f"unknown report format {format!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


__all__ = [
    "DEFAULT_PARALLELISM",
    "VALID_VARIANTS",
    "EvalConfig",
    "EvalFailure",
    "EvalReport",
    "ExpertBackends",
    "InstanceRecord",
    "InstanceResult",
    "VariantAggregate",
    "emit_report",
    "eval_instance",
    "format_percent",
    "load_manifest",
    "render_template",
    "report_from_json_dict",
    "report_to_csv",
    "report_to_json",
    "report_to_json_dict",
    "report_to_markdown",
    "run_eval",
    "run_prompt_sweep",
]
