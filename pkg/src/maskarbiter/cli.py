"""Command-line surface for batch selection, evaluation, and suite tooling.

Exit codes:
  0  success
  2  configuration or usage error (bad flags, dimension mismatch,
     missing class name for a template)
  3  malformed input file (mask, manifest, rle payload) or I/O failure
  4  expert backend failure
  5  every instance in an evaluation failed
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

from .arbiter import (
    CandidateSet,
    FallbackPolicy,
    FusionWeights,
    Guide,
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
from .evaluation import (
    DEFAULT_PARALLELISM,
    ExpertBackends,
    emit_report,
    load_manifest,
    report_to_markdown,
    run_eval,
    run_prompt_sweep,
)
from .experts import DEFAULT_K, DEFAULT_TIMEOUT
from .mask import load_mask, save_mask
from .synth import gen_suite

PARALLELISM_ENV = "MASKARBITER_PARALLELISM"

_FALLBACK_CHOICES = tuple(p.value for p in FallbackPolicy)


def _parse_weights(text: str) -> FusionWeights:
    parts = text.split(",")
    if len(parts) != 3:
        raise InvalidConfig(f"--weights expects W_TEXT,W_POINT,W_IOU, got {text!r}")
    try:
        w_text, w_point, w_iou = (float(p) for p in parts)
    except ValueError:
        raise InvalidConfig(f"--weights values must be numbers, got {text!r}") from None
    return FusionWeights(w_text, w_point, w_iou)


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",")]
    except ValueError:
        raise InvalidConfig(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _parse_variants(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _resolve_parallelism(value: int | None) -> int:
    """Flag wins over MASKARBITER_PARALLELISM, which wins over the default."""
    if value is None:
        env = os.environ.get(PARALLELISM_ENV)
        if env is None or not env.strip():
            return DEFAULT_PARALLELISM
        try:
            value = int(env)
        except ValueError:
            raise InvalidConfig(
                f"{PARALLELISM_ENV} must be an integer, got {env!r}"
            ) from None
    if value < 1:
        raise InvalidConfig(f"parallelism must be >= 1, got {value}")
    return value


def _backends_from_args(args: argparse.Namespace) -> ExpertBackends:
    if args.backend is not None:
        if args.point_backend is not None or args.text_backend is not None:
            raise InvalidConfig("--backend conflicts with --point-backend/--text-backend")
        return ExpertBackends.from_specs(args.backend, args.backend, timeout=args.timeout)
    if args.point_backend is None or args.text_backend is None:
        raise InvalidConfig("need --backend, or both --point-backend and --text-backend")
    return ExpertBackends.from_specs(
        args.point_backend, args.text_backend, timeout=args.timeout
    )


def _template_slugs(templates: list[str]) -> list[str]:
    # File-name-safe, unique per template within one sweep.
    slugs: list[str] = []
    for template in templates:
        base = re.sub(r"[^a-z0-9]+", "-", template.lower()).strip("-") or "template"
        slug = base
        n = 2
        while slug in slugs:
            slug = f"{base}-{n}"
            n += 1
        slugs.append(slug)
    return slugs


def cmd_select(args: argparse.Namespace) -> int:
    candidates = [load_mask(p) for p in args.candidates]
    if args.confidences is None:
        confidences = [1.0] * len(candidates)
    else:
        confidences = _parse_floats(args.confidences, "--confidences")
    cands = CandidateSet(candidates, confidences)
    guide = Guide(load_mask(args.guide), args.guide_confidence)
    result = select(cands, guide, _parse_weights(args.weights), FallbackPolicy(args.fallback))
    print(
        json.dumps(
            {
                "chosen_index": result.chosen_index,
                "scores": list(result.scores),
                "similarity": list(result.similarity),
                "fallback": result.fallback_used,
            }
        )
    )
    if args.out is not None:
        save_mask(selected_mask(cands, guide, result), args.out)
    return 0


def _run_eval_command(args: argparse.Namespace, variants: tuple[str, ...]) -> int:
    records = load_manifest(args.manifest)
    weights = _parse_weights(args.weights)
    parallelism = _resolve_parallelism(args.parallelism)
    progress = {"done": 0, "failed": 0}

    def note(_instance_id: str, error: str | None) -> None:
        progress["done"] += 1
        if error is not None:
            progress["failed"] += 1

    try:
        with _backends_from_args(args) as backends:
            report = run_eval(
                records,
                backends,
                weights,
                variants,
                parallelism,
                fallback=FallbackPolicy(args.fallback),
                k=args.k,
                backend_label=args.label,
                include_per_class=args.per_class,
                on_result=note,
            )
    except KeyboardInterrupt:
        print(
            f"interrupted after {progress['done']}/{len(records)} instances "
            f"({progress['failed']} failed)",
            file=sys.stderr,
        )
        raise
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        emit_report(report, os.path.join(args.out, "report.json"), "json")
        emit_report(report, os.path.join(args.out, "report.md"), "markdown")
    sys.stdout.write(report_to_markdown(report))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    return _run_eval_command(args, _parse_variants(args.variants))


def cmd_ablate(args: argparse.Namespace) -> int:
    # Full modality comparison: always all three variants.
    return _run_eval_command(args, ("dual", "point_only", "text_only"))


def cmd_sweep(args: argparse.Namespace) -> int:
    records = load_manifest(args.manifest)
    weights = _parse_weights(args.weights)
    parallelism = _resolve_parallelism(args.parallelism)
    with _backends_from_args(args) as backends:
        reports = run_prompt_sweep(
            records,
            backends,
            args.templates,
            weights,
            _parse_variants(args.variants),
            parallelism,
            fallback=FallbackPolicy(args.fallback),
            k=args.k,
            backend_label=args.label,
            include_per_class=args.per_class,
        )
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
    for slug, template, report in zip(_template_slugs(args.templates), args.templates, reports):
        if args.out is not None:
            emit_report(report, os.path.join(args.out, f"report-{slug}.json"), "json")
            emit_report(report, os.path.join(args.out, f"report-{slug}.md"), "markdown")
        sys.stdout.write(f"## {template}\n\n")
        sys.stdout.write(report_to_markdown(report))
        sys.stdout.write("\n")
    return 0


def cmd_rle(args: argparse.Namespace) -> int:
    if args.direction == "encode":
        save_mask(load_mask(args.input, "pbm"), args.output, "rle-json")
    else:
        save_mask(load_mask(args.input, "rle-json"), args.output, "pbm")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    paths = gen_suite(
        args.seed,
        args.n,
        args.overlap_fraction,
        args.out,
        noise_rate=args.noise_rate,
        width=args.width,
        height=args.height,
        k=args.k,
    )
    print(json.dumps(paths))
    return 0


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", help="spec for both experts (file:PATH, exec:CMD, http:URL)")
    p.add_argument("--point-backend", help="point expert spec, overrides --backend")
    p.add_argument("--text-backend", help="text expert spec, overrides --backend")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT, help="per-request seconds")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="instance manifest JSON")
    _add_backend_flags(p)
    p.add_argument("--weights", default="0,0,1", help="W_TEXT,W_POINT,W_IOU")
    p.add_argument("--fallback", choices=_FALLBACK_CHOICES, default="point_confidence")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="candidates per point request")
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--label", default="", help="backend label recorded in the report")
    p.add_argument("--per-class", action="store_true", help="add per-class aggregates")
    p.add_argument("--out", help="directory for report files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskarbiter",
        description="Arbitrate between point-prompt candidate masks using a text-prompt guide.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", help="pick one candidate mask against a guide mask")
    p.add_argument("candidates", nargs="+", help="candidate mask files (.pbm or .json)")
    p.add_argument("--guide", required=True, help="guide mask file")
    p.add_argument("--confidences", help="per-candidate confidences, comma-separated")
    p.add_argument("--guide-confidence", type=float, default=1.0)
    p.add_argument("--weights", default="0,0,1", help="W_TEXT,W_POINT,W_IOU")
    p.add_argument("--fallback", choices=_FALLBACK_CHOICES, default="point_confidence")
    p.add_argument("--out", help="write the winning mask here")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="evaluate a manifest against expert backends")
    _add_eval_flags(p)
    p.add_argument("--variants", default="dual,point_only,text_only")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="evaluate with all three modality variants")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="re-evaluate under several text prompt templates")
    _add_eval_flags(p)
    p.add_argument("--variants", default="dual,point_only,text_only")
    p.add_argument("--templates", nargs="+", required=True, help="e.g. '{class}' 'object'")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rle", help="convert between PBM and run-length JSON")
    p.add_argument("direction", choices=("encode", "decode"))
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_rle)

    p = sub.add_parser("synth", help="generate a synthetic evaluation suite")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="instance count")
    p.add_argument("--overlap-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise-rate", type=float, default=0.05)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except (InvalidConfig, DimensionMismatch, MissingClassName, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MalformedFile, MalformedRle, MalformedManifest, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except AllInstancesFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
