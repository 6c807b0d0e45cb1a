"""Exact binary mask arbitration between point and text segmentation experts."""

from .errors import (
    AllInstancesFailed,
    BackendError,
    BackendTimeout,
    BackendUnavailable,
    DimensionMismatch,
    InvalidConfig,
    MalformedFile,
    MalformedManifest,
    MalformedRle,
    MaskArbiterError,
    MissingClassName,
    PointOutsideObjects,
    ProtocolViolation,
    UnknownClassName,
)
from .arbiter import (
    CandidateSet,
    FallbackPolicy,
    FusionWeights,
    Guide,
    SelectionResult,
    ablate_single_modality,
    best_by_confidence,
    candidate_similarity,
    score_candidates,
    select,
    selected_mask,
)
from .evaluation import (
    DEFAULT_PARALLELISM,
    VALID_VARIANTS,
    EvalConfig,
    EvalFailure,
    EvalReport,
    ExpertBackends,
    InstanceRecord,
    InstanceResult,
    VariantAggregate,
    emit_report,
    eval_instance,
    format_percent,
    load_manifest,
    render_template,
    report_from_json_dict,
    report_to_csv,
    report_to_json,
    report_to_json_dict,
    report_to_markdown,
    run_eval,
    run_prompt_sweep,
)
from .experts import (
    DEFAULT_K,
    DEFAULT_TIMEOUT,
    Backend,
    ExecBackend,
    ExpertRequest,
    ExpertResponse,
    FileBackend,
    HttpBackend,
    PointPrompt,
    TextPrompt,
    encode_request,
    parse_backend_spec,
    parse_response,
    query_point_expert,
    query_text_expert,
)
from .mask import (
    Mask,
    PixelPair,
    RleMask,
    area,
    decode_rle,
    dice,
    encode_rle,
    iou,
    load_mask,
    overlap,
    rle_from_json,
    rle_overlap,
    rle_to_json,
    save_mask,
)

__version__ = "0.1.0"
