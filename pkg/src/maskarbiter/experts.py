"""Pluggable expert backends for point and text segmentation prompts.

A backend answers two kinds of requests: a point prompt yields k candidate
masks with confidences, a text prompt yields exactly one guide mask. Three
transports are provided:

* ``file:PATH``   - a JSON manifest of precomputed responses; no model needed.
* ``exec:CMD``    - a persistent subprocess speaking newline-delimited JSON
                    on stdin/stdout.
* ``http:URL``    - one POST per request to the service's /expert endpoint.

Requests carry opaque image references; nothing here decodes images. Every
response is validated (mask count, shared shape, run-length sanity, matching
id) before it reaches the selection stage, so malformed backend output never
propagates.

Wire request:  {"id": "...", "image": "...", "kind": "point"|"text",
                "point": [x, y], "text": "...", "k": 3}   (absent keys omitted)
Wire response: {"id": "...", "masks": [<rle-json>, ...],
                "confidences": [<float>, ...]}
Error:         {"id": "...", "error": "<message>"}
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import requests as _requests

from .arbiter import CandidateSet, Guide
from .errors import (
    BackendTimeout,
    BackendUnavailable,
    DimensionMismatch,
    InvalidConfig,
    MalformedFile,
    ProtocolViolation,
)
from .mask import RleMask, decode_rle, encode_rle, load_mask, rle_from_json, rle_to_json

DEFAULT_TIMEOUT = 120.0  # seconds; tolerant of model cold starts
DEFAULT_K = 3


@dataclass(frozen=True)
class PointPrompt:
    """Pixel coordinates, x is the column and y is the row."""

    x: int
    y: int

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0:
            raise InvalidConfig(f"point coordinates must be non-negative: {self}")


@dataclass(frozen=True)
class TextPrompt:
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise InvalidConfig("text prompt must be non-empty")


@dataclass(frozen=True)
class ExpertRequest:
    id: str
    image_ref: str
    kind: str  # "point" or "text"
    point: PointPrompt | None = None
    text: TextPrompt | None = None
    k: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "point":
            if self.point is None or self.text is not None:
                raise InvalidConfig("point request needs a point and no text")
            if self.k is None or self.k < 1:
                raise InvalidConfig("point request needs k >= 1")
        elif self.kind == "text":
            if self.text is None or self.point is not None:
                raise InvalidConfig("text request needs text and no point")
            if self.k is not None:
                raise InvalidConfig("k applies to point requests only")
        else:
            raise InvalidConfig(f"unknown request kind {self.kind!r}")


@dataclass(frozen=True)
class ExpertResponse:
    id: str
    masks: tuple[RleMask, ...]
    confidences: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.masks) != len(self.confidences):
            raise ProtocolViolation(
                f"{len(self.masks)} masks but {len(self.confidences)} confidences"
            )


def encode_request(req: ExpertRequest) -> dict:
    """Request as a wire-format JSON object, absent fields omitted."""
    payload: dict = {"id": req.id, "image": req.image_ref, "kind": req.kind}
    if req.point is not None:
        payload["point"] = [req.point.x, req.point.y]
    if req.text is not None:
        payload["text"] = req.text.text
    if req.k is not None:
        payload["k"] = req.k
    return payload


def parse_response(payload: object, req: ExpertRequest) -> ExpertResponse:
    """Validate a wire response for a given request.

    Raises BackendUnavailable for explicit error responses and
    ProtocolViolation for anything structurally wrong. Missing confidences
    default to 1.0 per mask.
    """
    if not isinstance(payload, dict):
        raise ProtocolViolation(f"response is not a JSON object: {payload!r}")
    if "error" in payload:
        raise BackendUnavailable(f"backend error for {req.id!r}: {payload['error']}")
    if payload.get("id") != req.id:
        raise ProtocolViolation(
            f"response id {payload.get('id')!r} does not match request {req.id!r}"
        )
    raw_masks = payload.get("masks")
    if not isinstance(raw_masks, list):
        raise ProtocolViolation("response lacks a masks list")
    masks = []
    for i, raw in enumerate(raw_masks):
        try:
            masks.append(rle_from_json(raw, source=f"response mask {i}"))
        except MalformedFile as exc:
            raise ProtocolViolation(str(exc)) from exc
    raw_conf = payload.get("confidences")
    if raw_conf is None:
        confidences = [1.0] * len(masks)
    else:
        if not isinstance(raw_conf, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw_conf
        ):
            raise ProtocolViolation("confidences must be a list of numbers")
        confidences = [float(v) for v in raw_conf]
        if len(confidences) != len(masks):
            raise ProtocolViolation(
                f"{len(masks)} masks but {len(confidences)} confidences"
            )
        for v in confidences:
            if not 0.0 <= v <= 1.0:
                raise ProtocolViolation(f"confidence {v} outside [0, 1]")
    return ExpertResponse(id=req.id, masks=tuple(masks), confidences=tuple(confidences))


class Backend:
    """Transport interface: one request in, one validated response out."""

    def query(self, req: ExpertRequest) -> ExpertResponse:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self) -> "Backend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class FileBackend(Backend):
    """Precomputed responses from a JSON manifest.

    Manifest layout::

        {"responses": [
            {"image": "img-1", "kind": "point", "point": [x, y],
             "masks": [<rle-json> | {"path": "mask.pbm"}, ...],
             "confidences": [0.9, 0.8, 0.7]},
            {"image": "img-1", "kind": "text", "text": "forceps",
             "masks": [<rle-json>]}
        ]}

    Entries are keyed by (image, kind, point/text); mask paths resolve
    relative to the manifest file. Lookups are pure reads, so any number of
    threads may query concurrently.
    """

    def __init__(self, manifest_path: str | os.PathLike) -> None:
        self._dir = os.path.dirname(os.path.abspath(manifest_path))
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedFile(f"{manifest_path}: not valid JSON: {exc}") from exc
        if not isinstance(data, dict) or not isinstance(data.get("responses"), list):
            raise MalformedFile(f"{manifest_path}: expected a responses list")
        self._entries: dict[tuple, dict] = {}
        for i, entry in enumerate(data["responses"]):
            if not isinstance(entry, dict):
                raise MalformedFile(f"{manifest_path}: responses[{i}] not an object")
            key = self._entry_key(entry, f"{manifest_path}: responses[{i}]")
            self._entries[key] = entry

    @staticmethod
    def _entry_key(entry: dict, where: str) -> tuple:
        image = entry.get("image")
        kind = entry.get("kind")
        if not isinstance(image, str) or kind not in ("point", "text"):
            raise MalformedFile(f"{where}: needs image and kind")
        if kind == "point":
            point = entry.get("point")
            if (
                not isinstance(point, list)
                or len(point) != 2
                or not all(isinstance(v, int) for v in point)
            ):
                raise MalformedFile(f"{where}: point entry needs point [x, y]")
            return (image, "point", point[0], point[1])
        text = entry.get("text")
        if not isinstance(text, str):
            raise MalformedFile(f"{where}: text entry needs text")
        return (image, "text", text)

    def _request_key(self, req: ExpertRequest) -> tuple:
        if req.kind == "point":
            assert req.point is not None
            return (req.image_ref, "point", req.point.x, req.point.y)
        assert req.text is not None
        return (req.image_ref, "text", req.text.text)

    def query(self, req: ExpertRequest) -> ExpertResponse:
        entry = self._entries.get(self._request_key(req))
        if entry is None:
            raise BackendUnavailable(
                f"no precomputed response for {req.kind} request on {req.image_ref!r}"
            )
        raw_masks = entry.get("masks")
        if not isinstance(raw_masks, list):
            raise ProtocolViolation("manifest entry lacks a masks list")
        resolved = []
        for raw in raw_masks:
            if isinstance(raw, dict) and "path" in raw:
                resolved.append(_rle_json_from_file(os.path.join(self._dir, raw["path"])))
            else:
                resolved.append(raw)
        payload = {"id": req.id, "masks": resolved}
        if "confidences" in entry:
            payload["confidences"] = entry["confidences"]
        return parse_response(payload, req)


def _rle_json_from_file(path: str) -> dict:
    try:
        r = encode_rle(load_mask(path))
    except (OSError, MalformedFile) as exc:
        raise BackendUnavailable(f"cannot load mask file {path}: {exc}") from exc
    return rle_to_json(r)


class ExecBackend(Backend):
    """Persistent subprocess speaking newline-delimited JSON over stdio.

    The process is spawned on first use. Writes are serialized; a reader
    thread files every response line under its id, so callers may have
    several requests in flight and arrival order never matters.
    """

    def __init__(self, command: str, timeout: float = DEFAULT_TIMEOUT) -> None:
        if not command.strip():
            raise InvalidConfig("exec backend needs a command")
        self._command = command
        self._timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._reader: threading.Thread | None = None
        self._lock = threading.Lock()  # guards spawn + writes
        self._cond = threading.Condition()
        self._responses: dict[str, object] = {}
        self._dead: str | None = None  # set when the stream is unusable

    def _ensure_started(self) -> subprocess.Popen:
        with self._lock:
            if self._proc is None:
                try:
                    self._proc = subprocess.Popen(
                        shlex.split(self._command),
                        stdin=subprocess.PIPE,
                        stdout=subprocess.PIPE,
                        text=True,
                        bufsize=1,
                    )
                except OSError as exc:
                    raise BackendUnavailable(
                        f"cannot start backend {self._command!r}: {exc}"
                    ) from exc
                self._reader = threading.Thread(target=self._read_loop, daemon=True)
                self._reader.start()
            return self._proc

    def _read_loop(self) -> None:
        proc = self._proc
        assert proc is not None and proc.stdout is not None
        for line in proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError:
                with self._cond:
                    self._dead = f"backend wrote a non-JSON line: {line[:200]!r}"
                    self._cond.notify_all()
                return
            rid = payload.get("id") if isinstance(payload, dict) else None
            with self._cond:
                if isinstance(rid, str):
                    self._responses[rid] = payload
                self._cond.notify_all()
        with self._cond:
            if self._dead is None:
                self._dead = "backend process closed its output stream"
            self._cond.notify_all()

    def query(self, req: ExpertRequest) -> ExpertResponse:
        proc = self._ensure_started()
        line = json.dumps(encode_request(req)) + "\n"
        with self._lock:
            if proc.stdin is None or proc.poll() is not None:
                raise BackendUnavailable("backend process has exited")
            try:
                proc.stdin.write(line)
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise BackendUnavailable(f"backend pipe closed: {exc}") from exc
        deadline = time.monotonic() + self._timeout
        with self._cond:
            while req.id not in self._responses:
                if self._dead is not None:
                    raise BackendUnavailable(self._dead)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise BackendTimeout(
                        f"no response to {req.id!r} within {self._timeout}s"
                    )
                self._cond.wait(remaining)
            payload = self._responses.pop(req.id)
        return parse_response(payload, req)

    def close(self) -> None:
        with self._lock:
            proc, self._proc = self._proc, None
        if proc is None:
            return
        if proc.stdin is not None:
            try:
                proc.stdin.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=0.5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        if self._reader is not None:
            self._reader.join(timeout=5)
            self._reader = None


class HttpBackend(Backend):
    """One POST per request against a service's /expert endpoint."""

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT) -> None:
        base = url.rstrip("/")
        self._endpoint = base if base.endswith("/expert") else base + "/expert"
        self._timeout = timeout
        self._session = _requests.Session()

    def query(self, req: ExpertRequest) -> ExpertResponse:
        try:
            resp = self._session.post(
                self._endpoint, json=encode_request(req), timeout=self._timeout
            )
        except _requests.exceptions.Timeout as exc:
            raise BackendTimeout(f"no response within {self._timeout}s") from exc
        except _requests.exceptions.RequestException as exc:
            raise BackendUnavailable(f"cannot reach {self._endpoint}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendUnavailable(
                f"{self._endpoint} answered HTTP {resp.status_code}"
            )
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolViolation("response body is not JSON") from exc
        return parse_response(payload, req)

    def close(self) -> None:
        self._session.close()


def parse_backend_spec(spec: str, timeout: float = DEFAULT_TIMEOUT) -> Backend:
    """Build a backend from a spec string: file:PATH, exec:CMD, or http:URL."""
    if spec.startswith(("http://", "https://")):
        return HttpBackend(spec, timeout=timeout)
    scheme, sep, rest = spec.partition(":")
    if not sep or not rest:
        raise InvalidConfig(f"backend spec {spec!r} is not scheme:value")
    if scheme == "file":
        return FileBackend(rest)
    if scheme == "exec":
        return ExecBackend(rest, timeout=timeout)
    if scheme == "http":
        return HttpBackend(rest, timeout=timeout)
    raise InvalidConfig(f"unknown backend scheme {scheme!r}")


def query_point_expert(backend: Backend, req: ExpertRequest) -> CandidateSet:
    """Fetch k candidate masks for a point prompt, in backend order."""
    if req.kind != "point":
        raise InvalidConfig("query_point_expert needs a point request")
    resp = backend.query(req)
    if len(resp.masks) != req.k:
        raise ProtocolViolation(
            f"point expert returned {len(resp.masks)} masks, expected {req.k}"
        )
    decoded = [decode_rle(r) for r in resp.masks]
    try:
        return CandidateSet(decoded, resp.confidences)
    except (DimensionMismatch, InvalidConfig) as exc:
        raise ProtocolViolation(str(exc)) from exc


def query_text_expert(backend: Backend, req: ExpertRequest) -> Guide:
    """Fetch the single guide mask for a text prompt."""
    if req.kind != "text":
        raise InvalidConfig("query_text_expert needs a text request")
    resp = backend.query(req)
    if len(resp.masks) != 1:
        raise ProtocolViolation(
            f"text expert returned {len(resp.masks)} masks, expected 1"
        )
    try:
        return Guide(decode_rle(resp.masks[0]), confidence=resp.confidences[0])
    except InvalidConfig as exc:
        raise ProtocolViolation(str(exc)) from exc


__all__ = [
    "DEFAULT_K",
    "DEFAULT_TIMEOUT",
    "Backend",
    "ExecBackend",
    "ExpertRequest",
    "ExpertResponse",
    "FileBackend",
    "HttpBackend",
    "PointPrompt",
    "TextPrompt",
    "encode_request",
    "parse_backend_spec",
    "parse_response",
    "query_point_expert",
    "query_text_expert",
]
