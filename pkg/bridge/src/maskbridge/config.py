"""Runtime configuration and error types for the bridge process."""

from __future__ import annotations

from dataclasses import dataclass

MODES = ("stub", "sam_evf")
TRANSPORTS = ("stdio", "http")


class BridgeError(Exception):
    """Base for bridge configuration and dependency problems."""


class BridgeDependencyError(BridgeError):
    """A mode was requested whose runtime dependencies are absent."""


class RequestProblem(Exception):
    """A single request the expert cannot answer.

    Reported back over the wire as an error object; never fatal to the
    serving loop.
    """


@dataclass(frozen=True)
class BridgeConfig:
    mode: str = "stub"
    sam_checkpoint: str | None = None
    sam_model_type: str = "vit_h"
    evf_checkpoint: str | None = None
    device: str = "cpu"
    cache_size: int = 8
    # Stub canvas; real models answer at the source image's resolution.
    width: int = 64
    height: int = 64

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise BridgeError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cache_size < 1:
            raise BridgeError(f"cache_size must be >= 1, got {self.cache_size}")
        if self.width < 16 or self.height < 16:
            raise BridgeError("stub canvas must be at least 16x16")
        if self.mode == "stub" and (self.sam_checkpoint or self.evf_checkpoint):
            # Guards against silently running the stub while believing the
            # real models are active.
            raise BridgeError("stub mode takes no model checkpoints")
