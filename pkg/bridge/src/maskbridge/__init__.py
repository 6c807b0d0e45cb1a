"""Wire-protocol server exposing segmentation experts to the mask arbiter."""

from .config import (
    MODES,
    TRANSPORTS,
    BridgeConfig,
    BridgeDependencyError,
    BridgeError,
    RequestProblem,
)
from .server import BridgeServer, make_http_server
from .stub import StubExpert

__version__ = "0.1.0"

__all__ = [
    "MODES",
    "TRANSPORTS",
    "BridgeConfig",
    "BridgeDependencyError",
    "BridgeError",
    "BridgeServer",
    "RequestProblem",
    "StubExpert",
    "make_http_server",
]
