"""Exception taxonomy for maskarbiter.

Every error raised by this package derives from MaskArbiterError so callers
can catch the whole family with one clause. Backend failures get their own
subtree because the evaluation loop treats them as per-instance failures
rather than hard aborts.
"""

from __future__ import annotations


class MaskArbiterError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(MaskArbiterError):
    """Two masks with different widths or heights were combined."""


class MalformedRle(MaskArbiterError):
    """A run-length encoding violates its structural invariants."""


class MalformedFile(MaskArbiterError):
    """A mask file on disk could not be parsed."""


class MalformedManifest(MaskArbiterError):
    """An evaluation manifest is structurally invalid."""


class MissingClassName(MaskArbiterError):
    """A prompt template needs a class name an instance does not carry."""


class InvalidConfig(MaskArbiterError):
    """A configuration value is out of range or inconsistent."""


class AllInstancesFailed(MaskArbiterError):
    """Every instance in a non-empty evaluation failed."""


class BackendError(MaskArbiterError):
    """Base class for expert backend failures."""


class BackendUnavailable(BackendError):
    """The backend cannot be reached or has no answer for a request."""


class ProtocolViolation(BackendError):
    """The backend answered with data that violates the wire protocol."""


class BackendTimeout(BackendError):
    """The backend did not answer within the configured timeout."""


class PointOutsideObjects(MaskArbiterError):
    """A synthetic scene query point lands on no object."""


class UnknownClassName(MaskArbiterError):
    """A synthetic scene has no object with the requested class name."""
