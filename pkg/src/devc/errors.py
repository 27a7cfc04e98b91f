"""Exception taxonomy for the devc codec.

Every failure raised on purpose by this package derives from DevcError so
callers (CLI, service) can separate expected coding errors from bugs.  Each
error carries a short machine-readable ``code`` used in service responses
and CLI diagnostics.
"""

from __future__ import annotations


class DevcError(Exception):
    """Base class for all codec errors."""

    code = "devc_error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class IngestionError(DevcError):
    """A frame source could not be read or does not match its declaration."""

    code = "ingestion_error"


class GeometryError(DevcError):
    """Frame or tensor dimensions violate a contract (odd size, mismatch)."""

    code = "geometry_error"


class NumericError(DevcError):
    """Non-finite values or out-of-range probabilities/parameters."""

    code = "numeric_error"


class ProtocolError(DevcError):
    """A bitstream or payload is malformed or internally inconsistent."""

    code = "protocol_error"


class ChecksumError(ProtocolError):
    """Stored payload checksum does not match the decoded bytes."""

    code = "checksum_error"


class ModelError(DevcError):
    """Checkpoint or model-weight problems (missing file, bad shapes)."""

    code = "model_error"


class ConfigError(DevcError):
    """A training or CLI configuration value is missing or invalid."""

    code = "config_error"
