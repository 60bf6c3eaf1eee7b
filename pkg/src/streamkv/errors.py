"""Exception types shared across the engine.

Every failure raised on purpose derives from StreamKVError so callers can
catch engine problems without swallowing programming mistakes.
"""


class StreamKVError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(StreamKVError):
    """Invalid model or policy configuration (bad head counts, budgets, ...)."""


class ShapeError(StreamKVError):
    """Array arguments with the wrong shape or dtype."""


class OrderingError(StreamKVError):
    """Positions or timestamps that regress or overlap."""


class StorageError(StreamKVError):
    """Cold-tier serialization or file I/O failure."""


class FrameLookupError(StreamKVError):
    """A frame id that the store does not know."""


class UsageError(StreamKVError):
    """An operation called with unusable values (empty input, zero divisor)."""


class PlanningError(StreamKVError):
    """Planner backend failure; the loop treats it as a signal to wait."""


class ProtocolError(StreamKVError):
    """Malformed planner transport payloads or mismatched tool results."""


class ScenarioError(StreamKVError):
    """Scenario file that fails schema validation; message carries the field path."""
