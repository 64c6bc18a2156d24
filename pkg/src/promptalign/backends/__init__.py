"""Pluggable model-service backends: HTTP clients and synthetic stand-ins."""

from .base import (
    BackendConfig,
    BackendError,
    BackendSuite,
    CallTracker,
    ChatMessage,
    KINDS,
    TransportError,
)
from .synthetic import SyntheticWorld, synthetic_suite
from .http import http_suite

__all__ = [
    "BackendConfig",
    "BackendError",
    "BackendSuite",
    "CallTracker",
    "ChatMessage",
    "KINDS",
    "TransportError",
    "SyntheticWorld",
    "synthetic_suite",
    "http_suite",
]
