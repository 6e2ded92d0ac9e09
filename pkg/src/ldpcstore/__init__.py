"""Distributed file storage over small LDPC erasure codes."""

__version__ = "0.1.0"
