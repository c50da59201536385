"""Proof-carrying code pipeline for untrusted code in a simulated enclave."""
from __future__ import annotations

__version__ = "0.1.0"
