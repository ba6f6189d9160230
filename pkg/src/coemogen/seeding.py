"""Stable seed derivation (independent of PYTHONHASHSEED)."""

import hashlib


def derive_seed(*parts) -> int:
    """63-bit seed from sha256 over the ``repr`` of each part, joined by ``/``."""
    digest = hashlib.sha256("/".join(repr(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
