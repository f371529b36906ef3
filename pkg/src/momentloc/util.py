"""Small shared helpers: stable seed derivation."""
from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Derive a 63-bit seed from arbitrary labelled parts.

    Stable across processes and platforms (unlike ``hash()``), so every
    consumer of randomness can be rerun bit-identically.
    """
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
