"""Deterministic seed derivation shared by the generator and the loop."""
from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """Mix arbitrary labeled parts into a stable non-negative 63-bit seed."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
