"""Stable child seeds.

Sampling decisions (negative pools, neighborhood caps, sentence selection)
derive their Generator from a hash of the run seed plus a purpose string
and key, so results never depend on storage order or iteration history.
"""
from __future__ import annotations

import hashlib


def stable_seed(*parts) -> int:
    """64-bit seed from a deterministic hash of the joined parts."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
