"""Deterministic seed derivation.

Every random draw in the harness flows from one user-supplied base seed
through :func:`derive_seed`, so a campaign is reproducible from a single
number. The derivation is SHA-256 over the ':'-joined decimal/UTF-8
rendering of the parts, truncated to 64 bits (little-endian), which is
stable across platforms and Python versions.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts: int | str) -> int:
    data = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
