"""Deterministic seed fan-out.

Every random stream in a run hangs off one master seed. Sub-seeds are
derived by hashing (master, purpose-label) with blake2b, which is stable
across processes, platforms and Python versions, unlike hash().
"""

import hashlib

_MASK = 0x7FFF_FFFF_FFFF_FFFF  # keep derived seeds in the non-negative int64 range


def derive_seed(master: int, label: str) -> int:
    """Derive a child seed for one named purpose from the master seed."""
    digest = hashlib.blake2b(f"{master}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK
