"""Shared plumbing: seeded RNG streams, hashing, canonical serialization."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    """Derive an independent, reproducible RNG stream from a root seed.

    Every source of randomness in the package flows through this helper so
    that a single seed fixes the whole run.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(t) & 0xFFFFFFFF for t in tags]])


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    """JSON with sorted keys and no whitespace; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    """Short reproducible hash of any JSON-serializable configuration."""
    return sha256_hex(canonical_json(obj).encode())[:16]


def source_fingerprint() -> str:
    """Hash of the installed package sources, for provenance stamps."""
    pkg_dir = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(pkg_dir.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def fmt(x: float) -> str:
    """Shortest round-trip decimal form; used for all CSV floats."""
    return repr(float(x))
