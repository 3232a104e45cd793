"""Deterministic derivation of per-module random streams from one root seed.

Every source of randomness in the package is a stream derived from
``(root_seed, label, index)`` through SHA-256, so any subsystem's stream can
be reproduced in isolation.  The ``index`` acts as a counter for families of
streams (one per epoch, per worker, per sweep point).
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_SEED_BITS = 63  # fits both torch.Generator.manual_seed and numpy


def derive_seed(root_seed: int, label: str, index: int = 0) -> int:
    """Map (root_seed, label, index) to a stable 63-bit seed."""
    payload = f"{root_seed}:{label}:{index}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << _SEED_BITS) - 1)


def numpy_rng(root_seed: int, label: str, index: int = 0) -> np.random.Generator:
    """PCG64 generator seeded from the derived stream."""
    return np.random.default_rng(derive_seed(root_seed, label, index))


def torch_generator(root_seed: int, label: str, index: int = 0) -> torch.Generator:
    """CPU torch generator seeded from the derived stream."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(root_seed, label, index))
    return gen
