"""Root-seed splitting: every subsystem draws from its own labelled stream."""
from __future__ import annotations

import zlib

import numpy as np


def split_seed(root: int, label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])


def split_rng(root: int, label: str) -> np.random.Generator:
    """Generator for ``label`` under ``root``; unrelated labels never share draws."""
    return np.random.default_rng(split_seed(root, label))
