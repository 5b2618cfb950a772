"""Deterministic, name-keyed parameter initialization.

Every parameter draw is seeded by ``(seed, crc32(name))``, so a parameter
with the same name comes out identical no matter which model topology it is
embedded in.  Heads that share module names therefore share initial weights
exactly, which the wiring-equivalence tests rely on.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from rsphead.tensor import Tensor

__all__ = ["name_rng", "conv_param", "matrix_param", "zeros_param"]


def name_rng(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))


def conv_param(name: str, seed: int, cout: int, cin: int, kh: int = 1, kw: int = 1,
               rectified: bool = False) -> Tensor:
    """Weight tensor [cout, cin, kh, kw]; He-style scale when a rectifier follows."""
    fan_in = cin * kh * kw
    std = math.sqrt((2.0 if rectified else 1.0) / fan_in)
    w = name_rng(seed, name).normal(0.0, std, size=(cout, cin, kh, kw))
    return Tensor(w, requires_grad=True)


def matrix_param(name: str, seed: int, rows: int, cols: int) -> Tensor:
    std = math.sqrt(1.0 / rows)
    w = name_rng(seed, name).normal(0.0, std, size=(rows, cols))
    return Tensor(w, requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=True)
