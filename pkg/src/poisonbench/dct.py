"""Orthonormal 2-D DCT-II / DCT-III pair for square blocks.

Computed as M @ X @ M.T with the orthonormal basis matrix M, in double
precision, so the pair inverts and preserves energy to ~1e-14.
"""

from __future__ import annotations

import functools

import numpy as np

from .errors import ShapeError


@functools.lru_cache(maxsize=16)
def _basis(n):
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0, :] /= np.sqrt(2.0)
    return m


def _check_square(block, op):
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ShapeError(f"{op} expects a square 2-D block, got shape {block.shape}")
    return block


def dct2(block):
    """Forward orthonormal 2-D DCT-II of a square block."""
    block = _check_square(block, "dct2")
    m = _basis(block.shape[0])
    return m @ block @ m.T


def idct2(block):
    """Inverse transform (orthonormal 2-D DCT-III)."""
    block = _check_square(block, "idct2")
    m = _basis(block.shape[0])
    return m.T @ block @ m
