"""DCT pair checked against a direct evaluation of the defining double sum
(the naive O(N^4) oracle), plus inversion and energy properties."""

import numpy as np
import pytest

from poisonbench.dct import dct2, idct2
from poisonbench.errors import ShapeError


def naive_dct2(block):
    """Direct orthonormal DCT-II: for every (u,v), sum the N^2 cosine terms.

    Deliberately evaluates the textbook formula coefficient by coefficient,
    independently of any matrix formulation."""
    block = np.asarray(block, dtype=np.float64)
    n = block.shape[0]
    xs = np.arange(n)
    out = np.empty((n, n))
    for u in range(n):
        cu = np.sqrt(1.0 / n) if u == 0 else np.sqrt(2.0 / n)
        cos_u = np.cos((2 * xs + 1) * u * np.pi / (2 * n))
        for v in range(n):
            cv = np.sqrt(1.0 / n) if v == 0 else np.sqrt(2.0 / n)
            cos_v = np.cos((2 * xs + 1) * v * np.pi / (2 * n))
            out[u, v] = cu * cv * float(cos_u @ block @ cos_v)
    return out


@pytest.mark.parametrize("n", [2, 3, 8, 32])
def test_matches_naive_oracle(n):
    rng = np.random.default_rng(n)
    block = rng.standard_normal((n, n))
    assert np.abs(dct2(block) - naive_dct2(block)).max() <= 1e-10


@pytest.mark.parametrize("n", [4, 8, 32])
def test_roundtrip(n):
    rng = np.random.default_rng(n + 100)
    block = rng.standard_normal((n, n))
    assert np.abs(idct2(dct2(block)) - block).max() <= 1e-10
    assert np.abs(dct2(idct2(block)) - block).max() <= 1e-10


@pytest.mark.parametrize("n", [4, 16, 32])
def test_parseval_energy(n):
    rng = np.random.default_rng(n + 200)
    block = rng.standard_normal((n, n))
    assert abs((dct2(block) ** 2).sum() - (block**2).sum()) <= 1e-10


def test_constant_block_is_pure_dc():
    c = 0.37
    n = 32
    coeffs = dct2(np.full((n, n), c))
    assert coeffs[0, 0] == pytest.approx(c * n, abs=1e-10)
    rest = coeffs.copy()
    rest[0, 0] = 0.0
    assert np.abs(rest).max() <= 1e-10


def test_dc_only_spectrum_is_spatially_constant():
    coeffs = np.zeros((32, 32))
    coeffs[0, 0] = 5.0
    spatial = idct2(coeffs)
    assert np.abs(spatial - spatial[0, 0]).max() <= 1e-12


def test_non_square_rejected():
    with pytest.raises(ShapeError):
        dct2(np.zeros((4, 8)))
    with pytest.raises(ShapeError):
        idct2(np.zeros((3, 2)))
