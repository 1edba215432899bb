"""Shared oracles and fixtures.

The finite-difference checker is the independent gradient oracle: it never
touches the backward machinery, only repeated forward evaluations.
"""

import numpy as np
import pytest

from poisonbench import tensor as T


def finite_diff(f, arr, indices, h=1e-6):
    """Central finite differences of scalar-valued f at selected flat indices
    of arr (perturbed in place and restored)."""
    flat = arr.reshape(-1)
    out = {}
    for i in indices:
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        out[i] = (fp - fm) / (2.0 * h)
    return out


def check_gradient(build_output, wrt, n_probes=5, rel_tol=1e-6, seed=0):
    """Compare analytic gradients against central differences.

    build_output() must rebuild the graph from current array contents and
    return the output node; the scalar under test is a fixed random
    projection of that output. `wrt` is the list of tensors whose gradients
    get probed (their .data is perturbed for the numeric side).
    """
    rng = np.random.default_rng(seed)
    out = build_output()
    proj = rng.standard_normal(out.data.shape)
    loss = T.weighted_sum(out, proj)
    T.backward(loss)

    def scalar():
        return float((build_output().data * proj).sum())

    for t in wrt:
        assert t.grad is not None, "gradient missing"
        analytic = t.grad.reshape(-1)
        k = min(n_probes, t.data.size)
        idx = rng.choice(t.data.size, size=k, replace=False)
        numeric = finite_diff(scalar, t.data, idx)
        for i, num in numeric.items():
            ana = analytic[i]
            denom = max(abs(num), abs(ana), 1e-8)
            rel = abs(ana - num) / denom
            assert rel <= rel_tol, f"grad mismatch at {i}: analytic={ana} numeric={num} rel={rel}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
