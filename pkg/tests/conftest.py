"""Shared fixtures: the finite-difference gradient oracle used across suites."""

import numpy as np
import pytest
import torch


def _fd_directional(f, tensors, seed, eps=1e-4):
    """Max relative error between autograd and central finite differences.

    Draws one random unit direction per input tensor, compares the analytic
    directional derivative sum(grad . dir) against (f(x+eps d) - f(x-eps d)) / 2eps.
    All arithmetic in the tensors' own dtype (use float64 inputs).
    """
    gen = torch.Generator().manual_seed(seed)
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    loss = f(*leaves)
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    dirs = []
    for t in leaves:
        d = torch.randn(t.shape, generator=gen, dtype=t.dtype)
        dirs.append(d / d.norm())
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)

    with torch.no_grad():
        plus = [t + eps * d for t, d in zip(leaves, dirs)]
        minus = [t - eps * d for t, d in zip(leaves, dirs)]
        f_plus = float(f(*plus))
        f_minus = float(f(*minus))
    fd = (f_plus - f_minus) / (2.0 * eps)

    diff = abs(fd - analytic)
    scale = max(abs(fd), abs(analytic))
    return diff / scale if scale > 1e-8 else diff


@pytest.fixture(scope="session")
def fd_check():
    """fd_check(f, tensors, seeds=[...], eps=1e-4) -> asserts rel err <= 1e-4."""

    def check(f, tensors, seeds=(0, 1, 2), eps=1e-4, tol=1e-4):
        errs = {}
        for seed in seeds:
            errs[seed] = _fd_directional(f, tensors, seed, eps)
        worst = max(errs.values())
        assert worst <= tol, f"finite-difference mismatch: {errs}"
        return errs

    return check


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240816)
