from __future__ import annotations

import numpy as np
import pytest
import torch

from tamiseg.synth_data import SynthConfig, generate_dataset


def finite_diff_entry(fn, tensor: torch.Tensor, index, h: float = 1e-5) -> float:
    """Central difference of scalar fn() w.r.t. one entry of tensor (in place)."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        f_plus = float(fn())
        tensor[index] = orig - h
        f_minus = float(fn())
        tensor[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a) + abs(b), 1e-6)


def check_grads(fn, tensors, max_entries_per_tensor: int = 4, h: float = 1e-5,
                tol: float = 1e-4, rng_seed: int = 0):
    """Compares autograd gradients of scalar fn() against central differences
    on a random sample of entries of each tensor. Tensors must be float64
    leaves with requires_grad."""
    rng = np.random.default_rng(rng_seed)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = fn()
    loss.backward()
    for t in tensors:
        assert t.grad is not None, "tensor received no gradient"
        flat = t.reshape(-1)
        flat_grad = t.grad.reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(max_entries_per_tensor, n), replace=False)
        for i in picks:
            fd = finite_diff_entry(fn, flat, int(i), h)
            ag = flat_grad[int(i)].item()
            assert rel_err(ag, fd) < tol, f"grad mismatch: autograd {ag} vs fd {fd}"


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(16, 500, SynthConfig())


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
