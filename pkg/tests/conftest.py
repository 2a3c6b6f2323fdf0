import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def central_difference(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Elementwise central-difference gradient of scalar ``f()`` w.r.t. tensor ``x`` (in place)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.detach().double().flatten()
    b = b.detach().double().flatten()
    return float((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
