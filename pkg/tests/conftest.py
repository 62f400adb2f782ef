import pytest
import torch

import weightgen as wg
from weightgen.arch import init_weightset
from weightgen.rng import make_stream


@pytest.fixture(scope="session")
def cnn_arch():
    return wg.build_arch("cnn_tiny", 10, (1, 8, 8))


@pytest.fixture(scope="session")
def vit_arch():
    return wg.build_arch("vit_tiny", 10, (1, 8, 8))


@pytest.fixture(scope="session")
def mlp_arch():
    return wg.build_arch("mlp_tiny", 10, (1, 8, 8))


@pytest.fixture()
def cnn_teachers(cnn_arch):
    return [init_weightset(cnn_arch, make_stream(i, "teacher")) for i in range(3)]


def finite_difference(fn, tensor, index, eps):
    """Central finite difference of scalar fn() w.r.t. tensor[index]."""
    orig = tensor[index].item()
    with torch.no_grad():
        tensor[index] = orig + eps
        hi = fn()
        tensor[index] = orig - eps
        lo = fn()
        tensor[index] = orig
    return (hi - lo) / (2 * eps)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
