import numpy as np
import pytest
import torch

from avmaster import ModelConfig, init_parameters

torch.set_num_threads(1)


@pytest.fixture
def tiny():
    return ModelConfig.tiny()


@pytest.fixture
def tiny64():
    return ModelConfig.tiny(dtype="float64")


@pytest.fixture
def model64(tiny64):
    return init_parameters(tiny64, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def fd_relative_error(loss_fn, tensors, step=1e-5):
    """Norm-based relative error between autograd and central differences.

    Every entry of every tensor is differenced; intended for small shapes.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    with torch.no_grad():
        for t in tensors:
            flat = t.data.view(-1)
            g = t.grad.reshape(-1) if t.grad is not None else torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * step))
                analytic.append(g[i].item())
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
