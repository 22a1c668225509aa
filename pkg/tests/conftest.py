import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def fd_relative_error(fn, x, h=1e-3, max_coords=None, seed=0):
    """Relative error between autograd and central finite differences.

    ``fn`` maps a float64 tensor to a scalar tensor. The error is
    ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||) over the
    checked coordinates (all of them unless ``max_coords`` is given).
    """
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    flat = x.detach().clone().reshape(-1)
    n = flat.numel()
    idx = np.arange(n)
    if max_coords is not None and max_coords < n:
        idx = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    num = np.empty(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            num[k] = (fn(plus.view_as(x)).item() - fn(minus.view_as(x)).item()) / (2 * h)
    ana = g.reshape(-1)[idx].numpy()
    scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-300)
    return float(np.linalg.norm(ana - num) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
