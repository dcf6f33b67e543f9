import numpy as np
import pytest
import torch

from causalve.config import PipelineConfig


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def cfg():
    return PipelineConfig()


def numeric_grad(f, params, h=1e-6, coords=None):
    """Central-difference gradient of scalar ``f()`` with respect to each tensor in ``params``.

    ``coords`` optionally lists, per tensor, the flat indices to difference;
    the remaining entries are left at zero.
    """
    grads = []
    for k, p in enumerate(params):
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in (range(flat.numel()) if coords is None else coords[k]):
            old = flat[i].item()
            flat[i] = old + h
            up = float(f())
            flat[i] = old - h
            down = float(f())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b):
    """Largest |a - b| relative to the largest gradient magnitude."""
    num = max(float((x - y).abs().max()) for x, y in zip(a, b))
    den = max(max(float(x.abs().max()), float(y.abs().max())) for x, y in zip(a, b))
    return num / max(den, 1e-12)


def check_grads(module, loss_fn, h=1e-6, per_tensor=None, seed=0):
    """Relative error of autograd against central differences (module cast to float64).

    Every parameter entry is checked unless ``per_tensor`` caps the number of
    randomly chosen entries per parameter tensor.
    """
    module.double()
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    coords = None
    if per_tensor is not None:
        g = torch.Generator().manual_seed(seed)
        coords = [torch.randperm(p.numel(), generator=g)[:per_tensor].tolist() for p in params]
        masks = [torch.zeros(p.numel(), dtype=torch.bool) for p in params]
        for m, c in zip(masks, coords):
            m[c] = True
        analytic = [a * m.view_as(a) for a, m in zip(analytic, masks)]
    with torch.no_grad():
        numeric = numeric_grad(loss_fn, params, h, coords)
    return max_rel_err(analytic, numeric)


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    recorded = []

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}"
        recorded.append(line)
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    yield record
    if not recorded:
        _ACCEPTANCE.append(f"FAIL {request.node.name}: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
