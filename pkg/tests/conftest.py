import pytest
import torch

from graftkit.model import DiTConfig, build_model
from graftkit.tensor import precision


@pytest.fixture
def f64():
    """Run the test body with float64 as the default dtype."""
    with precision("float64"):
        yield


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def perturbed_xs():
    """Untrained XS model with every parameter nudged off its init, so no gate is zero."""
    m = build_model(DiTConfig())
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.02 * torch.randn(p.shape, generator=g))
    return m.eval()


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion; shown in the terminal summary."""

    def record(number, title: str, passed: bool, detail: str, soft: bool = False) -> bool:
        status = ("PASS" if passed else "FAIL") + (" (soft)" if soft else "")
        line = f"criterion {number}: {status} | {title} | {detail}"
        request.config.stash.setdefault(_CRITERIA, []).append((str(number), line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: int(item[0])):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    # Slow model-training tests run last so quick failures surface first.
    items.sort(key=lambda item: item.get_closest_marker("slow") is not None)
