import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_set():
    """2 categories x 2 images: the overfit set."""
    from cecs.data import SynthSpec, generate_synthetic

    return generate_synthetic(SynthSpec(k=2, m=2))


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(num, ok, detail)`` stores one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(num: int, ok: bool, detail: str) -> bool:
        lines[num] = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
