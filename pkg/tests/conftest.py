import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("cft", deadline=None, max_examples=40)
settings.load_profile("cft")


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        failed = [c for c in checks if not c[1]]
        status = "PASS" if not failed else "FAIL"
        notes = "; ".join(f"{name}: {detail}" for name, _, detail in (failed or checks[-1:]) if detail)
        tr.write_line(f"criterion {n}: {status} ({len(checks) - len(failed)}/{len(checks)} checks) {notes}".rstrip())
