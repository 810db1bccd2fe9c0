import numpy as np
import pytest
import torch

from echoseg.dataset import Sample
from echoseg.synthgen import PhantomSpec, generate_arrays

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def phantom_samples():
    """Eight cases (sixteen samples) at 64 x 64."""
    spec = PhantomSpec(image_size=64, n_cases=8, abnormal_fraction=0.25, drop_probability=1.0, seed=3)
    return [Sample(c, v, n, im, lab) for c, v, n, im, lab in generate_arrays(spec)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
