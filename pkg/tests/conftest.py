import numpy as np
import pytest

from fmplan import rng
from fmplan.domain import build_case
from fmplan.fmd.diffusion import Denoiser, NoiseSchedule
from fmplan.fmd.distill import Generator
from fmplan.fmd.networks import init_denoiser


@pytest.fixture(scope="session")
def case():
    return build_case(7)


@pytest.fixture(scope="session")
def small_denoiser():
    return Denoiser(init_denoiser(rng.stream(3, rng.INIT)), NoiseSchedule())


@pytest.fixture(scope="session")
def small_generator(small_denoiser):
    return Generator.from_teacher(small_denoiser)


@pytest.fixture
def g():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Record one acceptance outcome; the terminal summary prints them in order."""
    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
