import numpy as np
import pytest

from activesense.array import ArrayConfig
from activesense.codebook import build_codebook, build_shift_table, tx_beam
from activesense.otfs import OtfsFrame


@pytest.fixture(scope="session")
def desk_array():
    return ArrayConfig(32)


@pytest.fixture(scope="session")
def desk_codebook(desk_array):
    return build_codebook(desk_array, (-48.0, 48.0), 8)


@pytest.fixture(scope="session")
def desk_tx(desk_array):
    return tx_beam(desk_array, (-48.0, 48.0))


@pytest.fixture(scope="session")
def desk_shift_table(desk_codebook):
    return build_shift_table(desk_codebook, 3)


@pytest.fixture
def frame():
    return OtfsFrame()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def desk_setup(desk_array, desk_codebook, desk_tx, desk_shift_table):
    from activesense.detector import uniform_angle_grid
    from activesense.strategy import AcquisitionSetup
    # 5.2 is close to the noise-only calibration of the desk OS-CFAR scale at Pfa 1e-3
    return AcquisitionSetup(OtfsFrame(), desk_array, desk_codebook, desk_tx, desk_shift_table,
                            uniform_angle_grid(), cfar_scale=5.2)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; the lines are echoed at the end of the run."""

    def record(number: int, title: str, passed: bool, detail: str, elapsed_s: float) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail} ({elapsed_s:.1f} s)"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
