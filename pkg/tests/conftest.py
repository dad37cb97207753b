import logging

import numpy as np
import pytest
from hypothesis import settings

from gasm.grid import GridSpec, ObservationMask, SpeedField
from gasm.kernel import KernelParams, PrioriBank

# compiled code and a slow sandbox make per-example timing meaningless
settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_solver_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="gasm")


def make_bank(*arrays, speeds=None, dx=10.0, dt=1.0):
    """PrioriBank from raw arrays (kernel params are irrelevant to fusion)."""
    grid = GridSpec(0.0, 0.0, dx, dt, *np.shape(arrays[0]))
    if speeds is None:
        speeds = [80.0, -15.0, 70.0, -12.5][: len(arrays)]
    fields = tuple(SpeedField.unchecked(grid, a) for a in arrays)
    return PrioriBank(tuple(speeds), fields, KernelParams(1.0, 1.0))


def field_and_mask(z, mask):
    grid = GridSpec(0.0, 0.0, 10.0, 1.0, *np.shape(z))
    return SpeedField.unchecked(grid, np.asarray(z, dtype=float)), ObservationMask(grid, np.asarray(mask, dtype=bool))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
