import warnings

import numpy as np
import pytest

from robustbf import beamformers as bf

POWER_RTOL = 1e-12


class PowerLedger:
    """Every beamforming solution emitted anywhere in the suite is checked here."""

    def __init__(self):
        self.checked = 0
        self.violations = []

    def __call__(self, sol, P_max):
        self.checked += 1
        p = float(np.sum(np.abs(sol.V_value) ** 2))
        if not abs(p - P_max) <= POWER_RTOL * P_max:
            self.violations.append((p, P_max))


POWER = PowerLedger()
bf.emit_hooks.append(POWER)


@pytest.fixture(autouse=True)
def _power_guard():
    before = len(POWER.violations)
    yield
    new = POWER.violations[before:]
    assert not new, f"power constraint violated by {len(new)} solution(s): {new[:3]}"


@pytest.fixture(autouse=True)
def _quiet_loading():
    # diagonal-loading warnings are expected on adversarial inputs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture
def power_ledger():
    return POWER


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_collection_modifyitems(items):
    # acceptance checks run last; the suite-wide power check is the very last item
    def key(item):
        name = item.nodeid
        if "test_acceptance.py" not in name:
            return 0
        return 2 if "power" in name else 1
    items.sort(key=key)


def pytest_terminal_summary(terminalreporter):
    terminalreporter.write_line(
        f"power hook: {POWER.checked} emitted solutions checked, {len(POWER.violations)} violations")
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
