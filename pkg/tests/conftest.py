import numpy as np
import pytest

from msfadv.attack import AttackConfig, run_attack
from msfadv.pipeline import calibrate
from msfadv.scenario import default_object, make_scenario


@pytest.fixture(scope="session")
def scn():
    return make_scenario(0)


@pytest.fixture(scope="session")
def cone():
    return default_object()


@pytest.fixture(scope="session")
def weights(scn, cone):
    return calibrate(cone, scn)


@pytest.fixture(scope="session")
def golden_run(scn, cone, weights):
    """The shipped end-to-end attack: defaults, seed 0. Shared by the slow tests."""
    trace = []

    def record(it, v, ev):
        trace.append(np.abs(v - cone.vertices).max())

    adv, report = run_attack(cone, scn, AttackConfig(), weights, seed=0, callback=record)
    return adv, report, trace


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance bookkeeping ---------------------------------------------------------

_ACCEPTANCE = {}


def _record(number, part, ok, detail=""):
    _ACCEPTANCE.setdefault(number, []).append((part, bool(ok), detail))
    print(f"criterion {number} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture
def criterion():
    """``criterion(n, part, ok, detail)`` logs one check toward acceptance criterion n."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        parts = _ACCEPTANCE[n]
        ok = all(p[1] for p in parts)
        failed = "; ".join(f"{p[0]}: {p[2]}" for p in parts if not p[1])
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}" + ("" if ok else f" ({failed})"))
