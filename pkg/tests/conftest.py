import os
import sys

import numpy as np
import pytest

HERE = os.path.dirname(__file__)
sys.path.insert(0, HERE)
try:
    import mfem_asmg  # noqa: F401
except ImportError:  # running from a checkout without installing
    sys.path.insert(0, os.path.join(HERE, "..", "src"))

from mfem_asmg.diagnostics import reference_solution  # noqa: E402
from mfem_asmg.feasible_init import construct_u0  # noqa: E402
from mfem_asmg.mesh_hierarchy import (build_initial_mesh,  # noqa: E402
                                      uniform_hierarchy)
from mfem_asmg.multilevel import MultilevelSystem  # noqa: E402
from mfem_asmg.problems import get_case  # noqa: E402


class SmallRun:
    """A smooth-case system with its feasible start and reference."""

    def __init__(self, J, p, case="smooth", coarse=None):
        self.case = get_case(case)
        coarse = coarse if coarse is not None else self.case.coarse_mesh()
        self.hierarchy = uniform_hierarchy(coarse, J)
        self.system = MultilevelSystem(self.hierarchy, p, self.case)
        self.u0 = construct_u0(self.system)
        self.uref, self.qref = reference_solution(self.system)


_small = {}


def small_run(J, p, case="smooth"):
    key = (J, p, case)
    if key not in _small:
        _small[key] = SmallRun(J, p, case)
    return _small[key]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_initial_mesh()


@pytest.fixture(scope="session")
def smooth_j1_p0():
    return small_run(1, 0)


@pytest.fixture(scope="session")
def smooth_j2_p1():
    return small_run(2, 1)


@pytest.fixture(scope="session")
def smooth_j2_p2():
    return small_run(2, 2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
