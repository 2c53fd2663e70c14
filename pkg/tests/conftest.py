import time
from dataclasses import dataclass, field

import pytest

from gpspectrum.phantom import PhantomConfig, generate_population
from gpspectrum.spatial_field import CarConfig, local_objective
from gpspectrum.volume_model import fit_volume


@dataclass
class InstrumentedFit:
    model: object
    seconds: float
    checks: list = field(default_factory=list)  # (status, before, after), recomputed independently


@pytest.fixture(scope="session")
def phantom():
    return generate_population(PhantomConfig())


@pytest.fixture(scope="session")
def phantom_fit(phantom):
    """Default SE fit of the default phantom, re-evaluating every ICM update."""
    cfg = CarConfig()
    datasets = phantom.voxel_datasets(0.0)
    lat = phantom.lattice
    checks = []

    def on_update(c, field_before, outcome):
        v = lat.coords(lat.flat_indices[c])
        before = local_objective(v, datasets[c], "se", field_before, cfg)
        after = local_objective(v, datasets[c], "se", field_before, cfg, outcome.params.as_array())
        checks.append((outcome.status, before, after))

    start = time.perf_counter()
    model = fit_volume(phantom, "se", cfg, on_update=on_update)
    return InstrumentedFit(model, time.perf_counter() - start, checks)


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "LML matches dense multivariate-normal oracle",
    2: "LML gradient matches central finite differences",
    3: "single-point prediction equals bivariate conditioning",
    4: "noiseless interpolation at training inputs",
    5: "ICM local monotonicity over a full phantom fit",
    6: "CAR smoothing halves spatial variance of log tau",
    7: "phantom cross-fade recovered by SE fit",
    8: "kernel comparison direction and linear-trend shrinkage",
    9: "LOO: continuous beats binned, binned profile non-increasing",
    10: "determinism and bit-exact formats",
}
_acceptance_results = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, passed, detail)`` records a criterion's outcome and asserts it."""

    def record(n, passed, detail):
        _acceptance_results[n] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {ACCEPTANCE_TITLES[n]}: {detail}")
        assert passed, f"acceptance criterion {n} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    ran = [item for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           if "test_acceptance" in item.nodeid]
    if not ran and not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in _acceptance_results:
            passed, detail = _acceptance_results[n]
            terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {title}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n:2d}. {title}: not run or errored before recording")
