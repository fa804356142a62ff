import pytest
from hypothesis import settings

from outcome_align.synthcohort import CohortSpec, generate_cohort

# fixed example sequence so reruns are reproducible
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")


def toy_spec(**kw):
    base = dict(n_patients=200, effect_size=4.0, seed=0)
    base.update(kw)
    return CohortSpec(**base)


@pytest.fixture(scope="session")
def toy_cohort():
    return generate_cohort(toy_spec())


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(CohortSpec(n_patients=60, n_features=12, n_static=2, signal_dim=2,
                                      nuisance_dim=6, events_min=3, events_max=10, seed=5))


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
