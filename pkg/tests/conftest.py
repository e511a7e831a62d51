import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    from dcss.config import ExperimentConfig

    return ExperimentConfig(samples_per_class=12, test_samples_per_class=4, epochs=1)


@pytest.fixture(scope="session")
def small_run(small_config, tmp_path_factory):
    """A quick 2-2 run with checkpoints, shared by harness, metrics and CLI tests."""
    from dcss.experiment import run_experiment

    out = tmp_path_factory.mktemp("small_run")
    res = run_experiment(small_config, out)
    res["dir"] = out
    return res


_CRITERIA: dict = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, title)`` then ``.detail = ...``."""

    class Line:
        def __init__(self):
            self.number, self.title, self.detail = None, "", ""

        def __call__(self, number, title):
            self.number, self.title = number, title
            return self

    line = Line()
    yield line
    rep = getattr(request.node, "rep_call", None)
    if line.number is not None:
        ok = rep is not None and rep.passed
        text = f"[criterion {line.number}] {'PASS' if ok else 'FAIL'}: {line.title}"
        if line.detail:
            text += f" ({line.detail})"
        _CRITERIA[line.number] = text
        print("\n" + text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
