import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from finnlite import streamline, zoo  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

MODEL_NAMES = ("cnv_w1a1", "cnv_w2a2", "mobilenet_w4a4")


@pytest.fixture(scope="session")
def built():
    return {m: zoo.build(m, seed=7) for m in MODEL_NAMES}


@pytest.fixture(scope="session")
def streamlined(built):
    return {m: streamline.streamline_all(g) for m, g in built.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_images(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 3, 32, 32))


VERDICTS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whichever verbosity pytest runs at."""
    lines = []
    for outcome, verdict in VERDICTS.items():
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and (rep.when == "call" or outcome != "passed"):
                lines.append((props["criterion"], verdict, props.get("title", ""), props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, verdict, title, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {n:>2} {verdict} {title}: {detail}")
