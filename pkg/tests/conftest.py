import os

import pytest
from hypothesis import HealthCheck, settings

from flowcache.pipeline import build_pipeline, run_trace

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=200
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def pipe():
    return build_pipeline()


def roundtrip(requests, pipeline=None, **kw):
    """Responses for raw ``requests`` through a fresh (or given) pipeline."""
    responses, _ = run_trace(pipeline if pipeline is not None else build_pipeline(), requests, **kw)
    return responses
