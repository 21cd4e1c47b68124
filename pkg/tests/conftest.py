import pytest

from reciptrack.config import RunConfig
from reciptrack.pipeline import train_run, training_set


@pytest.fixture(scope="session")
def desk_model():
    """Default configuration trained once at desk scale: (config, params)."""
    cfg = RunConfig()
    result = train_run(cfg, training_set(cfg))
    return cfg, result.params


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
