import numpy as np
import pytest

from gated_cascade.config import RunConfig

_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A configuration small enough to train in a couple of seconds."""
    return RunConfig(
        stages=2, landmarks=5, image_size=32, patch_size=8, conv="4:3:2,4:1:1", fc_dim=16,
        ensemble_size=4, hidden=4, depth=2, epochs=2, batch_size=32, augment_copies=1,
        synth_train=40, synth_test=10, translation_sigma=2.0, synth_translation=2.0,
    )


@pytest.fixture
def acceptance_log():
    def record(criterion: str, ok: bool, detail: str, status: str | None = None):
        _ACCEPTANCE.append((criterion, status or ("PASS" if ok else "FAIL"), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")
