import numpy as np
import pytest

from advaudio.classifier import ClassifierModel, TrainConfig, fit
from advaudio.frontend import FrontendConfig, fit_normalization
from advaudio.synthetic import synthetic_clips

TINY_WIDTHS = (8, 16, 16, 16)


@pytest.fixture(scope="session")
def tiny_data():
    clips = synthetic_clips(4, seed=3)
    return clips[::2], clips[1::2]


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    """Small CNN trained a few epochs on 24 synthetic clips; good enough for attack contracts."""
    train, _ = tiny_data
    fe = FrontendConfig()
    fe = fe.with_stats(*fit_normalization([w for w, _ in train], fe))
    model = ClassifierModel(TINY_WIDTHS, seed=0, frontend=fe)
    fit(model, train, TrainConfig(learning_rate=3e-3, epochs=12, batch_size=8, decay_epoch=10, seed=0), fe)
    return model.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f" | {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
