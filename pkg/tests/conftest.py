from hypothesis import settings

settings.register_profile("lab", deadline=None, max_examples=60)
settings.load_profile("lab")

import pytest

from facm_lab.trainer import TrainConfig, pretrain_teacher

SMALL = dict(hidden_width=64, depth=3, time_embed_dim=32, batch_size=256)


@pytest.fixture(scope="session")
def small_teacher():
    """A briefly trained eight_gaussians teacher shared by the slower tests."""
    cfg = TrainConfig(paradigm="pretrain_teacher", steps=1500, lr=1e-3, **SMALL)
    return cfg, pretrain_teacher(cfg)


# one line per acceptance criterion, echoed after the run so they survive output capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
