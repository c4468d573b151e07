import pytest

from evfuse.config import RunConfig
from evfuse.datamodel import SynthConfig, generate_synthetic_sequence

# a network small enough for unit tests: 2x2 template grid, 4x4 search grid
TOY = {
    "backbone.dim": 32, "backbone.depth": 2, "backbone.heads": 2, "uncert.heads": 2,
    "backbone.elim_blocks": [1], "head.channels": 16,
    "data.template_size": 32, "data.search_size": 64,
    "train.batch_size": 4, "train.lr_backbone": 1e-3, "train.lr_other": 1e-3,
}

TOY_SCENE = SynthConfig(n_frames=16, width=128, height=128, object_size=(24, 20))


@pytest.fixture
def toy_cfg():
    return RunConfig(TOY)


@pytest.fixture(scope="session")
def toy_seq():
    return generate_synthetic_sequence(TOY_SCENE, seed=0, name="toy")


def pytest_terminal_summary(terminalreporter):
    from verdicts import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
