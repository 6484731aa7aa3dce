import numpy as np
import pytest

from okaf.model import ModelConfig

VERDICTS: list[str] = []


def small_config(**overrides) -> ModelConfig:
    """Narrow model for gradient and routing checks (fp64, width 8)."""
    kw = dict(width=8, depth=2, heads=2, mlp_ratio=2, vit_width=8, vit_depth=1, vit_heads=2,
              patch=4, latent_patch=4, latent_dim=4, vocab=64, time_dim=8, seed=0)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return small_config()


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


SMALL_RUN_CONFIG = """\
[data]
train = text:8,t2i:16,i2t:24,interleaved:10
test = t2i:4,i2t:4,interleaved:10
[train]
vae_steps = 50
[eval]
steps = 3
max_new_tokens = 8
[stage1]
steps = 6
batch_size = 2
[stage2]
steps = 6
batch_size = 2
[stage3]
steps = 6
batch_size = 2
"""


def write_small_config(directory) -> str:
    """A run of the whole command-line pipeline in a few seconds."""
    path = directory / "small.cfg"
    path.write_text(SMALL_RUN_CONFIG)
    return str(path)
