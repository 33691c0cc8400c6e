import numpy as np
import pytest

from dimap.taxonomy import ArchConfig, enumerate_layers, preset_arch, synthesize

# Two stages, a handful of blocks: every code path, none of the cost.
TINY = ArchConfig(
    "tiny", img_size=32, patch_size=4, in_channels=3, embed_dim=8,
    depths=(2, 1), num_heads=(2, 4), window_size=2, mlp_ratio=4.0, num_classes=10,
)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_ckpt():
    return synthesize(TINY, seed=3)


@pytest.fixture
def tiny_taxonomy():
    return enumerate_layers(TINY)


@pytest.fixture(scope="session")
def swin_t():
    cfg = preset_arch("swin-t")
    return cfg, synthesize(cfg, seed=42), enumerate_layers(cfg)


@pytest.fixture(scope="session")
def swin_t_path(tmp_path_factory, swin_t):
    from dimap.tensor_store import write_checkpoint

    path = tmp_path_factory.mktemp("swin_t") / "swin_t.safetensors"
    write_checkpoint(swin_t[1], path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance results, filled by tests/test_acceptance.py and echoed at the end of the run.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
