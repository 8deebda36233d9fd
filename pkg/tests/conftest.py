import numpy as np
import pytest
import torch

from iqtcfm.config import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net_cfg():
    # depth-2, 4-channel stem, fits a 16x16 input
    return NetworkConfig(
        branch_channels=1,
        depth=2,
        channel_mult=(1, 2),
        res_blocks_per_level=1,
        se_reduction=2,
        time_embed_dim=8,
        attn_heads=2,
        groupnorm_groups=2,
    )


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, seconds = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}  ({seconds:.1f}s)")
