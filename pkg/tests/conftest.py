import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    from zsad3d.config import ExperimentConfig

    return ExperimentConfig(n_points=512, views=3, resolution=64, splat_radius=3, width=32,
                            vision_depth=2, vision_heads=2, text_depth=1, text_heads=2, point_dim=16,
                            global_dim=32, point_k=8, point_hidden=16, n_learnable=4, k=6,
                            n_prototypes=8, lora_rank=4, train_per_category=4, test_per_category=4,
                            stage1_epochs=1, stage2_epochs=1, batch_size=2, sigma=2.0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
