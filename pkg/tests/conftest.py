import numpy as np
import pytest
import torch

from groupformer.config import DomainConfig, ModelConfig
from groupformer.ingest import Sample, domain_to_dict

torch.set_num_threads(1)


def random_sample(rng, n_frames=30, max_slots=10, p_present=0.6, cfg=None):
    """Sample with random in-range boxes; absent slots are zero."""
    cfg = cfg or DomainConfig(max_slots=max_slots)
    present = rng.random((n_frames, max_slots)) < p_present
    boxes = np.stack(
        [rng.random((n_frames, max_slots)), rng.random((n_frames, max_slots)),
         rng.uniform(0.1, 1, (n_frames, max_slots)), rng.uniform(0.1, 1, (n_frames, max_slots))],
        axis=-1,
    )
    boxes[~present] = 0.0
    meta = {"site": "test", "tile_x": 0, "tile_y": 0, "t0": float(rng.integers(0, 10**6)), "cfg": domain_to_dict(cfg)}
    return Sample(boxes, present, np.arange(n_frames, dtype=np.int64), np.zeros(n_frames, dtype=bool), meta)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=8, n_heads=2, n_enc=1, n_dec=1, max_slots=2, hist_len=4, pred_len=4)


ACCEPTANCE = {}


def record(number, passed, detail):
    """Store one acceptance outcome for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
