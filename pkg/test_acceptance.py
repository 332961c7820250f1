"""
Full-size synthetic runs. These take minutes; enable with XMH_RUN_SLOW=1.
"""

import numpy as np
import pytest

from data import generate_synthetic, make_splits, save_dataset
from models import Direction, TrainConfig
from services import diagnostics_service, evaluation_service, sweep_service
from trainer import save_checkpoint, train

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def planted():
    dataset = generate_synthetic(2400, 4, vocab=256, noise=0.1, seed=7)
    dataset.splits = make_splits(2400, 200, 1000, seed=7)
    return dataset


@pytest.fixture(scope="module")
def trained(planted, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(planted, TrainConfig(q=16), out), out


def _map(reports, direction, codes="foreground"):
    return next(r.map for r in reports if r.direction == direction and r.codes == codes)


def test_cross_modal_map_and_background_gap(planted, trained):
    result, _ = trained
    reports = evaluation_service.evaluate_model(result.model, planted)
    for direction in (Direction.T2I, Direction.I2T):
        foreground = _map(reports, direction)
        assert foreground >= 0.85
        assert foreground - _map(reports, direction, "background") >= 0.10


def test_loss_goes_down(trained):
    records = trained[0].records
    d_steps = [r.total for r in records if r.phase == "D"]
    window = max(1, len(d_steps) // 10)
    assert np.mean(d_steps[-window:]) < np.mean(d_steps[:window])


def test_masks_beat_random_rectangles(planted, trained, tmp_path_factory):
    result, out = trained
    data_dir = save_dataset(planted, tmp_path_factory.mktemp("data") / "ds")
    ckpt = save_checkpoint(result.model, out / "final.ckpt")
    summary, _ = diagnostics_service.mask_stats(data_dir, ckpt)
    assert summary.mean_iou - summary.baseline_iou >= 0.10


def test_sweep_map_grows_with_code_length(planted, tmp_path_factory):
    data_dir = save_dataset(planted, tmp_path_factory.mktemp("sweep-data") / "ds")
    table = sweep_service.sweep(data_dir, None, tmp_path_factory.mktemp("sweep"))
    cross = table[(table["codes"] == "foreground") & table["direction"].isin(["T2I", "I2T"])]
    by_q = cross.groupby("q")["map"].mean().sort_index()
    assert list(by_q.index) == [16, 32, 64]
    assert np.all(np.diff(by_q.to_numpy()) >= -0.03)
