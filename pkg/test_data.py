import numpy as np
import pytest

from data import (
    build_similarity, draw_rectangle, generate_synthetic, load_dataset, make_splits, save_dataset,
)
from errors import CorruptDataError, NotFoundError, StorageError, ValidationError, VersionError


@pytest.fixture
def small():
    dataset = generate_synthetic(60, 4, vocab=64, noise=0.1, seed=3)
    dataset.splits = make_splits(60, 10, 30, seed=3)
    return dataset


def test_alignment_and_shapes(small):
    assert small.images.shape == (60, 16, 16, 3)
    assert small.bows.shape == (60, 64)
    assert small.label_matrix.shape == (60, 4)
    assert small.masks.shape == (60, 8, 8)
    assert np.all((small.images >= 0) & (small.images <= 1))


def test_each_instance_has_one_to_three_labels(small):
    counts = small.label_matrix.sum(axis=1)
    assert counts.min() >= 1 and counts.max() <= 3


def test_planted_mask_occupancy_bounds():
    dataset = generate_synthetic(1000, 3, vocab=32, seed=1)
    occupancy = dataset.masks.reshape(1000, -1).mean(axis=1)
    assert occupancy.min() >= 0.25 and occupancy.max() <= 0.5


def test_rectangle_draw_stays_on_grid(rng):
    for _ in range(200):
        top, left, h, w = draw_rectangle(8, rng)
        assert 0 <= top and top + h <= 8 and 0 <= left and left + w <= 8
        assert 16 <= h * w <= 32


def test_noise_free_single_label_images_match_up_to_position():
    dataset = generate_synthetic(200, 2, vocab=16, noise=0.0, seed=4)
    cells = dataset.images.reshape(200, 8, 2, 8, 2, 3).transpose(0, 1, 3, 2, 4, 5)
    seen = {}
    for i in range(200):
        labels = np.flatnonzero(dataset.label_matrix[i])
        if len(labels) != 1:
            continue
        foreground = cells[i][dataset.masks[i] == 1]
        background = cells[i][dataset.masks[i] == 0]
        assert np.all(background == 0)
        tile = foreground[0]
        assert np.all(foreground == tile)
        seen.setdefault(int(labels[0]), tile)
        np.testing.assert_array_equal(seen[int(labels[0])], tile)


def test_shared_label_implies_shared_vocabulary_without_noise():
    dataset = generate_synthetic(100, 4, vocab=64, noise=0.0, seed=2)
    similarity = dataset.similarity()
    for i in range(100):
        for j in range(i + 1, 100):
            if dataset.label_matrix[i] @ dataset.label_matrix[j]:
                assert similarity[i, j]
                assert np.any((dataset.bows[i] > 0) & (dataset.bows[j] > 0))


def test_same_seed_same_bytes():
    a = generate_synthetic(30, 3, vocab=32, seed=9)
    b = generate_synthetic(30, 3, vocab=32, seed=9)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.bows.tobytes() == b.bows.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()


@pytest.mark.parametrize("kwargs", [
    dict(n=10, classes=1), dict(n=0, classes=3), dict(n=10, classes=3, noise=1.5),
    dict(n=10, classes=3, image_size=15), dict(n=10, classes=40, vocab=16),
])
def test_invalid_generation_arguments(kwargs):
    with pytest.raises(ValidationError):
        generate_synthetic(**kwargs)


def test_similarity_examples():
    assert np.array_equal(build_similarity([[0], [1], [2]]).dense(), np.eye(3, dtype=bool))
    assert build_similarity([[1, 2], [2, 3]])[0, 1]
    assert not build_similarity([[1], [2]])[0, 1]


def test_similarity_matches_set_intersection(rng):
    labels = [sorted(set(rng.integers(0, 6, size=rng.integers(1, 4)).tolist())) for _ in range(40)]
    dense = build_similarity(labels).dense()
    for i in range(40):
        for j in range(40):
            assert dense[i, j] == (i == j or bool(set(labels[i]) & set(labels[j])))
    assert np.array_equal(dense, dense.T)


def test_positive_list_contains_self(small):
    sim = small.similarity()
    assert 5 in sim.positives(5)


def test_splits_protocol():
    splits = make_splits(2400, 200, 1000, seed=7)
    assert len(splits["test"]) == 200
    assert len(splits["retrieval"]) == 2200
    assert len(splits["train"]) == 1000
    assert not set(splits["test"]) & set(splits["retrieval"])
    assert set(splits["train"]) <= set(splits["retrieval"])
    again = make_splits(2400, 200, 1000, seed=7)
    assert all(np.array_equal(splits[k], again[k]) for k in splits)


@pytest.mark.parametrize("n_test,n_train", [(10, 1), (0, 1), (5, 6)])
def test_infeasible_splits(n_test, n_train):
    with pytest.raises(ValidationError):
        make_splits(10, n_test, n_train, seed=0)


def test_save_load_round_trip(small, tmp_path):
    loaded = load_dataset(save_dataset(small, tmp_path / "ds"))
    assert loaded.manifest == small.manifest
    assert loaded.images.tobytes() == small.images.tobytes()
    assert loaded.bows.tobytes() == small.bows.tobytes()
    assert np.array_equal(loaded.label_matrix, small.label_matrix)
    assert np.array_equal(loaded.masks, small.masks)
    for name in ("train", "test", "retrieval"):
        assert np.array_equal(loaded.split(name), small.split(name))


def test_save_refuses_non_empty_directory(small, tmp_path):
    save_dataset(small, tmp_path / "ds")
    with pytest.raises(StorageError):
        save_dataset(small, tmp_path / "ds")
    save_dataset(small, tmp_path / "ds", force=True)


def test_load_errors(small, tmp_path):
    with pytest.raises(NotFoundError):
        load_dataset(tmp_path / "missing")

    path = save_dataset(small, tmp_path / "ds")
    manifest = (path / "manifest").read_text()
    (path / "manifest").write_text(manifest.replace("version=1", "version=2"))
    with pytest.raises(VersionError):
        load_dataset(path)
    (path / "manifest").write_text(manifest)

    raw = (path / "bow.f32").read_bytes()
    (path / "bow.f32").write_bytes(raw[:-4])
    with pytest.raises(CorruptDataError):
        load_dataset(path)
    (path / "bow.f32").write_bytes(raw)

    (path / "splits.txt").unlink()
    with pytest.raises(NotFoundError):
        load_dataset(path)


def test_unknown_split(small):
    with pytest.raises(ValidationError):
        small.split("validation")
