import itertools

import numpy as np
import pandas as pd
import pytest

from errors import CorruptDataError, DimensionError, NotFoundError, VersionError
from models import Direction
from retrieval import (
    CodeDatabase, average_precision, encode_corpus, evaluate, hamming_distance, hamming_rank,
    load_code_database, mean_pr_curve, pr_curve, save_code_database, write_code_text, write_eval_outputs,
    write_mask_dump,
)


def _random_bits(rng, n, q):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=(n, q))


def _brute_ap(flags):
    flags = list(flags)
    relevant = sum(flags)
    if relevant == 0:
        return 0.0
    hits, total = 0, 0.0
    for rank, flag in enumerate(flags, 1):
        if flag:
            hits += 1
            total += hits / rank
    return total / relevant


def test_exact_match_ranks_first(rng):
    bits = _random_bits(rng, 10, 16)
    db = CodeDatabase.from_codes("image", bits, ids=np.arange(100, 110))
    result = hamming_rank(bits[4], db)
    assert result.ids[0] == 104
    assert result.distances[0] == 0
    assert len(result) == 10
    assert np.all(np.diff(result.distances) >= 0)


def test_complement_is_at_distance_q(rng):
    bits = _random_bits(rng, 1, 24)
    db = CodeDatabase.from_codes("text", -bits)
    assert hamming_rank(bits[0], db).distances[0] == 24


def test_ties_break_by_ascending_id():
    bits = np.ones((3, 8), dtype=np.int8)
    db = CodeDatabase.from_codes("image", bits, ids=[7, 2, 5])
    assert hamming_rank(bits[0], db).ids.tolist() == [2, 5, 7]


@pytest.mark.parametrize("seed", range(1000))
def test_packed_hamming_matches_naive(seed):
    rng = np.random.default_rng(seed)
    q = int(rng.choice([8, 13, 16, 32, 64]))
    n = int(rng.integers(1, 65))
    bits = _random_bits(rng, n, q)
    query = _random_bits(rng, 1, q)[0]
    result = hamming_rank(query, CodeDatabase.from_codes("image", bits))
    naive = [(int((query != bits[i]).sum()), i) for i in range(n)]
    naive.sort()
    assert result.ids.tolist() == [i for _, i in naive]
    assert result.distances.tolist() == [d for d, _ in naive]


def test_hamming_is_a_metric(rng):
    for _ in range(100):
        a, b, c = _random_bits(rng, 3, 16)
        assert hamming_distance(a, b) == hamming_distance(b, a)
        assert hamming_distance(a, a) == 0
        assert hamming_distance(a, c) <= hamming_distance(a, b) + hamming_distance(b, c)


def test_query_length_mismatch(rng):
    db = CodeDatabase.from_codes("image", _random_bits(rng, 4, 16))
    with pytest.raises(DimensionError):
        hamming_rank(_random_bits(rng, 1, 8)[0], db)


@pytest.mark.parametrize("flags,expected", [
    ([1, 1, 0], 1.0),
    ([0, 1, 1], (1 / 2 + 2 / 3) / 2),
    ([0, 0, 0], 0.0),
])
def test_average_precision_examples(flags, expected):
    assert average_precision(np.array(flags)) == pytest.approx(expected, abs=1e-12)


def test_average_precision_matches_oracle_on_all_short_rankings():
    for length in range(1, 9):
        for flags in itertools.product([0, 1], repeat=length):
            ap = average_precision(np.array(flags))
            assert abs(ap - _brute_ap(flags)) <= 1e-12
            assert 0.0 <= ap <= 1.0
            perfect = sum(flags) > 0 and list(flags) == sorted(flags, reverse=True)
            assert (ap == pytest.approx(1.0)) == perfect


def test_map_at_k_divides_by_retrieved_relevant():
    assert average_precision(np.array([0, 1, 1, 1]), k=2) == pytest.approx(0.5)


def test_pr_curve_examples():
    perfect = pr_curve(np.array([1, 1, 0, 0]))
    np.testing.assert_allclose(perfect, 1.0)
    endpoints = pr_curve(np.array([1, 0]), grid=np.array([0.0, 1.0]))
    np.testing.assert_allclose(endpoints, [1.0, 1.0])
    assert pr_curve(np.array([0, 0])) is None


def _enumerated_pr(flags, grid):
    total = sum(flags)
    points = []
    for cut in range(1, len(flags) + 1):
        tp = sum(flags[:cut])
        points.append((tp / total, tp / cut))
    return [max([p for r, p in points if r >= level - 1e-12], default=0.0) for level in grid]


@pytest.mark.parametrize("seed", range(20))
def test_pr_curve_matches_cutoff_enumeration(seed):
    rng = np.random.default_rng(seed)
    flags = rng.integers(0, 2, size=int(rng.integers(1, 20)))
    if flags.sum() == 0:
        flags[-1] = 1
    grid = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(pr_curve(flags, grid), _enumerated_pr(list(flags), grid), atol=1e-12)


def test_mean_pr_skips_queries_without_relevant_items():
    curve = mean_pr_curve([np.array([1, 0]), np.array([0, 0])], grid=np.array([0.0, 1.0]))
    np.testing.assert_allclose(curve, [1.0, 1.0])


def test_identity_blocks_give_perfect_map(rng):
    labels = np.repeat(np.arange(4), 3)
    codes = _random_bits(rng, 4, 32)[labels]
    db = CodeDatabase.from_codes("image", codes)
    relevance = labels[:, None] == labels[None, :]
    report = evaluate(codes, db, relevance, Direction.T2I)
    assert report.map == pytest.approx(1.0)
    assert report.map == pytest.approx(float(np.mean(report.ap)), abs=1e-12)
    assert report.pr[0][0] == 0.0 and report.pr[-1][0] == 1.0


def test_random_codes_map_near_class_prior():
    rng = np.random.default_rng(3)
    labels_q = rng.integers(0, 4, size=200)
    labels_db = rng.integers(0, 4, size=400)
    db = CodeDatabase.from_codes("image", _random_bits(rng, 400, 64))
    relevance = labels_q[:, None] == labels_db[None, :]
    report = evaluate(_random_bits(rng, 200, 64), db, relevance, Direction.T2I)
    assert abs(report.map - 0.25) < 0.05


def test_map_at_changes_only_the_cutoff(rng):
    labels = rng.integers(0, 3, size=30)
    codes = _random_bits(rng, 30, 16)
    db = CodeDatabase.from_codes("text", codes)
    relevance = labels[:, None] == labels[None, :]
    full = evaluate(codes, db, relevance, Direction.I2T)
    cut = evaluate(codes, db, relevance, Direction.I2T, map_at=5)
    assert cut.map_at == 5 and full.map_at is None
    assert cut.pr == full.pr


def test_code_file_round_trip(rng, tmp_path):
    db = CodeDatabase.from_codes("text", _random_bits(rng, 9, 13), ids=np.arange(9) * 3)
    loaded = load_code_database(save_code_database(db, tmp_path / "codes.bin"))
    assert loaded.modality == "text" and loaded.q == 13
    np.testing.assert_array_equal(loaded.ids, db.ids)
    np.testing.assert_array_equal(loaded.bits, db.bits)


def test_code_file_errors(rng, tmp_path):
    with pytest.raises(NotFoundError):
        load_code_database(tmp_path / "nope.bin")
    path = save_code_database(CodeDatabase.from_codes("image", _random_bits(rng, 4, 16)), tmp_path / "c.bin")
    raw = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-3])
    with pytest.raises(CorruptDataError):
        load_code_database(tmp_path / "cut.bin")
    (tmp_path / "v9.bin").write_bytes(raw.replace(b"xmh-codes\t1\t", b"xmh-codes\t9\t", 1))
    with pytest.raises(VersionError):
        load_code_database(tmp_path / "v9.bin")


def test_text_outputs(rng, tmp_path):
    db = CodeDatabase.from_codes("image", np.array([[1, -1, 1, 1], [-1, -1, -1, 1]], dtype=np.int8), ids=[4, 9])
    lines = write_code_text(db, tmp_path / "codes.txt").read_text().splitlines()
    assert lines == ["4\t4\t1011", "9\t4\t0001"]
    masks = np.array([[[1, 0], [0, 1]]], dtype=np.uint8)
    dump = write_mask_dump([4], masks, 0.25, tmp_path / "masks.txt").read_text().splitlines()
    assert dump == ["4\t0.25\t2\t2\t1001"]


def test_eval_outputs(rng, tmp_path):
    labels = np.repeat(np.arange(2), 3)
    codes = _random_bits(rng, 2, 16)[labels]
    report = evaluate(codes, CodeDatabase.from_codes("image", codes), labels[:, None] == labels[None, :],
                      Direction.T2I)
    paths = write_eval_outputs([report], tmp_path)
    metrics = pd.read_csv(paths["metrics"], sep="\t")
    assert metrics.iloc[0].to_dict() == {"metric": "map", "direction": "T2I", "q": 16, "value": 1.0}
    pr = pd.read_csv(paths["pr-T2I"])
    assert list(pr.columns) == ["recall", "precision"] and len(pr) == 11
    assert "MAP=1.0000" in paths["summary"].read_text()


def test_encode_corpus_foreground_only_by_default(tiny_model, rng):
    images = rng.uniform(size=(5, 8, 8, 3))
    encoded = encode_corpus(tiny_model, images, np.arange(5), "image")
    assert encoded.background is None
    assert len(encoded.database) == 5 and encoded.database.q == 8
    assert encoded.masks.shape == (5, 4, 4)
    again = encode_corpus(tiny_model, images[[2, 2]], [0, 1], "image", with_background=True)
    np.testing.assert_array_equal(again.database.bits[0], again.database.bits[1])
    np.testing.assert_array_equal(again.database.bits[0], encoded.database.bits[2])
    assert again.background.modality == "image_bg"


def test_encode_empty_corpus(tiny_model):
    encoded = encode_corpus(tiny_model, np.zeros((0, 12)), [], "text")
    assert len(encoded.database) == 0
    assert encoded.masks.shape == (0, 5)
