import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhtn.errors import DataError
from mhtn.retrieval import (
    average_precision,
    cosine_matrix,
    cosine_similarity,
    evaluate_all,
    evaluate_task,
    read_results,
    write_pr_curves,
    write_results,
)


def ap_loop(rel, R):
    """Literal loop over the AP definition."""
    if R == 0:
        return 0.0
    total, hits = 0.0, 0
    for k in range(1, len(rel) + 1):
        hits += rel[k - 1]
        if rel[k - 1]:
            total += hits / k
    return total / R


def test_cosine_examples():
    assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([0.0, 0.0], [0.0, 1.0]) == 0.0
    with pytest.raises(DataError):
        cosine_similarity([1.0], [1.0, 2.0])


def test_cosine_matches_direct_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(30, 6)), rng.normal(size=(30, 6))
    for x, y in zip(a, b):
        expected = float(np.dot(x, y) / (np.sqrt(np.dot(x, x)) * np.sqrt(np.dot(y, y))))
        assert cosine_similarity(x, y) == pytest.approx(expected, abs=1e-12)
    m = cosine_matrix(a, b)
    assert m[3, 7] == pytest.approx(cosine_similarity(a[3], b[7]), abs=1e-12)


def test_ap_examples():
    assert average_precision([1, 1, 1, 1]) == 1.0
    assert average_precision([1, 0, 1], 2) == pytest.approx(0.833333, abs=1e-6)
    assert average_precision([0, 1], 1) == 0.5
    assert average_precision([0, 0], 0) == 0.0
    with pytest.raises(DataError):
        average_precision([1, 1], 1)


def test_ap_matches_loop_on_1000_lists():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        rel = (rng.random(n) < rng.random()).astype(int).tolist()
        R = sum(rel) + int(rng.integers(0, 3))
        assert average_precision(rel, R) == ap_loop(rel, R)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=60))
def test_ap_in_unit_interval(rel):
    ap = average_precision(rel)
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(ap_loop(rel, sum(rel)), abs=1e-15)


def test_all_relevant_gallery_map_one():
    rng = np.random.default_rng(1)
    res = evaluate_task(rng.random((5, 3)), np.zeros(5), rng.random((7, 3)), np.zeros(7))
    assert res.map == 1.0
    np.testing.assert_array_equal(res.precision, np.ones(11))


def test_handcrafted_two_class_case():
    query = np.array([[1.0, 0.0]])
    gallery = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]])
    # cosines 0.994, 0.243, 0.832, 0.110 -> ranking 0, 2, 1, 3 -> relevance 1, 0, 0, 1
    res = evaluate_task(query, [0], gallery, [0, 1, 1, 0])
    assert res.map == pytest.approx((1 / 1 + 2 / 4) / 2)
    np.testing.assert_allclose(res.precision, [1.0] * 6 + [0.5] * 5)


def test_ties_broken_by_ascending_gallery_id():
    q = np.array([[1.0, 0.0]])
    g = np.array([[1.0, 0.0], [1.0, 0.0]])
    labels = [0, 1]
    assert evaluate_task(q, [0], g, labels, gallery_ids=[5, 2]).map == 0.5  # id 2 (irrelevant) first
    assert evaluate_task(q, [0], g, labels, gallery_ids=[2, 5]).map == 1.0


def test_random_embeddings_map_near_chance():
    c, n = 4, 240
    maps = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(c), n // c)
        res = evaluate_task(rng.random((n, c)), labels, rng.random((n, c)), labels)
        maps.append(res.map)
    assert abs(np.mean(maps) - 1 / c) < 0.1


def test_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    q, g = rng.random((10, 4)), rng.random((25, 4))
    ql, gl = rng.integers(0, 3, 10), rng.integers(0, 3, 25)
    base = evaluate_task(q, ql, g, gl)
    # scaling each vector leaves cosines unchanged; the kernel sees only the ranking
    scaled = evaluate_task(q * 7.5, ql, g * rng.uniform(0.1, 9, (25, 1)), gl)
    assert scaled.map == base.map
    from mhtn import kernels

    sims = cosine_matrix(q, g)
    ap1, _ = kernels.rank_metrics(sims, ql, gl)
    ap2, _ = kernels.rank_metrics(np.exp(3 * sims) - 2, ql, gl)
    np.testing.assert_array_equal(ap1, ap2)


def test_worker_count_does_not_change_results():
    rng = np.random.default_rng(4)
    emb = {m: rng.random((30, 5)) for m in ("a", "b", "c")}
    lab = {m: rng.integers(0, 5, 30) for m in emb}
    one = evaluate_all(emb, lab, workers=1)
    four = evaluate_all(emb, lab, workers=4)
    for key in one.tasks:
        np.testing.assert_array_equal(one[key].ap, four[key].ap)
        np.testing.assert_array_equal(one[key].precision, four[key].precision)


def test_task_counts_and_average():
    rng = np.random.default_rng(5)
    two = evaluate_all({m: rng.random((6, 3)) for m in "ab"}, {m: rng.integers(0, 3, 6) for m in "ab"})
    assert len(two) == 2
    mods = ["image", "text", "audio", "video", "model"]
    five = evaluate_all({m: rng.random((6, 3)) for m in mods}, {m: rng.integers(0, 3, 6) for m in mods})
    assert len(five) == 20
    assert five.average == pytest.approx(sum(t.map for t in five.tasks.values()) / 20, abs=1e-12)
    with pytest.raises(DataError):
        evaluate_all({"a": rng.random((3, 3))}, {"a": np.zeros(3)})


def test_empty_query_set():
    with pytest.raises(DataError):
        evaluate_task(np.zeros((0, 3)), [], np.ones((2, 3)), [0, 1])


def test_pr_curve_shape():
    rng = np.random.default_rng(6)
    res = evaluate_task(rng.random((8, 3)), rng.integers(0, 3, 8), rng.random((12, 3)), rng.integers(0, 3, 12))
    np.testing.assert_allclose(res.recall, np.linspace(0, 1, 11))
    assert np.all(np.diff(res.precision) <= 1e-15)
    assert np.all((res.precision >= 0) & (res.precision <= 1))


def test_results_files(tmp_path):
    rng = np.random.default_rng(7)
    matrix = evaluate_all({m: rng.random((6, 3)) for m in "ab"}, {m: rng.integers(0, 2, 6) for m in "ab"})
    write_results(tmp_path / "r.tsv", matrix, {"seed": 3})
    text = (tmp_path / "r.tsv").read_text()
    assert text.startswith("# seed=3\nquery_modality\tgallery_modality\tmap\tqueries\n")
    back = read_results(tmp_path / "r.tsv")
    assert back[("a", "b")] == matrix[("a", "b")].map
    assert back[("average", "average")] == matrix.average
    paths = write_pr_curves(tmp_path / "pr", matrix)
    assert sorted(p.name for p in paths) == ["pr_a_b.tsv", "pr_b_a.tsv"]
    assert len(paths[0].read_text().splitlines()) == 12
