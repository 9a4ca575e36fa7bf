import math

import numpy as np
import pytest

from ensemble_reid import (
    DistanceMatrix,
    EvalReport,
    RerankParams,
    cosine_distance,
    euclidean_distance,
    evaluate,
    evaluate_features,
    rerank,
)

from oracles import oracle_protocol, oracle_rerank


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def test_cosine_distance_reference_points():
    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = np.array([[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    d = cosine_distance(q, g)
    assert d.metric_tag == "cosine"
    np.testing.assert_allclose(d.values, [[0.0, 1.0, 2.0], [1.0, 0.0, 1.0]], atol=1e-12)


def test_cosine_distance_scale_invariance():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(4, 8))
    g = rng.normal(size=(6, 8))
    base = cosine_distance(q, g).values
    q_scaled = q.copy()
    q_scaled[2] *= 3.0
    scaled = cosine_distance(q_scaled, g).values
    np.testing.assert_allclose(scaled, base, atol=1e-6)


def test_cosine_distance_zero_diagonal_and_range():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(5, 4))
    d = cosine_distance(q, q).values
    np.testing.assert_allclose(np.diag(d), 0.0, atol=1e-6)
    assert d.min() >= 0.0 and d.max() <= 2.0


def test_cosine_distance_zero_norm_row_named():
    q = np.array([[1.0, 0.0], [0.0, 0.0]])
    g = np.array([[1.0, 0.0]])
    with pytest.raises(ValueError, match="query row 1"):
        cosine_distance(q, g)
    with pytest.raises(ValueError, match="gallery row 0"):
        cosine_distance(g, np.zeros((1, 2)))


def test_cosine_distance_shape_checks():
    with pytest.raises(ValueError, match="dimension"):
        cosine_distance(np.ones((2, 3)), np.ones((2, 4)))


def test_euclidean_distance_matches_norm():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(3, 5))
    g = rng.normal(size=(4, 5))
    d = euclidean_distance(q, g).values
    for i in range(3):
        for j in range(4):
            assert d[i, j] == pytest.approx(np.linalg.norm(q[i] - g[j]), abs=1e-10)


def test_distance_matrix_validation():
    with pytest.raises(ValueError, match="metric_tag"):
        DistanceMatrix(np.zeros((2, 2)), "manhattan")
    with pytest.raises(ValueError, match="2-D"):
        DistanceMatrix(np.zeros(4), "cosine")


# ---------------------------------------------------------------------------
# the retrieval protocol
# ---------------------------------------------------------------------------

def test_evaluate_hand_worked_ap():
    # one query, three valid cross-camera entries, relevance (1, 0, 1) in rank
    # order: AP = (1/1 + 2/3) / 2
    dist = [[0.1, 0.2, 0.3]]
    report = evaluate(dist, [5], [1], [5, 7, 5], [2, 2, 2], ranks=(1, 2, 3))
    assert report.mAP == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-9)
    assert report.cmc == {1: 1.0, 2: 1.0, 3: 1.0}
    assert report.num_valid_queries == 1


def test_evaluate_same_camera_entry_excluded():
    # the same-camera true match at the best distance must not be counted
    dist = [[0.1, 0.2, 0.3]]
    report = evaluate(dist, [5], [1], [5, 5, 9], [1, 2, 2], ranks=(1,))
    assert report.mAP == pytest.approx(1.0)
    assert report.cmc[1] == pytest.approx(1.0)


def test_evaluate_junk_is_invisible():
    # junk ranks first but is removed before scoring
    dist = [[0.01, 0.2, 0.3]]
    report = evaluate(dist, [5], [1], [-1, 5, 7], [2, 2, 2], ranks=(1,))
    assert report.mAP == pytest.approx(1.0)


def test_evaluate_distractor_is_a_real_non_match():
    # the distractor (id 0) outranks the true match and costs precision
    dist = [[0.1, 0.2]]
    report = evaluate(dist, [5], [1], [0, 5], [2, 2], ranks=(1, 2))
    assert report.mAP == pytest.approx(0.5)
    assert report.cmc == {1: 0.0, 2: 1.0}


def test_evaluate_perfect_ranking():
    rng = np.random.default_rng(3)
    g_ids = np.repeat(np.arange(1, 5), 2)
    g_cams = np.tile([1, 2], 4)
    q_ids = np.arange(1, 5)
    q_cams = np.full(4, 3)
    dist = np.where(q_ids[:, None] == g_ids[None, :], 0.0, 1.0)
    dist = dist + rng.random(dist.shape) * 1e-6  # break ties arbitrarily
    report = evaluate(dist, q_ids, q_cams, g_ids, g_cams, ranks=(1, 2, 5))
    assert report.mAP == pytest.approx(1.0)
    assert all(v == pytest.approx(1.0) for v in report.cmc.values())


def test_evaluate_drops_uncovered_queries():
    dist = [[0.1, 0.2], [0.3, 0.4]]
    # query 9 has no gallery entry of its id at another camera
    report = evaluate(dist, [5, 9], [1, 1], [5, 9], [2, 1], ranks=(1,))
    assert report.num_valid_queries == 1
    assert report.num_dropped_queries == 1
    assert report.mAP == pytest.approx(1.0)


def test_evaluate_all_queries_dropped_is_nan():
    report = evaluate([[0.5]], [9], [1], [3], [1], ranks=(1, 5))
    assert report.num_valid_queries == 0
    assert report.num_dropped_queries == 1
    assert math.isnan(report.mAP)
    assert all(math.isnan(v) for v in report.cmc.values())


def test_evaluate_ties_break_toward_lower_gallery_index():
    # two entries at identical distance: the non-match sits at index 0, so it
    # is ranked first and the true match contributes precision 1/2
    dist = [[0.5, 0.5]]
    report = evaluate(dist, [5], [1], [7, 5], [2, 2], ranks=(1,))
    assert report.mAP == pytest.approx(0.5)
    # flipping the order flips the outcome
    report2 = evaluate(dist, [5], [1], [5, 7], [2, 2], ranks=(1,))
    assert report2.mAP == pytest.approx(1.0)


def test_evaluate_invariant_under_monotone_row_transforms():
    rng = np.random.default_rng(4)
    dist = rng.random((5, 9))
    q_ids = rng.integers(1, 4, 5)
    q_cams = rng.integers(1, 4, 5)
    g_ids = rng.integers(0, 4, 9)
    g_cams = rng.integers(1, 4, 9)
    base = evaluate(dist, q_ids, q_cams, g_ids, g_cams, ranks=(1, 3))
    for transform in (lambda d: 2.0 * d + 1.0, np.exp, lambda d: d**3):
        other = evaluate(transform(dist), q_ids, q_cams, g_ids, g_cams, ranks=(1, 3))
        assert other.mAP == pytest.approx(base.mAP, abs=1e-12)
        assert other.cmc == base.cmc


def test_evaluate_metadata_shape_checks():
    with pytest.raises(ValueError, match="query metadata"):
        evaluate([[0.1]], [1, 2], [1, 2], [1], [1])
    with pytest.raises(ValueError, match="gallery metadata"):
        evaluate([[0.1]], [1], [1], [1, 2], [1, 2])
    with pytest.raises(ValueError, match="ranks"):
        evaluate([[0.1]], [1], [1], [1], [1], ranks=())


def _random_protocol_instance(rng):
    n_q = int(rng.integers(1, 5))
    n_g = int(rng.integers(1, 9))
    q_ids = rng.integers(1, 4, n_q)
    q_cams = rng.integers(1, 4, n_q)
    g_ids = rng.integers(-1, 4, n_g)
    g_cams = rng.integers(1, 4, n_g)
    if rng.random() < 0.5:
        dist = rng.random((n_q, n_g))
    else:
        dist = rng.integers(0, 4, (n_q, n_g)) / 3.0  # deliberate ties
    return dist, q_ids, q_cams, g_ids, g_cams


def test_evaluate_matches_brute_force_oracle():
    rng = np.random.default_rng(2026)
    ranks = (1, 2, 5)
    for _ in range(200):
        dist, q_ids, q_cams, g_ids, g_cams = _random_protocol_instance(rng)
        report = evaluate(dist, q_ids, q_cams, g_ids, g_cams, ranks)
        o_map, o_cmc, o_valid, o_dropped = oracle_protocol(
            dist, q_ids, q_cams, g_ids, g_cams, ranks)
        assert report.num_valid_queries == o_valid
        assert report.num_dropped_queries == o_dropped
        if o_valid == 0:
            assert math.isnan(report.mAP)
            continue
        assert abs(report.mAP - o_map) <= 1e-9
        for k in ranks:
            assert abs(report.cmc[k] - o_cmc[k]) <= 1e-9


def test_cmc_is_non_decreasing():
    rng = np.random.default_rng(5)
    for _ in range(30):
        dist, q_ids, q_cams, g_ids, g_cams = _random_protocol_instance(rng)
        report = evaluate(dist, q_ids, q_cams, g_ids, g_cams, ranks=(1, 2, 3, 5, 8))
        if report.num_valid_queries == 0:
            continue
        values = [report.cmc[k] for k in sorted(report.cmc)]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))
        assert values[-1] <= 1.0 and values[0] >= 0.0


def test_cmc_saturates_at_gallery_size():
    dist = [[0.3, 0.2, 0.9], [0.8, 0.1, 0.4]]
    report = evaluate(dist, [1, 2], [1, 1], [1, 2, 3], [2, 2, 2], ranks=(3,))
    assert report.cmc[3] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# the report object
# ---------------------------------------------------------------------------

def test_eval_report_text_round_trip():
    report = EvalReport(mAP=0.8125, cmc={1: 0.75, 5: 1.0},
                        num_valid_queries=16, num_dropped_queries=2)
    parsed = EvalReport.from_text(report.to_text())
    assert parsed == report


def test_eval_report_csv_shape(tmp_path):
    report = EvalReport(mAP=0.5, cmc={1: 0.25, 10: 0.75},
                        num_valid_queries=4, num_dropped_queries=0)
    path = tmp_path / "report.csv"
    report.to_csv(path)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    assert lines[0] == "mAP,cmc_1,cmc_10,num_valid_queries,num_dropped_queries"
    assert lines[1].split(",")[0] == repr(0.5)


# ---------------------------------------------------------------------------
# re-ranking
# ---------------------------------------------------------------------------

def _rerank_instance(rng, max_gallery=10):
    n_q = int(rng.integers(1, 4))
    n_g = int(rng.integers(2, max_gallery + 1))
    q = rng.normal(size=(n_q, 5))
    g = rng.normal(size=(n_g, 5))
    d_qg = cosine_distance(q, g).values
    d_qq = cosine_distance(q, q).values
    d_gg = cosine_distance(g, g).values
    return d_qg, d_qq, d_gg


def test_rerank_lambda_one_returns_input_exactly():
    rng = np.random.default_rng(6)
    d_qg, d_qq, d_gg = _rerank_instance(rng)
    out = rerank(d_qg, d_qq, d_gg, RerankParams(k1=3, k2=2, lambda_value=1.0))
    assert out.metric_tag == "reranked"
    np.testing.assert_array_equal(out.values, d_qg)


def test_rerank_lambda_zero_is_pure_jaccard():
    rng = np.random.default_rng(7)
    d_qg, d_qq, d_gg = _rerank_instance(rng)
    out = rerank(d_qg, d_qq, d_gg, RerankParams(k1=3, k2=2, lambda_value=0.0))
    expected = oracle_rerank(d_qg, d_qq, d_gg, k1=3, k2=2, lam=0.0)
    np.testing.assert_allclose(out.values, expected, atol=1e-6)


def test_rerank_spec_sized_instance():
    rng = np.random.default_rng(8)
    q = rng.normal(size=(2, 4))
    g = rng.normal(size=(4, 4))
    d_qg = cosine_distance(q, g).values
    d_qq = cosine_distance(q, q).values
    d_gg = cosine_distance(g, g).values
    out = rerank(d_qg, d_qq, d_gg, RerankParams(k1=2, k2=1, lambda_value=0.3))
    expected = oracle_rerank(d_qg, d_qq, d_gg, k1=2, k2=1, lam=0.3)
    np.testing.assert_allclose(out.values, expected, atol=1e-6)


def test_rerank_matches_brute_force_oracle():
    rng = np.random.default_rng(2027)
    checked = 0
    while checked < 60:
        d_qg, d_qq, d_gg = _rerank_instance(rng)
        m = d_qg.shape[0] + d_qg.shape[1]
        k1 = int(rng.integers(1, min(7, m)))
        k2 = int(rng.integers(1, k1 + 1))
        lam = float(rng.choice([0.0, 0.3, 0.7, 1.0]))
        out = rerank(d_qg, d_qq, d_gg, RerankParams(k1=k1, k2=k2, lambda_value=lam))
        expected = oracle_rerank(d_qg, d_qq, d_gg, k1=k1, k2=k2, lam=lam)
        np.testing.assert_allclose(out.values, expected, atol=1e-6)
        assert np.isfinite(out.values).all()
        checked += 1


def test_rerank_oversized_k1_clipped_with_warning():
    rng = np.random.default_rng(9)
    d_qg, d_qq, d_gg = _rerank_instance(rng, max_gallery=4)
    m = d_qg.shape[0] + d_qg.shape[1]
    with pytest.warns(UserWarning, match="clipping"):
        out = rerank(d_qg, d_qq, d_gg, RerankParams(k1=50, k2=3, lambda_value=0.3))
    expected = oracle_rerank(d_qg, d_qq, d_gg, k1=m - 1, k2=3, lam=0.3)
    np.testing.assert_allclose(out.values, expected, atol=1e-6)


def test_rerank_block_shape_validation():
    with pytest.raises(ValueError, match="query-query"):
        rerank(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="gallery-gallery"):
        rerank(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))


def test_rerank_params_validation():
    with pytest.raises(ValueError, match="k1"):
        RerankParams(k1=0)
    with pytest.raises(ValueError, match="k2"):
        RerankParams(k1=2, k2=3)
    with pytest.raises(ValueError, match="k2"):
        RerankParams(k1=2, k2=0)
    with pytest.raises(ValueError, match="lambda"):
        RerankParams(lambda_value=1.5)
    assert RerankParams.from_dict(RerankParams(k1=5, k2=2).to_dict()).k1 == 5


# ---------------------------------------------------------------------------
# the combined helper
# ---------------------------------------------------------------------------

def test_evaluate_features_baseline_and_reranked(desk_features):
    query, gallery = desk_features
    baseline, skipped = evaluate_features(query, gallery, ranks=(1, 5))
    assert skipped is None
    assert 0.0 <= baseline.mAP <= 1.0
    params = RerankParams(k1=5, k2=2, lambda_value=1.0)
    again, reranked = evaluate_features(query, gallery, ranks=(1, 5), rerank_params=params)
    assert again.mAP == baseline.mAP
    # lambda = 1 keeps the original distances, hence the identical report
    assert reranked.mAP == baseline.mAP
    assert reranked.cmc == baseline.cmc
