import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subjfed.adversary import lie_update, random_update
from subjfed.data import make_blobs, make_ood
from subjfed.evidential import EvidentialModel, forward
from subjfed.opinion import DirichletParams
from subjfed.server import (
    AggregationError,
    FilterConfig,
    UploadBundle,
    aggregate_encoders,
    model_uncertainty,
    overflow_filter,
    robust_aggregate,
    secure_aggregate,
    similarity_filter,
)
from subjfed.special import RngStream

# Measured on the default model/holdout for seeds 0..99 (see the decisions ledger).
RANDOM_STAGE1_RATE = 0.95
RANDOM_ALL_CAUGHT_RUNS = 88


def default_holdout(seed=0):
    d = make_blobs(4, 250, 2, 0.8, RngStream.for_purpose(seed, "dataset"), 2.0)
    return make_ood(100, 2, d, RngStream.for_purpose(seed, "holdout"))


def model(seed, sizes=(2, 32, 32), k=4, scale=1.0):
    m = EvidentialModel.init(list(sizes), k, RngStream(seed))
    if scale != 1.0:
        m.set_parameter_vector(m.parameter_vector() * scale)
    return m


def scalar_bundle(cid, value, count=1):
    m = EvidentialModel.init([1, 1], 2, RngStream(0))
    m.set_encoder_vector(np.array([value, 0.0]))
    return UploadBundle(cid, m, count)


# --- plain aggregation --------------------------------------------------------------


def test_aggregate_examples():
    b = scalar_bundle(0, 3.5)
    assert np.array_equal(aggregate_encoders([b]), b.model.encoder_vector())
    assert aggregate_encoders([scalar_bundle(0, 0.0), scalar_bundle(1, 2.0)])[0] == pytest.approx(1.0)
    assert aggregate_encoders([scalar_bundle(0, 0.0, 1), scalar_bundle(1, 4.0, 3)])[0] == pytest.approx(3.0)


def test_aggregate_errors():
    with pytest.raises(AggregationError):
        aggregate_encoders([])
    with pytest.raises(AggregationError):
        aggregate_encoders([UploadBundle(0, model(0, (2, 4)), 1), UploadBundle(1, model(0, (2, 5)), 1)])
    with pytest.raises(AggregationError):
        aggregate_encoders([scalar_bundle(0, 1.0), scalar_bundle(0, 2.0)])
    with pytest.raises(AggregationError):
        UploadBundle(0, model(0), 0)


def test_aggregation_order_independent():
    bundles = [scalar_bundle(i, float(i) ** 1.5, i + 1) for i in range(6)]
    assert np.array_equal(aggregate_encoders(bundles), aggregate_encoders(bundles[::-1]))


# --- overflow ------------------------------------------------------------------------


def test_small_weight_model_is_kept():
    H = default_holdout()
    kept, rejected = overflow_filter([UploadBundle(0, model(1, scale=0.1), 5)], FilterConfig(H))
    assert len(kept) == 1 and not rejected


def test_fresh_models_pass_on_the_default_holdout():
    H = default_holdout()
    kept, rejected = overflow_filter([UploadBundle(i, model(i), 5) for i in range(20)], FilterConfig(H))
    assert not rejected


def test_one_weight_scaled_by_100_is_rejected():
    H = default_holdout()
    m = model(2)
    assert forward(m, H).max() <= FilterConfig(H).evidence_cap
    # strongest positive path into the head: hidden unit with the largest activation
    h = H
    for layer in m.encoder:
        h = np.clip(h @ layer.weight + layer.bias, 0, 6)
    contrib = h.max(axis=0)[:, None] * np.maximum(m.head.weight, 0)
    unit, cls = np.unravel_index(np.argmax(contrib), contrib.shape)
    m.head.weight[unit, cls] *= 100
    _, rejected = overflow_filter([UploadBundle(0, m, 5)], FilterConfig(H))
    assert len(rejected) == 1 and rejected[0].stage == "overflow"


def test_non_finite_upload_is_rejected():
    H = default_holdout()
    m = model(3)
    m.encoder[0].weight[0, 0] = np.nan
    _, rejected = overflow_filter([UploadBundle(0, m, 5)], FilterConfig(H))
    assert rejected and "non-finite" in rejected[0].reason


def test_random_uploads_mostly_rejected_at_stage_one():
    H = default_holdout()
    template = model(0)
    caught = 0
    for seed in range(100):
        m = template.copy()
        m.set_parameter_vector(random_update(m.parameter_vector(), 1.0, RngStream(seed)))
        caught += len(overflow_filter([UploadBundle(seed, m, 5)], FilterConfig(H))[1])
    assert caught / 100 >= RANDOM_STAGE1_RATE


def test_random_attackers_caught_at_stage_one_in_a_round():
    H = default_holdout()
    runs = 0
    for seed in range(100):
        benign = _benign_population(seed)
        attackers = []
        for j in range(3):
            m = benign[0].model.copy()
            m.set_parameter_vector(random_update(m.parameter_vector(), 1.0, RngStream.for_purpose(seed, "rand", j)))
            attackers.append(UploadBundle(100 + j, m, 10))
        _, audit = secure_aggregate(benign + attackers, FilterConfig(H))
        stages = {r.client_id: r.stage for r in audit.rejections}
        runs += all(stages.get(100 + j) == "overflow" for j in range(3))
    assert runs >= RANDOM_ALL_CAUGHT_RUNS


# --- model uncertainty ---------------------------------------------------------------


def test_model_uncertainty_zero_against_itself():
    H = default_holdout()[:10]
    b = UploadBundle(0, model(4), 3)
    ref = forward(b.model, H) + b.model.prior_weight * b.model.prior
    assert model_uncertainty(b, ref, H) == pytest.approx(0.0, abs=1e-12)
    twin = UploadBundle(1, b.model.copy(), 3)
    assert model_uncertainty(twin, ref, H) == model_uncertainty(b, ref, H)


def test_model_uncertainty_hand_example():
    # scores fixed so every holdout sample gives alpha = (2, 1) against reference (1, 1)
    m = EvidentialModel.init([1, 1], 2, RngStream(0), prior=[0.5, 0.5], prior_weight=2.0)
    m.set_parameter_vector(np.zeros(m.parameter_vector().size))
    m.head.bias[:] = [0.0, -m.score_clamp - 50]
    H = np.array([[0.3], [-1.2]])
    ref = [DirichletParams([1.0, 1.0])] * 2
    expected = math.log(2) - 0.5
    # the second class's evidence is exp(-clamp), not exactly 0
    assert model_uncertainty(UploadBundle(0, m, 1), ref, H) == pytest.approx(expected, abs=1e-9)


def test_model_uncertainty_reference_length_checked():
    with pytest.raises(AggregationError):
        model_uncertainty(UploadBundle(0, model(0), 1), np.ones((3, 4)), default_holdout()[:5])


# --- similarity ----------------------------------------------------------------------


def _benign_population(seed, n=7, jitter=0.05):
    # a shared starting point plus client drift, like one round of local training
    base = model(seed, scale=0.5)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        m = base.copy()
        v = m.parameter_vector()
        m.set_parameter_vector(v + jitter * rng.standard_normal(v.size))
        out.append(UploadBundle(i, m, 10 + i))
    return out


def test_distinct_uploads_are_all_kept():
    H = default_holdout()
    kept, rejected, scores, _ = similarity_filter(_benign_population(0), FilterConfig(H))
    assert len(kept) == 7 and not rejected
    assert len(scores) == 7


def test_tau_boundary():
    H = default_holdout()
    bundles = _benign_population(1, 2)
    _, _, scores, _ = similarity_filter(bundles, FilterConfig(H))
    gap = abs(scores[0] - scores[1])
    _, rejected, _, _ = similarity_filter(bundles, FilterConfig(H, similarity_tau=gap / 2))
    assert not rejected
    _, rejected, _, warnings = similarity_filter(bundles, FilterConfig(H, similarity_tau=gap * 2))
    # both would go, so the median-U one is spared and a warning recorded
    assert len(rejected) == 1 and warnings


def test_lie_colluders_are_grouped_and_rejected():
    H = default_holdout()
    hits = 0
    for seed in range(100):
        benign = _benign_population(seed)
        vec = lie_update([b.model.parameter_vector() for b in benign], 1.5)
        colluders = []
        for j in range(3):
            m = benign[0].model.copy()
            m.set_parameter_vector(vec)
            colluders.append(UploadBundle(100 + j, m, 10))
        _, audit = secure_aggregate(benign + colluders, FilterConfig(H))
        stages = {r.client_id: r.stage for r in audit.rejections}
        if all(stages.get(100 + j) == "similarity" for j in range(3)) and not set(stages) - {100, 101, 102}:
            hits += 1
    assert hits >= 95


def test_all_similar_keeps_median():
    H = default_holdout()
    m = model(5, scale=0.5)
    bundles = [UploadBundle(i, m.copy(), 3) for i in range(3)]
    kept, rejected, _, warnings = similarity_filter(bundles, FilterConfig(H))
    assert [b.client_id for b in kept] == [1] and len(rejected) == 2 and warnings


@given(st.permutations(list(range(7))))
def test_filter_partition_is_order_insensitive(perm):
    H = default_holdout()[:30]
    bundles = _benign_population(2)
    twin = bundles[3].model.copy()
    bundles.append(UploadBundle(50, twin, 10))
    shuffled = [bundles[i] for i in perm] + [bundles[7]]
    _, a = secure_aggregate(bundles, FilterConfig(H))
    _, b = secure_aggregate(shuffled, FilterConfig(H))
    assert a.rejected_ids == b.rejected_ids == {3, 50}


# --- secure aggregation ----------------------------------------------------------------


def test_all_benign_round_equals_weighted_mean():
    H = default_holdout()
    bundles = _benign_population(3)
    agg, audit = secure_aggregate(bundles, FilterConfig(H))
    assert not audit.rejections
    assert np.array_equal(agg, aggregate_encoders(bundles))


def test_disabled_filters_match_fedavg_bit_for_bit():
    H = default_holdout()
    bundles = _benign_population(4)
    m = model(9)
    m.set_parameter_vector(random_update(m.parameter_vector(), 5.0, RngStream(0)))
    bundles.append(UploadBundle(77, m, 4))
    cfg = FilterConfig(H, overflow_enabled=False, similarity_enabled=False)
    agg, audit = secure_aggregate(bundles, cfg)
    assert np.array_equal(agg, robust_aggregate(bundles, "fedavg")) and not audit.rejections


def test_everything_overflowing_falls_back():
    H = default_holdout()
    m = model(0)
    m.head.bias[:] = 100.0
    prev = np.arange(m.encoder_size, dtype=float)
    agg, audit = secure_aggregate([UploadBundle(0, m, 1)], FilterConfig(H), fallback=prev)
    assert np.array_equal(agg, prev) and audit.warnings
    with pytest.raises(AggregationError):
        secure_aggregate([UploadBundle(0, m, 1)], FilterConfig(H))


@pytest.mark.parametrize(
    "kwargs", [dict(holdout=np.zeros((0, 2))), dict(evidence_cap=0.0), dict(similarity_tau=-1.0), dict(min_cluster=1)]
)
def test_filter_config_validation(kwargs):
    base = dict(holdout=np.zeros((3, 2)))
    base.update(kwargs)
    with pytest.raises(AggregationError):
        FilterConfig(**base)


# --- baselines -----------------------------------------------------------------------------


def test_median_and_trimmed_mean_examples():
    bundles = [scalar_bundle(i, v) for i, v in enumerate([1.0, 2.0, 100.0])]
    assert robust_aggregate(bundles, "median")[0] == 2.0
    bundles = [scalar_bundle(i, v) for i, v in enumerate([1.0, 2.0, 3.0, 100.0])]
    assert robust_aggregate(bundles, "trimmed_mean", trim=1)[0] == 2.5
    with pytest.raises(AggregationError):
        robust_aggregate(bundles, "trimmed_mean", trim=2)


def _brute_krum(points, f):
    best, best_score = None, math.inf
    for i, p in enumerate(points):
        d = sorted(float(np.sum((p - q) ** 2)) for j, q in enumerate(points) if j != i)
        s = sum(d[: len(points) - f - 2])
        if s < best_score:
            best, best_score = i, s
    return best


def test_krum_picks_a_clustered_update():
    rng = np.random.default_rng(0)
    values = list(rng.normal(0, 0.01, 5)) + [1e6]
    bundles = [scalar_bundle(i, v) for i, v in enumerate(values)]
    chosen = robust_aggregate(bundles, "krum", num_attackers=1)
    points = [b.model.encoder_vector() for b in bundles]
    assert np.array_equal(chosen, points[_brute_krum(points, 1)])
    assert abs(chosen[0]) < 1
    mk = robust_aggregate(bundles, "multi_krum", num_attackers=1, multi_krum_m=3)
    assert abs(mk[0]) < 1
    with pytest.raises(AggregationError):
        robust_aggregate(bundles[:4], "krum", num_attackers=1)


def test_norm_clip_bounds_each_update():
    bundles = [scalar_bundle(0, 1.0), scalar_bundle(1, -1.0), scalar_bundle(2, 50.0)]
    out = robust_aggregate(bundles, "norm_clip", clip_norm=1.0)
    assert out[0] == pytest.approx(1 / 3)
    # default clip is the median update norm
    assert robust_aggregate(bundles, "norm_clip")[0] == pytest.approx(1 / 3)


def test_unknown_rule():
    with pytest.raises(AggregationError):
        robust_aggregate([scalar_bundle(0, 1.0)], "mean")
