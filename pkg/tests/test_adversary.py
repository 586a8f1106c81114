import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subjfed.adversary import (
    AttackConfig,
    AttackError,
    label_flip,
    lie_update,
    mpaf_update,
    random_update,
    select_malicious,
    stat_opt_search,
    stat_opt_update,
)
from subjfed.data import LabeledDataset
from subjfed.special import RngStream


def test_label_flip_map_and_involution():
    d = LabeledDataset(np.zeros((4, 1)), np.array([0, 1, 2, 3]), 4)
    flipped = label_flip(d)
    assert list(flipped.labels) == [3, 2, 1, 0]
    assert list(label_flip(flipped).labels) == [0, 1, 2, 3]
    assert np.array_equal(flipped.features, d.features)
    assert list(d.labels) == [0, 1, 2, 3]


def test_label_flip_swaps_binary_counts():
    d = LabeledDataset(np.zeros((5, 2)), np.array([0, 0, 0, 1, 1]), 2)
    assert list(label_flip(d).class_counts()) == [2, 3]


def test_random_update_properties():
    template = np.full(100_000, 7.0)
    tiny = random_update(template[:50], 1e-8, RngStream(0))
    assert np.max(np.abs(tiny)) < 1e-6
    a = random_update(template, 2.0, RngStream(1))
    assert np.array_equal(a, random_update(template, 2.0, RngStream(1)))
    n = a.size
    # standard error of the sample std for Gaussian data is sigma / sqrt(2n)
    assert abs(a.std() - 2.0) <= 3 * 2.0 / np.sqrt(2 * n)
    with pytest.raises(AttackError):
        random_update(template, 0.0, RngStream(0))


def test_lie_examples():
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(lie_update([v, v, v], 1.5), v)
    benign = [np.array([0.0, 4.0]), np.array([2.0, 8.0])]
    assert np.allclose(lie_update(benign, 0.0), [1.0, 6.0])
    assert np.allclose(lie_update([np.array([0.0]), np.array([2.0])], 1.0), [2.0])
    with pytest.raises(AttackError):
        lie_update([v], 1.0)


def test_mpaf_examples():
    g = np.array([1.0, 2.0])
    assert np.array_equal(mpaf_update(g, np.array([5.0, 5.0]), 0.0), [0.0, 0.0])
    assert np.array_equal(mpaf_update(g, g, 100.0), [0.0, 0.0])
    assert np.allclose(mpaf_update(np.zeros(2), np.array([1.0, -1.0]), 2.0), [2.0, -2.0])
    with pytest.raises(AttackError):
        mpaf_update(g, np.zeros(3), 1.0)


def test_stat_opt_examples():
    benign = [np.array([1.0, -1.0]), np.array([3.0, -3.0])]
    assert np.allclose(stat_opt_update(benign, 0.0), [2.0, -2.0])
    assert np.allclose(stat_opt_update([np.array([1.0]), np.array([3.0])], 1.0), [1.0])
    assert np.allclose(stat_opt_update(benign, 1.0), [1.0, -1.0])
    same = [np.array([4.0, -1.0])] * 3
    assert np.allclose(stat_opt_update(same, 50.0), [4.0, -1.0])


def test_stat_opt_search_picks_largest_surviving_gamma():
    benign = [np.array([1.0]), np.array([3.0])]  # mean 2, std 1
    gamma, vec = stat_opt_search(benign, lambda v: abs(v[0] - 2.0) <= 0.7, 0.01, 100.0)
    assert gamma == pytest.approx(0.64)
    assert vec == pytest.approx([2.0 - 0.64])
    gamma, _ = stat_opt_search(benign, lambda v: True, 0.01, 100.0)
    assert gamma == pytest.approx(0.01 * 2**13)
    gamma, _ = stat_opt_search(benign, lambda v: False, 0.01, 100.0)
    assert gamma == 0.01


@given(st.integers(0, 2**32), st.integers(2, 50), st.floats(0.0, 0.5))
def test_malicious_selection(seed, N, ratio):
    chosen = select_malicious(seed, N, ratio)
    assert len(chosen) == int(np.floor(N * ratio + 1e-9))
    assert chosen == select_malicious(seed, N, ratio)
    assert all(0 <= i < N for i in chosen)


def test_selection_nested_across_ratios():
    small = select_malicious(3, 10, 0.2)
    assert small <= select_malicious(3, 10, 0.4)


def test_attack_config_validation():
    assert not AttackConfig("random", 0.0).active
    assert not AttackConfig("none", 0.3).active
    assert AttackConfig("lie", 0.3).active
    for kwargs in (dict(kind="bogus"), dict(malicious_ratio=1.0), dict(lambda_scale=0.0), dict(noise_sigma=-1.0)):
        with pytest.raises(AttackError):
            AttackConfig(**kwargs)


def test_injectors_do_not_mutate_inputs():
    benign = [np.array([1.0, 2.0]), np.array([3.0, 5.0])]
    copies = [b.copy() for b in benign]
    lie_update(benign, 2.0)
    stat_opt_update(benign, 2.0)
    mpaf_update(benign[0], benign[1], 3.0)
    assert all(np.array_equal(a, b) for a, b in zip(benign, copies))
