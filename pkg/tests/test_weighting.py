import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prepo.rollout import Rollout
from prepo.weighting import (
    DegenerateEntropyError,
    EntropyWeights,
    batch_mean_entropy,
    effective_batch_size,
    relative_weights,
    sequence_entropy,
    weight_histogram,
    weight_sensitivity,
)


def make_rollout(entropies, pid=0):
    n = len(entropies)
    return Rollout(pid, (1, 2), tuple([3] * n), np.zeros(n), np.asarray(entropies, dtype=float))


def random_batch(rng, B=None, max_len=12, low=0.05, high=2.3):
    B = B if B is not None else int(rng.integers(2, 17))
    return [make_rollout(rng.uniform(low, high, int(rng.integers(1, max_len + 1)))) for _ in range(B)]


def shifted(batch, j, delta):
    out = list(batch)
    out[j] = batch[j].with_entropies(batch[j].token_entropies + delta)
    return out


def fd_sensitivity(batch, i, j, mode, h=1e-6):
    up = relative_weights(shifted(batch, j, h), mode).weights[i]
    down = relative_weights(shifted(batch, j, -h), mode).weights[i]
    return (up - down) / (2 * h)


def test_sequence_entropy_examples():
    assert sequence_entropy(make_rollout([math.log(10)] * 4)) == pytest.approx(math.log(10), rel=1e-15)
    assert sequence_entropy(make_rollout([0.0, 2.0])) == 1.0
    rng = np.random.default_rng(0)
    h = rng.uniform(0, 2, 5)
    assert sequence_entropy(make_rollout(h)) == pytest.approx(math.fsum(h) / 5, abs=1e-12)


def test_rollout_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        make_rollout([])
    with pytest.raises(ValueError):
        Rollout(0, (1,), (3, 3), np.zeros(1), np.zeros(2))
    with pytest.raises(ValueError):
        make_rollout([-0.1])


def test_batch_mean_modes_hand_case():
    # lengths {1, 3}, mean entropies {3.0, 1.0}: 4 tokens totalling 6
    batch = [make_rollout([3.0]), make_rollout([1.0, 1.0, 1.0])]
    assert batch_mean_entropy(batch, "sequence_mean") == 2.0
    assert batch_mean_entropy(batch, "token_weighted") == 1.5


def test_modes_agree_on_equal_lengths():
    rng = np.random.default_rng(1)
    batch = [make_rollout(rng.uniform(0, 2, 4)) for _ in range(6)]
    a = batch_mean_entropy(batch, "sequence_mean")
    b = batch_mean_entropy(batch, "token_weighted")
    assert a == b


def test_single_rollout_weight_is_one():
    for mode in ("sequence_mean", "token_weighted"):
        w = relative_weights([make_rollout([0.3, 0.9, 0.1])], mode)
        assert w.weights.tolist() == [1.0]
        assert w.batch_mean == pytest.approx(1.3 / 3)


def test_relative_weights_examples():
    w = relative_weights([make_rollout([0.5, 0.5]), make_rollout([1.5, 1.5])])
    np.testing.assert_allclose(w.weights, [0.5, 1.5], rtol=1e-15)
    assert effective_batch_size(w) == 1.0
    same = relative_weights([make_rollout([0.7] * 3) for _ in range(5)])
    assert same.weights.tolist() == [1.0] * 5


def test_degenerate_batch_falls_back_to_uniform():
    batch = [make_rollout([0.0, 0.0]), make_rollout([1e-12])]
    with pytest.raises(DegenerateEntropyError):
        batch_mean_entropy(batch)
    w = relative_weights(batch)
    assert w.degenerate
    assert w.weights.tolist() == [1.0, 1.0]
    with pytest.raises(DegenerateEntropyError):
        weight_sensitivity(batch, 0, 1)


def test_token_weighted_identity_random():
    rng = np.random.default_rng(2)
    for _ in range(20):
        batch = random_batch(rng, B=8)
        w = relative_weights(batch, "token_weighted").weights
        lengths = np.array([len(r) for r in batch])
        assert abs(np.mean(w * lengths) - lengths.mean()) < 1e-9


@pytest.mark.parametrize("c", [0.1, 3.0, 100.0])
def test_scale_invariance_bit_exact_on_exact_scalings(c):
    # entropies on a coarse decimal grid so that c * H is exactly representable
    rng = np.random.default_rng(3)
    for mode in ("sequence_mean", "token_weighted"):
        for _ in range(20):
            batch = [
                make_rollout(rng.integers(1, 400, int(rng.integers(1, 9))) * 10.0 / 64)
                for _ in range(int(rng.integers(2, 10)))
            ]
            scaled = [r.with_entropies(r.token_entropies * c) for r in batch]
            assert all(
                np.array_equal(s.token_entropies * 64 / c / 10, np.round(r.token_entropies * 64 / 10))
                for s, r in zip(scaled, batch)
            )
            a = relative_weights(batch, mode).weights
            b = relative_weights(scaled, mode).weights
            assert np.array_equal(a, b)


@pytest.mark.parametrize("c", [0.1, 3.0, 100.0])
def test_scale_invariance_on_arbitrary_floats(c):
    # when c * H itself rounds, the only change left is that input rounding
    rng = np.random.default_rng(4)
    for _ in range(50):
        batch = random_batch(rng)
        scaled = [r.with_entropies(r.token_entropies * c) for r in batch]
        a = relative_weights(batch).weights
        b = relative_weights(scaled).weights
        np.testing.assert_array_max_ulp(a, b, maxulp=4)


def test_sensitivity_closed_form_examples():
    rng = np.random.default_rng(5)
    batch = random_batch(rng, B=5)
    for i in range(5):
        for j in range(5):
            if i != j:
                assert weight_sensitivity(batch, i, j) < 0
    single = [make_rollout([0.4, 0.8])]
    assert weight_sensitivity(single, 0, 0) == 0.0
    with pytest.raises(IndexError):
        weight_sensitivity(batch, 0, 5)


@pytest.mark.parametrize("mode", ["token_weighted", "sequence_mean"])
def test_sensitivity_matches_finite_differences(mode):
    rng = np.random.default_rng(6)
    for _ in range(5):
        batch = random_batch(rng, B=4)
        for i in range(4):
            for j in range(4):
                exact = weight_sensitivity(batch, i, j, mode)
                fd = fd_sensitivity(batch, i, j, mode)
                assert abs(exact - fd) <= 1e-6 * abs(fd)


def test_self_sensitivity_bounded():
    rng = np.random.default_rng(7)
    for _ in range(50):
        batch = random_batch(rng)
        mean = batch_mean_entropy(batch)
        j = int(np.argmax([sequence_entropy(r) for r in batch]))
        assert abs(weight_sensitivity(batch, j, j)) <= 1 / mean


def test_effective_batch_size_equal_lengths_exact():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(1, 10))
        batch = [make_rollout(rng.uniform(0.01, 3, n)) for _ in range(int(rng.integers(1, 17)))]
        assert effective_batch_size(relative_weights(batch, "token_weighted")) == 1.0


def test_effective_batch_size_plain_weights():
    assert effective_batch_size(EntropyWeights.uniform(4)) == 1.0
    w = EntropyWeights(np.zeros(2), 1.0, np.array([0.5, 1.5]))
    assert effective_batch_size(w) == 1.0
    with pytest.raises(ValueError):
        effective_batch_size(EntropyWeights.uniform(0))


def test_weight_histogram():
    w = EntropyWeights(np.zeros(5), 1.0, np.array([0.0, 0.99, 1.0, 4.99, 7.0]))
    counts, overflow = weight_histogram(w)
    assert counts.shape == (50,)
    assert counts.sum() == 4 and overflow == 1
    assert counts[0] == 1 and counts[9] == 1 and counts[10] == 1 and counts[49] == 1


@settings(max_examples=50, deadline=None)
@given(
    batch=st.lists(
        st.lists(st.floats(0.001, 5.0, allow_nan=False), min_size=1, max_size=12),
        min_size=1,
        max_size=16,
    )
)
def test_identity_property(batch):
    rollouts = [make_rollout(h) for h in batch]
    ew = relative_weights(rollouts, "token_weighted")
    lengths = np.array([len(r) for r in rollouts])
    assert np.all(ew.weights >= 0)
    assert abs(np.mean(ew.weights * lengths) - lengths.mean()) < 1e-9
    np.testing.assert_allclose(ew.weights, ew.seq_entropies / ew.batch_mean, rtol=1e-14)
