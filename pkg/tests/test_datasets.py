from collections import Counter
from itertools import islice

import numpy as np
import pytest

from dfa.datasets import (EpisodeError, ShiftSpec, SSDAEpisode, balanced_labeled_iterator,
                          dump_episode, episode_from_arrays, load_episode, make_synthetic_episode,
                          unlabeled_iterator)


def episode(seed=0, K=5, shots=3, shift=ShiftSpec("rotation", 30.0), **kw):
    kw = {"dim": 2, "n_source": 200, "n_unlabeled": 200, **kw}
    return make_synthetic_episode(seed, K, kw.pop("dim"), kw.pop("n_source"), kw.pop("n_unlabeled"),
                                  shots, shift, **kw)


def test_shots_per_class():
    ep = episode()
    assert ep.n_labeled == 15
    assert np.bincount(ep.target_labeled_y).tolist() == [3] * 5


def test_same_seed_is_bitwise_identical():
    assert episode(seed=4).equals(episode(seed=4))
    assert not episode(seed=4).equals(episode(seed=5))


def test_labeled_and_unlabeled_target_are_disjoint():
    ep = episode(seed=2)
    assert not set(ep.target_labeled_ids) & set(ep.target_unlabeled_ids)
    assert len(ep.target_unlabeled_ids) == ep.n_unlabeled == 200


@pytest.mark.parametrize("kind", ["rotation", "translation", "scale", "mixed"])
def test_shift_kinds_keep_contract(kind):
    ep = episode(shift=ShiftSpec(kind, 10.0, noise_std=0.1), dim=3)
    assert np.all(np.isfinite(ep.target_unlabeled_x))
    assert np.bincount(ep.target_labeled_y).tolist() == [3] * 5


def test_zero_shift_keeps_cluster_means():
    ep = episode(shift=ShiftSpec("rotation", 0.0), n_source=3000, n_unlabeled=3000)
    y = ep.reveal_labels()
    for k in range(5):
        src = ep.source_x[ep.source_y == k].mean(0)
        tgt = ep.target_unlabeled_x[y == k].mean(0)
        # two sample means of 600 draws with unit variance
        assert np.linalg.norm(src - tgt) < 0.25


def test_rotation_moves_target_means():
    ep = episode(shift=ShiftSpec("rotation", 90.0), n_source=3000, n_unlabeled=3000)
    y = ep.reveal_labels()
    tgt = ep.target_unlabeled_x[y == 0].mean(0)
    assert np.allclose(tgt, [0.0, 4.0], atol=0.25)


def test_rejections():
    with pytest.raises(EpisodeError):
        episode(dim=1)
    with pytest.raises(EpisodeError):
        episode(shots=0)
    with pytest.raises(EpisodeError):
        episode(n_source=3)
    # long-tail class cannot supply the requested shots
    with pytest.raises(EpisodeError, match="fewer than shots"):
        episode(shots=3, n_unlabeled=20,
                shift=ShiftSpec("rotation", 30.0, class_imbalance=(1, 1, 1, 1, 1e-6)))


def test_class_imbalance_skews_source():
    ep = episode(n_source=2000, shift=ShiftSpec("rotation", 30.0, class_imbalance=(8, 4, 2, 1, 1)))
    counts = np.bincount(ep.source_y, minlength=5)
    assert counts[0] > 3 * counts[4]


def test_episode_is_read_only():
    ep = episode()
    with pytest.raises(ValueError):
        ep.source_x[0, 0] = 1.0


def test_balanced_batches_are_half_and_half():
    ep = episode()
    for batch in islice(balanced_labeled_iterator(ep, 8, seed=0), 50):
        assert int(batch.is_target.sum()) == 4
        assert len(batch) == 8


def test_balanced_rejects_odd_batch():
    with pytest.raises(ValueError):
        next(balanced_labeled_iterator(episode(), 7, seed=0))


def test_balanced_target_frequency():
    ep = episode(K=5, shots=3)
    tally = Counter()
    rows = {tuple(x): i for i, x in enumerate(ep.target_labeled_x)}
    for batch in islice(balanced_labeled_iterator(ep, 8, seed=1), 10_000):
        for x in batch.x[batch.is_target]:
            tally[rows[tuple(x)]] += 1
    expected = 10_000 * 4 / 15
    assert len(tally) == 15
    assert all(abs(c - expected) <= 0.05 * expected for c in tally.values())


def test_unlabeled_epoch_partition():
    ep = episode(n_unlabeled=100, K=5)
    it = unlabeled_iterator(ep, 10, seed=0)
    batches = list(islice(it, 10))
    seen = np.concatenate([b.index for b in batches])
    assert sorted(seen.tolist()) == list(range(100))
    assert not hasattr(batches[0], "y")


def test_unlabeled_seeds_change_order_not_content():
    ep = episode(n_unlabeled=100)
    a = np.concatenate([b.index for b in islice(unlabeled_iterator(ep, 10, seed=0), 10)])
    b = np.concatenate([b.index for b in islice(unlabeled_iterator(ep, 10, seed=1), 10)])
    assert not np.array_equal(a, b)
    assert Counter(a.tolist()) == Counter(b.tolist())


def test_iterators_repeat_under_same_seed():
    ep = episode()
    a = [b.x for b in islice(balanced_labeled_iterator(ep, 8, 3), 20)]
    b = [b.x for b in islice(balanced_labeled_iterator(ep, 8, 3), 20)]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_dump_round_trip(tmp_path):
    ep = episode(seed=7, dim=3)
    path = tmp_path / "ep.csv"
    dump_episode(ep, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# dfa-episode v1")
    assert len(lines) == 1 + ep.n_source + ep.n_labeled + ep.n_unlabeled
    assert lines[-1].split(",")[2].startswith("hidden:")
    assert load_episode(path).equals(ep)


def test_episode_from_arrays():
    X = np.arange(20, dtype=float).reshape(10, 2)
    y = np.array([0, 1, 0, 1, 0, 1, -1, -1, -1, -1])
    domain = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 1])
    ep = episode_from_arrays(X, y, domain, 2)
    assert (ep.n_source, ep.n_labeled, ep.n_unlabeled, ep.shots) == (4, 2, 4, 1)
    assert not ep.has_hidden_labels
