import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kitchenil.collect import record_tapes, script_expert
from kitchenil.compress import (encode_dataset, encode_images, enqueue, info_nce_loss, init_moco,
                                linear_probe, make_frozen_encoder, make_views, moco_step,
                                preprocess, sample_frames, train_moco)
from kitchenil.harness import pipeline as P
from kitchenil.harness.formats import FingerprintMismatch

from helpers import GRAD_TOL, check_info_nce


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 11), st.lists(st.integers(1, 9), min_size=1, max_size=6))
def test_queue_is_a_ring_buffer(K, cursor, batches):
    cursor %= K
    queue = np.full((K, 1), -1.0)
    history = []
    for b in batches:
        keys = np.arange(len(history), len(history) + b, dtype=float)[:, None]
        history.extend(keys[:, 0])
        queue, cursor = enqueue(queue, cursor, keys)
    start = sum(batches)
    # oracle: the last min(K, n) keys occupy the slots they were written to
    for n, v in enumerate(history[-K:], start=max(0, start - K)):
        assert queue[(n + cursor - start) % K, 0] == v


def test_info_nce_closed_form():
    d, K = 4, 7
    q = np.eye(d)[0]
    queue = np.tile(np.eye(d)[1], (K, 1))  # negatives orthogonal: logits 0
    loss, _ = info_nce_loss(q, q, queue, tau=0.2)
    assert loss == pytest.approx(-math.log(math.exp(5.0) / (math.exp(5.0) + K)), rel=1e-10)
    assert info_nce_loss(q, q, np.zeros((0, d)), 0.2)[0] == pytest.approx(0.0, abs=1e-12)


def test_info_nce_rejects_unnormalized_rows():
    with pytest.raises(ValueError, match="unit"):
        info_nce_loss(np.array([2.0, 0.0]), np.array([1.0, 0.0]), np.zeros((1, 2)) + [[0, 1]])


@pytest.mark.parametrize("seed", range(20))
def test_info_nce_gradients_match_finite_differences(seed):
    assert check_info_nce(seed) < GRAD_TOL


def _views(seed, n=8):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, (n, 48, 48, 3), dtype=np.uint8)
    return make_views(frames, rng)


@pytest.mark.parametrize("m", [0.0, 1.0])
def test_momentum_extremes(m):
    st_ = init_moco(0, d=8, hidden=16, K=32, m=m)
    vq, vk = _views(1)
    new = moco_step(st_, vq, vk)
    ref = new.q if m == 0.0 else st_.k
    assert all(np.array_equal(a, b) for a, b in zip(new.k.arrays(), ref.arrays()))
    assert not all(np.array_equal(a, b) for a, b in zip(new.q.arrays(), st_.q.arrays()))


def test_key_encoder_is_exact_ema():
    st_ = init_moco(2, d=8, hidden=16, K=32, m=0.9)
    for s in range(3):
        vq, vk = _views(s)
        new = moco_step(st_, vq, vk)
        for k0, k1, q1 in zip(st_.k.arrays(), new.k.arrays(), new.q.arrays()):
            m = np.float32(0.9)
            np.testing.assert_array_equal(k1, m * k0 + (np.float32(1) - m) * q1)
        st_ = new


def test_queue_stays_unit_and_sized():
    st_ = init_moco(3, d=8, hidden=16, K=20, m=0.99)
    for s in range(6):
        st_ = moco_step(st_, *_views(s))
        assert st_.queue.shape == (20, 8)
        np.testing.assert_allclose(np.linalg.norm(st_.queue, axis=1), 1.0, atol=1e-5)
        assert st_.cursor == (8 * (s + 1)) % 20


def test_frozen_encoder_is_deterministic_and_shaped():
    a, b = make_frozen_encoder(4, 16, 32), make_frozen_encoder(4, 16, 32)
    assert a.fingerprint == b.fingerprint != make_frozen_encoder(5, 16, 32).fingerprint
    imgs = np.random.default_rng(0).integers(0, 256, (3, 48, 48, 3), dtype=np.uint8)
    z = encode_images(a, imgs)
    assert z.shape == (3, 16) and z.dtype == np.float32
    assert preprocess(imgs).shape == (3, 3 * (256 + 16))


def _shards(kitchen, tasks, n_layouts=2):
    out = []
    for task in tasks:
        for lid in range(n_layouts):
            lay = P.train_layout(kitchen, 0, lid)
            out.append(record_tapes(kitchen, [script_expert(kitchen, task, lay, 0)], task, lay))
    return out


def test_cache_entries_match_spot_re_encoding(kitchen, tasks):
    shards = _shards(kitchen, tasks[:2])
    enc = make_frozen_encoder(0, 16, 32)
    cache = encode_dataset(enc, shards)
    assert len(cache) == sum(len(e) for s in shards for e in s.episodes)
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = shards[rng.integers(len(shards))]
        t = int(rng.integers(len(s.episodes[0])))
        full = encode_images(enc, s.episodes[0].images)
        np.testing.assert_array_equal(cache.episode(s.shard_id, 0), full)
        # a lone frame may differ from the batched matmul by float32 rounding
        np.testing.assert_allclose(cache.get(s.shard_id, 0, t),
                                   encode_images(enc, s.episodes[0].images[t:t + 1])[0],
                                   rtol=1e-5, atol=1e-6)
    with pytest.raises(FingerprintMismatch):
        cache.check(make_frozen_encoder(1, 16, 32).fingerprint)


def test_sample_frames_spreads_over_shards(kitchen, tasks):
    shards = _shards(kitchen, tasks[:2])
    frames = sample_frames(shards, 40, seed=0)
    assert len(frames) == 40 and frames.dtype == np.uint8
    assert np.array_equal(frames, sample_frames(iter(shards), 40, 0, n_shards=len(shards)))


def test_linear_probe_separates_classes():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 300)
    x = rng.normal(size=(300, 5)) + 3 * np.eye(3, 5)[y]
    assert linear_probe(x[:200], y[:200], x[200:], y[200:], 3) > 0.9


def test_moco_training_lowers_contrastive_loss(kitchen, tasks):
    frames = np.concatenate([e.images for s in _shards(kitchen, tasks, 1) for e in s.episodes])
    enc, state = train_moco(frames, steps=80, batch=16, seed=0, d=16, hidden=64, K=128)
    untrained = init_moco(0, d=16, hidden=64, K=128).q
    rng = np.random.default_rng(123)
    vq, vk = make_views(frames[::7], rng)
    _, vneg = make_views(frames[3::7], rng)

    def loss(e):
        from kitchenil.compress import encoder_forward_features
        q, k, neg = (encoder_forward_features(e, v)[0] for v in (vq, vk, vneg))
        return info_nce_loss(q, k, neg, state.tau)[0]

    assert loss(enc) < loss(untrained)
