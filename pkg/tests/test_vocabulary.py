from __future__ import annotations

import numpy as np
import pytest

from mcloc.vocabulary import (InsufficientTrainingDataError, UntrainedCodebookError, Vocabulary,
                              assign_word, assign_words, build_vocabulary, descriptors_from_uint8,
                              normalize_descriptors, pq_distance, pq_distances, pq_encode,
                              pq_reconstruct, pq_train)


def _unit(rng, n, d=16):
    return normalize_descriptors(rng.normal(size=(n, d)))


def test_single_word_is_normalized_mean(rng):
    x = _unit(rng, 50)
    v = build_vocabulary(x, 1)
    mean = x.astype(np.float64).mean(axis=0)
    assert np.allclose(v.centroids[0], mean / np.linalg.norm(mean), atol=1e-6)


def test_one_word_per_training_vector(rng):
    x = _unit(rng, 12)
    v = build_vocabulary(x, 12, seed=3)
    # every training vector has a centroid on top of it
    d = np.linalg.norm(v.centroids[:, None, :] - x[None, :, :], axis=2)
    assert np.all(d.min(axis=0) < 1e-5)


def test_clustered_data_beats_random_centroids(rng):
    centers = _unit(rng, 4, 32)
    x = normalize_descriptors(np.repeat(centers, 50, axis=0) + rng.normal(scale=0.05, size=(200, 32)))
    v = build_vocabulary(x, 16, seed=0)

    def qerr(c):
        return np.mean(np.min(np.linalg.norm(x[:, None] - c[None], axis=2), axis=1))

    baseline = x[rng.choice(len(x), 16, replace=False)]
    assert qerr(v.centroids) <= qerr(baseline)


def test_build_is_deterministic(rng):
    x = _unit(rng, 300)
    assert build_vocabulary(x, 8, seed=5).equals(build_vocabulary(x, 8, seed=5))


def test_too_few_training_vectors(rng):
    with pytest.raises(InsufficientTrainingDataError):
        build_vocabulary(_unit(rng, 3), 4)


def _axes_vocab():
    e = np.eye(4, dtype=np.float32)
    return Vocabulary(np.stack([e[2], e[3], e[0], -e[2], -e[3], e[1], -e[0], -e[1]]))


def test_descriptor_on_centroid_gets_that_word():
    v = _axes_vocab()
    assert assign_word(v, v.centroids[7]) == 7


def test_tie_goes_to_lowest_word_id():
    v = _axes_vocab()
    d = np.array([1.0, 1.0, 0.0, 0.0]) / np.sqrt(2)
    assert assign_word(v, d) == 2


def test_assignment_matches_exhaustive_scan(rng):
    v = Vocabulary(_unit(rng, 64, 32))
    q = _unit(rng, 2000, 32)
    ref = np.argmin(np.linalg.norm(q.astype(np.float64)[:, None] - v.centroids[None], axis=2), axis=1)
    assert np.array_equal(assign_words(v, q), ref)


def test_uint8_import_is_unit_norm(rng):
    raw = rng.integers(0, 256, size=(10, 128), dtype=np.uint8)
    d = descriptors_from_uint8(raw)
    assert d.dtype == np.float32
    assert np.allclose(np.linalg.norm(d, axis=1), 1, atol=1e-6)


@pytest.fixture(scope="module")
def codebook():
    rng = np.random.default_rng(9)
    return pq_train(normalize_descriptors(rng.normal(size=(600, 32))), M=4, K=16, seed=0)


def test_distance_to_own_reconstruction_is_zero(codebook, rng):
    code = pq_encode(codebook, _unit(rng, 1, 32))[0]
    q = pq_reconstruct(codebook, code[None])[0]
    assert pq_distance(codebook, q, code) == pytest.approx(0.0, abs=1e-6)


def test_asymmetric_distance_is_distance_to_reconstruction(codebook, rng):
    q = _unit(rng, 50, 32)
    codes = pq_encode(codebook, _unit(rng, 50, 32))
    rec = pq_reconstruct(codebook, codes).astype(np.float64)
    for i in range(50):
        ref = np.linalg.norm(q[i] - rec, axis=1)
        assert np.allclose(pq_distances(codebook, q[i], codes), ref, atol=1e-6)


def test_pq_error_bounded_by_quantization_error(codebook, rng):
    q = _unit(rng, 1000, 32)
    x = _unit(rng, 1000, 32)
    codes = pq_encode(codebook, x)
    rec = pq_reconstruct(codebook, codes)
    approx = np.array([pq_distance(codebook, q[i], codes[i]) for i in range(1000)])
    exact = np.linalg.norm(q - x, axis=1)
    qerr = np.linalg.norm(x - rec, axis=1)
    # triangle inequality makes the quantization error an upper bound per pair
    assert np.all(np.abs(approx - exact) <= qerr + 1e-6)
    assert np.mean(np.abs(approx - exact)) < np.mean(qerr)


def test_untrained_codebook_raises(rng):
    with pytest.raises(UntrainedCodebookError):
        pq_encode(None, _unit(rng, 2, 32))
    with pytest.raises(UntrainedCodebookError):
        pq_distance(None, np.ones(32), np.zeros(4, dtype=np.uint8))


def test_pq_requires_divisible_dimension(rng):
    with pytest.raises(ValueError):
        pq_train(_unit(rng, 300, 30), M=4, K=16)
