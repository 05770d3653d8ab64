import numpy as np
import pytest

from app.data import PairedCorpus, generate
from app.errors import InputError, ParameterError
from app.evaluation import (
    cluster_agreement,
    clustering_scores,
    fit_linear_probe,
    knn_classify,
    knn_probe,
    labelled_subset,
    linear_probe,
    prototype_sweep,
    split_indices,
)
from app.trainer import initial_checkpoint, train


def _one_hot(labels, n):
    return np.eye(n)[labels]


class TestSplit:
    def test_eighty_twenty_partition(self):
        train_idx, test_idx = split_indices(100, 3)
        assert len(train_idx) == 80 and len(test_idx) == 20
        np.testing.assert_array_equal(np.sort(np.concatenate([train_idx, test_idx])), np.arange(100))

    def test_seeded(self):
        np.testing.assert_array_equal(split_indices(50, 1)[1], split_indices(50, 1)[1])


class TestLinearProbe:
    def test_separable_one_hot_features(self, rng):
        labels = rng.integers(0, 5, size=200)
        features = _one_hot(labels, 5)
        report = fit_linear_probe(features[:160], labels[:160], features[160:], labels[160:], n_classes=5)
        assert report.accuracy == 1.0
        assert report.kind == "linear"
        assert sum(report.class_counts.values()) == report.n_test == 40

    def test_shuffled_labels_are_chance(self, rng):
        n, k = 4000, 8
        features = rng.standard_normal((n, 16))
        labels = rng.integers(0, k, size=n)
        report = fit_linear_probe(features[:3200], labels[:3200], features[3200:], labels[3200:], n_classes=k)
        assert abs(report.accuracy - 1 / k) <= 0.05

    def test_requires_labels(self, small_corpus, small_config):
        ckpt = initial_checkpoint(small_config)
        unlabelled = PairedCorpus(small_corpus.modality1, small_corpus.modality2)
        with pytest.raises(InputError):
            linear_probe(ckpt, unlabelled)

    def test_deterministic(self, small_corpus, small_config):
        ckpt = initial_checkpoint(small_config)
        assert linear_probe(ckpt, small_corpus, 2) == linear_probe(ckpt, small_corpus, 2)

    @pytest.mark.parametrize("modality", ["1", "2", "both"])
    def test_modalities(self, small_corpus, small_config, modality):
        report = linear_probe(initial_checkpoint(small_config), small_corpus, 0, modality)
        assert report.modality == modality
        assert 0.0 <= report.accuracy <= 1.0
        assert report.n_train + report.n_test == small_corpus.n

    def test_unknown_modality(self, small_corpus, small_config):
        with pytest.raises(ParameterError):
            linear_probe(initial_checkpoint(small_config), small_corpus, 0, "3")


class TestKnn:
    def test_duplicate_point_with_k1(self, rng):
        train_x = rng.standard_normal((30, 4))
        train_y = rng.integers(0, 3, size=30)
        predictions = knn_classify(train_x, train_y, train_x[[4, 17]], 1)
        np.testing.assert_array_equal(predictions, train_y[[4, 17]])

    def test_tie_goes_to_nearest(self):
        train_x = np.array([[1.0, 0.0], [0.0, 1.0]])
        train_y = np.array([7, 3])
        test_x = np.array([[1.0, 0.2], [0.2, 1.0]])
        np.testing.assert_array_equal(knn_classify(train_x, train_y, test_x, 2), [7, 3])

    def test_majority_vote(self):
        train_x = np.array([[1.0, 0.0], [0.9, 0.1], [0.8, 0.2], [0.0, 1.0]])
        train_y = np.array([1, 2, 2, 1])
        assert knn_classify(train_x, train_y, np.array([[1.0, 0.0]]), 3)[0] == 2

    def test_k_larger_than_train(self, rng):
        with pytest.raises(ParameterError):
            knn_classify(rng.standard_normal((5, 2)), np.zeros(5, dtype=int), rng.standard_normal((1, 2)), 6)

    def test_report_bounds(self, small_corpus, small_config):
        report = knn_probe(initial_checkpoint(small_config), small_corpus, k_neighbors=5)
        assert report.kind == "knn"
        assert 0.0 <= report.accuracy <= 1.0
        assert all(0.0 <= v <= 1.0 for v in report.per_class_accuracy.values())



class TestLabelFraction:
    def test_stratified_counts(self, rng):
        labels = np.repeat(np.arange(4), [40, 20, 10, 2])
        train_idx = rng.permutation(len(labels))
        kept = labelled_subset(train_idx, labels, 0.1, split_seed=3)
        counts = np.bincount(labels[kept], minlength=4)
        np.testing.assert_array_equal(counts, [4, 2, 1, 1])

    def test_subset_keeps_train_order(self, rng):
        labels = rng.integers(0, 3, size=60)
        train_idx = rng.permutation(60)[:48]
        kept = labelled_subset(train_idx, labels, 0.25, split_seed=0)
        positions = [int(np.flatnonzero(train_idx == i)[0]) for i in kept]
        assert positions == sorted(positions)

    def test_seeded(self, rng):
        labels = rng.integers(0, 3, size=60)
        train_idx = np.arange(60)
        np.testing.assert_array_equal(labelled_subset(train_idx, labels, 0.3, 1), labelled_subset(train_idx, labels, 0.3, 1))

    def test_full_fraction_is_identity(self, rng):
        train_idx = rng.permutation(30)
        assert labelled_subset(train_idx, rng.integers(0, 3, size=30), 1.0, 0) is train_idx

    @pytest.mark.parametrize("fraction", [0.0, -0.5, 1.5])
    def test_out_of_range(self, fraction):
        with pytest.raises(ParameterError):
            labelled_subset(np.arange(10), np.zeros(10, dtype=int), fraction, 0)

    def test_linear_probe_records_fraction(self, small_corpus, small_config):
        ckpt = initial_checkpoint(small_config)
        full = linear_probe(ckpt, small_corpus, 0)
        part = linear_probe(ckpt, small_corpus, 0, label_fraction=0.2)
        assert part.label_fraction == 0.2 and full.label_fraction == 1.0
        assert part.n_train < full.n_train
        assert part.n_test == full.n_test

    def test_knn_needs_enough_labelled_neighbours(self, small_corpus, small_config):
        ckpt = initial_checkpoint(small_config)
        report = knn_probe(ckpt, small_corpus, k_neighbors=1, label_fraction=0.01)
        assert report.n_train == len(np.unique(small_corpus.labels))
        with pytest.raises(ParameterError):
            knn_probe(ckpt, small_corpus, k_neighbors=20, label_fraction=0.01)


class TestClustering:
    def test_perfect_agreement(self):
        labels = [0, 0, 1, 1, 2, 2]
        report = clustering_scores(labels, labels, 3)
        assert report.nmi == pytest.approx(1.0)
        assert report.purity == pytest.approx(1.0)
        assert report.cluster_sizes == [2, 2, 2]

    def test_constant_assignment(self):
        report = clustering_scores([0, 1, 2, 0, 1, 2], [0] * 6, 4)
        assert report.nmi == pytest.approx(0.0, abs=1e-12)
        assert report.cluster_sizes == [6, 0, 0, 0]

    def test_symmetry(self, rng):
        a, b = rng.integers(0, 5, size=300), rng.integers(0, 4, size=300)
        assert clustering_scores(a, b).nmi == pytest.approx(clustering_scores(b, a).nmi, abs=1e-12)

    def test_purity_permutation_invariant(self, rng):
        labels, assignments = rng.integers(0, 4, size=200), rng.integers(0, 6, size=200)
        permuted = rng.permutation(6)[assignments]
        assert clustering_scores(labels, assignments).purity == pytest.approx(clustering_scores(labels, permuted).purity)

    def test_cluster_agreement_histogram(self, small_corpus, small_config):
        report = cluster_agreement(initial_checkpoint(small_config), small_corpus)
        assert len(report.cluster_sizes) == small_config.k_prototypes
        assert sum(report.cluster_sizes) == small_corpus.n
        assert 0.0 <= report.nmi <= 1.0

    def test_cluster_agreement_requires_labels(self, small_corpus, small_config):
        with pytest.raises(InputError):
            cluster_agreement(initial_checkpoint(small_config), PairedCorpus(small_corpus.modality1, small_corpus.modality2))


def test_prototype_sweep(small_corpus, small_config):
    config = small_config.model_copy(update={"epochs": 1})
    rows = prototype_sweep(small_corpus, config, [4, 6])
    assert [row.k for row in rows] == [4, 6]
    for row in rows:
        assert 0.0 <= row.linear_accuracy <= 1.0
        assert np.isfinite(row.final_loss)


def test_trained_checkpoint_probe_is_stable(small_corpus, small_config):
    ckpt = train(small_corpus, small_config).checkpoint
    assert knn_probe(ckpt, small_corpus, 3, split_seed=1) == knn_probe(ckpt, small_corpus, 3, split_seed=1)


def test_noiseless_clusters_are_recovered_by_knn(small_spec, small_config):
    corpus = generate(small_spec.model_copy(update={"noise_sigma": 0.0}))
    ckpt = train(corpus, small_config).checkpoint
    report = knn_probe(ckpt, corpus, k_neighbors=5)
    assert report.accuracy == 1.0
