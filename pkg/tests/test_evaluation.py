import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ygan import data as data_mod
from ygan import evaluation, model, scoring, training
from ygan.errors import ProtocolError


def pairwise_auc_oracle(scores, labels):
    """O(n^2) Mann-Whitney statistic: anomalous beats normal, ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def random_instance(rng, max_n=200, force_ties=False):
    n = int(rng.integers(4, max_n + 1))
    labels = np.zeros(n, dtype=np.int64)
    labels[: max(1, int(rng.integers(1, n)))] = 1
    rng.shuffle(labels)
    if force_ties:
        scores = rng.integers(0, 5, size=n).astype(np.float64)
    else:
        scores = rng.normal(size=n)
    return scores, labels


class TestAuc:
    def test_perfect_separation(self):
        scores = np.array([0.1, 0.2, 0.3, 0.8, 0.9])
        labels = np.array([0, 0, 0, 1, 1])
        assert evaluation.auc(scores, labels) == 1.0

    def test_all_ties_give_half(self):
        assert evaluation.auc(np.ones(10), np.array([0] * 5 + [1] * 5)) == 0.5

    def test_matches_pairwise_oracle_small(self):
        scores = np.array([3.0, 1.0, 2.0, 2.0, 5.0, 0.5, 4.0, 2.0])
        labels = np.array([1, 0, 1, 0, 1, 0, 0, 1])
        assert evaluation.auc(scores, labels) == pytest.approx(
            pairwise_auc_oracle(scores, labels), abs=1e-12)

    @given(st.integers(min_value=0, max_value=10_000), st.booleans())
    @settings(max_examples=150, deadline=None)
    def test_matches_pairwise_oracle_random(self, seed, force_ties):
        scores, labels = random_instance(np.random.default_rng(seed), max_n=60,
                                         force_ties=force_ties)
        assert evaluation.auc(scores, labels) == pytest.approx(
            pairwise_auc_oracle(scores, labels), abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ProtocolError):
            evaluation.auc(np.ones(4), np.zeros(4))

    def test_complement_identity_without_ties(self, rng):
        scores = rng.permutation(np.arange(30)).astype(np.float64)
        labels = (rng.uniform(size=30) < 0.4).astype(np.int64)
        labels[:2] = [0, 1]
        a = evaluation.auc(scores, labels)
        b = evaluation.auc(-scores, labels)
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_invariance_under_monotone_transform(self, rng):
        scores = rng.normal(size=50)
        labels = (rng.uniform(size=50) < 0.5).astype(np.int64)
        labels[:2] = [0, 1]
        a = evaluation.auc(scores, labels)
        b = evaluation.auc(np.exp(scores) * 3 + 7, labels)
        assert a == pytest.approx(b, abs=1e-12)


def eer_sweep_oracle(scores, labels):
    """Exhaustive threshold sweep; returns (lower, upper) bounds that any
    interpolated equal-error rate must respect: max over thresholds of
    min(FPR, FNR) and min over thresholds of max(FPR, FNR)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(scores)
    candidates = np.concatenate([[uniq[0] - 1], (uniq[:-1] + uniq[1:]) / 2, uniq, [uniq[-1] + 1]])
    lower, upper = -np.inf, np.inf
    for t in candidates:
        fpr = (scores[labels == 0] >= t).mean()
        fnr = (scores[labels == 1] < t).mean()
        lower = max(lower, min(fpr, fnr))
        upper = min(upper, max(fpr, fnr))
    return lower, upper


class TestEer:
    def test_separable_scores_zero_eer(self):
        scores = np.array([0.0, 0.1, 0.2, 0.8, 0.9, 1.0])
        labels = np.array([0, 0, 0, 1, 1, 1])
        threshold, eer = evaluation.eer_threshold(scores, labels)
        assert eer == pytest.approx(0.0, abs=1e-12)
        assert 0.2 < threshold <= 0.8

    def test_fully_overlapping_half(self, rng):
        scores = np.concatenate([rng.normal(size=500), rng.normal(size=500)])
        labels = np.array([0] * 500 + [1] * 500)
        _, eer = evaluation.eer_threshold(scores, labels)
        assert eer == pytest.approx(0.5, abs=0.06)

    def test_interpolated_eer_within_sweep_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            scores, labels = random_instance(rng, max_n=20)
            threshold, eer = evaluation.eer_threshold(scores, labels)
            lower, upper = eer_sweep_oracle(scores, labels)
            assert lower - 1e-12 <= eer <= upper + 1e-12
            # the returned threshold operates inside the crossing bracket
            fpr = (scores[labels == 0] >= threshold).mean()
            fnr = (scores[labels == 1] < threshold).mean()
            assert min(fpr, fnr) - 1e-12 <= eer <= max(fpr, fnr) + 1e-12

    def test_eer_bounded(self, rng):
        for _ in range(20):
            scores, labels = random_instance(rng, max_n=50, force_ties=True)
            _, eer = evaluation.eer_threshold(scores, labels)
            assert -1e-12 <= eer <= 1.0


class TestPerClassRates:
    def test_counting_oracle(self):
        scores = np.array([0.9, 0.1, 0.8, 0.2, 0.7, 0.6])
        anomaly = np.array([1, 0, 1, 0, 0, 1])
        classes = np.array([0, 0, 1, 1, 0, 1])
        table = evaluation.tpr_tnr_per_class(scores, anomaly, classes, threshold=0.5)
        # class 0: anomalous {0.9} -> tpr 1; normal {0.1, 0.7} -> tnr 0.5
        assert table[0] == (1.0, 0.5)
        # class 1: anomalous {0.8, 0.6} -> tpr 1; normal {0.2} -> tnr 1
        assert table[1] == (1.0, 1.0)

    def test_absent_side_is_none(self):
        scores = np.array([0.9, 0.1])
        anomaly = np.array([0, 0])
        classes = np.array([0, 0])
        table = evaluation.tpr_tnr_per_class(scores, anomaly, classes, threshold=0.5)
        assert table[0][0] is None and table[0][1] is not None

    def test_threshold_below_everything(self):
        scores = np.array([0.5, 0.6, 0.7, 0.8])
        anomaly = np.array([0, 1, 0, 1])
        classes = np.zeros(4, dtype=int)
        table = evaluation.tpr_tnr_per_class(scores, anomaly, classes, threshold=0.0)
        assert table[0] == (1.0, 0.0)


def tiny_training_setup(n=240, epochs=1, ablation="full", seed=0):
    rng = np.random.default_rng(seed)
    # two visually distinct classes: bright top half vs bright bottom half
    images = np.full((n, 1, 32, 32), -1.0, dtype=np.float32)
    labels = rng.integers(0, 3, size=n)
    for i, c in enumerate(labels):
        images[i, 0, c * 10 : c * 10 + 10, :] = 1.0
        images[i] += rng.normal(scale=0.05, size=(1, 32, 32)).astype(np.float32)
    images = np.clip(images, -1, 1)
    data = data_mod.LabeledImages(images=images, labels=labels, ids=np.arange(n))
    model_config = model.ModelConfig(image_size=32, channels=1, latent_dim=8,
                                     num_classes=3, hidden_units=8, base_filters=4)
    train_config = training.TrainConfig(epochs=epochs, batch_size=16, seed=seed,
                                        ablation=ablation)
    return data, model_config, train_config


class TestProtocol:
    def test_runs_one_per_class_and_aggregates(self, tmp_path):
        data, mc, tc = tiny_training_setup()
        report = evaluation.run_protocol(data, mc, tc, score_kind="s", runs=2,
                                         out_dir=tmp_path)
        assert len(report.runs) == 2
        assert {r.anomaly_class for r in report.runs} == {0, 1}
        values = [r.auc for r in report.runs]
        assert report.mean_auc == pytest.approx(np.mean(values))
        assert report.std_auc == pytest.approx(np.std(values))
        assert (tmp_path / "protocol_report.json").exists()
        md = (tmp_path / "protocol_report.md").read_text()
        assert "Mean ± Std" in md

    def test_single_run_zero_std(self):
        data, mc, tc = tiny_training_setup(n=120)
        report = evaluation.run_protocol(data, mc, tc, score_kind="s", runs=1)
        assert report.std_auc == 0.0

    def test_too_many_runs_rejected(self):
        data, mc, tc = tiny_training_setup(n=120)
        with pytest.raises(ProtocolError):
            evaluation.run_protocol(data, mc, tc, runs=7)


class TestProbes:
    def test_untrained_bundle_near_chance(self, digit_corpus):
        colored = data_mod.make_color_mnist(digit_corpus, seed=0)
        cfg = model.ModelConfig(image_size=32, channels=3, latent_dim=16,
                                num_classes=10, hidden_units=8, base_filters=8)
        bundle = model.build_networks(cfg, seed=0)
        accs = evaluation.probe_disentanglement(bundle, colored, seed=0)
        assert set(accs) == {"acc_digit_from_zs", "acc_digit_from_zr",
                             "acc_color_from_zs", "acc_color_from_zr"}
        # digit identity is not linearly decodable from random projections;
        # background color is (it is itself a linear pixel statistic), so the
        # near-chance control applies to the digit probes
        assert accs["acc_digit_from_zs"] < 0.4
        assert accs["acc_digit_from_zr"] < 0.4
        for value in accs.values():
            assert 0.0 <= value <= 1.0

    def test_missing_color_labels_rejected(self, digit_corpus):
        cfg = model.ModelConfig(image_size=32, channels=1, latent_dim=8,
                                num_classes=10, hidden_units=8, base_filters=4)
        bundle = model.build_networks(cfg, seed=0)
        with pytest.raises(ProtocolError):
            evaluation.probe_disentanglement(bundle, digit_corpus, seed=0)


class TestResolveScoreMethod:
    def test_prototypes_built_from_training_split(self, tiny_bundle):
        rng = np.random.default_rng(0)
        train = data_mod.LabeledImages(
            images=rng.uniform(-1, 1, size=(20, 1, 32, 32)).astype(np.float32),
            labels=np.repeat(np.arange(4), 5),
            ids=np.arange(20),
        )
        method = evaluation.resolve_score_method("s_zp", tiny_bundle, train)
        assert method.kind == "s_zp"
        assert sorted(method.prototypes) == [0, 1, 2, 3]

    def test_szw_requires_weak_labels(self, tiny_bundle):
        rng = np.random.default_rng(0)
        train = data_mod.LabeledImages(
            images=rng.uniform(-1, 1, size=(8, 1, 32, 32)).astype(np.float32),
            labels=np.zeros(8, dtype=np.int64),
            ids=np.arange(8),
        )
        from ygan.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            evaluation.resolve_score_method("s_zw", tiny_bundle, train, weak_labels=None)
