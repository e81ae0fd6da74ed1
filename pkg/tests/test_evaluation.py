import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soar import autodiff as ad
from soar import evaluation as E
from soar import geometry as geo
from soar import model as M
from soar import skeleton as sk
from soar.errors import ConfigurationError
from oracles import macro_scores


@pytest.fixture(scope="module")
def setup():
    ds = sk.synth_dataset(5, 4, 1, 12, 8, seed=3)
    split = sk.make_one_shot_split(ds, [0, 1, 2], [3, 4], seed=3)
    with ad.precision(np.float32):
        net = M.SkeletonTransformer(M.preset("micro"), seed=0)
    return ds, split, net.eval()


def brute_force_nn(test, support, labels):
    out = []
    for t in test:
        best, best_label = -np.inf, None
        for s, c in zip(support, labels):
            score = np.dot(t, s) / max(np.linalg.norm(t) * np.linalg.norm(s), 1e-12)
            if score > best or (score == best and c < best_label):
                best, best_label = score, c
        out.append(best_label)
    return np.array(out)


class TestClassify:
    def test_exact_support_match(self, rng):
        sup = rng.normal(size=(4, 6))
        assert list(E.classify_one_shot(sup, sup, [7, 3, 5, 1])) == [7, 3, 5, 1]

    def test_orthogonal_supports_with_noise(self, rng):
        sup = np.eye(5)
        test = sup[[2, 4]] + rng.normal(scale=1e-3, size=(2, 5))
        assert list(E.classify_one_shot(test, sup, [10, 11, 12, 13, 14])) == [12, 14]

    def test_tie_goes_to_lowest_class(self):
        sup = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert E.classify_one_shot([[1.0, 0.0]], sup, [9, 4])[0] == 4

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_agrees_with_brute_force(self, seed):
        r = np.random.default_rng(seed)
        k, d = int(r.integers(2, 8)), int(r.integers(2, 6))
        sup = r.normal(size=(k, d))
        labels = r.permutation(k) * 3
        test = r.normal(size=(10, d))
        assert np.array_equal(E.classify_one_shot(test, sup, labels), brute_force_nn(test, sup, labels))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e3))
    def test_positive_rescaling_invariance(self, seed, factor):
        r = np.random.default_rng(seed)
        sup = r.normal(size=(5, 4))
        test = r.normal(size=(12, 4))
        labels = np.arange(5)
        base = E.classify_one_shot(test, sup, labels)
        assert np.array_equal(E.classify_one_shot(test * factor, sup * factor, labels), base)

    def test_euclidean_flag(self):
        sup = np.array([[1.0, 0.0], [10.0, 0.0]])
        assert E.classify_one_shot([[9.0, 0.0]], sup, [0, 1], metric="euclidean")[0] == 1
        assert E.classify_one_shot([[9.0, 0.0]], sup, [0, 1], metric="cosine")[0] == 0
        with pytest.raises(ConfigurationError):
            E.classify_one_shot([[1.0, 0.0]], sup, [0, 1], metric="manhattan")


class TestMetrics:
    def test_perfect(self):
        m = E.metrics([1, 2, 3, 1], [1, 2, 3, 1])
        assert m == {"accuracy": 1.0, "f1": 1.0, "precision": 1.0, "recall": 1.0}

    def test_constant_predictor_two_balanced_classes(self):
        m = E.metrics([0, 0, 0, 0], [0, 0, 1, 1])
        assert m["accuracy"] == 0.5
        assert m["f1"] == pytest.approx(1 / 3, abs=1e-15)
        assert m["precision"] == 0.25 and m["recall"] == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            E.metrics([], [])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
    def test_against_confusion_oracle(self, pairs):
        pred, true = map(np.array, zip(*pairs))
        classes = np.unique(true)
        m = E.metrics(pred, true)
        p, r, f = macro_scores(pred, true, classes)
        assert m["precision"] == pytest.approx(p, abs=1e-12)
        assert m["recall"] == pytest.approx(r, abs=1e-12)
        assert m["f1"] == pytest.approx(f, abs=1e-12)
        assert all(0.0 <= v <= 1.0 for v in m.values())
        # micro recall over all test samples is the accuracy
        assert m["accuracy"] == np.mean(pred == true)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        pred, true = r.integers(0, 4, 20), r.integers(0, 4, 20)
        perm = r.permutation(20)
        assert E.metrics(pred, true) == pytest.approx(E.metrics(pred[perm], true[perm]), abs=1e-12)


class TestHarness:
    def test_embed_is_eval_mode_and_restores_flag(self, setup):
        ds, split, net = setup
        net.train()
        a = E.embed(net, split.test, ds.topology)
        assert net.training
        net.eval()
        assert np.array_equal(a, E.embed(net, split.test, ds.topology))
        assert a.shape == (len(split.test), net.config.embed_dim)

    def test_embedding_independent_of_batching(self, setup):
        ds, split, net = setup
        a = E.embed(net, split.test, ds.topology, batch_size=64)
        b = E.embed(net, split.test, ds.topology, batch_size=1)
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)

    def test_evaluate_counts(self, setup):
        ds, split, net = setup
        res = E.evaluate(net, split.support, split.test, ds.topology)
        assert len(res.predictions) == len(split.test)
        assert set(res.predictions) <= set(split.novel_classes)

    def test_zero_noise_equals_clean(self, setup):
        ds, split, net = setup
        clean = E.evaluate(net, split.support, split.test, ds.topology).metrics
        assert E.gaussian_noise_eval(net, split, ds.topology, sigma=0.0) == clean

    def test_noise_skips_masked_cells(self, rng):
        ds = sk.synth_dataset(2, 1, 1, 6, 5, seed=0)
        s = ds.samples[0].occlude(np.eye(6, 5, dtype=bool))
        noisy = E.add_gaussian_noise(s, 0.1, 0.0, rng)
        assert np.all(noisy.data[s.mask] == 0)
        assert np.all(noisy.data[~s.mask] != s.data[~s.mask])

    def test_noise_determinism(self, setup):
        ds, split, net = setup
        a = E.gaussian_noise_eval(net, split, ds.topology, sigma=0.1, seed=5, noisy_support=True)
        b = E.gaussian_noise_eval(net, split, ds.topology, sigma=0.1, seed=5, noisy_support=True)
        assert a == b

    def test_identity_sweep_is_bit_exact(self, setup):
        ds, split, net = setup
        clean = E.evaluate(net, split.support, split.test, ds.topology).metrics
        row = E.occlusion_sweep(net, split, ds.topology, [{"mode": "none"}], occval=True)[0]
        assert row["condition"] == "none" and row["n_test"] == len(split.test)
        assert {k: row[k] for k in clean} == clean

    def test_sweep_grid_and_csv(self, setup, tmp_path):
        ds, split, net = setup
        grid = [{"mode": "none"}] + [{"mode": "random", "gamma": g} for g in (0.1, 0.3, 0.5)] + [
            {"mode": "temporal", "frames": 3}, {"mode": "spatial", "joints": 2},
            {"mode": "re3d", "snr_min": 0.05, "snr_max": 0.2}]
        rows = E.occlusion_sweep(net, split, ds.topology, grid, calibrations=geo.calibrate_cameras(ds))
        assert [r["condition"] for r in rows][:2] == ["none", "random(gamma=0.1)"]
        assert rows == E.occlusion_sweep(net, split, ds.topology, grid,
                                         calibrations=geo.calibrate_cameras(ds))
        E.write_metrics(rows, tmp_path / "m.csv")
        with open(tmp_path / "m.csv") as fh:
            back = list(csv.DictReader(fh))
        assert tuple(back[0]) == E.METRIC_FIELDS and len(back) == len(grid)
        assert float(back[1]["accuracy"]) == rows[1]["accuracy"]

    def test_unknown_mode(self, setup):
        ds, split, net = setup
        with pytest.raises(ConfigurationError):
            E.occlusion_sweep(net, split, ds.topology, [{"mode": "blur"}])

    def test_re3d_needs_calibrations(self, setup):
        ds, split, net = setup
        with pytest.raises(ConfigurationError):
            E.occlusion_sweep(net, split, ds.topology, [{"mode": "re3d"}])
