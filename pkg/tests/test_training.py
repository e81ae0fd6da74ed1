import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soar import autodiff as ad
from soar import model as M
from soar import skeleton as sk
from soar import training as T
from soar.errors import ChecksumError, ConfigurationError, NumericError, StateError
from oracles import class_means_loop

OP_TOL = 1e-6
COMPOSITE_TOL = 1e-5


def micro_net(num_classes=3, seed=0):
    with ad.precision(np.float64):
        return M.SkeletonTransformer(M.preset("micro", num_classes=num_classes), seed=seed)


def tiny_split(n_classes=3, per_class=4, seed=0):
    ds = sk.synth_dataset(n_classes + 1, per_class, 1, 12, 8, seed=seed)
    split = sk.make_one_shot_split(ds, range(n_classes), [n_classes], seed=seed)
    return ds, split


def pmb_oracle(model, streams, labels):
    """Per-class means of pooled stage-(N-1) features, from one eval-mode
    forward pass and a row-by-row accumulation."""
    was = model.training
    model.eval()
    with ad.no_grad():
        tokens = model.forward_main(*streams).stage_tokens.data
    model.train(was)
    return class_means_loop(tokens.mean(axis=1), labels)


class TestLossValues:
    def test_distance_of_equal_vectors(self, f64):
        a = ad.Tensor(np.ones((1, 5)))
        d = T.pairwise_distance(a, a).data[0]
        assert d == pytest.approx(5e-12, rel=1e-9)

    def test_distance_unit_apart(self, f64):
        d = T.pairwise_distance(ad.Tensor([[1.0]]), ad.Tensor([[0.0]])).data[0]
        assert d == pytest.approx((1 + 1e-6) ** 2, rel=1e-12)

    def test_triplet_zero_when_negative_far(self, f64):
        a = ad.Tensor(np.zeros((1, 1)))
        p = ad.Tensor(np.zeros((1, 1)))
        n = ad.Tensor(np.full((1, 1), math.sqrt(1.2 + 1.0)))   # D(a,n) - D(a,p) = sigma + 1
        assert T.triplet_margin_loss(a, p, n, margin=0.2).data == 0.0

    def test_triplet_equals_margin_when_collapsed(self, f64):
        x = ad.Tensor(np.ones((3, 4)))
        assert T.triplet_margin_loss(x, x, x, margin=0.2).data == pytest.approx(0.2, abs=1e-15)

    def test_cross_entropy_uniform_is_log_c(self, f64):
        loss = T.cross_entropy(ad.Tensor(np.zeros((4, 7))), [0, 1, 2, 6])
        assert loss.data == pytest.approx(math.log(7), rel=1e-12)

    def test_cross_entropy_confident(self, f64):
        loss = T.cross_entropy(ad.Tensor(np.eye(3) * 50.0), [0, 1, 2])
        assert loss.data < 1e-20

    def test_lsc_extremes(self, f64, rng):
        e = rng.normal(size=(5, 6))
        assert T.lsc_loss(ad.Tensor(e), ad.Tensor(e)).data == pytest.approx(0.0, abs=1e-12)
        assert T.lsc_loss(ad.Tensor(e), ad.Tensor(-e)).data == pytest.approx(2.0, abs=1e-12)

    def test_lsc_zero_embedding_is_finite(self, f64):
        e = ad.Tensor(np.zeros((2, 3)), requires_grad=True)
        f = ad.Tensor(np.ones((2, 3)), requires_grad=True)
        loss = T.lsc_loss(e, f)
        loss.backward()
        assert loss.data == pytest.approx(1.0) and np.all(np.isfinite(e.grad))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_loss_components_in_range(seed):
    r = np.random.default_rng(seed)
    with ad.precision(np.float64):
        e = ad.Tensor(r.normal(size=(6, 4)) * r.uniform(0.01, 10))
        f = ad.Tensor(r.normal(size=(6, 4)))
        tpl = T.triplet_margin_loss(e, f, ad.Tensor(r.normal(size=(6, 4))))
        ce = T.cross_entropy(e, r.integers(0, 4, size=6))
        lsc = T.lsc_loss(e, f)
    assert tpl.data >= 0 and ce.data >= 0
    assert -1e-12 <= lsc.data <= 2 + 1e-12


def test_triplet_zero_on_separated_clusters(f64, rng):
    centers = np.eye(3) * 5.0
    labels = np.repeat(np.arange(3), 4)
    emb = centers[labels] + rng.normal(scale=0.01, size=(12, 3))
    trip = T.mine_triplets(labels, rng)
    e = ad.Tensor(emb)
    loss = T.triplet_margin_loss(ad.take(e, trip[:, 0]), ad.take(e, trip[:, 1]), ad.take(e, trip[:, 2]))
    assert loss.data == 0.0


class TestLossGradients:
    def test_pairwise_distance(self, f64, rng):
        a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert ad.grad_check(lambda: ad.sum_(T.pairwise_distance(a, b)), [a, b]) < OP_TOL

    def test_triplet(self, f64, rng):
        xs = [ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True) for _ in range(3)]
        assert ad.grad_check(lambda: T.triplet_margin_loss(*xs, margin=3.0), xs) < OP_TOL

    def test_cross_entropy(self, f64, rng):
        z = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        assert ad.grad_check(lambda: T.cross_entropy(z, [0, 3, 1, 1, 2]), [z]) < OP_TOL

    def test_lsc(self, f64, rng):
        e = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        f = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        assert ad.grad_check(lambda: T.lsc_loss(e, f), [e, f]) < OP_TOL

    @pytest.mark.parametrize("phase", ["warmup", "decenter", "prototype"])
    def test_weighted_total_on_micro(self, f64, rng, phase):
        net = micro_net()
        streams = tuple(rng.normal(size=(6, 16, 16, 3)) for _ in range(3))
        labels = np.array([0, 0, 1, 1, 2, 2])
        protos = rng.normal(size=(6, 8)) if phase == "prototype" else None
        cfg = T.TrainConfig(margin=5.0)

        def fn():
            return T.batch_loss(net, streams, labels, cfg, phase, protos, np.random.default_rng(0)).total

        err = ad.grad_check(fn, net.parameters(), max_coords=4, rng=np.random.default_rng(1))
        assert err < COMPOSITE_TOL


def test_total_loss_weighting(f64, rng):
    net = micro_net()
    streams = tuple(rng.normal(size=(4, 16, 16, 3)) for _ in range(3))
    labels = np.array([0, 0, 1, 2])
    step = T.batch_loss(net, streams, labels, T.TrainConfig(), "warmup", None, np.random.default_rng(0))
    assert step.total.data == pytest.approx(1.0 * step.tpl + 0.4 * step.cls + 0.1 * step.lsc, rel=1e-12)


class TestMining:
    def test_single_class_yields_nothing(self, rng):
        assert T.mine_triplets([3, 3, 3], rng).shape == (0, 3)

    def test_two_by_two(self, rng):
        assert len(T.mine_triplets([0, 0, 1, 1], rng)) == 4

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.booleans())
    def test_label_constraints(self, labels, hard):
        r = np.random.default_rng(len(labels))
        labels = np.array(labels)
        emb = r.normal(size=(len(labels), 3))
        trip = T.mine_triplets(labels, r, emb, hard=hard)
        counts = np.bincount(labels)
        eligible = [i for i, c in enumerate(labels) if counts[c] > 1 and counts[c] < len(labels)]
        assert list(trip[:, 0]) == eligible
        for a, p, n in trip:
            assert a != p and labels[a] == labels[p] and labels[a] != labels[n]

    def test_hard_mining_picks_extremes(self, rng):
        labels = np.array([0, 0, 0, 1, 1])
        emb = np.array([[0.0], [1.0], [3.0], [4.0], [10.0]])
        trip = T.mine_triplets(labels, rng, emb, hard=True)
        assert tuple(trip[0]) == (0, 2, 3)


class TestPrototypeBank:
    def test_lookup_before_threshold_raises(self):
        bank = T.PrototypeMemoryBank({0: np.zeros(2)}, min_read_epoch=20)
        with pytest.raises(StateError):
            bank.lookup([0], 19)
        assert bank.lookup([0], 20).shape == (1, 2)

    def test_missing_class_raises(self):
        bank = T.PrototypeMemoryBank({0: np.zeros(2)})
        with pytest.raises(StateError):
            bank.lookup([0, 1], 5)

    def test_single_sample_prototype_equals_feature(self, f64, rng):
        f = rng.normal(size=(3, 4))
        means, counts = T.class_means(f, [2, 0, 1])
        assert counts == {0: 1, 1: 1, 2: 1}
        assert all(np.array_equal(means[c], f[i]) for i, c in enumerate([2, 0, 1]))

    def test_duplicate_sample_keeps_mean(self, rng):
        f = rng.normal(size=(1, 4))
        assert np.array_equal(T.class_means(np.vstack([f, f]), [0, 0])[0][0], f[0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_class_means_match_loop_exactly(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 30))
        feats = r.normal(size=(n, 5)) * 10 ** r.uniform(-3, 3)
        labels = r.integers(0, 4, size=n)
        got, _ = T.class_means(feats, labels)
        want = class_means_loop(feats, labels)
        assert got.keys() == want.keys()
        assert all(np.array_equal(got[c], want[c]) for c in want)

    def test_update_uses_eval_mode_and_restores_flag(self, f64):
        ds, split = tiny_split()
        net = micro_net()
        data = T.prepare_train_data(split.train, ds.topology, net.config)
        net.train()
        bank = T.update_prototypes(net, data.streams, data.labels, epoch=3)
        assert net.training and bank.epoch == 3
        want = pmb_oracle(net, data.streams, data.labels)
        assert all(np.array_equal(bank.prototypes[c], want[c]) for c in want)


def test_prototype_bank_after_every_epoch_and_read_schedule():
    ds, split = tiny_split()
    net = micro_net()
    cfg = T.TrainConfig(epochs=32, warmup_epochs=20, decenter_epochs=10, batch_size=6,
                        dtype="float64", lr=1e-3)
    seen = []

    def check(epoch, model, bank, data):
        want = pmb_oracle(model, data.streams, data.labels)
        assert bank.epoch == epoch
        assert all(np.array_equal(bank.prototypes[c], want[c]) for c in want)
        seen.append(epoch)

    res = T.train(net, split, ds.topology, cfg, on_epoch_end=check)
    assert seen == list(range(32))
    assert res.bank.reads and min(res.bank.reads) == 30
    assert [r["phase"] for r in res.log] == ["warmup"] * 20 + ["decenter"] * 10 + ["prototype"] * 2


def test_reads_start_exactly_at_threshold():
    ds, split = tiny_split()
    cfg = T.TrainConfig(epochs=5, warmup_epochs=3, decenter_epochs=0, dtype="float64", lr=1e-3)
    res = T.train(micro_net(), split, ds.topology, cfg)
    assert min(res.bank.reads) == 3 and res.bank.min_read_epoch == 3


def _four_sample_loss_drop(seed):
    ds = sk.synth_dataset(3, 2, 1, 12, 8, seed=seed)
    split = sk.make_one_shot_split(ds, [0, 1], [2], seed=seed)
    net = micro_net(num_classes=2, seed=seed)
    cfg = T.TrainConfig(epochs=1, dtype="float64", seed=seed)
    with ad.precision(np.float64):
        data = T.prepare_train_data(split.train, ds.topology, net.config)
        loss = lambda: T.batch_loss(net, data.streams, data.labels, cfg, "warmup", None,
                                    np.random.default_rng(99)).total.data
        net.train()
        before = float(loss())
        T.train(net, split, ds.topology, cfg)
        net.train()
        after = float(loss())
    return after < before


def test_one_epoch_on_four_samples_decreases_loss():
    wins = sum(_four_sample_loss_drop(seed) for seed in range(10))
    assert wins >= 8


def test_same_seed_same_curves():
    ds, split = tiny_split()
    cfg = T.TrainConfig(epochs=3, warmup_epochs=1, decenter_epochs=1, lr=1e-3, seed=7)
    a = T.train(micro_net(), split, ds.topology, cfg).log
    b = T.train(micro_net(), split, ds.topology, cfg).log
    assert a == b


def test_non_finite_loss_reports_batch(monkeypatch):
    ds, split = tiny_split()
    real = T.batch_loss

    def poisoned(*args, **kw):
        step = real(*args, **kw)
        step.total = ad.Tensor(np.array(np.nan))
        return step

    monkeypatch.setattr(T, "batch_loss", poisoned)
    ad.set_check_finite(False)   # exercise the loop's own diagnostic
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match=r"batch 0: tpl=.* cls=.* lsc="):
        T.train(micro_net(), split, ds.topology, T.TrainConfig(epochs=1, dtype="float64"))


def test_head_size_mismatch(f64):
    ds, split = tiny_split()
    with pytest.raises(ConfigurationError):
        T.train(micro_net(num_classes=5), split, ds.topology, T.TrainConfig(epochs=1))


class TestConfig:
    def test_defaults(self):
        c = T.TrainConfig()
        assert (c.lr, c.epochs, c.batch_size) == (3.5e-5, 50, 32)
        assert (c.w_tpl, c.w_cls, c.w_lsc) == (1.0, 0.4, 0.1)
        assert (c.margin, c.eps, c.warmup_epochs, c.decenter_epochs) == (0.2, 1e-6, 20, 10)

    def test_phases(self):
        c = T.TrainConfig()
        assert [c.phase(e) for e in (0, 19, 20, 29, 30, 49)] == \
            ["warmup", "warmup", "decenter", "decenter", "prototype", "prototype"]

    def test_cosine_schedule(self):
        c = T.TrainConfig(lr=1.0, epochs=4)
        assert [c.lr_at(e) for e in range(4)] == pytest.approx([1.0, 0.853553390593, 0.5, 0.146446609407])

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            T.TrainConfig.from_dict({"learning_rate": 1.0})

    def test_bad_values(self):
        with pytest.raises(ConfigurationError):
            T.TrainConfig(epochs=0)
        with pytest.raises(ConfigurationError):
            T.TrainConfig(dtype="float16")


class TestAdamW:
    def test_first_step_matches_hand_update(self, f64):
        p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -0.25])
        T.AdamW([p], weight_decay=0.1).step(0.01)
        # bias-corrected first step moves each coordinate by ~lr * sign(g)
        decayed = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1)
        want = decayed - 0.01 * np.array([0.5, -0.25]) / (np.abs([0.5, -0.25]) + 1e-8)
        assert np.allclose(p.data, want, rtol=0, atol=1e-12)

    def test_weight_decay_without_gradient_signal(self, f64):
        p = ad.Tensor(np.array([2.0]), requires_grad=True)
        opt = T.AdamW([p], weight_decay=0.5)
        for _ in range(3):
            p.grad = np.zeros(1)
            opt.step(0.1)
        assert p.data[0] == pytest.approx(2.0 * 0.95 ** 3, rel=1e-12)

    def test_minimizes_quadratic(self, f64):
        p = ad.Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = T.AdamW([p], weight_decay=0.0)
        for _ in range(500):
            p.grad = None
            ad.sum_(ad.square(p)).backward()
            opt.step(0.05)
        assert np.abs(p.data).max() < 1e-2


def test_log_csv_and_checkpoint_roundtrip(tmp_path):
    ds, split = tiny_split()
    cfg = T.TrainConfig(epochs=2, warmup_epochs=1, lr=1e-3, checkpoint_every=1)
    with ad.precision(np.float32):
        net = M.SkeletonTransformer(M.preset("micro"), seed=0)
    res = T.train(net, split, ds.topology, cfg, log_path=tmp_path / "log.csv", checkpoint_dir=tmp_path / "ck")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == T.LOG_FIELDS
    assert [r["phase"] for r in rows] == ["warmup", "decenter"]
    assert float(rows[1]["total"]) == res.log[1]["total"]
    assert (tmp_path / "ck" / "epoch_001" / "params.bin").exists()

    loaded, class_ids = T.load_model(tmp_path / "ck")
    assert class_ids == (0, 1, 2) and not loaded.training
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)

    raw = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
    raw[10] ^= 0xFF
    (tmp_path / "ck" / "params.bin").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        T.load_model(tmp_path / "ck")
