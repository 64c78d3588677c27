from __future__ import annotations

import numpy as np
import pytest

from oracles import numeric_grad, rel_err
from tgd import distill as D
from tgd import tensor as T
from tgd.data import build_pi_cache, gen_synthetic
from tgd.errors import BatchSizeError, CheckpointError, ConfigError, DataError, DimensionError, PairingError, ParameterError
from tgd.nets import ForwardRecord, NetSpec, build
from tgd.tda import PiParams
from tgd.tensor import Tensor

SEEDS = range(5)


def scalar_gradcheck(loss_of, x: np.ndarray, tol=1e-4):
    t = Tensor(x.copy(), requires_grad=True)
    T.backward(loss_of(t))

    def f():
        with T.no_grad():
            return loss_of(t).item()

    num = numeric_grad(f, t.data)
    assert rel_err(t.grad, num) < tol


# direct per-sample oracles


def ce_loop(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        total += -(row[y] - np.log(np.sum(np.exp(row))))
    return total / len(labels)


def kl_loop(lt, ls, tau):
    total = 0.0
    for a, b in zip(lt, ls):
        p = np.exp(a / tau) / np.exp(a / tau).sum()
        q = np.exp(b / tau) / np.exp(b / tau).sum()
        total += sum(pi * np.log(pi / qi) for pi, qi in zip(p, q))
    return tau * tau * total / len(lt)


def sim_loop(t_feats, s_feats):
    total = 0.0
    b = t_feats[0].shape[0]
    for ft, fs in zip(t_feats, s_feats):
        mats = []
        for f in (ft, fs):
            flat = f.reshape(b, -1)
            g = np.array([[np.dot(flat[i], flat[j]) for j in range(b)] for i in range(b)])
            mats.append(g / np.linalg.norm(g, axis=1, keepdims=True))
        total += ((mats[0] - mats[1]) ** 2).sum()
    return total / (b * b * len(s_feats))


def features(rng, b=4):
    return [rng.normal(size=(b, 3, 3, 2)), rng.normal(size=(b, 2, 2, 3))]


class TestLossValues:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_ce_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        logits, labels = rng.normal(size=(6, 5)) * 3, rng.integers(0, 5, 6)
        assert D.loss_ce(Tensor(logits), labels).item() == pytest.approx(ce_loop(logits, labels), rel=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_kl_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        lt, ls = rng.normal(size=(2, 6, 5)) * 3
        assert D.loss_kl_soft(lt, Tensor(ls), 4.0).item() == pytest.approx(kl_loop(lt, ls, 4.0), rel=1e-10)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_similarity_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        ft, fs = features(rng), features(rng)
        t_maps = [D.similarity_map(Tensor(f)) for f in ft]
        s_maps = [D.similarity_map(Tensor(f)) for f in fs]
        assert D.loss_similarity(t_maps, s_maps).item() == pytest.approx(sim_loop(ft, fs), rel=1e-10)

    def test_two_teacher_is_convex_combination(self, rng):
        l1, l2, ls = rng.normal(size=(3, 4, 6))
        kd1 = D.loss_kl_soft(l1, Tensor(ls), 2.0).item()
        kd2 = D.loss_kl_soft(l2, Tensor(ls), 2.0).item()
        got = D.loss_logit_two_teacher(l1, l2, Tensor(ls), 2.0, 0.3).item()
        assert got == pytest.approx(0.3 * kd1 + 0.7 * kd2, rel=1e-12)

    def test_kl_nonnegative_and_self_zero(self, rng):
        lt, ls = rng.normal(size=(2, 8, 10))
        assert D.loss_kl_soft(lt, Tensor(ls), 4.0).item() > 0
        assert abs(D.loss_kl_soft(lt, Tensor(lt), 4.0).item()) < 1e-9

    def test_total_weights(self):
        ce, kd, lm = Tensor(2.0), Tensor(3.0), Tensor(5.0)
        assert D.loss_total_tgd(ce, kd, lm, 0.9, 3000.0).item() == pytest.approx(0.9 * 2 + 0.1 * 3 + 3000 * 5)


class TestLossGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_ce(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 5, 4)
        scalar_gradcheck(lambda s: D.loss_ce(s, labels), rng.normal(size=(4, 5)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_kl(self, seed):
        rng = np.random.default_rng(seed)
        lt = rng.normal(size=(4, 5)) * 2
        scalar_gradcheck(lambda s: D.loss_kl_soft(lt, s, 4.0), rng.normal(size=(4, 5)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_two_teacher(self, seed):
        rng = np.random.default_rng(seed)
        l1, l2 = rng.normal(size=(2, 4, 5)) * 2
        scalar_gradcheck(lambda s: D.loss_logit_two_teacher(l1, l2, s, 3.0, 0.7), rng.normal(size=(4, 5)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_similarity(self, seed):
        rng = np.random.default_rng(seed)
        t_maps = [D.similarity_map(Tensor(f)) for f in features(rng)]
        other = features(rng)[1]
        scalar_gradcheck(
            lambda s: D.loss_similarity(t_maps, [D.similarity_map(s), D.similarity_map(Tensor(other))]),
            rng.normal(size=(4, 3, 3, 2)),
        )

    @pytest.mark.parametrize("seed", SEEDS)
    def test_total(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, 4)
        l1, l2 = rng.normal(size=(2, 4, 3))
        f1, f2 = features(rng), features(rng)
        t1 = ForwardRecord(Tensor(l1), [Tensor(f) for f in f1])
        t2 = ForwardRecord(Tensor(l2), [Tensor(f) for f in f2])
        fixed_feat = rng.normal(size=(4, 2, 2, 3))

        def loss(s):
            # student logits and first-tap features both depend on s
            logits = T.matmul(T.reshape(s, (4, -1)), Tensor(np.linspace(-1, 1, 18 * 3).reshape(18, 3)))
            rec = ForwardRecord(logits, [s, Tensor(fixed_feat)])
            return D.compose_loss("tgd", labels, rec, t1, t2, lam=0.6, tau=2.0, gamma=5.0, alpha=0.7).total

        scalar_gradcheck(loss, rng.normal(size=(4, 3, 3, 2)))


class TestIdentities:
    def test_two_teacher_alpha_one(self, rng):
        l1, l2, ls = rng.normal(size=(3, 5, 4))
        a = D.loss_logit_two_teacher(l1, l2, Tensor(ls), 4.0, 1.0).item()
        assert abs(a - D.loss_kl_soft(l1, Tensor(ls), 4.0).item()) < 1e-9

    def test_similarity_zero_at_mimicry(self, rng):
        f = features(rng)
        maps = [D.similarity_map(Tensor(x)) for x in f]
        assert D.loss_similarity(maps, maps).item() == 0.0

    def test_total_reduces_to_ce(self, rng):
        labels = rng.integers(0, 4, 5)
        s = ForwardRecord(Tensor(rng.normal(size=(5, 4))), [Tensor(x) for x in features(rng, 5)])
        t = ForwardRecord(Tensor(rng.normal(size=(5, 4))), [Tensor(x) for x in features(rng, 5)])
        got = D.compose_loss("tgd", labels, s, t, t, lam=1.0, gamma=0.0, alpha=0.5).total.item()
        assert abs(got - D.loss_ce(s.logits, labels).item()) < 1e-9

    def test_zero_weight_terms_skip_teachers(self, rng):
        labels = rng.integers(0, 4, 5)
        s = ForwardRecord(Tensor(rng.normal(size=(5, 4))), [])
        parts = D.compose_loss("tgd", labels, s, None, None, lam=1.0, gamma=0.0, alpha=0.5)
        assert parts.kd == 0.0 and parts.sim == 0.0


class TestSimilarityContracts:
    def test_symmetric(self, rng):
        m = D.similarity_map(Tensor(rng.normal(size=(6, 4, 4, 3)).astype(np.float32))).numpy()
        assert np.abs(m - m.T).max() < 1e-5

    def test_brute_force(self, rng):
        f = rng.normal(size=(5, 2, 3, 4))
        m = D.similarity_map(Tensor(f)).numpy()
        flat = f.reshape(5, -1)
        ref = np.array([[sum(flat[i] * flat[j]) for j in range(5)] for i in range(5)])
        assert np.abs(m - ref).max() < 1e-6

    def test_permutation_invariant_loss(self, rng):
        ft, fs = features(rng, 6), features(rng, 6)
        perm = rng.permutation(6)

        def loss(a, b):
            return D.loss_similarity([D.similarity_map(Tensor(x)) for x in a], [D.similarity_map(Tensor(x)) for x in b]).item()

        m = D.similarity_map(Tensor(ft[0])).numpy()
        mp = D.similarity_map(Tensor(ft[0][perm])).numpy()
        np.testing.assert_allclose(mp, m[np.ix_(perm, perm)], atol=1e-9)
        assert abs(loss(ft, fs) - loss([x[perm] for x in ft], [x[perm] for x in fs])) < 1e-6

    @pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e3])
    def test_student_scale_invariance(self, rng, c):
        ft, fs = features(rng), features(rng)
        t_maps = [D.similarity_map(Tensor(x)) for x in ft]
        base = D.loss_similarity(t_maps, [D.similarity_map(Tensor(x)) for x in fs]).item()
        scaled = D.loss_similarity(t_maps, [D.similarity_map(Tensor(c * x)) for x in fs]).item()
        assert abs(base - scaled) < 1e-6

    def test_merge(self, rng):
        a = D.similarity_map(Tensor(rng.normal(size=(4, 3))))
        b = D.similarity_map(Tensor(rng.normal(size=(4, 5))))
        merged = D.merge_maps(a, b, 0.25).numpy()
        np.testing.assert_allclose(merged, 0.25 * a.numpy() + 0.75 * b.numpy())
        with pytest.raises(DimensionError):
            D.merge_maps(a, D.similarity_map(Tensor(rng.normal(size=(3, 3)))), 0.5)

    def test_errors(self, rng):
        with pytest.raises(BatchSizeError):
            D.similarity_map(Tensor(rng.normal(size=(1, 4))))
        m = D.similarity_map(Tensor(rng.normal(size=(4, 3))))
        with pytest.raises(PairingError):
            D.loss_similarity([m, m], [m])
        with pytest.raises(PairingError):
            D.loss_similarity([], [])
        with pytest.raises(DataError):
            D.loss_ce(Tensor(rng.normal(size=(2, 3))), [0, 3])


class TestConfig:
    def test_alpha_and_anneal_defaults(self):
        assert D.DistillConfig(mode="tgd").alpha == 0.99
        assert D.DistillConfig(mode="base").alpha == 0.9
        assert D.DistillConfig(mode="tgd").anneal and not D.DistillConfig(mode="kd_single").anneal

    def test_lr_schedule(self):
        cfg = D.DistillConfig(lr=0.1, lr_decay_epochs=(2, 4), lr_decay_factor=0.2)
        assert [cfg.lr_at(e) for e in (1, 2, 3, 4, 5)] == pytest.approx([0.1, 0.1, 0.02, 0.02, 0.004])

    @pytest.mark.parametrize("kwargs", [{"mode": "nope"}, {"lam": 1.5}, {"alpha": -0.1}, {"tau": 0}, {"batch_size": 1}])
    def test_rejects(self, kwargs):
        with pytest.raises((ConfigError, ParameterError)):
            D.DistillConfig(**kwargs)


# ---------------------------------------------------------------------------
# training on a tiny problem


@pytest.fixture(scope="module")
def tiny():
    ds = gen_synthetic("bars", 96, seed=3, size=12)
    params = PiParams(grid_size=8)
    cache = build_pi_cache(ds, params)
    raw_spec = NetSpec(input_shape=(12, 12, 3), num_blocks=2, base_width=4, num_classes=4, convs_per_block=1)
    pi_spec = NetSpec(input_shape=(8, 8, 6), num_blocks=2, base_width=4, num_classes=4, convs_per_block=1)
    common = dict(epochs=2, batch_size=16, lr=0.05, lr_decay_epochs=(1,), val_fraction=0.25)
    t1 = D.train(D.DistillConfig(mode="scratch", seed=1, **common), ds, student_spec=raw_spec).net
    t2 = D.train(D.DistillConfig(mode="scratch", seed=2, **common), ds, pi_cache=cache, student_spec=pi_spec, modality="pi").net
    return ds, cache, raw_spec, D.Teachers(t1, t2), common


class TestTrain:
    def test_kd_single_equals_degenerate_tgd(self, tiny):
        ds, cache, spec, teachers, common = tiny
        kd = D.train(D.DistillConfig(mode="kd_single", seed=5, **common), ds, teachers, cache, student_spec=spec)
        tgd = D.train(D.DistillConfig(mode="tgd", alpha=1.0, gamma=0.0, anneal=False, seed=5, **common), ds, teachers, cache, student_spec=spec)
        assert kd.log_text() == tgd.log_text()

    def test_log_schema_and_determinism(self, tiny, tmp_path):
        ds, cache, spec, teachers, common = tiny
        init = build(spec, seed=9).state()
        cfg = D.DistillConfig(mode="tgd", alpha=0.6, gamma=10.0, seed=5, **common)
        a = D.train(cfg, ds, teachers, cache, student_spec=spec, init_state=init, log_path=tmp_path / "m.csv")
        b = D.train(cfg, ds, teachers, cache, student_spec=spec, init_state=init)
        assert a.log_text() == b.log_text() == (tmp_path / "m.csv").read_text()
        rows = [r.split(",") for r in a.log_text().splitlines()]
        assert len(rows) == common["epochs"] + 1 and all(len(r) == len(D.LOG_COLUMNS) for r in rows)
        last = a.log[-1]
        assert last.ce > 0 and last.kd > 0 and last.sim > 0
        assert last.total == pytest.approx(0.9 * last.ce + 0.1 * last.kd + 10.0 * last.sim, rel=1e-6)

    def test_anneal_starts_from_checkpoint(self, tiny, tmp_path):
        ds, cache, spec, teachers, common = tiny
        scratch = D.train(D.DistillConfig(mode="scratch", seed=4, eskd=False, **common), ds, student_spec=spec)
        path = tmp_path / "s.ckpt"
        T.save_checkpoint(path, scratch.net.state())
        tgd = D.train(D.DistillConfig(mode="tgd", alpha=0.5, seed=4, **common), ds, teachers, cache, student_spec=spec, init_state=path)
        assert tgd.log[0].val_acc == scratch.log[-1].val_acc
        assert tgd.log[0].train_acc == D.accuracy_of(scratch.net, scratch.train_set.inputs(), scratch.train_set.labels)

    def test_eskd_returns_best_checkpoint(self, tiny):
        ds, cache, spec, teachers, common = tiny
        res = D.train(D.DistillConfig(mode="scratch", seed=6, **dict(common, epochs=4)), ds, student_spec=spec)
        best = max(r.val_acc for r in res.log)
        assert res.log[res.best_epoch].val_acc == best
        assert D.accuracy_of(res.net, res.val_set.inputs(), res.val_set.labels) == best

    def test_missing_teachers(self, tiny):
        ds, cache, spec, teachers, common = tiny
        with pytest.raises(ConfigError):
            D.train(D.DistillConfig(mode="kd_single", **common), ds, student_spec=spec)
        with pytest.raises(ConfigError):
            D.train(D.DistillConfig(mode="tgd", anneal=False, **common), ds, D.Teachers(teachers.teacher1), cache, student_spec=spec)
        with pytest.raises(ConfigError):
            D.train(D.DistillConfig(mode="tgd", **common), ds, teachers, cache, student_spec=spec)

    def test_anneal_mismatch(self, tiny):
        ds, cache, spec, teachers, common = tiny
        wrong = build(NetSpec(input_shape=(12, 12, 3), num_blocks=2, base_width=8, num_classes=4, convs_per_block=1)).state()
        with pytest.raises(CheckpointError):
            D.train(D.DistillConfig(mode="tgd", **common), ds, teachers, cache, student_spec=spec, init_state=wrong)
