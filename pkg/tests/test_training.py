"""Losses, schedule, optimiser, early stopping and the training loop."""

import math

import numpy as np
import pytest

from cxrvit import data as D
from cxrvit import models as M
from cxrvit import tensor as T
from cxrvit import training as TR
from cxrvit.errors import ConfigurationError, ContractError, NonFiniteError, WeightingError
from cxrvit.tensor import Tensor


def cfg(**kw):
    base = dict(lr_init=1e-3, max_epochs=10, warmup_epochs=2, batch_size=8, weight_decay=0.0, patience=50,
                augment=None, distill_lambda=0.0)
    base.update(kw)
    return TR.TrainConfig(**base)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def synth_fold(n_train, n_val, seed):
    imgs, recs = D.synth_generate(n_train + n_val, seed=seed)
    y = D.label_matrix(D.apply_policy(recs))
    return TR.FoldData(imgs[:n_train], y[:n_train], imgs[n_train:], y[n_train:])


class TestConfig:
    def test_warmup_must_fit(self):
        with pytest.raises(ConfigurationError):
            TR.TrainConfig(max_epochs=2, warmup_epochs=2)

    def test_family_defaults(self):
        assert TR.TrainConfig.for_family("densenet").lr_init == 1e-4
        assert TR.TrainConfig.for_family("deit").lr_init == 5e-5

    def test_dict_roundtrip(self):
        c = cfg(augment=D.AugmentConfig())
        assert TR.TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_field(self):
        with pytest.raises(ConfigurationError):
            TR.TrainConfig.from_dict({"momentum": 0.9})


class TestClassWeights:
    def test_worked_example(self):
        counts = (10, 40, 25, 25, 25)
        y = np.zeros((50, 5), dtype=int)
        for k, c in enumerate(counts):
            y[:c, k] = 1
        np.testing.assert_allclose(TR.class_weights(y), [1.0, 0.25, 0.4, 0.4, 0.4])
        np.testing.assert_allclose(TR.class_weights(y) * counts, 50 / 5)

    def test_balanced(self):
        y = np.tile(np.eye(5, dtype=int), (4, 1))
        np.testing.assert_array_equal(TR.class_weights(y), np.ones(5))

    def test_duplication_invariant(self):
        y = np.random.default_rng(0).integers(0, 2, size=(40, 5))
        y[0] = 1
        np.testing.assert_allclose(TR.class_weights(np.vstack([y, y])), TR.class_weights(y))

    def test_empty_class(self):
        y = np.ones((4, 5), dtype=int)
        y[:, 2] = 0
        with pytest.raises(WeightingError):
            TR.class_weights(y)
        assert TR.class_weights(y, max_weight=100.0)[2] == 100.0


class TestWeightedBce:
    def test_ln2(self):
        loss = TR.weighted_bce(Tensor([[0.0]]), [[1]], [1.0])
        assert abs(loss.item() - math.log(2)) < 1e-15

    def test_confident(self):
        z = Tensor([[30.0, -30.0, 30.0, -30.0, 30.0]])
        assert TR.weighted_bce(z, [[1, 0, 1, 0, 1]], np.ones(5)).item() < 1e-9

    def test_direct_formula(self):
        rng = np.random.default_rng(0)
        z, t, w = rng.standard_normal((16, 5)) * 3, rng.integers(0, 2, (16, 5)), rng.random(5) + 0.5
        p = sigmoid(z)
        ref = np.mean(w * (-t * np.log(p) - (1 - t) * np.log(1 - p)))
        assert abs(TR.weighted_bce(Tensor(z), t, w).item() - ref) < 1e-10

    def test_non_binary_target(self):
        with pytest.raises(ContractError):
            TR.weighted_bce(Tensor([[0.0]]), [[0.5]], [1.0])


class TestDistillKl:
    def test_worked_example(self):
        zt = np.log(0.8 / 0.2)
        kl = TR.distill_kl(Tensor([[0.0]]), [[zt]], 1.0).item()
        assert abs(kl - (0.8 * math.log(1.6) + 0.2 * math.log(0.4))) < 1e-12
        assert abs(kl - 0.19274) < 1e-5

    def test_identical_logits(self):
        z = np.random.default_rng(1).standard_normal((4, 5))
        assert abs(TR.distill_kl(Tensor(z), z, 2.0).item()) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a, b = rng.standard_normal((2, 5)) * 4, rng.standard_normal((2, 5)) * 4
            assert TR.distill_kl(Tensor(a), b, float(rng.uniform(0.5, 4))).item() >= -1e-15

    def test_temperature_scaling(self):
        zs, zt, tau = np.array([[0.4]]), np.array([[-1.0]]), 3.0
        p, q = sigmoid(zt / tau), sigmoid(zs / tau)
        ref = tau**2 * np.mean(p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q)))
        assert abs(TR.distill_kl(Tensor(zs), zt, tau).item() - ref) < 1e-12

    def test_teacher_is_detached(self):
        zs = Tensor(np.zeros((1, 5)), requires_grad=True)
        zt = Tensor(np.ones((1, 5)), requires_grad=True)
        T.backward(TR.distill_kl(zs, zt))
        assert zs.grad is not None and zt.grad is None


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.z, self.d, self.zt = (rng.standard_normal((6, 5)) for _ in range(3))
        self.t = rng.integers(0, 2, (6, 5))
        self.w = rng.random(5) + 0.5

    def test_lambda_zero(self):
        c = cfg(distill_lambda=0.0)
        loss, _ = TR.total_loss(Tensor(self.z), self.t, self.w, c, Tensor(self.d), self.zt)
        assert loss.item() == TR.weighted_bce(Tensor(self.z), self.t, self.w).item()

    def test_no_teacher(self):
        loss, parts = TR.total_loss(Tensor(self.z), self.t, self.w, cfg())
        assert loss.item() == TR.weighted_bce(Tensor(self.z), self.t, self.w).item()
        assert parts["kl"] == 0.0

    def test_component_sum(self):
        c = cfg(distill_lambda=1.0)
        loss, parts = TR.total_loss(Tensor(self.z), self.t, self.w, c, Tensor(self.d), self.zt)
        bce = TR.weighted_bce(Tensor(self.z), self.t, self.w).item()
        kl = TR.distill_kl(Tensor(self.d), self.zt).item()
        assert abs(loss.item() - (bce + kl)) < 1e-12
        assert parts == pytest.approx({"bce": bce, "kl": kl})

    def test_half_pair(self):
        with pytest.raises(ContractError):
            TR.total_loss(Tensor(self.z), self.t, self.w, cfg(), dist_logits=Tensor(self.d))
        with pytest.raises(ContractError):
            TR.total_loss(Tensor(self.z), self.t, self.w, cfg(), teacher_logits=self.zt)


class TestSchedule:
    # 10 steps per epoch, 2 warmup epochs, 11 epochs: the cosine part spans steps 20..109
    c = cfg(lr_init=0.3, warmup_epochs=2, max_epochs=11)

    def test_anchors(self):
        lr = [TR.lr_at(s, 10, self.c) for s in range(110)]
        assert lr[19] == 0.3
        assert lr[20] == 0.3
        assert abs(lr[109]) < 1e-12 * 0.3
        # progress (s - 20) / 89 hits 1/2 at s = 64.5; check the formula there and its neighbours
        for s in (64, 65):
            assert lr[s] == pytest.approx(0.3 * 0.5 * (1 + math.cos(math.pi * (s - 20) / 89)), rel=1e-15)
        assert abs((lr[64] + lr[65]) / 2 - 0.15) < 1e-4

    def test_midpoint_exact(self):
        # one step per epoch, cosine over steps 1..3: step 2 sits on the midpoint
        c = cfg(lr_init=0.3, warmup_epochs=1, max_epochs=4)
        assert TR.lr_at(2, 1, c) == pytest.approx(0.15, abs=1e-16)

    def test_shape(self):
        lr = np.array([TR.lr_at(s, 10, self.c) for s in range(110)])
        assert np.all(np.diff(lr[:20]) > 0)
        assert np.all(np.diff(lr[19:]) <= 0)
        np.testing.assert_allclose(lr[:20], 0.3 * np.arange(1, 21) / 20)


class TestAdamW:
    def test_first_step_is_lr(self):
        theta = np.array([1.0])
        TR.adamw_step(theta, np.array([3.0]), np.zeros(1), np.zeros(1), 1, 0.1, 0.0)
        # bias-corrected m/sqrt(v) = g/|g| on the first step
        assert abs(theta[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))) < 1e-12

    def test_closed_form(self):
        g, lr, b1, b2, eps = 0.7, 0.01, 0.9, 0.999, 1e-8
        theta, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
        expected = 0.0
        for t in range(1, 201):
            TR.adamw_step(theta, np.array([g]), m, v, t, lr, 0.0)
            mt, vt = g * (1 - b1**t), g * g * (1 - b2**t)
            expected -= lr * (mt / (1 - b1**t)) / (math.sqrt(vt / (1 - b2**t)) + eps)
        assert abs(theta[0] - expected) < 1e-12
        assert abs(theta[0] + 200 * lr) < 1e-6

    def test_zero_grad_no_decay(self):
        theta = np.array([1.5, -2.0])
        TR.adamw_step(theta, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1, 0.0)
        np.testing.assert_array_equal(theta, [1.5, -2.0])

    def test_pure_decay(self):
        theta, m, v = np.array([2.0]), np.zeros(1), np.zeros(1)
        for t in range(1, 6):
            TR.adamw_step(theta, np.zeros(1), m, v, t, 0.1, 0.5)
        assert abs(theta[0] - 2.0 * 0.95**5) < 1e-15

    def test_step_counter(self):
        with pytest.raises(ContractError):
            TR.adamw_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0, 0.1, 0.0)

    def test_groups(self):
        m = M.build("deit-tiny")
        opt = TR.AdamW(m.named_parameters(), weight_decay=0.05)
        decay = dict(zip(opt.names, opt.decay))
        assert decay["head.weight"] == 0.05 and decay["blocks.0.attn.qkv.weight"] == 0.05
        for name in ("head.bias", "patch_embed.cls_token", "patch_embed.dist_token", "patch_embed.pos_embed",
                     "norm.weight", "blocks.0.norm1.weight"):
            assert decay[name] == 0.0


class TestEarlyStopping:
    def test_worsening(self):
        stop = TR.EarlyStopping(patience=1)
        assert not stop.update(1, 1.0)
        assert stop.update(2, 1.1)
        assert stop.best_epoch == 1

    def test_reset_on_improvement(self):
        stop = TR.EarlyStopping(patience=2)
        flags = [stop.update(e, v) for e, v in enumerate([3.0, 3.1, 2.0, 2.5, 2.6], start=1)]
        assert flags == [False, False, False, False, True]


@pytest.fixture(scope="module")
def short_run():
    fold = synth_fold(48, 16, seed=4)
    c = cfg(max_epochs=4, warmup_epochs=1, batch_size=16, augment=D.AugmentConfig(), seed=3)
    runs = [TR.train(M.build("cnn-tiny", seed=1), fold, c) for _ in range(2)]
    return c, runs


class TestTrain:
    def test_lr_trace(self, short_run):
        c, [(_, h), _] = short_run
        assert h.lr_trace == [TR.lr_at(s, h.steps_per_epoch, c) for s in range(len(h.lr_trace))]
        assert h.steps_per_epoch == 3 and h.stopping_epoch <= c.max_epochs

    def test_deterministic(self, short_run):
        _, [(m1, h1), (m2, h2)] = short_run
        assert h1 == h2
        for (_, a), (_, b) in zip(m1.state().items(), m2.state().items()):
            assert np.array_equal(a, b)

    def test_history_csv(self, short_run, tmp_path):
        _, [(_, h), _] = short_run
        h.write_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,bce,kl,lr"
        assert len(lines) == 1 + len(h.epochs)

    def test_returns_best_checkpoint(self, short_run):
        c, [(m, h), _] = short_run
        fold = synth_fold(48, 16, seed=4)
        w = TR.class_weights(fold.train_labels)
        val, _ = TR.evaluate_loss(m, fold.val_images, fold.val_labels, w, c)
        assert abs(val - min(h.val_loss)) < 1e-9
        assert h.best_epoch == int(np.argmin(h.val_loss)) + 1

    def test_early_stop(self):
        fold = synth_fold(16, 8, seed=5)
        # lr this large wrecks the validation loss after the first epoch
        c = cfg(lr_init=5.0, max_epochs=20, warmup_epochs=1, batch_size=16, patience=1)
        try:
            _, h = TR.train(M.build("cnn-tiny"), fold, c)
        except NonFiniteError:
            return
        assert h.stopping_epoch < 20 and h.stopping_epoch == h.best_epoch + 1

    def test_tiny_vit_fits(self):
        fold = synth_fold(200, 60, seed=2)
        c = cfg(lr_init=5e-4, max_epochs=30, warmup_epochs=2, batch_size=8, weight_decay=0.05, patience=30)
        _, h = TR.train(M.build("vit-tiny", seed=0), fold, c)
        assert min(h.train_loss) < 0.3

    def test_non_finite(self):
        fold = synth_fold(16, 8, seed=6)
        fold.train_images[3, 0, 0] = np.nan
        with pytest.raises(NonFiniteError, match="batch"):
            TR.train(M.build("cnn-tiny"), fold, cfg(max_epochs=3, warmup_epochs=1))

    def test_teacher_contract(self):
        fold = synth_fold(16, 8, seed=7)
        with pytest.raises(ContractError):
            TR.train(M.build("deit-tiny"), fold, cfg(distill_lambda=1.0, max_epochs=3, warmup_epochs=1))
        with pytest.raises(ContractError):
            TR.train(M.build("vit-tiny"), fold, cfg(max_epochs=3, warmup_epochs=1), teacher=M.build("cnn-tiny"))

    def test_teacher_is_frozen(self):
        fold = synth_fold(16, 8, seed=8)
        teacher = M.build("cnn-tiny", seed=2)
        before = {k: v.copy() for k, v in teacher.state().items()}
        TR.train(M.build("deit-tiny"), fold, cfg(distill_lambda=1.0, max_epochs=2, warmup_epochs=1), teacher=teacher)
        for k, v in teacher.state().items():
            assert np.array_equal(v, before[k])
