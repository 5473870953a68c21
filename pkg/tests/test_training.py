import numpy as np
import pytest

from dnfnet import autodiff as ad
from dnfnet.autodiff import ContractError, Tensor
from dnfnet.data import SynthSpec, gen_synth
from dnfnet.model import DnfNet, DnfNetSpec, Fcn, FcnSpec
from dnfnet.protocol import make_partitions, partition_splits
from dnfnet.training import (
    Adam,
    AdamState,
    ReduceLROnPlateau,
    TrainConfig,
    TrainingError,
    adam_step,
    evaluate,
    reduce_on_plateau,
    train_model,
)


@pytest.fixture(scope="module")
def syn1_splits():
    ds = gen_synth(SynthSpec("syn1", 11, 2000, seed=1))
    return partition_splits(ds, make_partitions(ds)[0])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = np.array([1.0, -2.0])
        state = AdamState.zeros_like(p)
        for _ in range(5):
            p2 = adam_step(p, np.zeros(2), state, 0.1)
        np.testing.assert_array_equal(p2, p)

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e3])
    def test_first_step_closed_form(self, g):
        # bias correction makes m_hat = g and sqrt(v_hat) = |g|
        out = adam_step(np.array([1.0]), np.array([g]), AdamState.zeros_like(np.array([1.0])), 0.01)
        assert out[0] == pytest.approx(1.0 - 0.01 * g / (abs(g) + 1e-8), abs=1e-15)

    @pytest.mark.parametrize("g", [3.0, -2.5, 1e3])
    def test_first_step_is_lr_times_sign(self, g):
        out = adam_step(np.array([1.0]), np.array([g]), AdamState.zeros_like(np.array([1.0])), 0.01)
        assert out[0] == pytest.approx(1.0 - 0.01 * np.sign(g), abs=1e-9)

    def test_quadratic_bowl(self):
        w = Tensor(np.array(5.0), requires_grad=True)
        opt = Adam({"w": w}, lr=0.05)
        for _ in range(2000):
            w.grad = None
            ad.backward(ad.square(w))
            opt.step()
        assert abs(w.data) < 1e-3

    def test_nan_gradient_names_parameter(self):
        with pytest.raises(TrainingError, match="dense0.w"):
            adam_step(np.ones(2), np.array([1.0, np.nan]), AdamState.zeros_like(np.ones(2)), 0.1, "dense0.w")


class TestPlateau:
    def test_decreasing_losses(self):
        assert reduce_on_plateau(np.linspace(1, 0, 30), patience=5) == []

    def test_constant_losses(self):
        assert reduce_on_plateau([1.0] * 6, patience=5) == [6]

    def test_hand_trace(self):
        assert reduce_on_plateau([1.0, 1.0, 0.9, 0.9, 0.9, 0.9], patience=3, min_delta=1e-4) == [6]

    def test_cooldown_between_cuts(self):
        # the last cooldown epoch already counts toward the next wait
        assert reduce_on_plateau([1.0] * 25, patience=5) == [6, 15, 24]

    def test_floor(self):
        sched = ReduceLROnPlateau(0.5, 1, min_lr=0.3)
        lr = 1.0
        for loss in [1.0] * 20:
            lr = sched.step(loss, lr)
        assert lr == 0.3


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.metric_for("binary") == "roc_auc"
        assert cfg.metric_for("multiclass") == "log_loss"

    @pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"lr": -1.0}, {"patience": 5, "max_epochs": 5}])
    def test_invalid(self, kwargs):
        with pytest.raises(ContractError):
            TrainConfig(**kwargs)


class TestTrainModel:
    def test_zero_patience_stops_after_first_miss(self, syn1_splits):
        train, val, _ = syn1_splits
        model = Fcn(FcnSpec(1, 8), 11, seed=1)
        hist = train_model(model, train, val, TrainConfig(max_epochs=50, patience=0, lr=0.5, metric="log_loss"))
        worse = next(i for i in range(1, hist.epochs) if hist.val_score[i] >= min(hist.val_score[:i]))
        assert hist.epochs == worse + 1
        assert hist.best_score == min(hist.val_score)

    def test_restored_model_reproduces_best_score(self, syn1_splits):
        train, val, _ = syn1_splits
        model = Fcn(FcnSpec(2, 16), 11, seed=2)
        hist = train_model(model, train, val, TrainConfig(max_epochs=15, patience=3, lr=0.01))
        assert evaluate(model, val, hist.metric) == hist.best_score

    def test_same_seed_same_history(self, syn1_splits):
        train, val, _ = syn1_splits
        cfg = TrainConfig(max_epochs=4, patience=2, lr=0.05, seed=3)
        a = train_model(DnfNet(DnfNetSpec(4, 11), seed=3), train, val, cfg)
        b = train_model(DnfNet(DnfNetSpec(4, 11), seed=3), train, val, cfg)
        assert a.as_dict() == b.as_dict()

    def test_callback_sees_every_epoch(self, syn1_splits):
        train, val, _ = syn1_splits
        seen = []
        train_model(Fcn(FcnSpec(1, 4), 11), train, val, TrainConfig(max_epochs=3, patience=2),
                    on_epoch_end=lambda epoch, model, hist: seen.append(epoch))
        assert seen == [1, 2, 3]

    def test_divergence_is_reported(self, syn1_splits):
        train, val, _ = syn1_splits
        model = Fcn(FcnSpec(1, 4), 11)
        model.head[0].data[:] = np.nan
        with pytest.raises(TrainingError):
            train_model(model, train, val, TrainConfig(max_epochs=3, patience=1))

    @pytest.mark.slow
    def test_dnfnet_beats_majority_on_syn1(self):
        ds = gen_synth(SynthSpec("syn1", 11, 10_000, seed=1))
        train, val, _ = partition_splits(ds, make_partitions(ds)[0])
        model = DnfNet(DnfNetSpec(16, 11), seed=1)
        train_model(model, train, val, TrainConfig(max_epochs=40, patience=10, lr=0.05, metric="accuracy"))
        majority = 100.0 * max(val.labels.mean(), 1 - val.labels.mean())
        assert evaluate(model, val, "accuracy") >= majority + 10.0
