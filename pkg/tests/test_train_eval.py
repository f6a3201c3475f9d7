import csv
import math
import warnings

import numpy as np
import pytest

from conftest import make_samples
from mvhedge.checkpoint import dumps
from mvhedge.data_pipeline import (DatasetSplit, ModelVariant, default_test_start, filter_quotes,
                                   market_context, pair_consecutive, split_dataset)
from mvhedge.errors import ConfigurationError, DomainError, TrainingDivergedError
from mvhedge.hedge_models import BsDeltaModel, HwModel, build_model
from mvhedge.market_math import OptionKind
from mvhedge.synth_market import GeneratorConfig, generate_quote_panel
from mvhedge.train_eval import (EarlyStopping, TrainConfig, curve_samples, evaluate, hedge_loss,
                                hedge_loss_grad, hedge_ratio_curve, minibatches, train,
                                write_curve, write_train_log)


class ScriptedModel:
    """Stand-in network whose validation loss follows a fixed script.

    Validation samples have dS = 1 and dV = 0, so the loss is pred^2; each
    validation call advances one step through ``script``.
    """

    kind = OptionKind.CALL

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0
        self.w = np.zeros(1)

    def fit_feature_stats(self, samples):
        pass

    def parameters(self):
        return [self.w]

    def forward_train(self, batch):
        def backprop(dpred):
            return [np.zeros(1)]
        return np.zeros(len(batch)), backprop

    def predict(self, samples):
        loss = self.script[min(self.calls, len(self.script) - 1)]
        self.calls += 1
        return np.full(len(samples), math.sqrt(loss))

    def state_dict(self):
        return {"snapshot": self.calls}

    def load_state_dict(self, state):
        self.calls = state["snapshot"]


def scripted_split(n_train=8):
    rng = np.random.default_rng(0)
    tr = make_samples(rng.normal(size=n_train), rng.normal(size=n_train))
    val = make_samples(np.ones(4), np.zeros(4))
    return DatasetSplit(tr, val, val)


@pytest.fixture(scope="module")
def small_world():
    panel = generate_quote_panel(GeneratorConfig(n_days=260, seed=5))
    mkt = market_context(panel)
    s = pair_consecutive(filter_quotes(panel), ModelVariant.DNN3, kind=OptionKind.CALL, market=mkt)
    return split_dataset(s, default_test_start(panel), 0.2, 0)


class TestHedgeLoss:
    def test_exact_hedge(self):
        ds = np.array([2.0, -1.0, 0.5])
        dv = np.array([1.0, 0.3, -0.2])
        assert hedge_loss(dv / ds, make_samples(ds, dv)) == 0.0

    def test_unhedged(self):
        dv = np.array([1.0, -2.0, 3.0])
        assert hedge_loss(np.zeros(3), make_samples(np.ones(3), dv)) == pytest.approx(14 / 3, rel=1e-15)

    def test_two_samples(self):
        s = make_samples([2.0, 1.0], [1.0, 0.0])
        assert hedge_loss(np.array([0.5, 1.0]), s) == 0.5

    def test_empty(self):
        with pytest.raises(DomainError):
            hedge_loss(np.empty(0), make_samples([], []))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            hedge_loss(np.zeros(2), make_samples([1.0], [1.0]))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        s = make_samples(rng.normal(size=6), rng.normal(size=6))
        p = rng.normal(size=6)
        g = hedge_loss_grad(p, s)
        for i in range(6):
            e = np.zeros(6)
            e[i] = 1e-6
            fd = (hedge_loss(p + e, s) - hedge_loss(p - e, s)) / 2e-6
            assert g[i] == pytest.approx(fd, rel=1e-6)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(batch_size=1), dict(patience=0), dict(max_epochs=-1),
                                    dict(learning_rate=0.0), dict(clip_norm=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.learning_rate, c.max_epochs, c.patience, c.clip_norm) == (1024, 5e-4, 200, 5, 5.0)


class TestEarlyStopping:
    def test_rule_trace(self):
        es = EarlyStopping(2)
        steps = [es.update(v, i + 1) for i, v in enumerate([1.0, 0.9, 0.95, 0.96])]
        assert steps == [(True, False), (True, False), (False, False), (False, True)]
        assert es.best_epoch == 2 and es.best == 0.9

    def test_train_restores_epoch_two_snapshot(self):
        m = ScriptedModel([1.0, 0.9, 0.95, 0.96, 0.97, 0.98])
        m, log = train(m, scripted_split(), TrainConfig(patience=2, max_epochs=50))
        assert [e.epoch for e in log] == [1, 2, 3, 4]
        np.testing.assert_allclose([e.val_loss for e in log], [1.0, 0.9, 0.95, 0.96], rtol=1e-15)
        assert [e.stopped for e in log] == [False, False, False, True]
        assert m.calls == 2  # state captured right after the second validation check

    def test_max_epochs_marks_stop(self):
        m, log = train(ScriptedModel([3.0, 2.0, 1.0]), scripted_split(), TrainConfig(max_epochs=3))
        assert len(log) == 3 and log[-1].stopped

    def test_never_worse_than_best(self, small_world):
        m = build_model(ModelVariant.DNN3, OptionKind.CALL, seed=0, hidden=(16, 16, 16))
        m, log = train(m, small_world, TrainConfig(max_epochs=6, patience=2, batch_size=256))
        best = min(e.val_loss for e in log)
        assert hedge_loss(m.predict(small_world.validation), small_world.validation) == pytest.approx(best, rel=1e-12)


class TestTrain:
    def test_zero_epochs(self, small_world):
        m = build_model(ModelVariant.DNN2, OptionKind.CALL, seed=3)
        before = dumps(m)
        m, log = train(m, small_world, TrainConfig(max_epochs=0))
        assert log == [] and dumps(m) == before

    def test_empty_validation(self):
        s = scripted_split()
        with pytest.raises(ConfigurationError):
            train(ScriptedModel([1.0]), DatasetSplit(s.train, s.train.take(np.array([], int)), s.test))

    def test_hw_and_bs(self, small_world):
        hw, log = train(build_model(ModelVariant.HW, OptionKind.CALL), small_world)
        assert isinstance(hw, HwModel) and log == []
        bs, log = train(BsDeltaModel(OptionKind.CALL), small_world)
        assert isinstance(bs, BsDeltaModel) and log == []

    def test_divergence_reported(self):
        class Exploding(ScriptedModel):
            def forward_train(self, batch):
                return np.full(len(batch), np.inf), lambda d: [np.zeros(1)]
        with pytest.raises(TrainingDivergedError) as info:
            train(Exploding([1.0]), scripted_split(), TrainConfig(max_epochs=2))
        assert info.value.epoch == 1 and info.value.batch == 0

    def test_deterministic(self, small_world):
        cfg = TrainConfig(max_epochs=2, batch_size=256, seed=4)
        a, _ = train(build_model(ModelVariant.DNN3, OptionKind.CALL, seed=1), small_world, cfg)
        b, _ = train(build_model(ModelVariant.DNN3, OptionKind.CALL, seed=1), small_world, cfg)
        assert dumps(a) == dumps(b)

    def test_first_epoch_learns(self, small_world):
        m = build_model(ModelVariant.DNN3, OptionKind.CALL, seed=0)
        m.fit_feature_stats(small_world.train)
        initial = hedge_loss(m.predict(small_world.train), small_world.train)
        _, log = train(m, small_world, TrainConfig(max_epochs=1, batch_size=256))
        assert log[0].train_loss < initial

    def test_train_log_csv(self, tmp_path):
        _, log = train(ScriptedModel([2.0, 1.0]), scripted_split(), TrainConfig(max_epochs=2))
        write_train_log(log, tmp_path / "log.csv")
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["epoch", "train_loss", "val_loss", "stopped"]
        assert [r[0] for r in rows[1:]] == ["1", "2"] and rows[-1][3] == "1"


class TestMinibatches:
    def test_cover_and_sizes(self):
        b = minibatches(10, 4, np.random.default_rng(0))
        assert [len(x) for x in b] == [4, 4, 2]
        assert sorted(np.concatenate(b).tolist()) == list(range(10))

    def test_single_row_tail_merged(self):
        b = minibatches(9, 4, np.random.default_rng(0))
        assert [len(x) for x in b] == [4, 5]

    def test_seeded(self):
        a = minibatches(50, 8, np.random.default_rng(3))
        b = minibatches(50, 8, np.random.default_rng(3))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


def mixed_samples(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    delta = rng.uniform(0.05, 0.95, n)
    ds = rng.normal(0, 20, n)
    return make_samples(ds, delta * ds + rng.normal(0, 2, n), bs_delta=delta)


class TestEvaluate:
    def test_bs_echo_zero_gain(self):
        r = evaluate(BsDeltaModel(OptionKind.CALL), mixed_samples())
        assert r.overall.gain == 0.0
        assert all(b.gain == 0.0 for b in r.per_bucket.values())

    def test_perfect_model_gain_one(self):
        s = mixed_samples()
        r = evaluate(None, s, predictions=s.delta_v / s.delta_s)
        assert r.overall.gain == 1.0

    def test_gain_anchor(self):
        s = make_samples([1.0], [1.5], bs_delta=[0.5])
        pred = np.array([1.5 - math.sqrt(0.6923)])
        assert evaluate(None, s, predictions=pred).overall.gain == pytest.approx(0.3077, abs=1e-12)

    def test_identities(self):
        s = mixed_samples(seed=2)
        pred = s.bs_delta + np.random.default_rng(3).normal(0, 0.05, len(s))
        r = evaluate(None, s, predictions=pred)
        for b in r.per_bucket.values():
            assert abs(b.gain - (1 - b.mse_model / b.mse_bs)) <= 1e-12
        n = sum(b.n for b in r.per_bucket.values())
        assert n == r.overall.n == len(s)
        weighted = sum(b.n * b.mse_model for b in r.per_bucket.values()) / n
        assert abs(weighted - r.overall.mse_model) <= 1e-12 * r.overall.mse_model

    def test_undefined_gain(self):
        s = make_samples([1.0, 2.0], [0.5, 1.0], bs_delta=[0.5, 0.5])
        r = evaluate(None, s, predictions=np.array([0.4, 0.4]))
        assert r.overall.gain is None
        assert r.rows()[-1][-1] == "undefined"

    def test_empty(self):
        with pytest.raises(DomainError):
            evaluate(BsDeltaModel(OptionKind.CALL), make_samples([], []))

    def test_csv(self, tmp_path):
        r = evaluate(BsDeltaModel(OptionKind.CALL), mixed_samples())
        r.to_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["bucket", "n", "mse_model", "mse_bs", "gain"]
        assert len(rows) == 1 + len(r.per_bucket) + 1 and rows[-1][0] == "overall"


class TestCurve:
    grid = [round(0.05 * i, 2) for i in range(1, 20)]

    def test_bs_identity(self):
        assert hedge_ratio_curve(BsDeltaModel(OptionKind.CALL), 30 / 365, 0.16, [0.5]) == [(0.5, 0.5)]

    def test_grid_echo(self):
        c = hedge_ratio_curve(BsDeltaModel(OptionKind.CALL), 30 / 365, 0.16, self.grid)
        assert len(c) == 19 and [x for x, _ in c] == self.grid

    def test_out_of_range_skipped(self):
        with pytest.warns(UserWarning):
            c = hedge_ratio_curve(BsDeltaModel(OptionKind.CALL), 30 / 365, 0.16, [0.01, 0.5, 0.99])
        assert [x for x, _ in c] == [0.5]

    def test_put_grid(self):
        grid = [-x for x in self.grid]
        c = hedge_ratio_curve(BsDeltaModel(OptionKind.PUT), 30 / 365, 0.0, grid)
        assert [y for _, y in c] == grid

    def test_network_curve(self):
        m = build_model(ModelVariant.DNN3, OptionKind.CALL, seed=0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            c = hedge_ratio_curve(m, 30 / 365, 0.16, self.grid)
        assert len(c) == 19 and all(0.0 <= y <= 1.0 for _, y in c)

    def test_feature_construction(self):
        s = curve_samples(OptionKind.CALL, ModelVariant.DNN3, 30 / 365, 0.25, np.array([0.3, 0.7]))
        assert s.feature_names[-1] == "vix"
        np.testing.assert_allclose(s.features[:, -1], 0.25, rtol=1e-15)
        assert np.all(np.diff(s.moneyness) > 0)

    def test_write(self, tmp_path):
        write_curve([(0.5, 0.45)], tmp_path / "c.csv")
        assert open(tmp_path / "c.csv").read() == "bs_delta,predicted_delta\n0.5,0.45\n"
