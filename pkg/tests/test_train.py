"""Optimizer, schedule, training loop, and checkpoint contracts."""

import numpy as np
import pytest

from ramen import data as D
from ramen import model as M
from ramen import train as TR
from ramen.errors import DataError, NumericError
from ramen.tensor import Tensor


class TestSchedule:
    def test_warmup_values_exact(self):
        s = TR.Schedule()
        assert TR.lr_at_epoch(s, 1) == 2.5e-4
        assert TR.lr_at_epoch(s, 2) == 5e-4
        assert TR.lr_at_epoch(s, 3) == 7.5e-4
        assert TR.lr_at_epoch(s, 4) == 1.0e-3

    def test_plateau_values_exact(self):
        s = TR.Schedule()
        for epoch in range(5, 11):
            assert TR.lr_at_epoch(s, epoch) == 5e-4

    def test_decay_values(self):
        s = TR.Schedule()
        assert TR.lr_at_epoch(s, 11) == 5e-4 * 0.25
        assert TR.lr_at_epoch(s, 12) == 1.25e-4
        assert TR.lr_at_epoch(s, 13) == 5e-4 * 0.25**2
        assert TR.lr_at_epoch(s, 20) == 5e-4 * 0.25**5

    def test_always_positive(self):
        s = TR.Schedule()
        for epoch in range(1, 60):
            assert TR.lr_at_epoch(s, epoch) > 0.0

    def test_epoch_is_one_based(self):
        with pytest.raises(ValueError, match="1-based"):
            TR.lr_at_epoch(TR.Schedule(), 0)

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError):
            TR.Schedule(decay_factor=0.0)


def tiny_params(values):
    return [("p", Tensor(np.asarray(values, dtype=np.float64), requires_grad=True))]


class TestAdamax:
    def test_zero_gradient_is_noop(self):
        params = tiny_params([1.0, -2.0, 3.0])
        state = TR.AdamaxState.init(params)
        before = params[0][1].data.copy()
        TR.adamax_step(state, params, {"p": np.zeros(3)}, lr=1e-3)
        np.testing.assert_array_equal(params[0][1].data, before)
        assert state.t == 1

    def test_hand_computed_single_step(self):
        # scalar, g=1, fresh state, beta1=0.9: m=0.1, u=1, bias=0.1
        # step = (lr / 0.1) * 0.1 / (1 + eps) ~= lr
        params = tiny_params([0.0])
        state = TR.AdamaxState.init(params)
        TR.adamax_step(state, params, {"p": np.array([1.0])}, lr=1e-3)
        assert params[0][1].data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_matches_scalar_reference_implementation(self):
        # independent reference: pure-python floats over a 100-step stream
        rng = np.random.default_rng(0)
        gs = rng.standard_normal(100)
        beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 3e-4

        theta_ref, m_ref, u_ref = 0.7, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            m_ref = beta1 * m_ref + (1 - beta1) * float(g)
            u_ref = max(beta2 * u_ref, abs(float(g)))
            theta_ref -= (lr / (1 - beta1**t)) * m_ref / (u_ref + eps)

        params = tiny_params([0.7])
        state = TR.AdamaxState.init(params)
        for g in gs:
            TR.adamax_step(state, params, {"p": np.array([g])}, lr=lr)
        assert params[0][1].data[0] == pytest.approx(theta_ref, abs=1e-12)

    def test_two_identical_steps_reproduced_by_reference(self):
        beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 1e-2
        g = 0.5
        theta_ref, m_ref, u_ref = 1.0, 0.0, 0.0
        for t in (1, 2):
            m_ref = beta1 * m_ref + (1 - beta1) * g
            u_ref = max(beta2 * u_ref, abs(g))
            theta_ref -= (lr / (1 - beta1**t)) * m_ref / (u_ref + eps)
        params = tiny_params([1.0])
        state = TR.AdamaxState.init(params)
        for _ in range(2):
            TR.adamax_step(state, params, {"p": np.array([g])}, lr=lr)
        assert params[0][1].data[0] == pytest.approx(theta_ref, abs=1e-14)

    def test_nonfinite_gradient_names_parameter(self):
        params = tiny_params([1.0])
        state = TR.AdamaxState.init(params)
        with pytest.raises(NumericError, match="'p'"):
            TR.adamax_step(state, params, {"p": np.array([np.nan])}, lr=1e-3)

    def test_infinity_norm_accumulator_nonnegative(self):
        rng = np.random.default_rng(1)
        params = tiny_params(rng.standard_normal(4))
        state = TR.AdamaxState.init(params)
        for _ in range(20):
            TR.adamax_step(state, params, {"p": rng.standard_normal(4)}, lr=1e-3)
            assert (state.u["p"] >= 0).all()


# ---------------------------------------------------------------------------
# training-loop fixtures: a small corpus and model that train in seconds


@pytest.fixture(scope="module")
def tiny_setup():
    items, scenes, _ = D.generate_corpus(
        D.CorpusConfig(num_scenes=120, per_family=1, max_objects=3, seed=21)
    )
    vocab = D.build_answer_vocab(items, {"min_count": 1})
    data = TR.TrainData.build(
        items, scenes, vocab, feat_seed=5, noise_sigma=0.05, visual_dim=48, num_regions=15
    )
    return data, vocab


def tiny_model(data, ablation="full", seed=0):
    cfg = M.RamenConfig(
        num_answers=len(data.vocab),
        vocab_size=len(D.VOCAB),
        visual_dim=48,
        spatial_dim=512,
        question_dim=32,
        projector_width=32,
        aggregator_hidden=32,
        pre_classifier_width=64,
        embed_dim=16,
        ablation=ablation,
    )
    return M.RamenModel(cfg, seed=seed)


class TestTrainLoop:
    def test_zero_epochs_trains_nothing(self, tiny_setup):
        data, _ = tiny_setup
        net = tiny_model(data)
        result = TR.train(net, data, TR.TrainerConfig(max_epochs=0, batch_size=8))
        assert result.history == []
        assert result.best_params is None

    def test_fixed_seed_bit_identical_trajectories(self, tiny_setup):
        data, _ = tiny_setup
        histories = []
        for _ in range(2):
            net = tiny_model(data)
            result = TR.train(
                net, data, TR.TrainerConfig(max_epochs=3, batch_size=16, seed=4)
            )
            histories.append(result.history)
        assert histories[0] == histories[1]

    def test_memorizes_small_single_family_corpus(self):
        # overfit oracle: a 200-item single-family corpus reaches >= 99%
        # train accuracy within 30 epochs
        from dataclasses import replace

        scenes = [D.generate_scene(23, i, max_objects=3) for i in range(120)]
        items = []
        for sc in scenes:
            items += D.generate_questions(sc, families=("exist",), per_family=2)
        items = [replace(it, id=i, split="train" if i < 200 else "val")
                 for i, it in enumerate(items[:230])]
        vocab = D.build_answer_vocab(items, {"min_count": 1})
        data = TR.TrainData.build(
            items, scenes, vocab, feat_seed=5, noise_sigma=0.05, visual_dim=48,
            num_regions=15,
        )
        cfg = M.RamenConfig(
            num_answers=len(vocab), vocab_size=len(D.VOCAB), visual_dim=48,
            spatial_dim=512, question_dim=96, projector_width=96,
            aggregator_hidden=96, pre_classifier_width=192, embed_dim=16,
        )
        net = M.RamenModel(cfg, seed=0)
        result = TR.train(
            net, data,
            TR.TrainerConfig(max_epochs=30, batch_size=16, early_stop_patience=30, seed=1),
            TR.Schedule(warmup_slope=1e-3, plateau_lr=2e-3, plateau_until_epoch=30),
        )
        assert max(r["train_acc"] for r in result.history) >= 0.99

        # one-batch oracle: the whole train split as a single batch at the
        # reference plateau rate gives a loss curve that is monotone after
        # epoch 3 (up to 5% blips)
        net2 = M.RamenModel(cfg, seed=0)
        result2 = TR.train(
            net2, data,
            TR.TrainerConfig(max_epochs=30, batch_size=200, early_stop_patience=30, seed=1),
            TR.Schedule(warmup_slope=5e-4, warmup_epochs=1, plateau_lr=5e-4,
                        plateau_until_epoch=30),
        )
        losses = [r["train_loss"] for r in result2.history[2:]]
        for prev, cur in zip(losses, losses[1:]):
            assert cur <= prev * 1.05  # monotone up to 5% blips

    def test_early_stopping_keeps_best_not_last(self, tiny_setup):
        data, _ = tiny_setup
        net = tiny_model(data, seed=3)
        result = TR.train(
            net, data,
            TR.TrainerConfig(max_epochs=12, batch_size=16, early_stop_patience=2, seed=2),
        )
        accs = [r["val_acc"] for r in result.history]
        assert result.best_val_acc == max(accs)
        assert result.best_epoch == accs.index(max(accs)) + 1

    def test_nonfinite_loss_aborts_with_location(self, tiny_setup):
        data, _ = tiny_setup
        net = tiny_model(data, seed=4)
        net.classifier.weight.data[...] = np.inf
        with pytest.raises(NumericError, match="epoch 1, step 0"):
            TR.train(net, data, TR.TrainerConfig(max_epochs=1, batch_size=16))

    def test_empty_train_split_rejected(self, tiny_setup):
        data, vocab = tiny_setup
        pruned = TR.TrainData(
            features=data.features,
            scene_row=data.scene_row,
            by_split={"train": [], "val": data.by_split["val"], "test": []},
            vocab=vocab,
            num_regions=data.num_regions,
            visual_dim=data.visual_dim,
        )
        with pytest.raises(DataError, match="train split is empty"):
            TR.train(tiny_model(data), pruned, TR.TrainerConfig(max_epochs=1, batch_size=8))

    def test_augmentation_changes_trajectory_but_stays_deterministic(self, tiny_setup):
        data, _ = tiny_setup
        base = TR.train(
            tiny_model(data), data, TR.TrainerConfig(max_epochs=2, batch_size=16, seed=5)
        )
        aug1 = TR.train(
            tiny_model(data), data,
            TR.TrainerConfig(max_epochs=2, batch_size=16, seed=5, augment_noise=0.2),
        )
        aug2 = TR.train(
            tiny_model(data), data,
            TR.TrainerConfig(max_epochs=2, batch_size=16, seed=5, augment_noise=0.2),
        )
        assert aug1.history == aug2.history
        assert aug1.history != base.history


class TestCheckpoint:
    def test_round_trip_exact(self, tiny_setup, tmp_path):
        data, _ = tiny_setup
        net = tiny_model(data, seed=6)
        cfgt = TR.TrainerConfig(max_epochs=2, batch_size=16, seed=6)
        path = tmp_path / "ck.npz"
        TR.train(net, data, cfgt, checkpoint_path=path)
        loaded, state, meta = TR.load_checkpoint(path)
        for (name, p), (name2, p2) in zip(net.parameters(), loaded.parameters()):
            assert name == name2
            np.testing.assert_array_equal(p.data, p2.data)
        np.testing.assert_array_equal(
            loaded.input_bn.running_mean, net.input_bn.running_mean
        )
        assert meta["epoch"] == 2

    def test_resume_equals_straight_through(self, tiny_setup, tmp_path):
        data, _ = tiny_setup
        # 3 epochs straight
        net_a = tiny_model(data, seed=7)
        res_a = TR.train(net_a, data, TR.TrainerConfig(max_epochs=3, batch_size=16, seed=7))
        # 2 epochs, checkpoint, resume 1 more
        net_b = tiny_model(data, seed=7)
        path = tmp_path / "ck.npz"
        TR.train(net_b, data, TR.TrainerConfig(max_epochs=2, batch_size=16, seed=7),
                 checkpoint_path=path)
        net_c = tiny_model(data, seed=7)
        res_c = TR.train(net_c, data, TR.TrainerConfig(max_epochs=3, batch_size=16, seed=7),
                         resume_from=path)
        for (name, pa), (_, pc) in zip(net_a.parameters(), net_c.parameters()):
            np.testing.assert_array_equal(pa.data, pc.data, err_msg=name)
        assert res_a.history[2] == res_c.history[0]

    def test_config_mismatch_lists_fields(self, tiny_setup, tmp_path):
        data, _ = tiny_setup
        net = tiny_model(data, seed=8)
        path = tmp_path / "ck.npz"
        TR.train(net, data, TR.TrainerConfig(max_epochs=1, batch_size=16, seed=8),
                 checkpoint_path=path)
        other = M.RamenConfig(
            num_answers=net.config.num_answers,
            vocab_size=net.config.vocab_size,
            visual_dim=48,
            spatial_dim=512,
            question_dim=16,  # differs
            projector_width=32,
            aggregator_hidden=16,  # differs
            pre_classifier_width=64,
            embed_dim=16,
        )
        with pytest.raises(DataError) as err:
            TR.load_checkpoint(path, expect_config=other)
        assert "question_dim" in str(err.value)
        assert "aggregator_hidden" in str(err.value)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "ck.npz"
        path.write_bytes(b"not an archive")
        with pytest.raises(DataError, match="corrupt"):
            TR.load_checkpoint(path)

    def test_learning_curve_format(self, tiny_setup, tmp_path):
        data, _ = tiny_setup
        net = tiny_model(data, seed=9)
        res = TR.train(net, data, TR.TrainerConfig(max_epochs=2, batch_size=16, seed=9))
        path = tmp_path / "curve.csv"
        TR.write_learning_curve(res.history, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,lr,train_loss,train_acc,val_acc"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "1"
        assert float(first[1]) == 2.5e-4
