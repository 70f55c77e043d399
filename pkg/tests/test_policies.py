import numpy as np
import pytest

from lstsd import autodiff as ad
from lstsd.data import LabeledDataset, gen_spiral
from lstsd.errors import DimensionError, ValidationError
from lstsd.models import ModelArch, ModelParams, init_params
from lstsd.optim import LrSchedule
from lstsd.policies import (
    PolicyConfig,
    RunReport,
    TrainSettings,
    evaluate,
    mean_teacher_update,
    policy_echo,
    snapshot_ensembles_predict,
    temporal_ensemble_update,
    train,
)

ARCH = ModelArch("mlp", (2,), 3, (8,))
TRAIN = gen_spiral(8, 3, 0.05, seed=0)
TEST = gen_spiral(5, 3, 0.05, seed=1)
CYCLIC = LrSchedule("cyclic_cosine", 0.1, cycle_epochs=2)


def run(kind, batch=6, schedule=None, seed=0, observer=None, **cfg):
    cfg.setdefault("mini_gen_epochs", 2)
    cfg.setdefault("mini_generations", 3)
    policy = PolicyConfig.for_kind(kind, **cfg)
    settings = TrainSettings(schedule=schedule or LrSchedule(), batch_size=batch)
    return train(policy, ARCH, TRAIN, TEST, settings, seed, observer=observer)


def params_at_step(kind, step, **kw):
    seen = {}

    def observer(ev):
        if ev.step == step:
            seen["params"] = ev.params_before

    run(kind, observer=observer, **kw)
    return seen["params"]


def identity_arch(c):
    arch = ModelArch("mlp", (c,), c)
    return arch, ModelParams({"fc0.weight": np.eye(c), "fc0.bias": np.zeros(c)})


class TestConfig:
    def test_defaults(self):
        cfg = PolicyConfig()
        assert (cfg.lambda_long, cfg.lambda_short, cfg.temperature, cfg.mini_gen_epochs) == (2.4, 4.0, 2.0, 6)
        assert cfg.total_epochs == 30

    def test_ablation_guards(self):
        with pytest.raises(ValidationError, match="lambda_long == 0"):
            PolicyConfig(kind="lstsd_no_long", lambda_long=1.0)
        with pytest.raises(ValidationError, match="lambda_short == 0"):
            PolicyConfig(kind="lstsd_no_short")

    def test_for_kind_zeroes_ablated_weight(self):
        assert PolicyConfig.for_kind("lstsd_no_long").lambda_long == 0.0
        assert PolicyConfig.for_kind("lstsd_no_short").lambda_short == 0.0
        assert PolicyConfig.for_kind("lstsd_no_short").lambda_long == 2.4

    @pytest.mark.parametrize(
        "kwargs",
        [dict(kind="born_again"), dict(temperature=0.0), dict(mini_gen_epochs=0), dict(alpha_temporal=1.0), dict(teacher_timing="later")],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            PolicyConfig(**kwargs)

    def test_echo(self):
        echo = policy_echo(PolicyConfig())
        assert echo["policy.kind"] == "lstsd" and echo["policy.lambda_short"] == "4.0"


class TestVanillaAndLstsd:
    def test_vanilla_has_no_kl(self):
        _, report = run("vanilla")
        assert all(r.loss_kl_long == 0 and r.loss_kl_short == 0 for r in report.epochs)
        assert all(r.loss_total == r.loss_ce for r in report.epochs)

    def test_lstsd_matches_vanilla_through_first_mini_generation(self):
        # 24 samples, batch 6: 4 steps per epoch, mini-gen 1 = steps 0..7
        a = params_at_step("lstsd", 8)
        b = params_at_step("vanilla", 8)
        assert a.equals(b)
        assert not run("lstsd")[0].equals(run("vanilla")[0])

    def test_kl_terms_active_after_first_mini_generation(self):
        _, report = run("lstsd")
        assert all(r.loss_kl_short == 0 for r in report.epochs[:2])
        assert all(r.loss_kl_short > 0 and r.loss_kl_long > 0 for r in report.epochs[2:])

    def test_zero_weights_reduce_to_vanilla(self):
        a, _ = run("lstsd", lambda_long=0.0, lambda_short=0.0)
        b, _ = run("vanilla")
        assert a.equals(b)

    def test_single_teacher_collapse_with_full_batch(self):
        a, ra = run("lstsd", batch=len(TRAIN))
        b, rb = run("lstsd_single", batch=len(TRAIN))
        assert a.equals(b)
        assert ra.to_csv() == rb.to_csv()

    def test_single_teacher_differs_with_minibatches(self):
        assert not run("lstsd")[0].equals(run("lstsd_single")[0])

    @pytest.mark.parametrize("kind", ["lstsd_no_long", "lstsd_no_short"])
    def test_ablations_zero_one_term(self, kind):
        _, report = run(kind)
        weights = report.epochs[-1]
        assert weights.loss_total > weights.loss_ce

    def test_post_update_timing_changes_trajectory(self):
        assert not run("lstsd", teacher_timing="post_update")[0].equals(run("lstsd")[0])


class TestStepTrace:
    def trace(self, observer=None):
        ds = LabeledDataset(np.random.default_rng(0).normal(size=(4, 2)), [0, 1, 2, 0], 3)
        events = []

        def record(ev):
            events.append(ev)
            if observer:
                observer(ev)

        policy = PolicyConfig(kind="lstsd", mini_gen_epochs=2, mini_generations=2)
        train(policy, ARCH, ds, ds, TrainSettings(batch_size=2), 0, observer=record)
        return events

    def test_first_mini_generation_steps_are_ce_only(self):
        first_epoch = [e for e in self.trace() if e.epoch == 1]
        assert len(first_epoch) == 2
        assert all(e.breakdown.total == e.breakdown.ce for e in first_epoch)

    def test_second_mini_generation_reads_valid_rows(self):
        for e in (e for e in self.trace() if e.mini_gen == 2):
            assert e.teacher_long is not None and e.teacher_short is not None

    def test_final_epoch_writes_every_long_row(self):
        long_rows = {}
        # the store is live, so count while each step is observed
        self.trace(lambda e: long_rows.__setitem__(e.epoch, int(e.store.long_valid.sum())))
        assert long_rows[1] == 0
        assert long_rows[2] == 4


class TestMeanTeacher:
    def test_single_update(self):
        out = mean_teacher_update(ModelParams({"w": np.zeros(2)}), ModelParams({"w": np.ones(2)}), 0.999)
        np.testing.assert_allclose(out["w"].data, 0.001, rtol=0, atol=1e-15)

    def test_alpha_one_keeps_ema(self):
        ema = ModelParams({"w": np.array([0.3, -2.0])})
        out = mean_teacher_update(ema, ModelParams({"w": np.array([5.0, 5.0])}), 1.0)
        assert out.equals(ema)

    def test_geometric_closed_form(self):
        ema0, c, alpha = np.array([2.0, -1.0]), np.array([0.5, 3.0]), 0.999
        ema = ModelParams({"w": ema0})
        for _ in range(3):
            ema = mean_teacher_update(ema, ModelParams({"w": c}), alpha)
        np.testing.assert_allclose(ema["w"].data, c + alpha**3 * (ema0 - c), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mean_teacher_update(ModelParams({"w": np.zeros(2)}), ModelParams({"w": np.zeros(3)}), 0.9)

    def test_training_runs(self):
        _, report = run("mean_teacher")
        assert all(r.loss_kl_short >= 0 for r in report.epochs)
        assert report.epochs[0].loss_kl_short > 0


class TestTemporalEnsembles:
    def test_single_update(self):
        assert temporal_ensemble_update(np.array([[0.5]]), np.array([[1.0]]), 0.6)[0, 0] == pytest.approx(0.7, abs=1e-15)

    def test_alpha_zero(self):
        z = np.array([[0.2, 0.8]])
        np.testing.assert_array_equal(temporal_ensemble_update(np.array([[0.9, 0.1]]), z, 0.0), z)

    def test_three_epoch_hand_trace(self):
        zs = [np.array([[0.9, 0.1]]), np.array([[0.6, 0.4]]), np.array([[0.3, 0.7]])]
        big_z = np.array([[0.5, 0.5]])
        for z in zs:
            big_z = temporal_ensemble_update(big_z, z, 0.6)
        # Z3 = a^3 Z0 + (1-a)(a^2 z1 + a z2 + z3)
        expected = 0.216 * np.array([0.5, 0.5]) + 0.4 * (0.36 * zs[0] + 0.6 * zs[1] + zs[2])
        np.testing.assert_allclose(big_z, expected, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            temporal_ensemble_update(np.zeros((2, 2)), np.zeros((2, 3)), 0.6)

    def test_first_epoch_is_ce_only(self):
        _, report = run("temporal_ensembles")
        assert report.epochs[0].loss_kl_short == 0
        assert report.epochs[1].loss_kl_short > 0


class TestSnapshotPolicies:
    def test_requires_matching_cyclic_schedule(self):
        with pytest.raises(ValidationError, match="cyclic_cosine"):
            run("snapshot_distillation")
        with pytest.raises(ValidationError, match="cycle_epochs=2"):
            run("snapshot_ensembles", schedule=LrSchedule("cyclic_cosine", cycle_epochs=3))

    def test_distillation_first_mini_generation_matches_vanilla(self):
        a = params_at_step("snapshot_distillation", 8, schedule=CYCLIC)
        b = params_at_step("vanilla", 8, schedule=CYCLIC)
        assert a.equals(b)

    def test_distillation_zero_weight_is_vanilla(self):
        a, _ = run("snapshot_distillation", schedule=CYCLIC, lambda_baseline=0.0)
        b, _ = run("vanilla", schedule=CYCLIC)
        assert a.equals(b)

    def test_distillation_uses_long_slot(self):
        _, report = run("snapshot_distillation", schedule=CYCLIC)
        assert report.epochs[-1].loss_kl_long > 0 and report.epochs[-1].loss_kl_short == 0

    def test_ensemble_trains_like_vanilla(self):
        a, ra = run("snapshot_ensembles", schedule=CYCLIC)
        b, rb = run("vanilla", schedule=CYCLIC)
        assert a.equals(b)
        assert [r.loss_ce for r in ra.epochs] == [r.loss_ce for r in rb.epochs]


class TestEnsemblePredict:
    def test_single_snapshot_is_softmax(self):
        params = init_params(ARCH, 0)
        x = TEST.features
        expected = ad.softmax_t(ad.matmul(ad.relu(ad.matmul(x, params["fc0.weight"]) + params["fc0.bias"]), params["fc1.weight"]) + params["fc1.bias"], 1.0)
        np.testing.assert_allclose(snapshot_ensembles_predict([params], ARCH, x).data, expected.data, atol=1e-15)

    def test_two_opposite_snapshots_average(self):
        arch, eye = identity_arch(2)
        neg = ModelParams({"fc0.weight": -np.eye(2), "fc0.bias": np.zeros(2)})
        out = snapshot_ensembles_predict([eye, neg], arch, np.array([[50.0, -50.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_identical_snapshots_idempotent(self):
        params = init_params(ARCH, 2)
        one = snapshot_ensembles_predict([params], ARCH, TEST.features).data
        three = snapshot_ensembles_predict([params] * 3, ARCH, TEST.features).data
        np.testing.assert_allclose(three, one, rtol=0, atol=1e-15)

    def test_empty(self):
        with pytest.raises(ValidationError):
            snapshot_ensembles_predict([], ARCH, TEST.features)


class TestEvaluate:
    def test_perfect(self):
        arch, eye = identity_arch(3)
        ds = LabeledDataset(np.eye(3) * 5, [0, 1, 2], 3)
        assert evaluate(eye, arch, ds) == 1.0

    def test_ties_pick_class_zero(self):
        arch, _ = identity_arch(4)
        zero = ModelParams({"fc0.weight": np.zeros((4, 4)), "fc0.bias": np.zeros(4)})
        ds = LabeledDataset(np.ones((8, 4)), [0, 1, 2, 3, 0, 1, 2, 3], 4)
        assert evaluate(zero, arch, ds) == 0.25

    def test_hand_counted(self):
        arch, eye = identity_arch(3)
        logits = np.array([[3.0, 1, 0], [0, 2, 1], [1, 1, 0], [0, 0, 5], [2, 3, 1]])
        # argmax: 0, 1, 0 (tie), 2, 1 against labels 0, 2, 0, 2, 0 -> 3 correct
        ds = LabeledDataset(logits, [0, 2, 0, 2, 0], 3)
        assert evaluate(eye, arch, ds) == 0.6


class TestReport:
    def test_rerun_identical_csv(self):
        assert run("lstsd", seed=3)[1].to_csv() == run("lstsd", seed=3)[1].to_csv()

    def test_seed_changes_csv(self):
        assert run("lstsd", seed=3)[1].to_csv() != run("lstsd", seed=4)[1].to_csv()

    def test_csv_layout(self):
        _, report = run("vanilla")
        lines = report.to_csv().splitlines()
        assert lines[0] == "epoch,mini_gen,lr,loss_total,loss_ce,loss_kl_long,loss_kl_short,train_acc,test_acc"
        assert len(lines) == 7
        assert lines[1].startswith("1,1,0.1,")

    def test_round_trip_through_files(self, tmp_path):
        _, report = run("lstsd")
        report.config = {"policy.kind": "lstsd"}
        (tmp_path / "r.csv").write_text(report.to_csv())
        (tmp_path / "r.summary.txt").write_text(report.summary())
        back = RunReport.from_files(tmp_path / "r.csv", tmp_path / "r.summary.txt")
        assert back.to_csv() == report.to_csv()
        assert back.final_test_acc == report.final_test_acc
        assert back.config == {"policy.kind": "lstsd"}

    def test_dataset_mismatch_rejected(self):
        bad = LabeledDataset(np.zeros((4, 3)), [0, 1, 0, 1], 3)
        with pytest.raises(ValidationError, match="input shape"):
            train(PolicyConfig(), ARCH, bad, TEST, TrainSettings(), 0)
