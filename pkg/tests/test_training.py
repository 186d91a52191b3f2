import math

import numpy as np
import pytest

from flexkd import autograd as ag
from flexkd.attribution import ImportanceProfile, SelectionSet, aggregate_importance, rank_neurons
from flexkd.datasets import LabeledDataset, PlantedRelevanceSpec, gen_planted_task
from flexkd.errors import ConfigError, DataError
from flexkd.losses import LossWeights
from flexkd.models import Checkpoint, MLPConfig, init_model
from flexkd.training import (
    DistillationPlan,
    Optimizer,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    distill,
    evaluate,
    read_trace,
    train_teacher,
    write_trace,
)


def adam_oracle(x0, a, lr, steps, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on f(x) = a x^2 / 2 with L2 decay added to the gradient."""
    x, m, v, out = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = a * x + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(x)
    return out


@pytest.mark.parametrize("wd", [0.0, 1e-2])
def test_adam_matches_hand_sequence(wd):
    p = ag.Tensor(np.array(1.5), requires_grad=True)
    opt = Optimizer([p], OptimizerState("adam", learning_rate=0.1, weight_decay=wd))
    got = []
    for _ in range(5):
        opt.zero_grad()
        (ag.square(p) * 1.5).backward()  # f = 3 x^2 / 2
        opt.step()
        got.append(float(p.data))
    for a, b in zip(got, adam_oracle(1.5, 3.0, 0.1, 5, wd)):
        assert abs(a - b) < 1e-12


def test_sgd_step():
    p = ag.Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = Optimizer([p], OptimizerState("sgd", learning_rate=0.25, weight_decay=0.0))
    ag.square(p).sum().backward()
    opt.step()
    assert p.data.tolist() == [1.0, -0.5]


def test_optimizer_validation():
    with pytest.raises(ConfigError):
        OptimizerState("rmsprop")
    with pytest.raises(ConfigError):
        OptimizerState(learning_rate=0.0)


@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 2))
    x = x[np.abs(x[:, 0]) > 0.2][:320]
    y = (x[:, 0] > 0).astype(int)
    return LabeledDataset(x, y, ["train"] * len(y))


class TestTrainTeacher:
    def test_separable_task(self, separable):
        ckpt = train_teacher(MLPConfig(2, [8], 2), separable, epochs=10, seed=0, train=TrainConfig(learning_rate=1e-2))
        assert evaluate(ckpt.to_model(), separable) >= 0.99
        assert len(ckpt.metadata["history"]) == 10

    def test_zero_epochs_returns_init(self, separable):
        ckpt = train_teacher(MLPConfig(2, [8], 2), separable, epochs=0, seed=4)
        assert ckpt.checksum == init_model(MLPConfig(2, [8], 2), 4).checksum()

    def test_deterministic(self, separable):
        a = train_teacher(MLPConfig(2, [5], 2), separable, epochs=2, seed=1)
        b = train_teacher(MLPConfig(2, [5], 2), separable, epochs=2, seed=1)
        assert a.checksum == b.checksum

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_last_good(self, separable):
        bad = LabeledDataset(separable.features * 1e306, separable.labels, separable.split)
        with pytest.raises(TrainingDiverged) as info:
            train_teacher(MLPConfig(2, [4], 2), bad, epochs=1, seed=0, train=TrainConfig(learning_rate=1e300))
        assert info.value.last_good is not None

    def test_empty(self):
        empty = LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), [])
        with pytest.raises(DataError):
            train_teacher(MLPConfig(2, [4], 2), empty, epochs=1)


class TestEvaluate:
    def test_perfect_and_constant(self):
        x = np.array([[1.0], [-1.0], [2.0], [-2.0]])
        ds = LabeledDataset(x, np.array([1, 0, 1, 0]), ["test"] * 4)
        m = init_model(MLPConfig(1, [1], 2, "relu"), seed=0)
        m.params["layer0.weight"].data[:] = [[1.0]]
        m.params["layer0.bias"].data[:] = [0.0]
        m.params["head.weight"].data[:] = [[-1.0, 1.0]]
        m.params["head.bias"].data[:] = [0.5, 0.0]
        # relu(x) = 0 on the negatives: logits (0.5, 0) -> class 0
        assert evaluate(m, ds) == 1.0
        m.params["head.weight"].data[:] = 0.0
        m.params["head.bias"].data[:] = 0.0
        assert evaluate(m, ds) == 0.5  # ties go to class 0

    def test_nll_matches_cross_entropy(self, rng):
        m = init_model(MLPConfig(3, [4], 3), seed=0)
        x, y = rng.normal(size=(30, 3)), rng.integers(0, 3, size=30)
        ds = LabeledDataset(x, y, ["test"] * 30)
        with ag.no_grad():
            direct = ag.softmax_cross_entropy(m.forward(x).logits, y).item()
        assert abs(evaluate(m, ds, "nll") - direct) < 1e-12

    def test_errors(self):
        m = init_model(MLPConfig(1, [1], 2), seed=0)
        with pytest.raises(DataError):
            evaluate(m, LabeledDataset(np.zeros((0, 1)), np.zeros(0, dtype=int), []))
        with pytest.raises(ConfigError):
            evaluate(m, LabeledDataset(np.zeros((1, 1)), np.zeros(1, dtype=int), ["test"]), "f1")


@pytest.fixture(scope="module")
def planted():
    ds, _ = gen_planted_task(PlantedRelevanceSpec(8, 3, seed=0), 96, 0, 32)
    teacher = train_teacher(MLPConfig(8, [12], 2), ds, epochs=2, seed=0, train=TrainConfig(learning_rate=1e-2))
    profile = aggregate_importance(teacher.to_model(), ds.subset("train"))
    return ds, teacher, profile


def _plan(teacher, profile, method, width=4, epochs=1, **kw):
    return DistillationPlan(teacher, MLPConfig(8, [width], 2), method, profile, train=TrainConfig(epochs=epochs), **kw)


class TestDistill:
    def test_ft_only_trace_has_no_distillation_terms(self, planted):
        ds, teacher, profile = planted
        res = distill(_plan(teacher, profile, "ft_only"), ds)
        assert res.trace and all(r["loss_feature"] is None and r["loss_logit"] is None for r in res.trace)

    def test_first_batch_flex_term_matches_hand_computation(self, planted):
        ds, teacher, _ = planted
        flat = ImportanceProfile(np.ones(12), rank_neurons(np.ones(12)), 1, teacher_checksum=teacher.checksum)
        plan = _plan(teacher, flat, "flexkd", width=12, seed=3)
        assert plan.selection.indices == tuple(range(12))
        res = distill(plan, ds)
        train = ds.subset("train")
        idx = np.random.default_rng([3, 7]).permutation(len(train))[:8]
        xb = train.features[idx]
        t = teacher.to_model().hidden_layer_stack(xb)[-1].data
        s = init_model(MLPConfig(8, [12], 2), 3).hidden_layer_stack(xb)[-1].data
        expected = 0.0
        for m in range(12):
            c = t[:, m] @ s[:, m] / (np.linalg.norm(t[:, m]) * np.linalg.norm(s[:, m]))
            expected += (1 - c) ** 2
        assert abs(res.trace[0]["loss_feature"] - expected) < 1e-12

    @pytest.mark.parametrize("method", ["flexkd", "projector_mse", "projector_corr", "vanilla_kd"])
    def test_teacher_frozen_and_trace_accounting(self, planted, method):
        ds, teacher, profile = planted
        before = teacher.checksum
        plan = _plan(teacher, profile, method)
        res = distill(plan, ds)
        assert teacher.checksum == before == res.student.metadata["teacher_checksum"]
        w = plan.effective_weights
        for r in res.trace:
            parts = [(w.alpha, r["loss_feature"]), (w.beta, r["loss_logit"]), (w.lam, r["loss_supervised"])]
            assert abs(sum(k * v for k, v in parts if k > 0) - r["loss_total"]) < 1e-10
        if method.startswith("projector"):
            assert res.student.extra_params["projector.weight"].shape == (12, 4)

    def test_seed_determinism(self, planted, tmp_path):
        ds, teacher, profile = planted
        a = distill(_plan(teacher, profile, "flexkd", seed=5), ds)
        b = distill(_plan(teacher, profile, "flexkd", seed=5), ds)
        assert a.student.checksum == b.student.checksum
        assert write_trace(tmp_path / "a.jsonl", a.trace).read_bytes() == write_trace(tmp_path / "b.jsonl", b.trace).read_bytes()
        assert read_trace(tmp_path / "a.jsonl") == a.trace

    def test_profile_teacher_mismatch(self, planted):
        ds, teacher, profile = planted
        other = Checkpoint(teacher.config, {k: v + 1.0 for k, v in teacher.params.items()})
        with pytest.raises(ConfigError):
            distill(_plan(other, profile, "flexkd"), ds)

    def test_selection_must_be_top_of_ranking(self, planted):
        ds, teacher, profile = planted
        wrong = SelectionSet(tuple(int(i) for i in profile.ranked_indices[::-1][:4]))
        with pytest.raises(ConfigError):
            distill(_plan(teacher, profile, "flexkd", selection=wrong), ds)

    def test_flexkd_without_profile(self, planted):
        ds, teacher, _ = planted
        with pytest.raises(ConfigError):
            distill(_plan(teacher, None, "flexkd"), ds)

    def test_effective_weights(self, planted):
        _, teacher, profile = planted
        w = _plan(teacher, profile, "ft_only", weights=LossWeights(0.5, 0.5, 0.5)).effective_weights
        assert (w.alpha, w.beta, w.lam) == (0.0, 0.0, 0.5)

    def test_unknown_method(self, planted):
        _, teacher, profile = planted
        with pytest.raises(ConfigError):
            _plan(teacher, profile, "dark_magic")
