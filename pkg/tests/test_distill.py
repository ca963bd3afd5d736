import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mstl import tensor as T
from mstl.distill import (SoftTargetSet, agreement, distill_train, make_soft_targets, parse_soft_targets,
                          read_soft_targets, soft_bytes, write_soft_targets)
from mstl.ensemble import Ensemble
from mstl.errors import FormatError, ShapeError, TruncatedError, ValidationError
from mstl.data import PatchSet
from mstl.model import ArchitectureSpec, build_model
from mstl.optim import TrainConfig, fit, one_hot
from mstl.tensor import RngStream


def intensity_toy(per_class, seed):
    """Four classes separated by mean intensity alone."""
    r = np.random.default_rng(seed)
    y = np.repeat(np.arange(4), per_class)
    x = np.clip(0.2 + 0.2 * y[:, None, None] + r.normal(0, 0.05, (len(y), 32, 32)), 0, 1)
    return PatchSet(x.astype(np.float32), y, list("abcd"))


class ConstantModel:
    """Stand-in teacher that returns fixed probabilities for every patch."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=np.float64)
        self.num_classes = len(row)

    def predict_proba(self, patches, temperature=1.0):
        logits = np.log(self.row) / temperature
        return np.tile(T.softmax(logits), (len(patches), 1))


class TestSoftTargets:
    def test_single_model_t1_is_exact(self, tiny_spec, tiny_task):
        m = build_model(tiny_spec, RngStream(0))
        soft = make_soft_targets(m, tiny_task)
        train = tiny_task.subset("train")
        assert len(soft) == len(train)
        np.testing.assert_array_equal(soft.probs, m.predict_proba(train.patches).astype(np.float32))

    def test_two_member_mean(self):
        teacher = Ensemble([{0: 1, 1: 1}], {0: ConstantModel([0.8, 0.2]), 1: ConstantModel([0.6, 0.4])})
        soft = make_soft_targets(teacher, np.zeros((3, 32, 32)))
        np.testing.assert_allclose(soft.probs, [[0.7, 0.3]] * 3, atol=1e-7)

    def test_high_temperature_is_uniform(self, tiny_spec, tiny_task):
        m = build_model(tiny_spec, RngStream(0))
        soft = make_soft_targets(m, tiny_task, temperature=1e6)
        np.testing.assert_allclose(soft.probs, 0.25, atol=1e-4)

    def test_temperature_applied_per_member(self):
        teacher = Ensemble([{0: 1, 1: 1}], {0: ConstantModel([0.9, 0.1]), 1: ConstantModel([0.5, 0.5])})
        soft = make_soft_targets(teacher, np.zeros((1, 32, 32)), temperature=2.0)
        p0 = np.array([3.0, 1.0]) / 4.0  # sqrt of (0.9, 0.1) renormalized
        np.testing.assert_allclose(soft.probs[0], (p0 + 0.5) / 2, atol=1e-6)

    @given(st.integers(1, 20), st.integers(2, 7), st.floats(0.2, 20.0))
    def test_rows_sum_to_one(self, rows, k, temperature):
        logits = np.random.default_rng(rows * k).normal(scale=5, size=(k,))
        teacher = ConstantModel(T.softmax(logits))
        soft = make_soft_targets(teacher, np.zeros((rows, 32, 32)), temperature=temperature)
        assert np.abs(soft.probs.sum(axis=1) - 1).max() <= 1e-5

    def test_class_mismatch(self, tiny_task):
        with pytest.raises(ValidationError):
            make_soft_targets(ConstantModel([0.5, 0.5]), tiny_task)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, tiny_task, t):
        with pytest.raises(ValidationError):
            make_soft_targets(ConstantModel([0.25] * 4), tiny_task, temperature=t)

    def test_invalid_rows(self):
        with pytest.raises(ValidationError):
            SoftTargetSet(np.array([[0.5, 0.6]]))

    def test_self_distillation_loss_is_entropy(self, tiny_spec, tiny_task):
        m = build_model(tiny_spec, RngStream(0)).astype(np.float64)
        train = tiny_task.subset("train")
        p = m.predict_proba(train.patches)
        loss, _ = T.softmax_xent(m.forward_logits(train.patches), p)
        entropy = -(p * np.log(p)).sum(axis=1).mean()
        assert float(loss.data) == pytest.approx(entropy, abs=1e-9)


class TestDistillTrain:
    def test_one_hot_reduces_to_fit(self, tiny_spec, tiny_task):
        cfg = TrainConfig(batch_size=16, max_epochs=4, patience_epochs=4, seed=8)
        train = tiny_task.subset("train")
        soft = SoftTargetSet(one_hot(train.labels, 4))
        a = distill_train(build_model(tiny_spec, RngStream(2)), soft, tiny_task, tiny_task, cfg)
        b = fit(build_model(tiny_spec, RngStream(2)), tiny_task, tiny_task, cfg)
        assert a.history.train_loss == b.history.train_loss
        assert a.history.val_favg == b.history.val_favg
        for k in a.model.params:
            assert np.array_equal(a.model.params[k].data, b.model.params[k].data)
        assert a.model.meta["lineage"] == "distilled"

    def test_student_follows_teacher(self):
        # dropout off: on this toy the regularizer only slows a short schedule down
        spec = ArchitectureSpec(k=1, dense_widths=(64, 32), num_classes=4, dropout_rate=0.0)
        train, val = intensity_toy(24, 0), intensity_toy(12, 1)
        scores = []
        for seed in range(3):
            cfg = TrainConfig(batch_size=8, max_epochs=12, patience_epochs=12, seed=seed)
            teacher = fit(build_model(spec, RngStream(100 + seed)), train, val, cfg).model
            soft = make_soft_targets(teacher, train)
            student = distill_train(build_model(spec, RngStream(200 + seed)), soft, train, val, cfg).model
            scores.append(agreement(student, teacher, train))
        assert statistics.median(scores) >= 0.95

    def test_row_count_mismatch(self, tiny_spec, tiny_task, quick_config):
        soft = SoftTargetSet(np.full((3, 4), 0.25))
        with pytest.raises(ShapeError):
            distill_train(build_model(tiny_spec, RngStream(0)), soft, tiny_task, tiny_task, quick_config)

    def test_class_mismatch(self, tiny_spec, tiny_task, quick_config):
        soft = SoftTargetSet(np.full((96, 3), 1 / 3))
        with pytest.raises(ValidationError):
            distill_train(build_model(tiny_spec, RngStream(0)), soft, tiny_task, tiny_task, quick_config)


class TestAgreement:
    def test_self(self, tiny_spec, tiny_task):
        m = build_model(tiny_spec, RngStream(0))
        assert agreement(m, m, tiny_task) == 1.0

    def test_constant_models_disagree(self):
        x = np.zeros((5, 32, 32))
        assert agreement(ConstantModel([0.9, 0.1]), ConstantModel([0.2, 0.8]), x) == 0.0

    def test_symmetric(self, tiny_spec, tiny_task):
        a, b = build_model(tiny_spec, RngStream(0)), build_model(tiny_spec, RngStream(1))
        assert agreement(a, b, tiny_task) == agreement(b, a, tiny_task)


class TestSoftFile:
    def test_roundtrip(self, tmp_path):
        soft = SoftTargetSet(np.random.default_rng(0).dirichlet(np.ones(5), size=7), "ensemble.manifest", 2.5)
        back = read_soft_targets(write_soft_targets(soft, tmp_path / "t.soft"))
        np.testing.assert_array_equal(back.probs, soft.probs)
        assert (back.teacher, back.temperature) == ("ensemble.manifest", 2.5)

    def test_layout(self):
        raw = soft_bytes(SoftTargetSet(np.full((2, 4), 0.25)))
        assert raw[:4] == b"SOFT"
        assert raw[4:6] == (1).to_bytes(2, "little")
        assert raw[6:10] == (2).to_bytes(4, "little")
        assert raw[10:12] == (4).to_bytes(2, "little")

    def test_errors(self):
        raw = soft_bytes(SoftTargetSet(np.full((2, 4), 0.25)))
        with pytest.raises(FormatError):
            parse_soft_targets(b"HARD" + raw[4:])
        with pytest.raises(FormatError):
            parse_soft_targets(raw[:4] + b"\x02\x00" + raw[6:])
        with pytest.raises(TruncatedError):
            parse_soft_targets(raw[:20])
        with pytest.raises(TruncatedError):
            parse_soft_targets(raw[:5])
