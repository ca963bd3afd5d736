import csv
import io
import math

import numpy as np
import pytest
from scipy import stats

from mstl.errors import ShapeError, ValidationError
from mstl.model import LAYER_NAMES, ArchitectureSpec, build_model
from mstl.optim import TrainConfig, fit
from mstl.tensor import RngStream
from mstl.transfer import (MAX_TRANSFER, SweepReport, SweepRun, TransferPlan, check_compatible, depth_sweep,
                           init_rng, transfer_layers)


@pytest.fixture(scope="module")
def source():
    spec = ArchitectureSpec(k=1, dense_widths=(40, 30), num_classes=6)
    return build_model(spec, RngStream(77), lineage="pretrained:src")


class TestTransferLayers:
    @pytest.mark.parametrize("n", range(MAX_TRANSFER + 1))
    def test_prefix_copied_and_rest_fresh(self, source, n):
        m = transfer_layers(source, n, 3, RngStream(5))
        for i, name in enumerate(LAYER_NAMES[:-1]):
            w, b = m.layer_state(name)
            sw, sb = source.layer_state(name)
            if i < n:
                assert np.array_equal(w, sw) and np.array_equal(b, sb)
            else:
                assert not np.array_equal(w, sw)
        assert m.num_classes == 3
        assert m.layer_state("dense3")[0].shape == (3, 30)

    def test_copies_are_independent_buffers(self, source):
        m = transfer_layers(source, 2, 3, RngStream(5))
        m.params["conv1.weight"].data[:] = 0
        assert source.params["conv1.weight"].data.any()

    def test_n_zero_is_scratch(self, source):
        a = transfer_layers(source, 0, 3, RngStream(5))
        b = build_model(ArchitectureSpec(k=1, dense_widths=(40, 30), num_classes=3), RngStream(5))
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)

    @pytest.mark.parametrize("n", [0, 3, 5])
    def test_fresh_layers_follow_init_distribution(self, source, n):
        m = transfer_layers(source, n, 3, RngStream(9))
        fresh = [name for name in LAYER_NAMES[n:] if m.layer_state(name)[0].size >= 1000]
        assert fresh
        for name in fresh:
            w = m.layer_state(name)[0]
            bound = math.sqrt(6.0 / math.prod(w.shape[1:]))
            p = stats.kstest(w.ravel(), stats.uniform(loc=-bound, scale=2 * bound).cdf).pvalue
            assert p > 0.01, (name, p)

    def test_lineage_and_trainable(self, source):
        m = transfer_layers(source, 4, 3, RngStream(5))
        assert m.meta["lineage"] == "transfer4<pretrained:src"
        assert not m.frozen and set(m.trainable()) == set(m.params)

    def test_freeze_option(self, source):
        m = transfer_layers(source, 2, 3, RngStream(5), freeze=True)
        assert m.frozen == {"conv1", "conv2"}
        assert "conv1.weight" not in m.trainable()

    @pytest.mark.parametrize("n", [-1, 8])
    def test_depth_range(self, source, n):
        with pytest.raises(ValidationError):
            transfer_layers(source, n, 3, RngStream(0))


class TestCompatibility:
    def test_dense_width_mismatch_names_layer(self, source):
        target = ArchitectureSpec(k=1, dense_widths=(40, 20), num_classes=3)
        with pytest.raises(ShapeError, match="dense2"):
            transfer_layers(source, 7, 3, RngStream(0), target_spec=target)

    def test_mismatch_beyond_depth_is_allowed(self, source):
        target = ArchitectureSpec(k=1, dense_widths=(40, 20), num_classes=3)
        m = transfer_layers(source, 6, 3, RngStream(0), target_spec=target)
        assert np.array_equal(m.layer_state("dense1")[0], source.layer_state("dense1")[0])

    def test_k_mismatch_names_first_layer(self):
        with pytest.raises(ShapeError, match="conv1"):
            check_compatible(ArchitectureSpec(k=1), ArchitectureSpec(k=2), 1)

    def test_zero_depth_always_compatible(self):
        check_compatible(ArchitectureSpec(k=1), ArchitectureSpec(k=2), 0)


def test_n_zero_trajectory_matches_scratch(tiny_spec, tiny_task, quick_config):
    src = build_model(tiny_spec, RngStream(1), lineage="pretrained:x")
    a = fit(transfer_layers(src, 0, 4, init_rng(3)), tiny_task, tiny_task, quick_config)
    b = fit(build_model(tiny_spec, init_rng(3)), tiny_task, tiny_task, quick_config)
    assert a.history.train_loss == b.history.train_loss
    assert a.history.val_favg == b.history.val_favg
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)


class TestSweep:
    def test_run_count_and_csv(self, tiny_spec, tiny_task):
        src = build_model(tiny_spec, RngStream(1))
        plan = TransferPlan(depths=tuple(range(1, 8)), repetitions=3, base_seed=10,
                            config=TrainConfig(batch_size=48, max_epochs=1, patience_epochs=1))
        seen = []
        report = depth_sweep({"s": src}, tiny_task, plan, on_run=seen.append)
        assert len(report.runs) == 24 and len(seen) == 24
        assert len(report.scratch()) == 3
        assert [r.seed for r in report.scratch()] == [10, 11, 12]
        rows = list(csv.DictReader(io.StringIO(report.to_csv())))
        assert len(rows) == 24 and set(rows[0]) == {"source", "n", "seed", "val_favg", "test_favg"}
        summary = list(csv.DictReader(io.StringIO(report.summary_csv())))
        assert len(summary) == 8 and all(r["runs"] == "3" for r in summary)
        assert "scratch baseline" in report.table()

    def test_mean(self):
        report = SweepReport([SweepRun("s", 2, i, 0.0, x) for i, x in enumerate((0.8, 0.9, 1.0))])
        assert report.mean_test("s", 2) == pytest.approx(0.9)

    def test_training_error_carries_context(self, tiny_spec, tiny_task):
        src = build_model(tiny_spec, RngStream(1))
        src.params["conv1.weight"].data[:] = np.nan
        plan = TransferPlan(depths=(1,), repetitions=1, base_seed=4,
                            config=TrainConfig(batch_size=48, max_epochs=1, patience_epochs=1))
        with pytest.raises(Exception, match="source=s n=1 seed=4"):
            depth_sweep({"s": src}, tiny_task, plan)

    @pytest.mark.parametrize("kw", [dict(depths=(0,)), dict(depths=(8,)), dict(repetitions=0)])
    def test_plan_validation(self, kw):
        with pytest.raises(ValidationError):
            TransferPlan(**kw)
