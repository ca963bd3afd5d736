import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstl.errors import ValidationError
from mstl.metrics import confusion, f_avg
from mstl.model import ArchitectureSpec, build_model, save_checkpoint
from mstl.optim import TrainConfig, fit
from mstl.ensemble import (Ensemble, ModelPool, SelectionConfig, bagging_baseline, bootstrap_indices, build_pool,
                           ensemble_predict, forward_select, grid_search, half_size, random_pool_ensemble,
                           read_manifest, select_ensemble, selection_log_csv, write_manifest)
from mstl.tensor import RngStream

from oracles import exhaustive_best, greedy_bruteforce


@st.composite
def dyadic_pools(draw):
    """1-4 probability matrices whose entries are multiples of 1/16, so every sum is exact."""
    k = draw(st.integers(2, 3))
    n = draw(st.integers(3, 8))
    size = draw(st.integers(1, 4))
    labels = np.array(draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n)))

    def row():
        cuts = sorted(draw(st.lists(st.integers(0, 16), min_size=k - 1, max_size=k - 1)))
        return np.diff([0, *cuts, 16]) / 16.0

    mats = [np.array([row() for _ in range(n)]) for _ in range(size)]
    n_init = draw(st.integers(1, size))
    return mats, labels, k, n_init


def hand_pool():
    """A best alone; A+B complementary; C a strictly worse copy of A."""
    labels = np.array([0, 0, 1, 1])
    a = np.array([[.9, .1], [.9, .1], [.1, .9], [.6, .4]])
    b = np.array([[.4, .6], [.45, .55], [.4, .6], [.1, .9]])
    c = np.array([[.9, .1], [.9, .1], [.55, .45], [.6, .4]])
    return ModelPool.from_probs([a, b, c], labels)


class TestForwardSelect:
    @settings(max_examples=300)
    @given(dyadic_pools())
    def test_matches_bruteforce_greedy(self, case):
        mats, labels, k, n_init = case
        pool = ModelPool.from_probs(mats, labels, k)
        sel = forward_select(pool, range(len(mats)), n_init, cap=4)
        multiset, steps, score = greedy_bruteforce(mats, labels, n_init, cap=4)
        got = tuple(sorted(i for i, c in sel.counts.items() for _ in range(c)))
        assert got == multiset
        assert [(m, s) for _, m, s in sel.trace[1:]] == steps
        assert sel.trace[-1][2] == score
        scores = [s for _, _, s in sel.trace]
        assert all(b > a for a, b in zip(scores, scores[1:]))
        assert score <= exhaustive_best(mats, labels, cap=4)

    def test_complementary_pair_is_found(self):
        sel = forward_select(hand_pool(), [0, 1, 2], n_init=1, cap=4)
        assert sel.init == [0]
        assert sel.counts == {0: 1, 1: 1}
        assert sel.trace[-1][2] == 1.0

    def test_dominated_copy_never_added(self):
        sel = forward_select(hand_pool(), [0, 1, 2], n_init=1, cap=4)
        assert 2 not in sel.counts

    def test_single_member(self):
        pool = hand_pool()
        sel = forward_select(pool, [1], n_init=1)
        assert sel.counts == {1: 1} and len(sel.trace) == 1

    def test_ties_go_to_smallest_id(self):
        m = np.array([[.8, .2], [.3, .7]])
        sel = forward_select(ModelPool.from_probs([m, m, m], [0, 1]), [2, 0, 1], n_init=2)
        assert sel.init == [0, 1]

    def test_cap_respected(self):
        sel = forward_select(hand_pool(), [0, 1, 2], n_init=1, cap=1)
        assert sel.size == 1

    @pytest.mark.parametrize("subset,n", [([], 1), ([0], 2), ([0, 1], 0)])
    def test_invalid(self, subset, n):
        with pytest.raises(ValidationError):
            forward_select(hand_pool(), subset, n)


def test_oracle_sweep_runtime():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for _ in range(200):
        size = int(rng.integers(1, 5))
        labels = rng.integers(0, 3, size=10)
        mats = [rng.dirichlet(np.ones(3), size=10) for _ in range(size)]
        sel = forward_select(ModelPool.from_probs(mats, labels, 3), range(size), 1, cap=4)
        assert sel.trace[-1][2] <= exhaustive_best(mats, labels, 4)
    assert time.perf_counter() - start < 60


class TestEnsembleArithmetic:
    def test_mean_of_two(self):
        e = Ensemble([{0: 1, 1: 1}])
        np.testing.assert_allclose(e.combine({0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 1.0]])}), [[.5, .5]])

    def test_multiplicity_weights(self):
        e = Ensemble([{0: 2, 1: 1}])
        assert e.weights() == pytest.approx({0: 2 / 3, 1: 1 / 3})
        out = e.combine({0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 1.0]])})
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]])

    def test_mean_of_group_means(self):
        e = Ensemble([{0: 3}, {1: 1}])
        out = e.combine({0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 1.0]])})
        np.testing.assert_allclose(out, [[.5, .5]])  # not 3/4, 1/4

    def test_empty_group(self):
        with pytest.raises(ValidationError):
            Ensemble([{}])

    def test_predict_single_member_and_permutation(self, tiny_spec, np_rng):
        a = build_model(tiny_spec, RngStream(1))
        b = build_model(tiny_spec, RngStream(2))
        x = np_rng.random((5, 32, 32)).astype(np.float32)
        single = ensemble_predict(Ensemble([{0: 1}], {0: a}), x)
        np.testing.assert_array_equal(single, a.predict_proba(x))
        p1 = ensemble_predict(Ensemble([{0: 1, 1: 1}], {0: a, 1: b}), x)
        p2 = ensemble_predict(Ensemble([{0: 1, 1: 1}], {0: b, 1: a}), x)
        np.testing.assert_allclose(p1, p2, atol=1e-12)
        np.testing.assert_allclose(p1.sum(axis=1), 1.0, atol=1e-5)

    def test_missing_model(self):
        with pytest.raises(ValidationError):
            ensemble_predict(Ensemble([{0: 1}]), np.zeros((1, 32, 32)))


def random_pool(size, n=30, k=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n)
    mats = []
    for _ in range(size):
        m = rng.dirichlet(np.ones(k), size=n)
        m[np.arange(n), labels] += rng.random(n)  # mostly right, differently per member
        mats.append(m / m.sum(axis=1, keepdims=True))
    return ModelPool.from_probs(mats, labels, k)


class TestSelectEnsemble:
    def test_smallest_case(self):
        pool = random_pool(2)
        e = select_ensemble(pool, SelectionConfig(n_init=1, m_subsets=1, repeats=1))
        assert len(e.groups) == 1 and sum(e.groups[0].values()) == 1

    def test_groups_and_score(self):
        pool = random_pool(12)
        e = select_ensemble(pool, SelectionConfig(n_init=2, m_subsets=5, repeats=3, seed=1))
        assert len(e.groups) == 5
        assert e.val_favg == f_avg(confusion(e.val_probs(pool).argmax(1), pool.val_labels, 3))
        # each group is at least as good as its own best-N start
        for trace in e.traces:
            assert trace[-1][2] >= trace[0][2]

    def test_repeats_keep_best(self):
        pool = random_pool(12)
        one = select_ensemble(pool, SelectionConfig(2, 3, repeats=1, seed=4))
        many = select_ensemble(pool, SelectionConfig(2, 3, repeats=6, seed=4))
        assert many.val_favg >= one.val_favg

    def test_deterministic(self):
        pool = random_pool(10)
        a = select_ensemble(pool, SelectionConfig(seed=3))
        b = select_ensemble(pool, SelectionConfig(seed=3))
        assert a.groups == b.groups

    def test_n_above_subset_size(self):
        with pytest.raises(ValidationError):
            select_ensemble(random_pool(4), SelectionConfig(n_init=3))

    def test_pool_too_small(self):
        with pytest.raises(ValidationError):
            select_ensemble(random_pool(1), SelectionConfig(n_init=1))

    @pytest.mark.parametrize("size,half", [(1, 1), (2, 1), (7, 3), (31, 15)])
    def test_half_size(self, size, half):
        assert half_size(size) == half

    def test_grid_counts_and_best(self):
        res = grid_search(random_pool(8), ns=[1, 2, 3], ms=[1, 2, 3], repeats=2)
        assert res.procedures == 18 and len(res.cells) == 9
        (n, m), best = res.best()
        assert best.val_favg == max(e.val_favg for e in res.cells.values())
        assert len(res.to_csv().splitlines()) == 10

    def test_grid_skips_oversized_n(self):
        res = grid_search(random_pool(4), ns=[1, 2, 5], ms=[1], repeats=1)
        assert set(res.cells) == {(1, 1), (2, 1)}

    def test_selection_log(self):
        e = select_ensemble(random_pool(8), SelectionConfig(n_init=1, m_subsets=2, repeats=1))
        lines = selection_log_csv(e).splitlines()
        assert lines[0] == "subset,step,member_id,val_favg"
        assert len(lines) == 1 + sum(len(t) for t in e.traces)


class TestPool:
    def test_from_fit_results(self, tiny_spec, tiny_task):
        cfg = TrainConfig(batch_size=8, max_epochs=6, patience_epochs=6, seed=2)
        res = fit(build_model(tiny_spec, RngStream(0), lineage="transfer3<a"), tiny_task, tiny_task, cfg)
        pool = build_pool([res], tiny_task, n_scratch=1, train=tiny_task, spec=tiny_spec,
                          config=TrainConfig(batch_size=16, max_epochs=1, patience_epochs=1))
        n_snap = len(res.snapshots)
        assert 1 <= n_snap + 1 <= 4
        scratch = pool.with_lineage("scratch")
        assert len(pool) - len(scratch) == 1 + n_snap
        assert pool.members[0].lineage == "transfer3<a"
        assert all(m.lineage.startswith("snapshot") for m in pool.members[1:1 + n_snap])
        val = tiny_task.subset("val")
        for m in pool.members:
            assert m.val_probs.shape == (len(val), 4)
            np.testing.assert_allclose(m.val_probs.sum(axis=1), 1.0, atol=1e-5)
            assert m.val_favg == f_avg(confusion(m.val_probs.argmax(1), val.labels, 4))

    def test_single_model(self, tiny_spec, tiny_task):
        assert len(build_pool([build_model(tiny_spec, RngStream(0))], tiny_task)) == 1

    def test_class_mismatch(self, tiny_spec, tiny_task):
        other = build_model(ArchitectureSpec(k=1, dense_widths=(16, 8), num_classes=5), RngStream(0))
        with pytest.raises(ValidationError):
            build_pool([build_model(tiny_spec, RngStream(0)), other], tiny_task)

    def test_bad_probabilities(self):
        with pytest.raises(ValidationError):
            ModelPool.from_probs([np.full((2, 2), 0.7)], [0, 1])

    def test_random_pool_uses_scratch_only(self):
        pool = random_pool(6)
        for i, m in enumerate(pool.members):
            m.lineage = "scratch" if i % 2 else "transfer2<x"
        e = random_pool_ensemble(pool, SelectionConfig(n_init=1, m_subsets=1, repeats=1))
        assert set(e.member_ids()) <= {0, 1, 2}


class TestBagging:
    def test_unique_fraction(self):
        idx = bootstrap_indices(10_000, RngStream(0))
        assert len(idx) == 10_000
        assert abs(len(np.unique(idx)) / 10_000 - (1 - np.exp(-1))) < 0.02

    def test_members_are_averaged(self, tiny_spec, tiny_task):
        cfg = TrainConfig(batch_size=16, max_epochs=1, patience_epochs=1)
        e = bagging_baseline(tiny_task, tiny_task, 2, tiny_spec, cfg, seed=3)
        assert e.groups == [{0: 1, 1: 1}]
        assert all(m.meta["lineage"] == "bagged" for m in e.models.values())

    def test_single_member_warns(self, tiny_spec, tiny_task):
        cfg = TrainConfig(batch_size=16, max_epochs=1, patience_epochs=1)
        with pytest.warns(UserWarning, match="count=1"):
            bagging_baseline(tiny_task, tiny_task, 1, tiny_spec, cfg)


def test_manifest_roundtrip(tmp_path, tiny_spec, np_rng):
    models = {i: build_model(tiny_spec, RngStream(i)) for i in range(3)}
    paths = {i: save_checkpoint(m, tmp_path / f"m{i}.ckpt").name for i, m in models.items()}
    e = Ensemble([{0: 2, 1: 1}, {2: 1, 0: 1}], models)
    back = read_manifest(write_manifest(e, paths, tmp_path / "ens.manifest"))
    x = np_rng.random((4, 32, 32)).astype(np.float32)
    np.testing.assert_allclose(back.predict_proba(x), e.predict_proba(x), atol=1e-12)
    assert len(back.models) == 3


def test_manifest_bad_line(tmp_path):
    p = tmp_path / "bad.manifest"
    p.write_text("a.ckpt\t1\n")
    with pytest.raises(ValidationError):
        read_manifest(p)
