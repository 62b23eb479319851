import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmosaic.data import (
    DIRICHLET, FEATURE_SHIFT, HYBRID, PATHOLOGICAL, Dataset, DomainShift, PartitionError,
    PartitionSpec, ScenarioSpec, apply_feature_shift, dump_csv, flip_labels, make_domain_shift,
    make_mixture, make_scenario, partition, split_public, write_manifest,
)
from fedmosaic.learner import LOGISTIC, init_model, predict_probs, sgd_epoch


class TestMixture:
    def test_counts(self):
        d = make_mixture(2, 2, 50, 4.0, seed=7)
        assert len(d) == 100
        np.testing.assert_array_equal(d.class_counts(), [50, 50])

    def test_deterministic(self):
        a = make_mixture(10, 16, 100, 3.0, seed=1)
        b = make_mixture(10, 16, 100, 3.0, seed=1)
        assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()

    def test_centralized_fit_separates(self):
        d = make_mixture(3, 2, 200, 6.0, seed=3)
        m = init_model(LOGISTIC, 2, 3)
        for epoch in range(30):
            m = sgd_epoch(m, d.X, d.y, step_size=0.1, batch_size=32, seed=epoch)
        assert np.mean(predict_probs(m, d.X).argmax(axis=1) == d.y) > 0.95

    @pytest.mark.parametrize("args", [(1, 2, 5, 1.0), (2, 1, 5, 1.0), (2, 2, 0, 1.0),
                                      (2, 2, 5, 0.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_mixture(*args)

    def test_dataset_validates_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), np.array([0, 2]), 2, np.arange(2))


class TestSplitPublic:
    def test_half(self):
        d = make_mixture(2, 2, 50, 3.0)
        priv, pool, truth = split_public(d, 0.5, seed=0)
        assert len(priv) == 50 and len(pool) == 50 and len(truth) == 50

    def test_disjoint_and_covering(self):
        d = make_mixture(3, 2, 40, 3.0)
        priv, pool, _ = split_public(d, 0.3, seed=2)
        assert not set(priv.ids) & set(pool.ids)
        assert set(priv.ids) | set(pool.ids) == set(d.ids)

    def test_deterministic(self):
        d = make_mixture(3, 2, 40, 3.0)
        a, b = split_public(d, 0.3, seed=5), split_public(d, 0.3, seed=5)
        np.testing.assert_array_equal(a[1].ids, b[1].ids)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 0.001, 0.999])
    def test_empty_side_rejected(self, fraction):
        with pytest.raises(ValueError):
            split_public(make_mixture(2, 2, 50, 3.0), fraction)


class TestPartition:
    def test_pathological_two_classes_each(self):
        d = make_mixture(10, 4, 50, 3.0)
        part = partition(d, PartitionSpec(PATHOLOGICAL, 5, seed=0, classes_per_client=2))
        assert all(len(s.label_set()) == 2 for s in part.shards)

    def test_dirichlet_large_alpha_is_uniform(self):
        d = make_mixture(4, 2, 2000, 3.0, seed=0)
        shards, freq = partition(d, PartitionSpec(DIRICHLET, 4, seed=1, alpha=1e6))
        shares = freq / freq.sum(axis=0, keepdims=True)
        np.testing.assert_allclose(shares, 0.25, atol=0.01)
        props = freq / freq.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(props, 0.25, atol=0.01)

    def test_freq_matches_shards(self):
        d = make_mixture(5, 3, 30, 3.0)
        part = partition(d, PartitionSpec(DIRICHLET, 3, seed=4, alpha=0.3))
        for s, row in zip(part.shards, part.class_freq):
            np.testing.assert_array_equal(s.class_counts(), row)

    def test_too_many_classes_per_client(self):
        d = make_mixture(3, 2, 10, 3.0)
        with pytest.raises(ValueError):
            partition(d, PartitionSpec(PATHOLOGICAL, 2, classes_per_client=4))

    def test_unsatisfiable_raises_after_redraws(self):
        # 12 clients share 2 classes of 1 example each: most shards stay empty
        d = make_mixture(2, 2, 1, 3.0)
        with pytest.raises(PartitionError):
            partition(d, PartitionSpec(PATHOLOGICAL, 12, classes_per_client=1))

    def test_hybrid_domains_are_blocks(self):
        d = make_mixture(6, 4, 40, 3.0)
        spec = PartitionSpec(HYBRID, 6, seed=0, domains=3, clients_per_domain=2)
        part = partition(d, spec, make_domain_shift(3, 4))
        assert part.client_domains == [0, 0, 1, 1, 2, 2]
        assert all(len(c) == 2 for c in part.client_classes)

    def test_shift_scheme_needs_shift(self):
        d = make_mixture(2, 2, 20, 3.0)
        with pytest.raises(ValueError):
            partition(d, PartitionSpec(FEATURE_SHIFT, 2, domains=2))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PartitionSpec("iid", 3)
        with pytest.raises(ValueError):
            PartitionSpec(HYBRID, 5, domains=2, clients_per_domain=2)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([PATHOLOGICAL, DIRICHLET, FEATURE_SHIFT, HYBRID]),
           st.integers(2, 6), st.integers(0, 10_000))
    def test_disjoint_cover(self, scheme, m, seed):
        d = make_mixture(6, 4, 30, 3.0, seed=seed)
        spec = PartitionSpec(scheme, m, seed=seed, classes_per_client=2, alpha=0.5,
                             domains=m if scheme == HYBRID else 2, clients_per_domain=1)
        part = partition(d, spec, make_domain_shift(spec.domains, 4))
        ids = np.concatenate([s.ids for s in part.shards])
        assert len(ids) == len(set(ids.tolist()))
        assert all(len(s) > 0 for s in part.shards)
        if scheme in (DIRICHLET, FEATURE_SHIFT):
            assert set(ids.tolist()) == set(d.ids.tolist())


class TestFeatureShift:
    def test_identity(self):
        d = make_mixture(3, 4, 10, 3.0)
        shift = DomainShift((0.0,), (1.0,), ((0.0,) * 4,), (0.0,))
        np.testing.assert_array_equal(apply_feature_shift(d, 0, shift).X, d.X)

    def test_domains_separated_by_bias_gap(self):
        d = make_mixture(3, 4, 200, 3.0)
        shift = make_domain_shift(2, 4, rotation=0.0, bias_gap=1.5)
        a = apply_feature_shift(d, 0, shift).X.mean(axis=0)
        b = apply_feature_shift(d, 1, shift).X.mean(axis=0)
        assert np.all(np.abs(b - a) >= 1.5 - 1e-9)

    def test_labels_untouched(self):
        d = make_mixture(3, 4, 10, 3.0)
        out = apply_feature_shift(d, 1, make_domain_shift(2, 4, noise=0.3), seed=1)
        np.testing.assert_array_equal(out.y, d.y)

    def test_bad_domain(self):
        d = make_mixture(2, 2, 5, 3.0)
        with pytest.raises(ValueError):
            apply_feature_shift(d, 3, make_domain_shift(2, 2))
        with pytest.raises(ValueError):
            apply_feature_shift(d, 0, make_domain_shift(2, 3))


def test_flip_labels_changes_every_label():
    d = make_mixture(4, 2, 10, 3.0)
    f = flip_labels(d)
    np.testing.assert_array_equal(f.y, (d.y + 1) % 4)
    assert np.all(f.y != d.y)


class TestScenario:
    def test_shapes(self, small_scenario):
        sc = small_scenario
        assert sc.num_clients == 4
        assert all(len(t) == 40 for t in sc.test_sets)
        assert len(sc.pool) == len(sc.pool_truth) == 96

    def test_test_sets_follow_client_classes(self, small_scenario):
        for shard, test in zip(small_scenario.shards, small_scenario.test_sets):
            assert test.label_set() <= shard.label_set()

    def test_flipped_client(self):
        base = ScenarioSpec(num_classes=3, dim=4, per_class=30, test_per_client=20,
                            partition=PartitionSpec(DIRICHLET, 3, seed=1, alpha=100.0))
        clean = make_scenario(base)
        from dataclasses import replace
        flipped = make_scenario(replace(base, flipped_label_client=0))
        np.testing.assert_array_equal(flipped.shards[0].y, (clean.shards[0].y + 1) % 3)
        np.testing.assert_array_equal(flipped.shards[1].y, clean.shards[1].y)
        assert flipped.manifest()["flipped_label_client"] == 0

    def test_flipped_out_of_range(self):
        with pytest.raises(ValueError):
            make_scenario(ScenarioSpec(num_classes=3, dim=4, per_class=20,
                                       partition=PartitionSpec(DIRICHLET, 2),
                                       flipped_label_client=5))

    def test_deterministic(self):
        spec = ScenarioSpec(num_classes=4, dim=4, per_class=30, test_per_client=10,
                            partition=PartitionSpec(HYBRID, 4, seed=9, domains=2,
                                                    clients_per_domain=2))
        a, b = make_scenario(spec), make_scenario(spec)
        assert a.pool.X.tobytes() == b.pool.X.tobytes()
        for s, t in zip(a.shards, b.shards):
            assert s.X.tobytes() == t.X.tobytes()

    def test_manifest_and_csv(self, small_scenario, tmp_path):
        write_manifest(small_scenario, tmp_path / "m.json")
        man = json.loads((tmp_path / "m.json").read_text())
        assert man["num_clients"] == 4 and man["public_size"] == 96
        assert len(man["class_counts"]) == 4
        dump_csv(small_scenario.pool, tmp_path / "pool.csv")
        dump_csv(small_scenario.shards[0], tmp_path / "s0.csv")
        pool_rows = (tmp_path / "pool.csv").read_text().splitlines()
        assert len(pool_rows) == 96 and pool_rows[0].endswith(",")
        first = (tmp_path / "s0.csv").read_text().splitlines()[0].split(",")
        assert len(first) == 7 and first[-1].isdigit()
