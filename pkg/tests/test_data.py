import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from fedhft.data import (
    MIN_SHARD_SIZE,
    TaskSpec,
    dirichlet_partition,
    gen_task,
    load_csv,
    make_task,
    partition_pool,
    train_val_split,
)
from fedhft.errors import ParameterError, ParseError
from fedhft.numerics import RngStream


def simple_task(n_groups=0, cov=1.0, samples=500):
    return make_task(
        3, 8, RngStream(1), class_separation=3.0, class_cov_scale=cov,
        n_groups=n_groups, samples=samples,
    )


class TestGenTask:
    def test_zero_cov_collapses_to_means(self):
        spec = simple_task(cov=0.0)
        pool = gen_task(spec, RngStream(2))
        for c in range(3):
            rows = pool.features[pool.labels == c]
            assert np.allclose(rows, spec.class_means[c], atol=1e-12)

    def test_nearest_mean_oracle_on_separated_classes(self):
        spec = make_task(3, 8, RngStream(3), class_separation=12.0, class_cov_scale=1.0, samples=600)
        pool = gen_task(spec, RngStream(4))
        d = np.linalg.norm(pool.features[:, None, :] - spec.class_means[None], axis=2)
        pred = np.argmin(d, axis=1)
        assert np.mean(pred == pool.labels) >= 0.99

    def test_deterministic(self):
        spec = simple_task()
        a = gen_task(spec, RngStream(5, 1))
        b = gen_task(spec, RngStream(5, 1))
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_group_offsets_have_requested_separation(self):
        spec = make_task(
            3, 10, RngStream(6), class_cov_scale=0.5, n_groups=3, group_separation=6.0
        )
        shift = spec.group_shift
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(shift[i] - shift[j]) == pytest.approx(6.0 * 0.5, rel=1e-9)

    def test_duplicate_means_rejected(self):
        means = np.zeros((2, 4))
        with pytest.raises(ParameterError):
            TaskSpec(n_classes=2, d_in=4, class_means=means)


class TestDirichletPartition:
    def test_near_iid_limit(self):
        gen = RngStream(7).generator()
        labels = gen.integers(0, 4, size=4000)
        plan, lists = dirichlet_partition(labels, 8, 1e6, RngStream(8))
        global_hist = np.bincount(labels, minlength=4) / labels.size
        for k in range(8):
            hist = np.bincount(labels[lists[k]], minlength=4) / lists[k].size
            assert np.max(np.abs(hist - global_hist)) <= 0.02

    def test_single_client_gets_everything(self):
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
        plan, lists = dirichlet_partition(labels, 1, 5.0, RngStream(9))
        assert np.array_equal(lists[0], np.arange(8))

    def test_completeness_and_disjointness(self):
        gen = RngStream(10).generator()
        labels = gen.integers(0, 5, size=900)
        _, lists = dirichlet_partition(labels, 12, 0.8, RngStream(11))
        combined = np.concatenate(lists)
        assert combined.size == labels.size
        assert np.array_equal(np.sort(combined), np.arange(labels.size))

    def test_skew_grows_as_alpha_shrinks(self):
        gen = RngStream(12).generator()
        labels = gen.integers(0, 4, size=2000)
        tv_low, tv_high = [], []
        global_hist = np.bincount(labels, minlength=4) / labels.size
        for seed in range(20):
            for alpha, out in ((1.0, tv_low), (50.0, tv_high)):
                plan, lists = dirichlet_partition(labels, 10, alpha, RngStream(seed, 13))
                tv = np.mean(
                    [
                        0.5 * np.abs(
                            np.bincount(labels[ix], minlength=4) / ix.size - global_hist
                        ).sum()
                        for ix in lists
                    ]
                )
                out.append(tv)
        assert np.mean(tv_low) > np.mean(tv_high)

    def test_row_entropy_increases_with_alpha(self):
        gen = RngStream(14).generator()
        labels = gen.integers(0, 4, size=2000)

        def mean_entropy(alpha, seed):
            plan, _ = dirichlet_partition(labels, 10, alpha, RngStream(seed, 15))
            p = np.clip(plan.proportions, 1e-12, 1)
            return float(np.mean(-(p * np.log(p)).sum(axis=1)))

        ent = {a: [mean_entropy(a, s) for s in range(20)] for a in (0.5, 5.0, 50.0)}
        assert mannwhitneyu(ent[5.0], ent[0.5], alternative="greater").pvalue < 0.05
        assert mannwhitneyu(ent[50.0], ent[5.0], alternative="greater").pvalue < 0.05

    def test_min_shard_enforced(self):
        gen = RngStream(16).generator()
        labels = gen.integers(0, 3, size=400)
        _, lists = dirichlet_partition(labels, 10, 0.3, RngStream(17))
        assert min(ix.size for ix in lists) >= MIN_SHARD_SIZE

    def test_impossible_plan_raises(self):
        labels = np.zeros(20, dtype=int)
        with pytest.raises(ParameterError):
            dirichlet_partition(labels, 10, 1.0, RngStream(18))

    def test_plan_rows_are_simplex(self):
        gen = RngStream(19).generator()
        labels = gen.integers(0, 4, size=1000)
        plan, _ = dirichlet_partition(labels, 6, 2.0, RngStream(20))
        assert np.allclose(plan.proportions.sum(axis=1), 1.0, atol=1e-9)

    def test_bad_alpha(self):
        with pytest.raises(ParameterError):
            dirichlet_partition(np.zeros(100, dtype=int), 2, 0.0, RngStream(21))


class TestPartitionPool:
    def test_group_purity(self):
        spec = simple_task(n_groups=3, samples=900)
        pool = gen_task(spec, RngStream(22))
        lists, client_groups = partition_pool(pool, 9, 5.0, RngStream(23), n_groups=3)
        for k in range(9):
            sample_groups = pool.group_of_sample[lists[k]]
            assert np.all(sample_groups == client_groups[k])

    def test_even_group_assignment(self):
        _, client_groups = partition_pool(
            gen_task(simple_task(n_groups=3, samples=900), RngStream(24)),
            9, 5.0, RngStream(25), n_groups=3,
        )
        assert np.bincount(client_groups).tolist() == [3, 3, 3]


class TestTrainValSplit:
    def test_sizes_and_partition(self):
        idx = np.arange(40)
        tr, va = train_val_split(idx, 0.2, RngStream(26))
        assert va.size == 8 and tr.size == 32
        assert np.array_equal(np.sort(np.concatenate([tr, va])), idx)

    def test_validation_never_empty(self):
        tr, va = train_val_split(np.arange(9), 0.05, RngStream(27))
        assert va.size >= 1


class TestLoadCsv:
    def test_hand_written_exact(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b,label\n1.0,4.0,x\n2.0,5.0,y\n3.0,6.0,x\n", encoding="utf-8")
        features, labels, names = load_csv(path, "label")
        expected_a = (np.array([1.0, 2.0, 3.0]) - 2.0) / np.std([1.0, 2.0, 3.0])
        assert features[:, 0] == pytest.approx(expected_a, abs=1e-12)
        assert labels.tolist() == [0, 1, 0]
        assert names == ["x", "y"]

    def test_constant_column_becomes_zero(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b,label\n7.0,1.0,u\n7.0,2.0,u\n7.0,3.0,v\n", encoding="utf-8")
        features, _, _ = load_csv(path, "label")
        assert np.all(features[:, 0] == 0.0)

    def test_roundtrip(self, tmp_path):
        gen = RngStream(28).generator()
        raw = gen.normal(size=(30, 3))
        labels = gen.integers(0, 2, size=30)
        path = tmp_path / "r.csv"
        lines = ["f0,f1,f2,label"]
        for row, lab in zip(raw, labels):
            lines.append(",".join(repr(float(v)) for v in row) + f",c{lab}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        features, got_labels, _ = load_csv(path, "label")
        expected = (raw - raw.mean(axis=0)) / raw.std(axis=0)
        assert np.allclose(features, expected, atol=1e-12)
        assert np.array_equal(got_labels, labels)

    def test_non_numeric_cell_locates_error(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,label\n1.0,2.0,x\n1.0,oops,y\n", encoding="utf-8")
        with pytest.raises(ParseError) as err:
            load_csv(path, "label")
        assert ":3:" in str(err.value) and "'b'" in str(err.value)

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1.0,2.0\n", encoding="utf-8")
        with pytest.raises(ParameterError):
            load_csv(path, "label")
