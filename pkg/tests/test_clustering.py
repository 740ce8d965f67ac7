import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from fedhft.clustering import (
    GmmParams,
    VAR_FLOOR,
    assignment_entropy,
    build_features,
    gmm_fit,
    posterior,
    require_assignment_matrix,
    uniform_assignments,
    update_assignments,
)
from fedhft.errors import ParameterError
from fedhft.numerics import RngStream
from oracles import gaussian_posterior_longdouble


def blobs_1d(gen, centers=(0.0, 10.0), per=20, std=0.4):
    xs, labels = [], []
    for i, c in enumerate(centers):
        xs.append(gen.normal(c, std, size=(per, 1)))
        labels += [i] * per
    return np.concatenate(xs), np.array(labels)


class TestBuildFeatures:
    def test_identical_heads_give_identical_features(self):
        head = np.ones(6)
        updates = {k: head.copy() for k in range(5)}
        cluster_heads = np.stack([np.zeros(6), np.ones(6)])
        model, feats = build_features(updates, cluster_heads, 2)
        rows = np.stack([f.u for f in feats])
        assert np.allclose(rows - rows[0], 0.0, atol=1e-12)
        gmm = gmm_fit(rows, 2, rng=RngStream(1))
        post = posterior(gmm, rows)
        assert np.allclose(post, 0.5, atol=1e-9)

    def test_two_groups_map_to_opposite_signs(self):
        v = np.array([1.0, -2.0, 0.5, 0.0])
        updates = {k: (v if k % 2 == 0 else -v) for k in range(6)}
        cluster_heads = np.zeros((3, 4))
        model, feats = build_features(updates, cluster_heads, 1)
        vals = np.array([f.u[0] for f in feats])
        assert np.allclose(np.abs(vals), np.linalg.norm(v), atol=1e-9)
        assert np.sign(vals[0]) != np.sign(vals[1])

    def test_raw_vector_matches_direct_arithmetic(self):
        gen = RngStream(2).generator()
        updates = {k: gen.normal(size=8) for k in range(4)}
        cluster_heads = gen.normal(size=(3, 8))
        model, feats = build_features(updates, cluster_heads, 3)
        center = cluster_heads.mean(axis=0)
        for f in feats:
            raw = updates[f.client_id] - center
            expected = model.components @ (raw - model.mean)
            assert np.allclose(f.u, expected, atol=1e-10)

    def test_single_reporting_client_skips(self):
        assert build_features({0: np.ones(4)}, np.zeros((2, 4)), 2) is None


class TestGmmFit:
    def test_single_component_closed_form(self):
        gen = RngStream(3).generator()
        x = gen.normal(size=(25, 3)) * 2.0 + 1.0
        gmm = gmm_fit(x, 1, rng=RngStream(4))
        assert gmm.weights == pytest.approx([1.0])
        assert np.allclose(gmm.means[0], x.mean(axis=0), atol=1e-9)
        assert np.allclose(gmm.variances[0], np.maximum(x.var(axis=0), VAR_FLOOR), atol=1e-9)

    def test_separated_blobs_recovered(self):
        gen = RngStream(5).generator()
        x, labels = blobs_1d(gen)
        gmm = gmm_fit(x, 2, rng=RngStream(6))
        means = np.sort(gmm.means[:, 0])
        assert abs(means[0] - 0.0) <= 0.5
        assert abs(means[1] - 10.0) <= 0.5
        pred = np.argmax(posterior(gmm, x), axis=1)
        assert adjusted_rand_score(labels, pred) == 1.0

    def test_deterministic(self):
        gen = RngStream(7).generator()
        x = gen.normal(size=(30, 4))
        a = gmm_fit(x, 3, rng=RngStream(8))
        b = gmm_fit(x, 3, rng=RngStream(8))
        assert a.means.tobytes() == b.means.tobytes()
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.variances.tobytes() == b.variances.tobytes()

    def test_loglik_ascent(self):
        gen = RngStream(9).generator()
        x, _ = blobs_1d(gen, centers=(0.0, 4.0, 9.0), per=15, std=0.7)
        gmm = gmm_fit(x, 3, rng=RngStream(10))
        hist = gmm.loglik_history
        assert len(hist) >= 2
        for prev, cur in zip(hist, hist[1:]):
            assert cur >= prev - 1e-9 * (1 + abs(prev))

    def test_variance_floor_enforced(self):
        x = np.zeros((10, 2))
        x[5:, 0] = 1.0
        gmm = gmm_fit(x, 2, rng=RngStream(11))
        assert np.all(gmm.variances >= VAR_FLOOR * (1 - 1e-12))

    def test_warm_start_cannot_be_worse(self):
        gen = RngStream(12).generator()
        x, _ = blobs_1d(gen, centers=(0.0, 6.0), per=12, std=0.5)
        fresh = gmm_fit(x, 2, rng=RngStream(13))
        bad_prev = GmmParams(
            weights=np.array([0.5, 0.5]),
            means=np.array([[100.0], [101.0]]),
            variances=np.full((2, 1), 1.0),
        )
        warm = gmm_fit(x, 2, prev=bad_prev, rng=RngStream(13))
        assert warm.loglik_history[-1] >= fresh.loglik_history[-1] - 1e-9

    def test_too_few_points(self):
        with pytest.raises(ParameterError):
            gmm_fit(np.zeros((2, 3)), 4, rng=RngStream(14))


class TestPosterior:
    def test_identical_components_uniform(self):
        gmm = GmmParams(
            weights=np.array([0.5, 0.5]),
            means=np.zeros((2, 3)),
            variances=np.ones((2, 3)),
        )
        post = posterior(gmm, np.random.default_rng(0).normal(size=(7, 3)))
        assert np.allclose(post, 0.5, atol=1e-12)

    def test_concentrates_at_component_mean(self):
        gmm = GmmParams(
            weights=np.array([0.5, 0.5]),
            means=np.array([[0.0, 0.0], [5.0, 5.0]]),
            variances=np.full((2, 2), 1e-6),
        )
        post = posterior(gmm, np.array([[0.0, 0.0]]))
        assert post[0, 0] >= 0.999

    def test_matches_extended_precision_oracle(self):
        gen = RngStream(15).generator()
        gmm = GmmParams(
            weights=np.array([0.2, 0.5, 0.3]),
            means=gen.normal(size=(3, 4)),
            variances=0.5 + gen.random(size=(3, 4)),
        )
        x = gen.normal(size=(12, 4)) * 2
        expected = gaussian_posterior_longdouble(gmm.weights, gmm.means, gmm.variances, x)
        assert np.allclose(posterior(gmm, x), expected, atol=1e-9)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_rows_stochastic(self, seed):
        gen = RngStream(seed, 99).generator()
        c, d = int(gen.integers(1, 5)), int(gen.integers(1, 4))
        w = gen.random(size=c) + 0.1
        gmm = GmmParams(
            weights=w / w.sum(),
            means=gen.normal(size=(c, d)) * 3,
            variances=VAR_FLOOR + gen.random(size=(c, d)),
        )
        post = posterior(gmm, gen.normal(size=(6, d)) * 5)
        assert np.all(post >= 0.0)
        assert np.allclose(post.sum(axis=1), 1.0, atol=1e-9)
        require_assignment_matrix(post)


class TestUpdateAssignments:
    def _setup(self, n_clients=8, n_clusters=2, dim=6):
        gen = RngStream(16).generator()
        updates = {k: gen.normal(size=dim) + (0.0 if k % 2 else 8.0) for k in range(n_clients)}
        cluster_heads = gen.normal(size=(n_clusters, dim)) * 0.1
        return updates, cluster_heads

    def test_warmup_freeze_bitwise(self):
        updates, cluster_heads = self._setup()
        p = uniform_assignments(8, 2)
        before = p.tobytes()
        out, gmm, pca = update_assignments(p, 2, 5, updates, cluster_heads, 2, None, RngStream(17))
        assert out.tobytes() == before
        assert gmm is None and pca is None

    def test_post_warmup_concentrates(self):
        updates, cluster_heads = self._setup()
        p = uniform_assignments(8, 2)
        for t in range(3):
            p, gmm, _ = update_assignments(p, t, 0, updates, cluster_heads, 2, None, RngStream(18))
        assert np.all(p.max(axis=1) >= 0.9)
        odd = p[1::2].argmax(axis=1)
        even = p[0::2].argmax(axis=1)
        assert len(set(odd.tolist())) == 1 and len(set(even.tolist())) == 1
        assert odd[0] != even[0]

    def test_single_cluster_all_ones(self):
        updates, cluster_heads = self._setup(n_clusters=1)
        p = uniform_assignments(8, 1)
        out, _, _ = update_assignments(p, 7, 0, updates, cluster_heads, 2, None, RngStream(19))
        assert np.all(out == 1.0)

    def test_absent_clients_keep_rows(self):
        updates, cluster_heads = self._setup()
        p = uniform_assignments(8, 2)
        reporting = {k: updates[k] for k in range(4)}
        out, _, _ = update_assignments(p, 9, 0, reporting, cluster_heads, 2, None, RngStream(20))
        assert np.array_equal(out[4:], p[4:])
        assert not np.allclose(out[:4], p[:4])

    def test_fewer_than_two_reporting_skips(self):
        updates, cluster_heads = self._setup()
        p = uniform_assignments(8, 2)
        out, _, _ = update_assignments(p, 9, 0, {0: updates[0]}, cluster_heads, 2, None, RngStream(21))
        assert out.tobytes() == p.tobytes()

    def test_permutation_equivariance(self):
        gen = RngStream(22).generator()
        n = 10
        updates = {k: gen.normal(size=5) + (6.0 if k < 5 else -6.0) for k in range(n)}
        cluster_heads = gen.normal(size=(2, 5)) * 0.1
        p = uniform_assignments(n, 2)
        out, _, _ = update_assignments(p, 3, 0, updates, cluster_heads, 2, None, RngStream(23))
        perm = gen.permutation(n)
        permuted_updates = {int(np.flatnonzero(perm == k)[0]): updates[k] for k in range(n)}
        out_p, _, _ = update_assignments(p, 3, 0, permuted_updates, cluster_heads, 2, None, RngStream(23))
        # row for client k must land where the permutation moved it
        for k in range(n):
            assert np.allclose(out_p[int(np.flatnonzero(perm == k)[0])], out[k], atol=1e-9)

    def test_component_identity_stable_across_refits(self):
        gen = RngStream(24).generator()
        n = 12
        updates = {k: gen.normal(size=4) * 0.3 + (5.0 if k < 6 else -5.0) for k in range(n)}
        cluster_heads = np.zeros((2, 4))
        p = uniform_assignments(n, 2)
        p1, gmm1, _ = update_assignments(p, 1, 0, updates, cluster_heads, 2, None, RngStream(25))
        first = p1.argmax(axis=1)
        for t in range(2, 6):
            jitter = {k: v + gen.normal(size=4) * 0.05 for k, v in updates.items()}
            p1, gmm1, _ = update_assignments(p1, t, 0, jitter, cluster_heads, 2, gmm1, RngStream(25))
            assert np.array_equal(p1.argmax(axis=1), first)

    def test_separation_recovery_rate(self):
        # planted two-group head updates at >= 6x within-group spread
        passes = 0
        for seed in range(20):
            gen = RngStream(seed, 55).generator()
            n = 20
            groups = np.array([k % 2 for k in range(n)])
            centers = np.stack([np.zeros(6), np.full(6, 6.0 / np.sqrt(6))])
            updates = {k: centers[groups[k]] + gen.normal(size=6) * (1.0 / np.sqrt(6)) for k in range(n)}
            p = uniform_assignments(n, 2)
            out, _, _ = update_assignments(p, 0, 0, updates, np.zeros((2, 6)), 2, None, RngStream(seed, 56))
            ari = adjusted_rand_score(groups, out.argmax(axis=1))
            passes += ari >= 0.9
        assert passes >= 18


class TestEntropy:
    def test_uniform_rows_max_entropy(self):
        p = uniform_assignments(5, 4)
        assert assignment_entropy(p) == pytest.approx(np.log(4), abs=1e-12)

    def test_one_hot_zero_entropy(self):
        p = np.eye(4)
        assert assignment_entropy(p) == pytest.approx(0.0, abs=1e-12)
