import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedhft.errors import NumericError, ParameterError
from fedhft.numerics import (
    RngStream,
    finite_diff_grad,
    pca_fit,
    pca_transform,
    svd_truncate,
)
from oracles import jacobi_svd


class TestSvdTruncate:
    def test_zero_matrix(self):
        b, a = svd_truncate(np.zeros((4, 3)), 2)
        assert np.all(b == 0.0)
        assert np.allclose(a @ a.T, np.eye(2), atol=1e-12)
        assert np.all(b @ a == 0.0)

    def test_rank_one_exact(self):
        gen = RngStream(7).generator()
        m = np.outer(gen.normal(size=5), gen.normal(size=4))
        b, a = svd_truncate(m, 1)
        assert np.linalg.norm(b @ a - m) <= 1e-9 * np.linalg.norm(m)

    def test_residual_matches_discarded_singular_values(self):
        gen = RngStream(11).generator()
        m = gen.normal(size=(8, 6))
        b, a = svd_truncate(m, 3)
        residual_sq = np.linalg.norm(b @ a - m) ** 2
        _, sigma, _ = jacobi_svd(m)
        expected = float(np.sum(sigma[3:] ** 2))
        assert residual_sq == pytest.approx(expected, rel=1e-8)

    def test_eckart_young_beats_random_rank_r(self):
        gen = RngStream(13).generator()
        for _ in range(20):
            m = gen.normal(size=(6, 5))
            b, a = svd_truncate(m, 2)
            best = np.linalg.norm(b @ a - m)
            for _ in range(5):
                rb = gen.normal(size=(6, 2))
                ra = gen.normal(size=(2, 5))
                assert best <= np.linalg.norm(rb @ ra - m) + 1e-12

    def test_column_norms_non_increasing(self):
        gen = RngStream(17).generator()
        for _ in range(10):
            m = gen.normal(size=(7, 7))
            b, _ = svd_truncate(m, 5)
            norms = np.linalg.norm(b, axis=0)
            assert np.all(np.diff(norms) <= 1e-12)

    def test_rank_out_of_range(self):
        with pytest.raises(ParameterError):
            svd_truncate(np.ones((3, 2)), 3)
        with pytest.raises(ParameterError):
            svd_truncate(np.ones((3, 2)), 0)

    def test_non_finite_rejected(self):
        m = np.ones((3, 3))
        m[1, 1] = np.nan
        with pytest.raises(NumericError):
            svd_truncate(m, 1)


class TestPca:
    def test_identical_rows_zero_variance(self):
        x = np.tile(np.array([1.0, 2.0, 3.0]), (5, 1))
        model = pca_fit(x, 1)
        assert model.explained_variance[0] == pytest.approx(0.0, abs=1e-18)

    def test_perfect_line(self):
        t = np.linspace(-2, 2, 9)
        direction = np.array([1.0, -2.0, 0.5])
        x = np.outer(t, direction)
        model = pca_fit(x, 1)
        recon = pca_transform(model, x) @ model.components + model.mean
        assert np.linalg.norm(recon - x) <= 1e-9

    def test_reconstruction_error_matches_discarded_eigenvalues(self):
        gen = RngStream(23).generator()
        x = gen.normal(size=(20, 10))
        k = 4
        model = pca_fit(x, k)
        centered = x - x.mean(axis=0)
        recon = pca_transform(model, x) @ model.components
        err = np.sum((recon - centered) ** 2) / (x.shape[0] - 1)
        evals = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
        assert err == pytest.approx(float(np.sum(evals[k:])), rel=1e-8)

    def test_idempotent_on_low_dim_data(self):
        gen = RngStream(29).generator()
        basis = np.linalg.qr(gen.normal(size=(6, 2)))[0].T
        x = gen.normal(size=(15, 2)) @ basis + gen.normal(size=6)
        model = pca_fit(x, 2)
        recon = pca_transform(model, x) @ model.components + model.mean
        assert np.linalg.norm(recon - x) <= 1e-9

    def test_explained_variance_non_increasing(self):
        gen = RngStream(31).generator()
        model = pca_fit(gen.normal(size=(12, 5)), 4)
        assert np.all(np.diff(model.explained_variance) <= 1e-12)
        assert np.allclose(model.components @ model.components.T, np.eye(4), atol=1e-8)

    def test_k_out_of_range(self):
        x = np.random.default_rng(0).normal(size=(4, 6))
        with pytest.raises(ParameterError):
            pca_fit(x, 4)   # k must be <= n - 1
        with pytest.raises(ParameterError):
            pca_fit(x[:1], 1)


class TestPcaTransform:
    def test_mean_maps_to_origin(self):
        model = pca_fit(np.random.default_rng(1).normal(size=(8, 4)), 2)
        assert np.allclose(pca_transform(model, model.mean), 0.0, atol=1e-12)

    def test_component_maps_to_unit_vector(self):
        model = pca_fit(np.random.default_rng(2).normal(size=(8, 4)), 2)
        out = pca_transform(model, model.mean + model.components[0])
        assert out == pytest.approx([1.0, 0.0], abs=1e-10)

    def test_matches_direct_arithmetic(self):
        gen = RngStream(37).generator()
        model = pca_fit(gen.normal(size=(10, 5)), 3)
        x = gen.normal(size=5)
        expected = model.components @ (x - model.mean)
        assert pca_transform(model, x) == pytest.approx(expected, abs=1e-14)

    def test_dimension_mismatch(self):
        model = pca_fit(np.random.default_rng(3).normal(size=(6, 4)), 2)
        with pytest.raises(ParameterError):
            pca_transform(model, np.zeros(5))


class TestFiniteDiff:
    def test_quadratic(self):
        grad = finite_diff_grad(lambda t: 0.5 * float(t @ t), np.array([1.0, 2.0]), eps=1e-5)
        assert grad == pytest.approx([1.0, 2.0], abs=1e-6)

    def test_constant(self):
        grad = finite_diff_grad(lambda t: 3.5, np.array([0.3, -0.7, 2.0]))
        assert np.all(np.abs(grad) <= 1e-9)

    def test_bad_eps(self):
        with pytest.raises(ParameterError):
            finite_diff_grad(lambda t: 0.0, np.zeros(2), eps=0.0)

    def test_non_finite_function(self):
        with pytest.raises(NumericError):
            finite_diff_grad(lambda t: float("nan"), np.zeros(2))


class TestRngStream:
    def test_same_key_bitwise_equal(self):
        a = RngStream(42, 7).generator().normal(size=100)
        b = RngStream(42, 7).generator().normal(size=100)
        assert a.tobytes() == b.tobytes()

    def test_different_streams_differ(self):
        a = RngStream(42, 7).generator().normal(size=100)
        b = RngStream(42, 8).generator().normal(size=100)
        assert a.tobytes() != b.tobytes()

    def test_child_offsets(self):
        s = RngStream(5, 100)
        assert s.child(3) == RngStream(5, 103)

    @given(st.integers(0, 2**63), st.integers(0, 2**63))
    @settings(max_examples=20, deadline=None)
    def test_reproducible_for_any_key(self, seed, stream):
        a = RngStream(seed, stream).generator().integers(0, 1 << 30, size=8)
        b = RngStream(seed, stream).generator().integers(0, 1 << 30, size=8)
        assert np.array_equal(a, b)
