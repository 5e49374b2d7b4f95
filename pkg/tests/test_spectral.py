import numpy as np
import pytest

from spectomo.linops import KroneckerMap, RadonGeometry, RayRadon, adjoint_mismatch
from spectomo.spectral import (
    MaterialBasis,
    ModelError,
    SpectrumTable,
    binned_attenuation,
    load_materials_csv,
    load_spectrum_csv,
    log_linearize,
    loss_eval,
    loss_gradient,
    material_forward_operator,
    simulate_counts,
    sqrt_hessian,
)

import importlib.resources as resources

DATA = resources.files("spectomo") / "data"


@pytest.fixture(scope="module")
def tables():
    spec = load_spectrum_csv(DATA / "spectrum_80kvp_3bin.csv")
    _, basis = load_materials_csv(DATA / "materials_wig.csv")
    return spec, basis


def small_instance(seed=0, side=8, n_views=6, n_det=13, n_mat=2, n_bins=2):
    """Tiny weighted least-squares instance with a dense-checkable operator."""
    rng = np.random.default_rng(seed)
    geom = RadonGeometry.uniform(side, n_views, n_det)
    radon = RayRadon(geom)
    mix = rng.uniform(0.2, 1.0, size=(n_bins, n_mat))
    A = KroneckerMap(mix, radon)
    y = rng.standard_normal(A.rows)
    w = rng.uniform(0.5, 3.0, A.rows)

    class Meas:
        log_data = y
        inv_cov_diag = w
        photon_counts = w

    return A, Meas(), rng


class TestSpectrumTable:
    def test_effective_spectrum_is_flux_scaled_response(self):
        spec = SpectrumTable([20, 30], [2.0, 3.0], [[0.5, 0.0], [0.5, 1.0]])
        assert np.allclose(spec.effective_spectrum, [[1.0, 0.0], [1.0, 3.0]])
        assert np.allclose(spec.bin_flux(), [1.0, 4.0])

    def test_rejects_negative_entries(self):
        with pytest.raises(ValueError):
            SpectrumTable([20.0], [-1.0], [[1.0]])

    def test_rejects_dead_bin(self):
        with pytest.raises(ValueError):
            SpectrumTable([20, 30], [1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])

    def test_rejects_duplicate_materials(self):
        with pytest.raises(ValueError):
            MaterialBasis(np.ones((4, 2)), ("a", "b"))


class TestDataFiles:
    def test_shipped_tables_load(self, tables):
        spec, basis = tables
        assert spec.n_bins == 3 and basis.n_materials == 3
        assert basis.material_names == ("water", "iodine", "gadolinium")
        C = binned_attenuation(spec, basis)
        assert C.shape == (3, 3)
        assert np.all(C > 0)
        assert np.linalg.cond(C) < 5e3

    def test_energy_grids_match(self, tables):
        spec, _ = tables
        eg, _ = load_materials_csv(DATA / "materials_wig.csv")
        assert np.allclose(spec.energies, eg)


class TestSimulateCounts:
    def test_zero_image_single_bin(self):
        # x = 0, one bin covering one energy with flux I0: every count is I0
        spec = SpectrumTable([40.0], [1500.0], [[1.0]])
        basis = MaterialBasis([[0.2]], ("water",))
        radon = RayRadon(RadonGeometry.uniform(8, 4, 11))
        counts = simulate_counts(spec, basis, radon, np.zeros(64))
        assert np.allclose(counts, 1500.0)

    def test_scalar_beer_law(self):
        spec = SpectrumTable([40.0], [2000.0], [[1.0]])
        c = 0.31
        basis = MaterialBasis([[c]], ("water",))
        geom = RadonGeometry.uniform(8, 4, 11)
        radon = RayRadon(geom)
        rng = np.random.default_rng(1)
        x = rng.uniform(0.0, 0.5, 64)
        counts = simulate_counts(spec, basis, radon, x)
        expected = 2000.0 * np.exp(-c * radon.apply(x))
        assert np.allclose(counts, expected, rtol=1e-12)

    def test_seeded_reproducibility(self, tables):
        spec, basis = tables
        spec = spec.scaled(2000.0)
        radon = RayRadon(RadonGeometry.uniform(8, 4, 11))
        x = np.full(3 * 64, 0.01)
        a = simulate_counts(spec, basis, radon, x, noise_seed=77)
        b = simulate_counts(spec, basis, radon, x, noise_seed=77)
        assert np.array_equal(a, b)
        c = simulate_counts(spec, basis, radon, x, noise_seed=78)
        assert not np.array_equal(a, c)

    def test_vanishing_mean_raises(self):
        # attenuation so extreme the expected count underflows to zero
        spec = SpectrumTable([40.0], [1.0], [[1.0]])
        basis = MaterialBasis([[500.0]], ("lead",))
        radon = RayRadon(RadonGeometry.uniform(8, 2, 11))
        with pytest.raises(ModelError, match="nonpositive expected count"):
            simulate_counts(spec, basis, radon, np.full(64, 10.0))

    def test_poisson_noise_statistics(self):
        spec = SpectrumTable([40.0], [500.0], [[1.0]])
        basis = MaterialBasis([[0.0001]], ("water",))
        radon = RayRadon(RadonGeometry.uniform(8, 60, 11))
        counts = simulate_counts(spec, basis, radon, np.zeros(64), noise_seed=5)
        mean = counts.mean()
        assert abs(mean - 500.0) < 3 * np.sqrt(500.0 / counts.size)


class TestLogLinearize:
    def test_identity_spectrum(self):
        spec = SpectrumTable([40.0], [1.0], [[1.0]])
        counts = np.array([2.0, 1.0, 0.5])
        meas = log_linearize(spec, counts)
        assert np.allclose(meas.log_data, -np.log(counts))
        # with unit bin flux the inverse covariance is the raw counts
        assert np.allclose(meas.inv_cov_diag, counts)

    def test_scalar_bin_flux_inverse_covariance(self):
        # (p/s) * s * (1/p) * s * (p/s) = p, independently of s
        s0 = 7.5
        spec = SpectrumTable([40.0], [s0], [[1.0]])
        counts = np.array([3.0, 9.0])
        meas = log_linearize(spec, counts)
        p_tilde = counts / s0
        assert np.allclose(meas.inv_cov_diag, p_tilde**2 * s0**2 / counts)
        assert np.allclose(meas.inv_cov_diag, counts)
        assert np.allclose(meas.log_data, -np.log(counts / s0))

    def test_zero_count_raises_with_index(self):
        spec = SpectrumTable([40.0], [1.0], [[1.0]])
        with pytest.raises(ModelError, match="index 2"):
            log_linearize(spec, np.array([1.0, 2.0, 0.0, 4.0]))

    def test_noiseless_roundtrip_first_order(self, tables):
        # noiseless simulation followed by log-linearization recovers the
        # linear model to the stated tolerance when counts are large
        spec, basis = tables
        spec = spec.scaled_to_mean_bin_flux(1e5)
        geom = RadonGeometry.uniform(16, 8, 24, pixel_size=0.15)
        radon = RayRadon(geom)
        rng = np.random.default_rng(3)
        x = np.concatenate([
            rng.uniform(0, 1.0, 256),
            rng.uniform(0, 0.01, 256),
            rng.uniform(0, 0.01, 256),
        ])
        counts = simulate_counts(spec, basis, radon, x)
        assert counts.min() >= 1e4
        meas = log_linearize(spec, counts)
        A = material_forward_operator(binned_attenuation(spec, basis), radon)
        ax = A.apply(x)
        assert np.linalg.norm(meas.log_data - ax) <= 1e-3 * np.linalg.norm(ax)


class TestLoss:
    def test_zero_at_exact_fit(self):
        A, meas, rng = small_instance()
        # solve dense weighted LS to move the residual to zero manually
        x = rng.standard_normal(A.cols)
        meas.log_data = A.apply(x)
        assert loss_eval(meas, A, x) == 0.0
        assert np.allclose(loss_gradient(meas, A, x), 0.0)

    def test_unit_residual(self):
        class Id:
            rows = cols = 3

            def apply(self, x):
                return np.asarray(x, dtype=float)

            def adjoint_apply(self, y):
                return np.asarray(y, dtype=float)

        class M:
            log_data = np.zeros(3)
            inv_cov_diag = np.ones(3)

        x = np.array([1.0, 0.0, 0.0])
        assert loss_eval(M(), Id(), x) == pytest.approx(0.5)

    def test_matches_dense_quadratic_form(self):
        A, meas, rng = small_instance(seed=4)
        dense = np.kron(A.mix, A.radon.as_dense())
        x = rng.standard_normal(A.cols)
        r = dense @ x - meas.log_data
        expect = 0.5 * r @ (meas.inv_cov_diag * r)
        assert loss_eval(meas, A, x) == pytest.approx(expect, rel=1e-12)

    def test_gradient_matches_central_differences(self):
        A, meas, rng = small_instance(seed=5)
        x = rng.standard_normal(A.cols)
        g = loss_gradient(meas, A, x)
        for _ in range(12):
            v = rng.standard_normal(A.cols)
            v /= np.linalg.norm(v)
            h = 1e-4
            d_fd = (loss_eval(meas, A, x + h * v) - loss_eval(meas, A, x - h * v)) / (2 * h)
            assert abs(g @ v - d_fd) <= 1e-6 * (abs(d_fd) + 1e-12)

    def test_convexity_along_lines(self):
        A, meas, rng = small_instance(seed=6)
        x = rng.standard_normal(A.cols)
        for _ in range(5):
            v = rng.standard_normal(A.cols)
            f = [loss_eval(meas, A, x + t * v) for t in (-0.5, 0.0, 0.5)]
            assert f[0] - 2 * f[1] + f[2] >= -1e-9 * max(map(abs, f))


class TestSqrtHessian:
    def test_normal_product_matches_dense(self):
        A, meas, rng = small_instance(seed=7)
        B = sqrt_hessian(meas, A)
        dense = np.kron(A.mix, A.radon.as_dense())
        H = dense.T @ (meas.inv_cov_diag[:, None] * dense)
        v = rng.standard_normal(A.cols)
        got = B.adjoint_apply(B.apply(v))
        assert np.linalg.norm(got - H @ v) <= 1e-10 * np.linalg.norm(H @ v)
        assert np.allclose(B.normal_apply(v), got)

    def test_positive_semidefinite(self):
        A, meas, rng = small_instance(seed=8)
        B = sqrt_hessian(meas, A)
        for _ in range(10):
            v = rng.standard_normal(A.cols)
            assert B.apply(v) @ B.apply(v) >= 0.0

    def test_adjoint(self):
        A, meas, _ = small_instance(seed=9)
        B = sqrt_hessian(meas, A)
        assert adjoint_mismatch(B, np.random.default_rng(0)) <= 1e-8

    def test_view_blocks_match_full(self):
        A, meas, rng = small_instance(seed=10)
        B = sqrt_hessian(meas, A)
        x = rng.standard_normal(B.cols)
        full = B.apply(x).reshape(B.n_bins, B.n_views, B.n_detectors)
        views = [1, 3, 4]
        blocks = B.apply_view_blocks(x, views)
        assert np.allclose(blocks, full[:, views, :].transpose(1, 0, 2))
        # restricted normal product equals summing those blocks' outer action
        scale = np.array([2.0, 0.5, 1.0])
        got = B.normal_apply_views(x, views, scale)
        dense = np.kron(A.mix, A.radon.as_dense())
        W = meas.inv_cov_diag.reshape(B.n_bins, B.n_views, B.n_detectors)
        expect = np.zeros(B.cols)
        for s, v in zip(scale, views):
            for k in range(B.n_bins):
                rows = dense.reshape(B.n_bins, B.n_views, B.n_detectors, -1)[k, v]
                expect += s * rows.T @ (W[k, v] * (rows @ x))
        assert np.linalg.norm(got - expect) <= 1e-10 * np.linalg.norm(expect)
