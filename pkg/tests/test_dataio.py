import numpy as np
import pytest
from scipy import stats

from ricedti.dataio import (
    Dataset,
    PhantomSpec,
    fiber_direction_error,
    load_dataset,
    phantom_scheme,
    save_dataset,
    simulate_phantom,
    standard_phantom,
    wls_initialize,
)
from ricedti.design import GradientScheme, ModelSpec, design_matrix, to_tensor2

T2 = ModelSpec("tensor2")


def _uniform_spec(coeffs, dims=(2, 2, 1), s0=1000.0, sigma2=0.0, model=T2, **kw):
    c = np.broadcast_to(np.asarray(coeffs, float), dims + (model.d,))
    return PhantomSpec(model, c, s0, sigma2, **kw)


class TestSimulate:
    def test_noiseless(self):
        spec = _uniform_spec([1.7e-3, 0.3e-3, 0.4e-3, 1e-4, 0, 0])
        scheme = phantom_scheme()
        data = simulate_phantom(spec, scheme, seed=0)
        ref = np.exp(spec.theta() @ design_matrix(T2, scheme).T)
        np.testing.assert_allclose(data.Y, ref.astype(np.float32), rtol=0)

    def test_isotropic_signal_depends_on_b_only(self):
        spec = _uniform_spec([1e-3, 1e-3, 1e-3, 0, 0, 0], dims=(1, 1, 1))
        scheme = phantom_scheme()
        data = simulate_phantom(spec, scheme, seed=0)
        _, b = scheme.expand()
        for bv in np.unique(b):
            sel = data.Y[0, b == bv]
            np.testing.assert_allclose(sel, sel[0], rtol=1e-6)
            np.testing.assert_allclose(sel[0], 1000 * np.exp(-bv * 1e-3), rtol=1e-6)

    def test_rice_marginal(self):
        # one b = 0 acquisition across many voxels
        nu, s = 2.0, 1.0
        scheme = GradientScheme(np.array([[1.0, 0.0, 0.0]]), np.array([0.0]))
        spec = _uniform_spec(np.zeros(6) + [1e-3, 1e-3, 1e-3, 0, 0, 0], dims=(100, 100, 100),
                             s0=nu, sigma2=s**2)
        y = simulate_phantom(spec, scheme, seed=5).Y.ravel()
        assert stats.kstest(y, lambda x: stats.rice.cdf(x, nu / s, scale=s)).statistic < 0.005

    def test_deterministic(self):
        spec, _ = standard_phantom(dims=(3, 3, 1), band=(1, 2))
        a = simulate_phantom(spec, phantom_scheme(), 9)
        b = simulate_phantom(spec, phantom_scheme(), 9)
        np.testing.assert_array_equal(a.Y, b.Y)

    def test_quantized_zeros(self):
        spec, _ = standard_phantom(quantize=True)
        data = simulate_phantom(spec, phantom_scheme(), 1)
        assert data.quantized
        np.testing.assert_array_equal(data.Y, np.floor(data.Y))
        _, b = data.scheme.expand()
        zeros = data.Y == 0
        assert zeros.sum() > 0
        assert np.all(b[np.any(zeros, axis=0)] == b.max())

    def test_bad_inputs(self):
        with pytest.raises(ValueError, match="not positive"):
            _uniform_spec([-1e-3, 1e-3, 1e-3, 0, 0, 0])
        with pytest.raises(ValueError):
            _uniform_spec([1e-3, 1e-3, 1e-3, 0, 0, 0], s0=0.0)
        spec = _uniform_spec([1e-3, 1e-3, 1e-3, 0, 0, 0])
        with pytest.raises(TypeError):
            simulate_phantom(spec, np.zeros((3, 3)), 0)


class TestStandardPhantom:
    def test_layout(self):
        spec, truth = standard_phantom()
        assert spec.dims == (16, 16, 2)
        counts = np.bincount(truth.labels.ravel(), minlength=4)
        np.testing.assert_array_equal(counts, [2 * 100, 2 * 60, 2 * 60, 2 * 36])
        assert spec.model == ModelSpec("tensor4")

    def test_single_fiber_tensor(self):
        spec, truth = standard_phantom()
        i = np.argwhere(truth.labels == 1)[0]
        D = to_tensor2(spec.model, spec.coeffs[tuple(i)])
        np.testing.assert_allclose(D, [1.7e-3, 0.3e-3, 0.3e-3, 0, 0, 0], atol=1e-15)


class TestWLS:
    def test_noiseless_recovery(self):
        coeffs = [1.7e-3, 0.3e-3, 0.4e-3, 1e-4, -5e-5, 2e-5]
        spec = _uniform_spec(coeffs)
        data = simulate_phantom(spec, phantom_scheme(), 0)
        # float64 magnitudes so that the only error is the solver
        data.Y = np.exp(spec.theta() @ design_matrix(T2, data.scheme).T)
        theta, s2, flagged = wls_initialize(data, T2)
        np.testing.assert_allclose(theta, spec.theta(), atol=1e-10)
        assert not flagged.any()
        assert np.all(s2 < 1e-16)

    def test_fixed_point(self):
        data = simulate_phantom(standard_phantom(dims=(3, 3, 1), band=(1, 2))[0],
                                phantom_scheme(), 2)
        a, _, _ = wls_initialize(data, T2, max_iter=200, tol=1e-14)
        b, _, _ = wls_initialize(data, T2, max_iter=201, tol=1e-14)
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_direction_on_phantom(self):
        spec, truth = standard_phantom()
        data = simulate_phantom(spec, phantom_scheme(), 20261016)
        theta, _, _ = wls_initialize(data, T2, b_max=5000.0)
        single = np.isin(truth.labels[spec.mask], (1, 2))
        err = fiber_direction_error(theta[single, 1:], truth.directions[spec.mask][single])
        assert np.mean(err < 10.0) >= 0.9

    def test_zero_and_high_b_filtered(self):
        spec = _uniform_spec([1e-3, 1e-3, 1e-3, 0, 0, 0], dims=(2, 1, 1))
        data = simulate_phantom(spec, phantom_scheme(), 0)
        _, b = data.scheme.expand()
        Y = data.Y.copy()
        Y[:, b == b.max()] = 0.0
        Y[0, 5] = 0.0
        data.Y = Y
        theta, _, flagged = wls_initialize(data, T2, b_max=2000.0)
        np.testing.assert_allclose(theta, spec.theta(), rtol=1e-5, atol=1e-12)
        assert not flagged.any()

    def test_flagged_voxel_copies_neighbor(self):
        spec = _uniform_spec([1e-3, 1e-3, 1e-3, 0, 0, 0], dims=(3, 1, 1))
        data = simulate_phantom(spec, phantom_scheme(), 0)
        Y = data.Y.copy()
        Y[2, 4:] = 0.0
        data.Y = Y
        theta, s2, flagged = wls_initialize(data, T2)
        np.testing.assert_array_equal(flagged, [False, False, True])
        np.testing.assert_array_equal(theta[2], theta[1])

    def test_all_voxels_unusable(self):
        spec = _uniform_spec([1e-3, 1e-3, 1e-3, 0, 0, 0], dims=(1, 1, 1))
        data = simulate_phantom(spec, phantom_scheme(), 0)
        data.Y = np.zeros_like(data.Y)
        with pytest.raises(ValueError):
            wls_initialize(data, T2)


class TestFiles:
    def test_round_trip(self, tmp_path):
        spec, _ = standard_phantom(dims=(4, 3, 2), band=(1, 2))
        mask = np.ones(spec.dims, bool)
        mask[0, 0, 0] = False
        spec.mask = mask
        data = simulate_phantom(spec, phantom_scheme(), 4)
        hdr = save_dataset(data, tmp_path / "d")
        back = load_dataset(hdr)
        assert back.dims == data.dims and back.voxel_size == data.voxel_size
        np.testing.assert_array_equal(back.mask, data.mask)
        np.testing.assert_array_equal(back.Y, data.Y)
        for attr in ("directions", "bvalues", "repeats"):
            np.testing.assert_array_equal(getattr(back.scheme, attr), getattr(data.scheme, attr))
        assert back.quantized == data.quantized

    def test_truncated(self, tmp_path):
        spec, _ = standard_phantom(dims=(2, 2, 1), band=(0, 1))
        data = simulate_phantom(spec, phantom_scheme(), 4)
        save_dataset(data, tmp_path / "d")
        raw = (tmp_path / "d.f32").read_bytes()
        (tmp_path / "d.f32").write_bytes(raw[:-3])
        with pytest.raises(ValueError, match="bytes"):
            load_dataset(tmp_path / "d.hdr")

    def test_malformed_header(self, tmp_path):
        spec, _ = standard_phantom(dims=(2, 2, 1), band=(0, 1))
        save_dataset(simulate_phantom(spec, phantom_scheme(), 4), tmp_path / "d")
        text = (tmp_path / "d.hdr").read_text().replace("dims = 2 2 1", "dims = 2 x 1")
        (tmp_path / "d.hdr").write_text(text)
        with pytest.raises(ValueError, match=r"d\.hdr:\d+"):
            load_dataset(tmp_path / "d.hdr")

    def test_dataset_validation(self):
        scheme = phantom_scheme()
        mask = np.ones((1, 1, 1), bool)
        with pytest.raises(ValueError):
            Dataset((1, 1, 1), (2, 2, 2), mask, scheme, np.zeros((1, 5)))
        with pytest.raises(ValueError):
            Dataset((1, 1, 1), (2, 2, 2), mask, scheme, -np.ones((1, 96)))
