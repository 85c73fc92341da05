from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

from helpers import grid_ks, small_phantom
from ricedti.design import ModelSpec, positive_mask
from ricedti.priors import (
    IsoPrecision2,
    IsoPrecision4,
    PowerSpectrum,
    VoxelGraph,
    field_prior_energy,
    hyper_from_components,
    precision_components,
    tensor_precision,
)
from ricedti.sampler import (
    ChainConfig,
    ChainState,
    auto_burn_in,
    block_gaussian_mh,
    block_rng,
    partition_blocks,
    read_summary,
    run_chain,
    run_chain_arrays,
    update_hyper,
    update_sigma2,
    update_theta0,
    write_summary,
    write_trace,
)


def _augmented_loglik(theta0, eta_d, sigma2, Y, N):
    # log p(Y, N | theta, sigma2) with N ~ Poisson(nu^2 / 2s2), Y^2 | N ~ Gamma(N + 1, 1 / 2s2)
    nu2 = np.exp(2.0 * (theta0 + eta_d))
    return (stats.poisson.logpmf(N, nu2 / (2.0 * sigma2)).sum()
            + stats.gamma.logpdf(Y**2, N + 1, scale=2.0 * sigma2).sum())


class TestPartition:
    @pytest.fixture(params=["cube", "random"])
    def graph(self, request):
        if request.param == "cube":
            return VoxelGraph.from_mask(np.ones((5, 5, 5), bool))
        mask = np.random.default_rng(0).random((7, 6, 3)) < 0.7
        return VoxelGraph.from_mask(mask)

    @pytest.mark.parametrize("r", [0, 1, 2])
    def test_separation_and_coverage(self, graph, r):
        n = graph.n_vertices
        for cycle in range(2 * r + 1):
            part = partition_blocks(graph, r, cycle)
            seen = np.zeros(n, int)
            for step in part.steps:
                owner = np.full(n, -1)
                for k, b in enumerate(step):
                    owner[b] = k
                    seen[b] += 1
                a, c = owner[graph.edges[:, 0]], owner[graph.edges[:, 1]]
                both = (a >= 0) & (c >= 0)
                assert np.all(a[both] == c[both])
            np.testing.assert_array_equal(seen, 1)

    def test_radius_zero(self, graph):
        part = partition_blocks(graph, 0, 0)
        assert len(part.steps) == 2
        assert all(b.size == 1 for b in part.blocks)

    def test_boundaries_move(self):
        g = VoxelGraph.from_mask(np.ones((6, 6, 2), bool))
        sets = [{tuple(b) for b in partition_blocks(g, 1, c).blocks} for c in range(3)]
        assert sets[0] != sets[1] and sets[1] != sets[2]

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            partition_blocks(VoxelGraph.from_mask(np.ones((2, 2, 2), bool)), -1, 0)


class TestConjugacy:
    n_draws = 100000

    def test_sigma2(self):
        rng = np.random.default_rng(101)
        m = 4
        Y = np.array([1.3, 0.4, 2.2, 0.9])
        N = np.array([2, 0, 5, 1])
        theta = np.array([0.2])
        Z = np.ones((m, 1))
        n = self.n_draws
        data = SimpleNamespace(Y=np.tile(Y, (n, 1)), Z=Z)
        state = ChainState(np.tile(theta, (n, 1)), np.ones(n), None)
        draws = update_sigma2(np.arange(n), state, data, rng, np.tile(N, (n, 1)))
        grid = np.linspace(1e-3, 8.0, 20001)
        logd = np.array([_augmented_loglik(theta[0], 0.0, s, Y, N) for s in grid]) - np.log(grid)
        assert grid_ks(draws, grid, logd) < 0.01

    def test_theta0(self):
        rng = np.random.default_rng(102)
        Y = np.array([2.0, 1.1, 0.5])
        N = np.array([3, 1, 0])
        Z = np.array([[1.0, 0.0], [1.0, 0.5], [1.0, 1.2]])
        theta = np.array([0.0, -0.4])
        s2 = 0.8
        n = self.n_draws
        data = SimpleNamespace(Y=np.tile(Y, (n, 1)), Z=Z)
        state = ChainState(np.tile(theta, (n, 1)), np.full(n, s2), None)
        moved = update_theta0(np.arange(n), state, data, rng, np.tile(N, (n, 1)))
        assert moved.all()
        grid = np.linspace(-3.0, 3.0, 20001)
        eta_d = Z[:, 1] * theta[1]
        logd = np.array([_augmented_loglik(t, eta_d, s2, Y, N) for t in grid])
        assert grid_ks(state.theta[:, 0], grid, logd) < 0.01

    def test_theta0_moments(self):
        # m = 1, N = 5, b = 1
        data = SimpleNamespace(Y=np.ones((50000, 1)), Z=np.ones((1, 1)))
        state = ChainState(np.zeros((50000, 1)), np.full(50000, 0.5), None)
        update_theta0(np.arange(50000), state, data, np.random.default_rng(103),
                      np.full((50000, 1), 5))
        xi = np.exp(2 * state.theta[:, 0])
        assert abs(xi.mean() - 5.0) < 3 * np.sqrt(5.0 / 50000)

    def test_theta0_zero_counts(self):
        data = SimpleNamespace(Y=np.ones((1, 2)), Z=np.ones((2, 1)))
        state = ChainState([[0.3]], [1.0], None)
        moved = update_theta0([0], state, data, np.random.default_rng(0), np.zeros((1, 2)))
        assert not moved[0] and state.theta[0, 0] == 0.3

    @pytest.mark.parametrize("spec,hyper", [
        (ModelSpec("tensor2"), IsoPrecision2(2.0, 0.5)),
        (ModelSpec("tensor4"), IsoPrecision4(2.0, 0.5, 0.3)),
        (ModelSpec("sh", 1), PowerSpectrum((0.5, 0.2))),
    ])
    def test_hyper(self, spec, hyper):
        rng = np.random.default_rng(104)
        graph = VoxelGraph.from_mask(np.ones((2, 1, 1), bool))
        theta = rng.standard_normal((2, spec.n_params))
        comps = precision_components(spec, hyper)
        vals = np.array([c[1] for c in comps])
        draws = np.empty((self.n_draws, len(comps)))
        for i in range(self.n_draws):
            h = update_hyper(spec, theta, graph, hyper, rng)
            draws[i] = [c[1] for c in precision_components(spec, h)]
        n = graph.n_vertices
        for k, (_, val, _, rank) in enumerate(comps):
            hi = np.quantile(draws[:, k], 0.9999) * 2
            grid = np.linspace(hi * 1e-6, hi, 20001)

            def logd(c):
                v = vals.copy()
                v[k] = c
                om = tensor_precision(spec, hyper_from_components(spec, v))
                # field normalizer times the scale-invariant hyperprior
                return (0.5 * rank * n - 1.0) * np.log(c) - field_prior_energy(
                    theta[:, 1:], graph, om)

            assert grid_ks(draws[:, k], grid, np.array([logd(c) for c in grid])) < 0.01

    def test_hyper_stays_admissible(self):
        rng = np.random.default_rng(105)
        spec = ModelSpec("tensor4")
        graph = VoxelGraph.from_mask(np.ones((2, 2, 1), bool))
        h = IsoPrecision4(1.0, 0.0, 0.0)
        for _ in range(500):
            theta = rng.standard_normal((4, 16)) * rng.uniform(0.01, 10)
            h = update_hyper(spec, theta, graph, h, rng)
            assert h.alpha > 0 and h.beta > 0 and h.delta > 0

    def test_constant_field_keeps_hyper(self):
        spec = ModelSpec("tensor2")
        graph = VoxelGraph.from_mask(np.ones((3, 1, 1), bool))
        h = IsoPrecision2(1.0, 0.1)
        new = update_hyper(spec, np.ones((3, 7)), graph, h, np.random.default_rng(0))
        np.testing.assert_allclose([new.eta, new.lam], [h.eta, h.lam])


class TestGaussianSurrogate:
    """Two voxels, one coordinate each, Gaussian likelihood and pairwise prior."""

    y = np.array([0.8, -0.3])
    h = np.array([2.0, 1.5])
    w = 1.2

    def setup_method(self):
        self.graph = VoxelGraph.from_mask(np.ones((2, 1, 1), bool))
        self.omega = np.array([[self.w]])
        P = np.diag(self.h) + self.w * np.array([[1.0, -1.0], [-1.0, 1.0]])
        self.cov = np.linalg.inv(P)
        self.mean = self.cov @ (self.h * self.y)

    def loglik(self, tw):
        return -0.5 * self.h * (tw[:, 0] - self.y) ** 2

    def exact(self, tw):
        return self.y[:, None], self.h[:, None, None], np.zeros(2, bool), True

    def approx(self, tw):
        # deliberately wrong and state dependent
        return (0.5 * (tw + self.y[:, None]), 0.7 * self.h[:, None, None], np.zeros(2, bool),
                True)

    def test_exact_conditional_ratio(self):
        rng = np.random.default_rng(106)
        for _ in range(200):
            theta = rng.standard_normal((2, 1)) * 3
            ok, log_r, _ = block_gaussian_mh([0, 1], theta, self.graph, self.omega, self.exact,
                                             self.loglik, rng)
            assert ok
            np.testing.assert_allclose(log_r, 0.0, atol=1e-10)

    def fixed(self, tw):
        # wrong but state independent, as after converged scoring
        return (self.y[:, None] + 0.3, 0.6 * self.h[:, None, None], np.zeros(2, bool), True)

    def _asymmetry(self, laplace, scoring, seed):
        # (x, x') is exchangeable under a reversible kernel started at stationarity
        rng = np.random.default_rng(seed)
        M = 40000
        start = rng.multivariate_normal(self.mean, self.cov, size=M)
        f0 = start.sum(axis=1)
        f1 = np.empty(M)
        for i in range(M):
            theta = start[i][:, None].copy()
            block_gaussian_mh([0, 1], theta, self.graph, self.omega, laplace, self.loglik,
                              rng, scoring=scoring)
            f1[i] = theta.sum()
        sd = np.sqrt(self.cov.sum())
        cuts = self.mean.sum() + sd * stats.norm.ppf([1 / 3, 2 / 3])
        a, b = np.digitize(f0, cuts), np.digitize(f1, cuts)
        C = np.zeros((3, 3))
        np.add.at(C, (a, b), 1)
        assert np.trace(C) < M
        iu = np.triu_indices(3, 1)
        return np.abs(C[iu] - C.T[iu]) / np.sqrt(C[iu] + C.T[iu])

    def test_double_scoring_reversible(self):
        assert np.all(self._asymmetry(self.approx, "double", 107) < 3)

    def test_single_scoring_reversible_for_fixed_proposal(self):
        assert np.all(self._asymmetry(self.fixed, "single", 108) < 3)

    def test_single_scoring_bias_detected(self):
        # reusing a state dependent forward proposal breaks detailed balance
        assert np.max(self._asymmetry(self.approx, "single", 107)) > 3


class TestBurnIn:
    def test_trend_then_flat(self):
        rng = np.random.default_rng(108)
        lp = np.concatenate([np.linspace(-500, 0, 300), np.zeros(1700)]) + rng.standard_normal(2000)
        b = auto_burn_in(lp)
        assert 250 <= b <= 320

    def test_stationary(self):
        assert auto_burn_in(np.random.default_rng(109).standard_normal(2000)) < 50

    def test_short(self):
        assert auto_burn_in([1.0, 2.0]) == 0


@pytest.fixture(scope="module")
def data():
    return small_phantom()[0]


class TestChain:
    def _run(self, data, **kw):
        opts = dict(cycles=6, burn_in=2, thin=1, block_radius=1, seed=11)
        opts.update(kw)
        return run_chain(data, ModelSpec("tensor2"), ChainConfig(**opts))

    def test_deterministic_across_workers(self, data, tmp_path):
        texts = []
        for workers in (1, 2, 1):
            res = self._run(data, workers=workers)
            write_summary(tmp_path / "s.txt", res)
            texts.append((tmp_path / "s.txt").read_bytes())
        assert texts[0] == texts[1] == texts[2]

    def test_seed_matters(self, data):
        a, b = self._run(data, seed=1), self._run(data, seed=2)
        assert not np.array_equal(a.theta_mean, b.theta_mean)

    def test_zero_cycles(self, data):
        from ricedti.dataio import wls_initialize
        spec = ModelSpec("tensor2")
        theta, s2, _ = wls_initialize(data, spec)
        res = run_chain(data, spec, ChainConfig(cycles=0, burn_in=0))
        np.testing.assert_array_equal(res.theta_mean, theta)
        np.testing.assert_array_equal(res.sigma2_mean, s2)
        assert res.n_averaged == 0

    def test_constrained_draws_positive(self, data):
        res = self._run(data, positivity="constrained")
        spec = ModelSpec("tensor2")
        flat = res.samples_theta[:, :, 1:].reshape(-1, spec.d)
        assert np.all(positive_mask(spec, flat))
        np.testing.assert_array_equal(res.positive_fraction, 1.0)

    def test_counting_fraction(self, data):
        res = self._run(data)
        assert np.all((res.positive_fraction >= 0) & (res.positive_fraction <= 1))

    def test_result_shapes(self, data):
        res = self._run(data, thin=2)
        n = data.n_voxels
        assert res.theta_mean.shape == (n, 7)
        np.testing.assert_array_equal(res.sample_cycles, [4, 6])
        assert res.n_averaged == 4
        assert res.acceptance.shape == (n,)
        assert np.all((res.acceptance >= 0) & (res.acceptance <= 1))
        assert set(res.hyper_mean) == {"eta", "lambda"}

    def test_fixed_hyper(self, data):
        h = IsoPrecision2(1e5, 0.0)
        res = self._run(data, hyper_mode="fixed", hyper=h)
        np.testing.assert_array_equal(res.trace["eta"], 1e5)

    def test_summary_round_trip(self, data, tmp_path):
        res = self._run(data)
        write_summary(tmp_path / "s.txt", res)
        back = read_summary(tmp_path / "s.txt")
        np.testing.assert_array_equal(back.theta_mean, res.theta_mean)
        np.testing.assert_array_equal(back.theta_sd, res.theta_sd)
        np.testing.assert_array_equal(back.sigma2_mean, res.sigma2_mean)
        np.testing.assert_array_equal(back.coords, data.coords)
        assert back.spec == ModelSpec("tensor2")
        assert back.hyper["eta"][0] == res.hyper_mean["eta"]

    def test_summary_errors(self, data, tmp_path):
        res = self._run(data, cycles=1, burn_in=0)
        path = tmp_path / "s.txt"
        write_summary(path, res)
        lines = path.read_text().splitlines()
        (tmp_path / "short.txt").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError, match="data rows"):
            read_summary(tmp_path / "short.txt")

    def test_trace_file(self, data, tmp_path):
        res = self._run(data)
        write_trace(tmp_path / "t.tsv", res)
        rows = (tmp_path / "t.tsv").read_text().splitlines()
        assert rows[0].split("\t") == ["cycle", "loglik", "logprior", "eta", "lambda",
                                       "acceptance"]
        assert len(rows) == 7

    def test_fixed_omega_arrays(self):
        # a reduced model without a tensor family
        rng = np.random.default_rng(110)
        Z = np.ones((10, 1))
        Y = np.hypot(5 + rng.standard_normal((2, 10)), rng.standard_normal((2, 10)))
        g = VoxelGraph.from_mask(np.ones((2, 1, 1), bool))
        res = run_chain_arrays(Y, Z, g, None, ChainConfig(cycles=20, burn_in=5, thin=5),
                               np.full((2, 1), np.log(5.0)), np.ones(2), omega=np.zeros((1, 1)))
        assert np.all(np.isfinite(res.theta_mean))
        with pytest.raises(ValueError):
            run_chain_arrays(Y, Z, g, None, ChainConfig(cycles=1), np.zeros((2, 1)), np.ones(2))


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(cycles=-1), dict(burn_in=-3), dict(thin=0), dict(block_radius=-1),
        dict(positivity="soft"), dict(hyper_mode="guess"), dict(scoring="triple"),
        dict(theta0_update="never"), dict(inflation=0.0), dict(rho=-1.0), dict(workers=0),
        dict(hyper_mode="fixed"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ChainConfig(**kw)

    def test_rng_keys_independent(self):
        a = block_rng(1, 2, 0, 3, 4).random(4)
        np.testing.assert_array_equal(a, block_rng(1, 2, 0, 3, 4).random(4))
        assert not np.array_equal(a, block_rng(1, 2, 0, 3, 5).random(4))
        assert not np.array_equal(a, block_rng(1, 3, 0, 3, 4).random(4))
