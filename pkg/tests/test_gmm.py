import math

import numpy as np
import pytest
import torch
from scipy.stats import multivariate_normal

from motionprior import gmm as G
from motionprior.state import INIT_VECTOR_DIM


def single_gaussian(dim=5, scale=1.0, mean=None):
    mu = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
    return G.InitGmm(
        weights=np.array([1.0]),
        means=mu[None],
        chols=(scale * np.eye(dim))[None],
    )


class TestLogLikelihood:
    def test_standard_normal_at_mean(self):
        gmm = single_gaussian(dim=INIT_VECTOR_DIM)
        x = torch.zeros(INIT_VECTOR_DIM, dtype=torch.float64)
        want = -(INIT_VECTOR_DIM / 2) * math.log(2 * math.pi)
        assert float(G.gmm_log_likelihood(gmm, x)) == pytest.approx(want, abs=1e-12)

    def test_matches_scipy_on_full_covariance(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(6, 6))
        cov = a @ a.T + 6 * np.eye(6)
        mu = rng.normal(size=6)
        gmm = G.InitGmm(np.array([1.0]), mu[None], np.linalg.cholesky(cov)[None])
        xs = rng.normal(size=(40, 6), scale=3.0)
        mine = G.gmm_log_likelihood(gmm, torch.as_tensor(xs)).numpy()
        ref = multivariate_normal(mu, cov).logpdf(xs)
        assert np.max(np.abs(mine - ref)) < 1e-10

    def test_mixture_matches_scipy_mixture(self):
        rng = np.random.default_rng(1)
        means = rng.normal(size=(3, 4), scale=2.0)
        covs, chols = [], []
        for _ in range(3):
            a = rng.normal(size=(4, 4))
            covs.append(a @ a.T + 4 * np.eye(4))
            chols.append(np.linalg.cholesky(covs[-1]))
        w = np.array([0.2, 0.5, 0.3])
        gmm = G.InitGmm(w, means, np.stack(chols))
        xs = rng.normal(size=(25, 4), scale=3.0)
        mine = G.gmm_log_likelihood(gmm, torch.as_tensor(xs)).numpy()
        ref = np.log(
            sum(wi * multivariate_normal(m, c).pdf(xs) for wi, m, c in zip(w, means, covs))
        )
        assert np.max(np.abs(mine - ref)) < 1e-9

    def test_zero_weight_component_ignored_exactly(self):
        mu2 = np.full(5, 1e6)
        two = G.InitGmm(
            np.array([1.0, 0.0]),
            np.stack([np.zeros(5), mu2]),
            np.stack([np.eye(5), np.eye(5)]),
        )
        one = single_gaussian(dim=5)
        xs = torch.as_tensor(np.random.default_rng(2).normal(size=(10, 5)))
        assert torch.equal(G.gmm_log_likelihood(two, xs), G.gmm_log_likelihood(one, xs))

    def test_finite_far_from_support(self):
        gmm = single_gaussian(dim=5)
        x = torch.full((5,), 1e3, dtype=torch.float64)
        assert math.isfinite(float(G.gmm_log_likelihood(gmm, x)))

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 5))
        gmm = G.InitGmm(
            np.array([0.6, 0.4]),
            rng.normal(size=(2, 5)),
            np.stack([np.linalg.cholesky(a @ a.T + 5 * np.eye(5)), np.eye(5)]),
        )
        x = torch.as_tensor(rng.normal(size=5)).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda t: G.gmm_log_likelihood(gmm, t), (x,), eps=1e-6, atol=1e-7
        )

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            G.gmm_log_likelihood(single_gaussian(dim=5), torch.zeros(4, dtype=torch.float64))


class TestFit:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(4)
        data = rng.normal(size=(400, 3), scale=[1.0, 2.0, 0.5]) + [1.0, -2.0, 0.0]
        gmm = G.fit_em(data, k=1, seed=0, reg=1e-6)
        assert np.allclose(gmm.means[0], data.mean(axis=0), atol=1e-9)
        want_cov = np.cov(data.T, bias=True) + 1e-6 * np.eye(3)
        assert np.allclose(gmm.covariances()[0], want_cov, atol=1e-8)
        assert gmm.weights[0] == pytest.approx(1.0)

    def test_two_blob_recovery(self):
        rng = np.random.default_rng(5)
        blob_a = rng.normal(size=(300, 4), scale=0.3) + np.array([3.0, 0, 0, 0])
        blob_b = rng.normal(size=(300, 4), scale=0.3) - np.array([3.0, 0, 0, 0])
        gmm = G.fit_em(np.vstack([blob_a, blob_b]), k=2, seed=1)
        got = sorted(gmm.means[:, 0])
        assert got[0] == pytest.approx(-3.0, abs=0.05)
        assert got[1] == pytest.approx(3.0, abs=0.05)
        assert np.allclose(np.sort(gmm.weights), [0.5, 0.5], atol=0.02)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_trace_monotone(self, seed):
        rng = np.random.default_rng(seed)
        data = np.vstack(
            [rng.normal(size=(150, 6)) + c for c in ([0] * 6, [4] * 6, [-4] * 6)]
        )
        gmm = G.fit_em(data, k=3, seed=seed)
        trace = np.array(gmm.fit_trace)
        assert len(trace) >= 2
        assert np.all(np.diff(trace) >= -1e-9)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(6)
        data = rng.normal(size=(200, 3))
        a = G.fit_em(data, k=2, seed=9)
        b = G.fit_em(data, k=2, seed=9)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.chols, b.chols)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            G.fit_em(np.zeros((3, 2)), k=2)

    def test_non_finite_rejected(self):
        data = np.zeros((50, 2))
        data[0, 0] = np.nan
        with pytest.raises(ValueError):
            G.fit_em(data, k=2)

    def test_reseed_targets_farthest_point(self):
        data = torch.as_tensor(
            np.vstack([np.zeros((5, 2)), [[10.0, 10.0]]])
        )
        means = torch.zeros(1, 2, dtype=torch.float64)
        assert G._farthest_point_index(data, means) == 5


class TestSampling:
    def test_reproducible(self):
        gmm = single_gaussian(dim=4)
        a = G.gmm_sample(gmm, np.random.default_rng(7))
        b = G.gmm_sample(gmm, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        mu = np.array([1.0, -2.0, 0.5])
        gmm = single_gaussian(dim=3, scale=2.0, mean=mu)
        rng = np.random.default_rng(8)
        draws = np.stack([G.gmm_sample(gmm, rng) for _ in range(100_000)])
        tol = 3 * 2.0 / math.sqrt(100_000)
        assert np.all(np.abs(draws.mean(axis=0) - mu) < tol)

    def test_tiny_covariance_concentrates(self):
        mu = np.array([5.0, 5.0])
        gmm = single_gaussian(dim=2, scale=1e-3, mean=mu)
        rng = np.random.default_rng(9)
        draws = np.stack([G.gmm_sample(gmm, rng) for _ in range(100)])
        assert np.max(np.abs(draws - mu)) < 0.01

    def test_component_frequencies(self):
        gmm = G.InitGmm(
            np.array([0.8, 0.2]),
            np.array([[0.0], [100.0]]),
            np.stack([np.eye(1) * 1e-3, np.eye(1) * 1e-3]),
        )
        rng = np.random.default_rng(10)
        draws = np.stack([G.gmm_sample(gmm, rng) for _ in range(5000)])
        frac_far = float((draws > 50).mean())
        assert frac_far == pytest.approx(0.2, abs=0.03)


class TestFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        data = np.vstack([rng.normal(size=(100, 3)) + 2, rng.normal(size=(100, 3)) - 2])
        gmm = G.fit_em(data, k=2, seed=0)
        path = tmp_path / "init.gmm"
        G.save_gmm(gmm, path, meta={"n": 200})
        back = G.load_gmm(path)
        assert np.array_equal(back.weights, gmm.weights)
        assert np.array_equal(back.means, gmm.means)
        assert np.array_equal(back.chols, gmm.chols)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.gmm"
        path.write_bytes(b"WRONG!!!" + b"\x00" * 64)
        with pytest.raises(ValueError, match="not a mixture"):
            G.load_gmm(path)

    def test_truncated_payload(self, tmp_path):
        gmm = single_gaussian(dim=3)
        path = tmp_path / "g.gmm"
        G.save_gmm(gmm, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload"):
            G.load_gmm(path)


class TestValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            G.InitGmm(np.array([0.5, 0.4]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))

    def test_cholesky_diagonal_positive(self):
        bad = np.eye(2)
        bad[1, 1] = -1.0
        with pytest.raises(ValueError):
            G.InitGmm(np.array([1.0]), np.zeros((1, 2)), bad[None])
