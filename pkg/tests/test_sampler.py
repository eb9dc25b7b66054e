import math

import numpy as np
import pytest

from lrspin import exact
from lrspin.model import ModelError, build_model, double
from lrspin.sampler import (
    ChainConfig,
    ScanOrder,
    moment_probe,
    run_chains,
    run_sampler,
    run_translation_averaged,
    split_rhat,
)

QUICK = ChainConfig(seed=1, n_chains=4, burn_in=500, sweeps=5000)


def gaussian(n, C=0.8, c2=0.3, **kw):
    return build_model({"n_sites": n, "c2": c2, "coupling_C": C, "alpha": 1.0, "sign_pattern": "SeededRandom",
                        "sign_seed": 3, "delta": 0.7, **kw})


def test_config_validation():
    for bad in [dict(n_chains=1), dict(sweeps=2), dict(kernel_eps=-1.0), dict(target_acceptance=(0.4, 0.5)),
                dict(seed=-1), dict(proposal_sigma=0.0)]:
        with pytest.raises(ValueError):
            ChainConfig(**bad)
    with pytest.raises(ValueError, match="bogus"):
        ChainConfig.from_dict({"bogus": 1})
    cfg = ChainConfig(seed=5, scan="RandomScan")
    assert ChainConfig.from_dict(cfg.to_dict()) == cfg and cfg.scan is ScanOrder.RANDOM
    assert ChainConfig(sweeps=10000).n_batches == 100


def test_product_gaussian_uncorrelated():
    m = gaussian(2, C=0.0)
    tab, stats = run_chains(m, QUICK, [(0, 1)])
    cov, se = tab.lookup(0, 1)
    assert abs(cov) <= 3 * se and se > 0
    assert stats.converged and not stats.flags


def test_gaussian_translation_averaged_matches_inverse():
    m = gaussian(16, c2=0.0)
    g = np.linalg.inv(2 * np.array(m.M))
    ref = [np.mean([g[i, i + k] for i in range(16 - k)]) for k in range(9)]
    tab, stats = run_translation_averaged(double(m, np.zeros(16)), ChainConfig(seed=0, burn_in=1000, sweeps=20000), 8)
    assert np.all(np.abs(tab.cov - ref) <= 3 * tab.se)
    assert stats.converged


def test_quartic_cosine_matches_oracle():
    m = build_model({"n_sites": 3, "c2": 0.2, "c4": 0.3, "bounded": {"B": 0.6, "omega": 1.3}, "coupling_C": 0.8,
                     "alpha": 1.0, "sign_pattern": "SeededRandom", "sign_seed": 1, "delta": 0.6})
    ref, _ = exact.covariance_matrix_exact(m)
    pairs = [(i, j) for i in range(3) for j in range(i, 3)]
    tab, _ = run_chains(m, ChainConfig(seed=2, burn_in=1000, sweeps=20000), pairs)
    for (i, j), c, s in zip(tab.pairs, tab.cov, tab.se):
        assert abs(c - ref[i, j]) <= 3 * s


def test_deterministic_and_symmetric():
    m = gaussian(4)
    a, sa = run_chains(m, QUICK, [(0, 3), (3, 0)])
    b, _ = run_chains(m, QUICK, [(0, 3), (3, 0)], threads=2)
    assert np.array_equal(a.cov, b.cov) and np.array_equal(a.se, b.se)
    assert a.cov[0] == a.cov[1] and a.lookup(0, 3) == a.lookup(3, 0)
    assert sa.seeds == ["1/0", "1/1", "1/2", "1/3"]


def test_doubled_first_moments_vanish():
    m = build_model({"n_sites": 4, "c2": 0.2, "c4": 0.2, "coupling_C": 0.8, "alpha": 1.0,
                     "sign_pattern": "SeededRandom", "delta": 0.6})
    d = double(m, np.array([0.8, -0.3, 0.5, 0.0]))
    _, results, _, _ = run_sampler(d, ChainConfig(seed=3, burn_in=500, sweeps=10000))
    batches = np.concatenate([r.site_means for r in results])  # (chains*batches) x n
    mean = batches.mean(axis=0)
    se = batches.std(axis=0, ddof=1) / math.sqrt(len(batches))
    assert np.all(np.abs(mean) <= 3 * se)


def test_detailed_balance_flux():
    # random-scan sweeps are powers of a reversible kernel, hence reversible
    m = gaussian(2, c4=0.3)
    trace = []

    def grab(ts):
        trace.append(ts.copy())
        return ts[:, 0]

    cfg = ChainConfig(seed=4, n_chains=2, burn_in=500, sweeps=40000, scan="RandomScan")
    run_sampler(m, cfg, track=[0, 1], fns=[grab])
    x = np.concatenate(trace)
    edges = np.quantile(x[:, 0], [1 / 3, 2 / 3]), np.quantile(x[:, 1], [1 / 3, 2 / 3])
    cell = np.searchsorted(edges[0], x[:, 0]) * 3 + np.searchsorted(edges[1], x[:, 1])
    flux = np.zeros((9, 9))
    # both chains are concatenated; the single seam transition is negligible
    np.add.at(flux, (cell[:-1], cell[1:]), 1)
    diff = np.abs(flux - flux.T)
    noise = np.sqrt(flux + flux.T) + 1
    assert np.max(diff / noise) <= 4.5


def test_kernel_eps_reports_bias():
    m = gaussian(16)
    _, exact_stats = run_chains(m, QUICK, [(0, 1)])
    _, cut_stats = run_chains(m, ChainConfig(seed=1, burn_in=500, sweeps=5000, kernel_eps=0.01), [(0, 1)])
    assert exact_stats.bias_bound == 0.0 and cut_stats.bias_bound > 0


def test_pairs_out_of_range():
    with pytest.raises(ModelError):
        run_chains(gaussian(3), QUICK, [(0, 3)])


def test_split_rhat():
    rng = np.random.default_rng(0)
    assert split_rhat(rng.standard_normal((4, 2000))) < 1.01
    shifted = rng.standard_normal((4, 2000)) + np.arange(4)[:, None]
    assert split_rhat(shifted) > 1.5


def test_moment_probe_zero():
    r = moment_probe(gaussian(2), QUICK, 0, 0.0)
    assert r.exp_moment == 1.0 and r.exp_se == 0.0


def test_moment_probe_gaussian_single_site():
    # density exp(-(c2 + m/2) x^2) with m = M_00 = delta
    m = build_model({"n_sites": 1, "c2": 0.5, "coupling_C": 0.0, "alpha": 1.0, "delta": 1.0})
    a, lam = 0.25, 1.0
    r = moment_probe(m, ChainConfig(seed=0, burn_in=1000, sweeps=40000), 0, a)
    assert abs(r.exp_moment - math.sqrt(lam / (lam - a))) <= 3 * r.exp_se
    var = 1 / (2 * lam)
    for k in range(1, 5):
        expect = math.prod(range(1, 2 * k, 2)) * var**k
        assert abs(r.even_moments[k - 1] - expect) <= 3 * r.even_se[k - 1]


def test_moment_probe_range():
    with pytest.raises(ModelError):
        moment_probe(gaussian(2), QUICK, 0, 0.5)
