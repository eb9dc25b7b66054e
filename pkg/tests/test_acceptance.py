"""Acceptance criteria 1-8; the conftest prints one PASS/FAIL line per criterion."""

import itertools
import math

import numpy as np
import pytest

from lrspin import certifier as cf
from lrspin import exact, inequalities as ineq
from lrspin.cli import Outputs, run_pipeline
from lrspin.matrix_lemma import corpus, moment_lemma_system, verify_inverse_positivity
from lrspin.model import (
    BoundaryCondition,
    DoubledModel,
    InteractionMatrix,
    LatticeModel,
    SignPattern,
    SingleSitePotential,
    Variant,
    block_mask,
    build_model,
    double,
    mask_couplings,
)
from lrspin.sampler import ChainConfig, run_translation_averaged

pytestmark = pytest.mark.slow
SPEC = exact.QuadratureSpec(rel_tol=1e-11)


def gaussian(n, c2=0.0):
    return build_model({"n_sites": n, "c2": c2, "coupling_C": 0.8, "alpha": 1.0, "sign_pattern": "SeededRandom",
                        "sign_seed": 3, "delta": 0.7})


# -- 1 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(1)
def test_gaussian_exact(criterion):
    worst = 0.0
    for n in (2, 3, 4):
        m = gaussian(n)
        cov, _ = exact.covariance_matrix_exact(double(m, np.zeros(n)), SPEC)
        ref = np.linalg.inv(2 * np.array(m.M))
        worst = max(worst, float(np.max(np.abs(cov - ref) / np.abs(ref))))
        # lattice convention with c2 > 0: (M + 2 c2)^-1
        mc = gaussian(n, c2=0.25)
        lat, _ = exact.covariance_matrix_exact(mc, SPEC)
        ref = np.linalg.inv(np.array(mc.M) + 0.5 * np.eye(n))
        worst = max(worst, float(np.max(np.abs(lat - ref) / np.abs(ref))))
    criterion(f"exact worst rel err {worst:.2e} (tol 1e-8)")
    assert worst <= 1e-8


@pytest.mark.acceptance(1)
def test_gaussian_sampler(criterion):
    n = 16
    m = gaussian(n)
    g = np.linalg.inv(2 * np.array(m.M))
    ref = np.array([np.mean([g[i, i + k] for i in range(n - k)]) for k in range(9)])
    cfg = ChainConfig(seed=0, n_chains=4, burn_in=2000, sweeps=100_000)
    tab, stats = run_translation_averaged(double(m, np.zeros(n)), cfg, 8)
    z = np.abs(tab.cov - ref) / tab.se
    criterion(f"sampler max |z| {z.max():.2f} over d<=8 (tol 3 SE), R-hat {stats.max_rhat:.4f}")
    assert np.all(z <= 3.0)


# -- 2 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(2)
def test_inequality_suites(criterion):
    suites = ("fkg", "gks", "domination", "lebowitz", "simon")
    worst = {}
    for s in suites:
        reports = list(ineq.run_suite(s, 0, 50, SPEC))
        assert len(reports) >= 50 and all(r.provenance == "exact" for r in reports)
        worst[s] = max(r.violation for r in reports)
    criterion("worst " + ", ".join(f"{s} {v:.1e}" for s, v in worst.items()) + " (tol 1e-9)")
    assert max(worst.values()) <= 1e-9


# -- 3 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(3)
def test_m_matrix_corpus(criterion):
    reports = [verify_inverse_positivity(m, 1e-10) for m in corpus(0, 1000)]
    min_entry = min(r.min_entry for r in reports)
    excess = max(r.max_row_sum - r.row_sum_bound for r in reports)
    criterion(f"1000 matrices, min entry {min_entry:.2e}, max row-sum excess {excess:.2e} (tol 1e-10)")
    assert min_entry >= -1e-10 and excess <= 1e-10


# -- 4 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(4)
def test_zegarlinski(criterion):
    worst = 0.0
    cases = 0
    for c4, blocks in itertools.product((0.0, 0.25), ([[0], [1, 2], [3]], [[0, 1], [2, 3]])):
        base = build_model({"n_sites": 4, "c2": 0.3, "c4": c4, "coupling_C": 0.8, "alpha": 1.0,
                            "sign_pattern": "SeededRandom", "sign_seed": 2, "delta": 0.6})
        d = double(mask_couplings(base, block_mask(blocks, 4)), np.array([0.4, -0.3, 0.2, 0.1]), Variant.ATTRACTIVE)
        for m in range(min(2, len(blocks) - 1) + 1):
            r = ineq.check_zegarlinski_identity(d, blocks, m, blocks[0][0], blocks[-1][-1], SPEC)
            worst = max(worst, r.violation)
            cases += 1
    criterion(f"{cases} cases (Gaussian and quartic, m=0,1,2), worst relative gap {worst:.1e} (tol 1e-8)")
    assert worst <= 1e-8


# -- 5 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(5)
def test_doubling_identity(criterion):
    gaps = []
    for n in (2, 3):
        m = build_model({"n_sites": n, "c2": 0.1, "c4": 0.3, "bounded": {"B": 0.5, "omega": 1.3}, "coupling_C": 0.8,
                         "alpha": 1.0, "delta": 0.7, "sign_pattern": "SeededRandom", "sign_seed": 3,
                         "field": [0.2] * n})
        gaps.append(exact.doubling_identity_check(m, 0, n - 1)[2])
    criterion(f"relative gaps n=2: {gaps[0]:.1e}, n=3: {gaps[1]:.1e} (tol 1e-6)")
    assert max(gaps) <= 1e-6


# -- 6 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(6)
def test_moment_lemma(criterion):
    pot = SingleSitePotential(c2=0.1, c4=0.1, B=0.5, omega=1.0)
    inter = InteractionMatrix(2, 0.5, 1.0, SignPattern.ALL_POSITIVE, 1.0)
    exps, ratios_ok, predicted = [], True, 0.0
    # collar width 2 on each side: 81 combinations, a superset of the 27 required
    for combo in itertools.product((-3.0, 0.0, 3.0), repeat=4):
        m = LatticeModel((pot, pot), inter, None, BoundaryCondition(2, combo[:2], combo[2:]))
        sysm = moment_lemma_system(m)
        assert verify_inverse_positivity(sysm.matrix).passed
        predicted = max(predicted, sysm.predicted_log_ratio)
        a = sysm.a
        for i in (0, 1):
            obs = [lambda *x, i=i: np.exp(a * x[i] ** 2)] + [tuple(2 * k if s == i else 0 for s in range(2))
                                                              for k in range(1, 5)]
            vals = [e.value for e in exact.moments(m, obs, exact.QuadratureSpec(rel_tol=1e-10))]
            exps.append(vals[0])
            # E[x^2k] a^k / k! <= E[e^{a x^2}] uniformly in k
            ratios_ok &= all(vals[k] * a**k / math.factorial(k) <= vals[0] for k in range(1, 5))
    observed = max(exps) / min(exps)
    criterion(f"E[exp(a x^2)] ratio {observed:.3f} <= predicted {math.exp(predicted):.3f}; "
              f"k! scaling {'holds' if ratios_ok else 'fails'} for k<=4")
    assert observed <= math.exp(predicted) and ratios_ok


# -- 7 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(7)
def test_certifier_soundness(criterion):
    rng = np.random.default_rng(0)
    worst, checked, skipped = 0.0, 0, 0
    for k in range(12):
        a = int(rng.choice([1, 2, 4]))
        s = int(rng.integers(2 * a + 1, 4 * a + 4))
        CM = float(rng.uniform(0.05, 2.0))
        pot = SingleSitePotential(c2=0.3, c4=float(rng.uniform(0, 0.3)))
        inter = InteractionMatrix(4, CM / 2, 1.0, SignPattern("SeededRandom"), 0.5, sign_seed=k, spacing=s)
        dm = DoubledModel(LatticeModel((pot,) * 4, inter), rng.uniform(-1, 1, 4), Variant.ATTRACTIVE)
        cov, _ = exact.covariance_matrix_exact(dm)
        C2 = float(np.diag(cov).max()) * 1.01
        p = cf.CertifierParams(C_M=CM, alpha=1.0, C0=C2, alpha_tilde=0.5, C2=C2, a=a, target_alpha_hat=0.5,
                               d_max=200)
        if not cf.j_row_bound(p).contracts:
            skipped += 1  # hypotheses of the recursion fail; nothing to check
            continue
        rows = cf.soundness_rows(dm, p, s)
        assert all(r.passed for r in rows)
        worst = max(worst, max(abs(r.exact) / r.bound for r in rows))
        checked += len(rows)
    result, tried = cf.search_radius(cf.CertifierParams(C_M=0.01, alpha=1.0, C0=1.0, alpha_tilde=0.5, C2=1.0, a=4,
                                                        target_alpha_hat=0.5))
    ok = isinstance(result, cf.CertifiedBound) and result.a <= 64 and result.exponent >= 2
    criterion(f"{checked} exact distances, worst |cov|/bound {worst:.2e} ({skipped} systems without contraction); "
              f"benchmark a={result.a} c~={result.contraction.c_tilde:.3f} exponent "
              f"{getattr(result, 'exponent', float('nan'))} C_out={getattr(result, 'C_out', float('nan')):.4g}")
    assert checked > 0 and worst <= 1.0 and ok


# -- 8 -----------------------------------------------------------------------------------


@pytest.mark.acceptance(8)
def test_pipeline(criterion, tmp_path):
    spec = {"n_sites": 1024, "c2": 0.2, "c4": 0.25, "coupling_C": 0.5, "alpha": 1.0,
            "sign_pattern": "AllPositive", "delta": 0.5}
    cfg = ChainConfig(seed=1, n_chains=4, burn_in=2000, sweeps=20000)
    report = run_pipeline(spec, cfg, Outputs(str(tmp_path)), max_distance=16, margin=32)
    fit = report["fit"]
    criterion(f"alpha_fit {fit['alpha_fit']:.3f} CI [{fit['ci_low']:.3f}, {fit['ci_high']:.3f}] (need low >= 1.5), "
              f"resolvable d {fit['distances']}, certified={report['certified']} "
              f"(a={report['certificate']['a']}), violations {report['violations']}")
    assert fit["ci_low"] >= 1.5 and report["certified"] and not report["violations"]
