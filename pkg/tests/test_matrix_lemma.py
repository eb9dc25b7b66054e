import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrspin.matrix_lemma import (
    MatrixLemmaError,
    SddMatrix,
    corpus,
    moment_lemma_system,
    random_sdd,
    semigroup_invariance_probe,
    verify_inverse_positivity,
)
from lrspin.model import build_model

TRIDIAG = np.array([[2.0, -1.0], [-1.0, 2.0]])


def test_identity():
    r = verify_inverse_positivity(SddMatrix(np.eye(3), 1.0))
    assert r.min_entry == 0.0 and r.max_row_sum == pytest.approx(1.0) and r.passed


def test_two_by_two_inverse():
    r = verify_inverse_positivity(SddMatrix(TRIDIAG, 1.0))
    assert r.min_entry == pytest.approx(1 / 3) and r.max_row_sum == pytest.approx(1.0)
    assert r.residual < 1e-14 and r.passed


@pytest.mark.parametrize(
    "A, delta",
    [
        (TRIDIAG, 1.5),  # margin is 1
        (np.array([[2.0, 1.0], [1.0, 2.0]]), 1.0),  # positive off-diagonal
        (np.ones((2, 3)), 1.0),
        (np.eye(2), 0.0),
    ],
)
def test_invalid_rejected(A, delta):
    with pytest.raises(MatrixLemmaError):
        SddMatrix(A, delta)


def test_corpus_passes():
    reports = [verify_inverse_positivity(m, 1e-10) for m in corpus(0, 200)]
    assert all(r.passed for r in reports)
    assert min(r.n for r in reports) <= 4 and max(r.n for r in reports) >= 60


def test_corpus_deterministic():
    a = [m.A for m in corpus(7, 5)]
    b = [m.A for m in corpus(7, 5)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 20), delta=st.floats(0.1, 2.0), c=st.floats(0.01, 100.0))
def test_scaling_property(seed, n, delta, c):
    m = random_sdd(np.random.default_rng(seed), n, delta)
    r, rc = verify_inverse_positivity(m), verify_inverse_positivity(m.scaled(c))
    assert r.passed == rc.passed
    assert rc.max_row_sum == pytest.approx(r.max_row_sum / c, rel=1e-9)


def test_probe_identity():
    r = semigroup_invariance_probe(SddMatrix(np.eye(2), 1.0), [1.0, 1.0], 2.0, 0.001)
    assert r.passed and np.allclose(r.final, (1 - 0.001) ** 2000, rtol=1e-12)
    assert np.allclose(r.final, np.exp(-2.0), rtol=2e-3)  # Euler error ~ t*dt/2


def test_probe_tridiagonal_matches_eigen_oracle():
    r = semigroup_invariance_probe(SddMatrix(TRIDIAG, 1.0), [1.0, 0.0], 1.0, 1e-4)
    # eigenvalues 1 and 3 with eigenvectors (1,1) and (1,-1)
    expect = 0.5 * np.exp(-1.0) * np.ones(2) + 0.5 * np.exp(-3.0) * np.array([1.0, -1.0])
    assert r.passed and r.min_value >= 0
    assert np.allclose(r.final, expect, rtol=1e-3)


def test_probe_zero_start():
    r = semigroup_invariance_probe(SddMatrix(TRIDIAG, 1.0), [0.0, 0.0], 1.0, 0.1)
    assert np.array_equal(r.final, np.zeros(2)) and r.min_value == 0.0


def test_probe_unstable_step():
    with pytest.raises(MatrixLemmaError, match="unstable"):
        semigroup_invariance_probe(SddMatrix(TRIDIAG, 1.0), [1.0, 0.0], 1.0, 0.5)


def moment_model(**kw):
    spec = {"n_sites": 2, "c2": 0.1, "c4": 0.1, "coupling_C": 0.5, "alpha": 1.0,
            "sign_pattern": "AllPositive", "delta": 1.0}
    spec.update(kw)
    return build_model(spec)


def test_moment_system_without_collar():
    s = moment_lemma_system(moment_model())
    assert s.delta > 0 and s.a == pytest.approx(s.delta / 2)
    assert np.all(s.b == 0) and s.predicted_log_ratio == 0.0
    assert verify_inverse_positivity(s.matrix).passed


def test_moment_system_collar_terms():
    m = moment_model(collar={"width": 1, "left": [2.0], "right": [0.0]})
    s = moment_lemma_system(m)
    k = m.interaction.kernel
    assert s.b[0] == pytest.approx(s.a * float(k(1)) / 2 * 4.0)
    assert s.b[1] == pytest.approx(s.a * float(k(2)) / 2 * 4.0)


def test_moment_system_needs_margin():
    with pytest.raises(MatrixLemmaError):
        moment_lemma_system(moment_model(delta=1e-6, coupling_C=5.0))
