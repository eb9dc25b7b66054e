import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrspin.model import (
    BoundaryCondition,
    DoubledModel,
    InteractionMatrix,
    LatticeModel,
    ModelError,
    SignPattern,
    SingleSitePotential,
    Variant,
    block_mask,
    build_model,
    canonical_spec,
    double,
    energy,
    random_model,
    truncate_interactions,
    truncation_pairs,
)


def spec(**kw):
    base = {"n_sites": 3, "c2": 0.0, "coupling_C": 1.0, "alpha": 1.0, "sign_pattern": "AllPositive", "delta": 0.5}
    base.update(kw)
    return base


def test_zero_coupling_is_identity():
    m = build_model(spec(coupling_C=0.0, delta=1.0))
    assert np.array_equal(m.M, np.eye(3))


def test_kernel_entries():
    m = build_model(spec())
    assert m.M[0, 1] == 0.5
    assert m.M[0, 2] == pytest.approx(1 / 9, abs=1e-15)
    assert m.M[0, 0] == pytest.approx(0.5 + 1 / 9 + 0.5, abs=1e-15)


@pytest.mark.parametrize("field, bad", [("delta", 0.0), ("delta", -1.0), ("alpha", 0.0)])
def test_rejects_nonpositive(field, bad):
    with pytest.raises(ModelError, match=field):
        build_model(spec(**{field: bad}))


def test_missing_field_named():
    s = spec()
    del s["delta"]
    with pytest.raises(ModelError, match="delta"):
        canonical_spec(s)


def test_negative_convexity_rejected():
    with pytest.raises(ModelError):
        SingleSitePotential(c2=-1.0)


def test_nonfinite_collar_rejected():
    with pytest.raises(ModelError):
        BoundaryCondition(1, (math.inf,), (0.0,))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 12),
    C=st.floats(0, 3),
    alpha=st.floats(0.1, 3),
    delta=st.floats(0.01, 3),
    pattern=st.sampled_from(list(SignPattern)),
    seed=st.integers(0, 1000),
)
def test_interaction_invariants(n, C, alpha, delta, pattern, seed):
    inter = InteractionMatrix(n, C, alpha, pattern, delta, sign_seed=seed)
    m = inter.entries
    assert np.array_equal(m, m.T)
    for i in range(n):
        off = sum(abs(m[i, j]) for j in range(n) if j != i)
        assert off + delta <= m[i, i] * (1 + 1e-15)
        for j in range(n):
            if i != j:
                assert abs(m[i, j]) <= C / (abs(i - j) ** (2 + alpha) + 1) * (1 + 1e-15)


def test_build_is_deterministic():
    s = spec(n_sites=6, sign_pattern="SeededRandom", sign_seed=3)
    assert np.array_equal(build_model(s).M, build_model(s).M)


def test_energy_examples():
    pot = SingleSitePotential(c2=1.0)
    inter = InteractionMatrix(1, 0.0, 1.0, SignPattern.ALL_POSITIVE, 1.0)
    m = LatticeModel((pot,), inter)
    assert energy(m, [2.0]) == 6.0
    m3 = build_model(spec(c2=0.5))
    assert energy(m3, np.zeros(3)) == 0.0
    x = np.array([0.3, -1.2, 0.7])
    shifted = LatticeModel(m3.potentials, m3.interaction, field=np.ones(3))
    assert energy(shifted, x) - energy(m3, x) == pytest.approx(x.sum(), abs=1e-14)
    with pytest.raises(ModelError):
        energy(m3, [0.0, np.nan, 0.0])


def test_boundary_field_and_temperedness():
    m = build_model({**spec(n_sites=2), "collar": {"width": 1, "left": [2.0], "right": [-1.0]}})
    k1, k2 = m.interaction.kernel(1), m.interaction.kernel(2)
    assert m.external_field[0] == pytest.approx(k1 * 2.0 + k2 * -1.0)
    assert np.all(np.isfinite(m.temperedness()))


def test_energy_bounded_below_on_grid():
    m = build_model({**spec(c2=0.1, c4=0.1, sign_pattern="SeededRandom"), "bounded": {"B": 1.0, "omega": 2.0}})
    g = np.linspace(-6, 6, 25)
    vals = [energy(m, np.array(x)) for x in itertools.product(g, repeat=3)]
    assert min(vals) > -10


def test_double_examples():
    pot = SingleSitePotential(c2=1.0)
    m = LatticeModel((pot, pot), InteractionMatrix(2, 1.0, 1.0, SignPattern.ALL_NEGATIVE, 0.5))
    d = double(m, [1.0, 0.0])
    p = np.linspace(-2, 2, 7)
    assert np.allclose(d.site_energy(0, p), 2 + 2 * p**2)
    assert np.allclose(d.site_energy(1, p), 2 * pot(p))
    att = double(m, [0.0, 0.0], Variant.ATTRACTIVE)
    assert np.array_equal(att.K, m.M)
    with pytest.raises(ModelError):
        double(m, [np.inf, 0.0])


def test_doubled_potential_even():
    rng = np.random.default_rng(1)
    m = random_model(rng, 4, cosine=True)
    d = DoubledModel(m, rng.normal(size=4))
    k = rng.integers(0, 4, size=1000)
    p = rng.normal(scale=3, size=1000)
    diff = [d.site_energy(int(a), b) - d.site_energy(int(a), -b) for a, b in zip(k, p)]
    assert np.max(np.abs(diff)) <= 1e-12


def test_truncation_membership_brute_force():
    m = build_model(spec(n_sites=8))
    new, I = truncate_interactions(m, 2, 5, 0.5)
    assert I.cutoff == 2
    expect = {
        (k, l)
        for k in range(8)
        for l in range(8)
        if abs(k - l) >= 2 and not (k < 2 and l < 2) and not (k > 5 and l > 5)
    }
    assert set(I.pairs) == expect
    assert (0, 1) not in I and (1, 0) not in I
    for k, l in expect:
        assert new.M[k, l] == 0.0
    assert np.all(np.abs(new.M).sum(1) - np.diag(new.M) <= np.abs(m.M).sum(1) - np.diag(m.M) + 1e-15)
    assert I.dropped_mass == pytest.approx(sum(abs(m.M[k, l]) for k, l in expect))


def test_truncation_zero_coupling():
    m = build_model(spec(n_sites=6, coupling_C=0.0))
    new, I = truncate_interactions(m, 1, 4, 0.5)
    assert len(I) > 0 and I.dropped_mass == 0.0
    assert np.array_equal(new.M, m.M)


def test_truncation_errors():
    m = build_model(spec(n_sites=6))
    for args in [(3, 2, 0.5), (0, 1, 0.5), (0, 9, 0.5), (0, 3, 1.5)]:
        with pytest.raises(ModelError):
            truncate_interactions(m, *args)
    assert truncation_pairs(4, 0, 3, 10) == frozenset()


def test_block_mask():
    mask = block_mask([[0], [1, 2], [3]], 4)
    assert mask[0, 1] and mask[0, 2] and not mask[0, 3] and mask[1, 3]
    with pytest.raises(ModelError):
        block_mask([[0]], 2)
