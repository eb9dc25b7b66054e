"""Correlation inequalities and lemmas checked against the quadrature oracle.

Each check returns a :class:`CheckReport` whose ``violation`` is signed so that
the claim holds iff ``violation <= tolerance``. Corpora are seeded; instance
``k`` of a suite depends only on ``(seed, suite, k)``.

Couplings follow the doubled-measure convention of :mod:`lrspin.model`: the
density is ``exp(-sum psi_{k,q}(p_k) - sum_{k,l} K_kl p_k p_l)``, so the pair
coupling rewarding alignment of ``p_l`` and ``p_n`` in the attractive variant is
``2 |K_ln|``. That is the coefficient entering Simon's inequality below.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import exact
from .exact import GhostModel, QuadratureSpec, monomial
from .model import (
    DoubledModel,
    LatticeModel,
    ModelError,
    Variant,
    block_mask,
    double,
    mask_couplings,
    random_model,
    truncate_interactions,
)

CHECK_SPEC = QuadratureSpec(rel_tol=1e-11)
EXACT_TOL = 1e-9
SUITES = ("fkg", "gks", "domination", "lebowitz", "simon", "zegarlinski", "truncation")


@dataclass(frozen=True)
class CheckReport:
    name: str
    instance: str
    violation: float
    tolerance: float
    provenance: str = "exact"
    se: float | None = None
    detail: dict = field(default_factory=dict, compare=False)

    @property
    def passed(self) -> bool:
        if self.provenance == "sampled":
            return self.violation <= 3.0 * (self.se or 0.0)
        return self.violation <= self.tolerance

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def row(self) -> dict:
        return {
            "check": self.name,
            "instance": self.instance,
            "violation": repr(float(self.violation)),
            "tolerance": repr(float(self.tolerance)),
            "provenance": self.provenance,
            "se": "" if self.se is None else repr(float(self.se)),
            "verdict": self.verdict,
        }


def _describe(model) -> str:
    base = model.base if isinstance(model, DoubledModel) else model
    it = base.interaction
    pots = ";".join(f"{p.c2:.3g},{p.c4:.3g},{p.B:.3g},{p.omega:.3g}" for p in base.potentials)
    q = ""
    if isinstance(model, DoubledModel):
        q = " q=" + ",".join(f"{v:.3g}" for v in model.q) + f" {model.variant.value}"
    return (
        f"n={it.n_sites} C={it.coupling_C:.3g} alpha={it.alpha:.3g} delta={it.delta:.3g} "
        f"signs={it.sign_pattern.value}/{it.sign_seed} psi=[{pots}]{q}"
    )


def _monotone_direction(fn: Callable, grid: np.ndarray) -> int:
    d = np.diff(fn(grid))
    if np.all(d >= 0):
        return 1
    if np.all(d <= 0):
        return -1
    return 0


# -- Lemma: one-dimensional FKG ------------------------------------------------------


def check_fkg(
    nu: Callable,
    f: Callable,
    psi: Callable,
    box: float,
    spec: QuadratureSpec = CHECK_SPEC,
    tol: float = EXACT_TOL,
    instance: str = "",
) -> CheckReport:
    """E_nu[f e^-psi] / E_nu[e^-psi] <= E_nu[f] for f, psi monotone in the same direction.

    ``nu`` is an unnormalized density on ``[-box, box]``.
    """
    grid = np.linspace(-box, box, 4001)
    df, dp = _monotone_direction(f, grid), _monotone_direction(psi, grid)
    if df == 0 or dp == 0:
        raise ValueError("f and psi must be monotone on the box")
    if df != dp and not (np.ptp(f(grid)) == 0 or np.ptp(psi(grid)) == 0):
        raise ValueError("f and psi must be monotone in the same direction")
    one = lambda z: np.ones_like(z)
    tilt = lambda z: np.exp(-psi(z))
    z0, zf, zt, zft = exact.one_dimensional(
        nu, [one, f, tilt, lambda z: f(z) * tilt(z)], box, spec
    )
    lhs = zft / zt
    rhs = zf / z0
    return CheckReport("fkg", instance, float(lhs - rhs), tol, detail={"lhs": lhs, "rhs": rhs})


# -- Lemma: second GKS inequality for the ghost system ------------------------------


def check_gks_ghost(
    g: GhostModel, i: int, j: int, spec: QuadratureSpec = CHECK_SPEC, tol: float = EXACT_TOL
) -> CheckReport:
    """cov(p_i p_j, sigma) >= 0 under the ghost measure."""
    if g.n_sites > 3:
        raise ModelError("ghost GKS check supports at most 3 sites")
    n = g.n_sites
    pp, s, pps = exact.moments(
        g, [monomial(n, i, j), monomial(n, sigma=1), monomial(n, i, j, sigma=1)], spec
    )
    cov = pps.value - pp.value * s.value
    return CheckReport(
        "gks",
        _describe(g.base) + f" i={i} j={j}",
        float(-cov),
        tol,
        detail={"cov": cov, "E_sigma": s.value, "omega": sorted(g.omega)},
    )


# -- Lemma: domination by the attractive measure -----------------------------------


def check_domination(
    model: LatticeModel, q, i: int, j: int, spec: QuadratureSpec = CHECK_SPEC, tol: float = EXACT_TOL
) -> CheckReport:
    """|cov_q(p_i, p_j)| <= cov_{q,|M|}(p_i, p_j)."""
    if model.n_sites > 3:
        raise ModelError("domination check supports at most 3 sites")
    orig = exact.covariance_exact(double(model, q, Variant.ORIGINAL), i, j, spec).value
    attr = exact.covariance_exact(double(model, q, Variant.ATTRACTIVE), i, j, spec).value
    return CheckReport(
        "domination",
        _describe(double(model, q)) + f" i={i} j={j}",
        float(abs(orig) - attr),
        tol,
        detail={"cov_original": orig, "cov_attractive": attr},
    )


# -- Lebowitz and Simon ---------------------------------------------------------------


def _require_attractive(model: DoubledModel):
    k = np.array(model.K)
    off = k - np.diag(np.diag(k))
    if np.any(off > 0):
        raise ModelError("check requires nonpositive off-diagonal K (attractive couplings)")


def _cov_table(model: DoubledModel, spec: QuadratureSpec) -> np.ndarray:
    cov, _ = exact.covariance_matrix_exact(model, spec)
    return cov


def check_lebowitz(
    model: DoubledModel, sites: Sequence[int], spec: QuadratureSpec = CHECK_SPEC, tol: float = EXACT_TOL
) -> CheckReport:
    """E[p_i p_j p_k p_l] <= sum over the three pairings of covariance products."""
    _require_attractive(model)
    n = model.n_sites
    i, j, k, l = sites
    four = exact.moments(model, [monomial(n, i, j, k, l)], spec)[0].value
    c = _cov_table(model, spec)
    rhs = c[i, j] * c[k, l] + c[i, k] * c[j, l] + c[i, l] * c[j, k]
    return CheckReport(
        "lebowitz",
        _describe(model) + f" sites={tuple(sites)}",
        float(four - rhs),
        tol,
        detail={"lhs": four, "rhs": rhs},
    )


def simon_rhs(model: DoubledModel, cov: np.ndarray, A: Sequence[int], i: int, j: int) -> float:
    k = np.array(model.K)
    inside = sorted(set(A))
    outside = [s for s in range(model.n_sites) if s not in inside]
    total = 0.0
    for l in inside:
        for m in outside:
            total += 2.0 * abs(k[l, m]) * (cov[i, l] * cov[m, j] + cov[i, m] * cov[l, j])
    return total


def check_simon(
    model: DoubledModel,
    A: Sequence[int],
    i: int,
    j: int,
    spec: QuadratureSpec = CHECK_SPEC,
    tol: float = EXACT_TOL,
) -> CheckReport:
    """cov(i,j) <= sum_{l in A, n not in A} 2|K_ln| [cov(i,l)cov(n,j) + cov(i,n)cov(l,j)]."""
    _require_attractive(model)
    if i not in A or j in A:
        raise ModelError("Simon check requires i in A and j outside A")
    c = _cov_table(model, spec)
    rhs = simon_rhs(model, c, A, i, j)
    return CheckReport(
        "simon",
        _describe(model) + f" A={sorted(set(A))} i={i} j={j}",
        float(c[i, j] - rhs),
        tol,
        detail={"lhs": c[i, j], "rhs": rhs},
    )


# -- Zegarlinski block representation -------------------------------------------------


def zegarlinski_factor(model: DoubledModel, blocks: Sequence[Sequence[int]], m: int) -> Callable:
    """f_m(p) = prod_{k=1..m} tanh(-2 sum_{B_{k-1} x B_k} K p p) as a grid callable."""
    k = np.array(model.K)
    terms = []
    for b in range(1, m + 1):
        terms.append([(u, v, k[u, v]) for u in blocks[b - 1] for v in blocks[b] if k[u, v] != 0])

    def f(*p):
        out = np.ones(np.broadcast_shapes(*(np.shape(x) for x in p)))
        for t in terms:
            arg = sum(c * p[u] * p[v] for u, v, c in t) if t else 0.0
            out = out * np.tanh(-2.0 * arg)
        return out

    return f


def _check_blocks(model: DoubledModel, blocks, m: int, i: int, j: int):
    n = model.n_sites
    flat = [s for b in blocks for s in b]
    if sorted(flat) != list(range(n)):
        raise ModelError("blocks must partition the sites")
    if not 0 <= m <= len(blocks) - 1:
        raise ModelError(f"m must lie in [0, {len(blocks) - 1}] for {len(blocks)} blocks")
    if i not in blocks[0] or j not in blocks[-1]:
        raise ModelError("i must lie in the first block and j in the last")
    allowed = block_mask(blocks, n)
    k = np.array(model.K)
    bad = np.argwhere((k != 0) & ~allowed)
    if bad.size:
        a, b = bad[0]
        raise ModelError(f"coupling ({a}, {b}) joins non-adjacent blocks")


def check_zegarlinski_identity(
    model: DoubledModel,
    blocks: Sequence[Sequence[int]],
    m: int,
    i: int,
    j: int,
    spec: QuadratureSpec = CHECK_SPEC,
    tol: float = 1e-8,
) -> CheckReport:
    """E[p_i p_j] = E[p_i p_j f_m] with relative gap below ``tol``."""
    if model.n_sites > 4:
        raise ModelError("Zegarlinski check supports at most 4 sites")
    _check_blocks(model, blocks, m, i, j)
    n = model.n_sites
    f = zegarlinski_factor(model, blocks, m)
    obs = lambda *p: p[i] * p[j] * f(*p)
    lhs_e, rhs_e = exact.moments(model, [monomial(n, i, j), obs], spec)
    lhs, rhs = lhs_e.value, rhs_e.value
    gap = abs(lhs - rhs) / max(abs(lhs), 1e-12)
    return CheckReport(
        "zegarlinski",
        _describe(model) + f" blocks={[list(b) for b in blocks]} m={m} i={i} j={j}",
        float(gap),
        tol,
        detail={"lhs": lhs, "rhs": rhs, "masking": "couplings only within or between adjacent blocks"},
    )


# -- truncation lemma ---------------------------------------------------------------------


def check_truncation_gap(
    model: LatticeModel,
    i: int,
    j: int,
    epsilon: float,
    spec: QuadratureSpec = CHECK_SPEC,
    q=None,
    n_lambda: int = 5,
    tol: float = EXACT_TOL,
) -> CheckReport:
    """|cov_q - cov_{q,I}| <= C_gap * sum_I |M_kl|.

    Along the interpolation that switches the dropped couplings off, the
    derivative of the covariance is bounded by sum_I |K_kl| times
    ``max E p^4 + (max E p^2)^2``; C_gap is the largest such moment bound over
    ``n_lambda`` equally spaced interpolation points (endpoints included).
    """
    if model.n_sites > 4:
        raise ModelError("truncation check supports at most 4 sites")
    n = model.n_sites
    q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
    trunc, I = truncate_interactions(model, i, j, epsilon)
    full = double(model, q)
    cut = double(trunc, q)
    cov_full = exact.covariance_exact(full, i, j, spec).value
    cov_cut = exact.covariance_exact(cut, i, j, spec).value
    gap = abs(cov_full - cov_cut)
    c_gap = 0.0
    if I.dropped_mass > 0:
        obs = [monomial(n, *([s] * 4)) for s in range(n)] + [monomial(n, s, s) for s in range(n)]
        for lam in np.linspace(0.0, 1.0, n_lambda):
            kmat = lam * np.array(full.K) + (1.0 - lam) * np.array(cut.K)
            res = exact.moments(full.with_coupling(kmat), obs, spec)
            p4 = max(r.value for r in res[:n])
            p2 = max(r.value for r in res[n:])
            c_gap = max(c_gap, p4 + p2 * p2)
    bound = c_gap * I.dropped_mass
    return CheckReport(
        "truncation",
        _describe(full) + f" i={i} j={j} eps={epsilon:.3g} R={I.cutoff} |I|={len(I)}",
        float(gap - bound),
        tol,
        detail={"gap": gap, "bound": bound, "C_gap": c_gap, "dropped_mass": I.dropped_mass},
    )


# -- seeded corpora -------------------------------------------------------------------------


def _rng(seed: int, suite: str, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, SUITES.index(suite), k])


_MONOTONE = (
    ("z", lambda a: (lambda z: a * z)),
    ("z^3", lambda a: (lambda z: a * z**3)),
    ("arctan", lambda a: (lambda z: np.arctan(a * z))),
    ("tanh", lambda a: (lambda z: np.tanh(a * z))),
    ("exp", lambda a: (lambda z: np.exp(0.3 * a * z))),
    ("softplus", lambda a: (lambda z: np.logaddexp(0.0, a * z))),
)


def fkg_instance(rng: np.random.Generator):
    """Random (nu, f, psi, box, description) with f, psi monotone in the same direction."""
    c2 = float(rng.uniform(0.2, 1.0))
    c4 = float(rng.uniform(0.0, 0.3))
    B = float(rng.uniform(0.0, 0.8))
    w = float(rng.uniform(0.5, 2.0))
    shift = float(rng.uniform(-1.0, 1.0))
    nu = lambda z: np.exp(-(c4 * (z - shift) ** 4 + c2 * (z - shift) ** 2 + B * np.cos(w * z)))
    direction = 1.0 if rng.random() < 0.5 else -1.0
    # psi grows at most linearly downhill so that e^-psi nu stays integrable
    tilts = [m for m in _MONOTONE if m[0] != "z^3"]
    fn, fmake = _MONOTONE[int(rng.integers(len(_MONOTONE)))]
    pn, pmake = tilts[int(rng.integers(len(tilts)))]
    f = fmake(direction * float(rng.uniform(0.3, 2.0)))
    psi = pmake(direction * float(rng.uniform(0.3, 2.0)))
    box = 12.0 / np.sqrt(c2) if c4 == 0 else min(12.0 / np.sqrt(c2), 4.0 / c4**0.25 + 2.0) + abs(shift)
    desc = f"c2={c2:.3g} c4={c4:.3g} B={B:.3g} w={w:.3g} shift={shift:.3g} f={fn} psi={pn} dir={int(direction)}"
    return nu, f, psi, float(box), desc


def _random_q(rng, n, scale=1.0):
    return rng.uniform(-scale, scale, size=n)


def run_suite(suite: str, seed: int, count: int, spec: QuadratureSpec = CHECK_SPEC) -> Iterator[CheckReport]:
    """Yield ``count`` reports for one suite."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)}")
    for k in range(count):
        rng = _rng(seed, suite, k)
        yield _instance(suite, rng, spec, k)


def _instance(suite: str, rng: np.random.Generator, spec: QuadratureSpec, k: int) -> CheckReport:
    if suite == "fkg":
        nu, f, psi, box, desc = fkg_instance(rng)
        return check_fkg(nu, f, psi, box, spec, instance=desc)
    if suite == "gks":
        n = int(rng.integers(2, 4))
        model = random_model(rng, n, cosine=bool(rng.random() < 0.5), sign="SeededRandom" if k % 3 else None)
        g = GhostModel(double(model, _random_q(rng, n)))
        i, j = (int(v) for v in rng.choice(n, size=2, replace=True))
        return check_gks_ghost(g, i, j, spec)
    if suite == "domination":
        n = int(rng.integers(2, 4))
        model = random_model(rng, n, cosine=bool(rng.random() < 0.7))
        i, j = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
        return check_domination(model, _random_q(rng, n), i, j, spec)
    if suite == "lebowitz":
        n = 4
        model = random_model(rng, n, cosine=False, gaussian=bool(k % 10 == 0))
        d = double(model, _random_q(rng, n), Variant.ATTRACTIVE)
        sites = tuple(int(v) for v in rng.integers(0, n, size=4))
        return check_lebowitz(d, sites, spec)
    if suite == "simon":
        n = int(rng.integers(3, 5))
        model = random_model(rng, n, cosine=False, gaussian=bool(k % 10 == 0))
        d = double(model, _random_q(rng, n), Variant.ATTRACTIVE)
        cut = int(rng.integers(1, n))
        A = list(range(cut)) if rng.random() < 0.5 else list(range(cut, n))
        i = int(rng.choice(A))
        j = int(rng.choice([s for s in range(n) if s not in A]))
        return check_simon(d, A, i, j, spec)
    if suite == "zegarlinski":
        schemes = ([[0, 1], [2, 3]], [[0], [1, 2], [3]], [[0], [1], [2], [3]], [[0, 1], [2], [3]])
        blocks = schemes[int(rng.integers(len(schemes)))]
        model = random_model(rng, 4, cosine=False, gaussian=bool(rng.random() < 0.3))
        model = mask_couplings(model, block_mask(blocks, 4))
        variant = Variant.ATTRACTIVE if rng.random() < 0.5 else Variant.ORIGINAL
        d = double(model, _random_q(rng, 4), variant)
        m = int(rng.integers(0, min(2, len(blocks) - 1) + 1))
        i, j = int(rng.choice(blocks[0])), int(rng.choice(blocks[-1]))
        return check_zegarlinski_identity(d, blocks, m, i, j, spec)
    if suite == "truncation":
        model = random_model(rng, 4, cosine=bool(rng.random() < 0.5))
        i, j = [(0, 2), (0, 3), (1, 3)][int(rng.integers(3))]
        eps = float(rng.uniform(0.1, 0.9))
        return check_truncation_gap(model, i, j, eps, spec, q=_random_q(rng, 4))
    raise AssertionError(suite)


def run_all(seed: int, count: int, suites: Sequence[str] = SUITES, spec: QuadratureSpec = CHECK_SPEC) -> list[CheckReport]:
    return list(itertools.chain.from_iterable(run_suite(s, seed, count, spec) for s in suites))
