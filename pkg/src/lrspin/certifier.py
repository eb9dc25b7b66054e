"""Recursive Simon-Lebowitz bound and power-law fitting of covariances.

The certifier works on the attractive doubled measure. Its inputs are three
translation-invariant profiles:

* pair coupling in the Simon inequality, ``K(d) = C_M / (d^(2+alpha) + 1)``;
* preliminary covariance bound, ``P(d) = min(C2, C0 / (d^alpha_tilde + 1))``;
* the uniform bound ``C2`` on second moments.

For ``|i - j| > a`` the Simon inequality gives

    cov(i, j) <= sum_k J_ik cov(k, j) + W_ij,

where ``W_ij`` collects the remainder ``R_ij`` (``n`` inside ``A_j``) and the
terms with ``k`` inside both ``A_i`` and ``A_j``; the latter only exist when
``|i - j| <= 2a`` and cannot be iterated, so they are bounded with ``P``.
Unrolling ``l`` times and splitting every path by the position of its longest
step gives ``T + R`` with ``T = C2 c^l``. All bound-side sums are inflated by
``1 + 2^-40`` per accumulated term.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

UP = 1.0 + 2.0**-40
RADII = (4, 8, 16, 32, 64, 128)


class CertifierError(ValueError):
    """Invalid certifier parameters or a distance outside an operation's domain."""


class FitError(ValueError):
    """Too few resolvable distances for a power-law fit."""


def _up(x: float, n_terms: int = 1) -> float:
    return float(x) * UP ** max(int(n_terms), 1)


def _up_sum(terms) -> float:
    terms = np.asarray(terms, dtype=float).ravel()
    if terms.size == 0:
        return 0.0
    return _up(math.fsum(terms), terms.size)


@dataclass(frozen=True)
class CertifierParams:
    """Decay constants in; see the module docstring for the three profiles.

    ``epsilon`` is the cutoff exponent of the proof's long-jump estimate. It is
    recorded for reference; the assembly below uses the sharper dichotomy
    ``|k_s - k_{s+1}| >= d/(m+1)`` directly. ``window`` is the number of explicit
    terms before a tail is replaced by its integral bound.
    """

    C_M: float
    alpha: float
    C0: float
    alpha_tilde: float
    C2: float
    a: int
    target_alpha_hat: float
    d_min: float = 1.0
    d_max: float = 1000.0
    epsilon: float | None = None
    n_grid: int = 40
    window: int = 10_000

    def __post_init__(self):
        for name in ("C_M", "alpha", "C0", "alpha_tilde", "C2", "target_alpha_hat"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise CertifierError(f"{name} must be a finite number")
        if self.C_M < 0:
            raise CertifierError("C_M must be nonnegative")
        for name in ("alpha", "C0", "alpha_tilde", "C2"):
            if getattr(self, name) <= 0:
                raise CertifierError(f"{name} must be positive")
        if not 0 < self.target_alpha_hat < self.alpha:
            raise CertifierError("target_alpha_hat must lie in (0, alpha)")
        if isinstance(self.a, bool) or int(self.a) != self.a or self.a < 1:
            raise CertifierError("a must be an integer >= 1")
        object.__setattr__(self, "a", int(self.a))
        if not 1 <= self.d_min < self.d_max:
            raise CertifierError("need 1 <= d_min < d_max")
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", min(self.alpha, 1.0) / 4)
        if not 0 < self.epsilon < self.alpha:
            raise CertifierError("epsilon must lie in (0, alpha)")
        if self.n_grid < 2:
            raise CertifierError("n_grid must be at least 2")
        if self.window < 16:
            raise CertifierError("window must be at least 16")

    @classmethod
    def from_dict(cls, data: dict) -> "CertifierParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise CertifierError(f"unknown field {sorted(unknown)[0]!r}")
        for name in ("C_M", "alpha", "C0", "alpha_tilde", "C2", "a", "target_alpha_hat"):
            if name not in data:
                raise CertifierError(f"missing field {name!r}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_radius(self, a: int) -> "CertifierParams":
        return CertifierParams(**{**self.to_dict(), "a": a})

    def kernel(self, t) -> np.ndarray:
        t = np.abs(np.asarray(t, dtype=float))
        return self.C_M / (t ** (2 + self.alpha) + 1)

    def prelim(self, d) -> np.ndarray:
        d = np.abs(np.asarray(d, dtype=float))
        return np.minimum(self.C2, self.C0 / (d**self.alpha_tilde + 1))

    def grid(self) -> np.ndarray:
        g = np.geomspace(self.d_min, self.d_max, self.n_grid)
        return np.unique(np.round(g).astype(np.int64))


@dataclass(frozen=True)
class ContractionBound:
    """Upper bound on sup_l sum_k J_lk, split as in the proof.

    ``inner`` is the part with k in A_l; ``outer_near`` and ``outer_far`` are
    the parts with k outside A_l, split by |n - l| <= a/2.
    """

    a: int
    inner: float
    outer_near: float
    outer_far: float
    c_tilde: float

    @property
    def contracts(self) -> bool:
        return self.c_tilde < 1


class _Profile:
    """Precomputed sums for one parameter set."""

    def __init__(self, p: CertifierParams):
        a, w = p.a, p.window
        self.p = p
        self.N = int(math.ceil(p.d_max)) + 4 * a + w + 2
        t = np.arange(self.N + 1, dtype=float)
        self.K = p.kernel(t)
        beta = 1 + p.alpha
        tail = p.C_M * self.N ** (-beta) / beta  # sum_{t > N} K(t)
        # suffix[m] = sum_{t >= m} K(t), m = 0..N+1
        suffix = np.concatenate([np.cumsum(self.K[::-1])[::-1], [0.0]]) + tail
        self.Ksuffix = suffix * UP ** (self.N + 2)

        u = np.arange(-a, a + 1)
        self.P = p.prelim(u)
        # inner_u[u] = sum_{|v| > a} K(|u - v|) P(|v|)
        v = np.arange(a + 1, a + w + 1)
        Pv = p.prelim(v)
        direct = (p.kernel(v[None, :] - u[:, None]) + p.kernel(v[None, :] + u[:, None])) @ Pv
        far = p.C2 * (self.tk(a + w + 1 - u) + self.tk(a + w + 1 + u))
        self.inner_u = (direct + far) * UP ** (2 * w + 3)

        # outer_v[v] = P(|v|) * sum_{k outside A_0} K(|k - v|)
        self.outer_v = self.P * (self.tk(a + 1 - u) + self.tk(a + 1 + u)) * UP**2
        near = np.abs(u) <= a / 2
        inner = _up_sum(self.inner_u)
        outer_near = _up_sum(self.outer_v[near])
        outer_far = _up_sum(self.outer_v[~near])
        c = _up(inner + outer_near + outer_far, 3) if p.C_M > 0 else 0.0
        self.contraction = ContractionBound(a, inner, outer_near, outer_far, c)
        self.c = c

        # long-step entries J(t) <= sum_{|w| <= a} K(|t - w|) P(|w|), t > a
        jl = np.convolve(self.K, self.P, mode="valid") * UP ** (2 * a + 2)
        self.jlong = np.full(self.N + 1, np.inf)
        self.jlong[a : a + jl.size] = jl

        # W(r) = R(r) + near-diagonal leftovers, r = a+1 .. rmax
        conv = np.convolve(self.P, self.P)  # index s + 2a, s = v - u
        rr = np.convolve(self.K, conv, mode="valid") * UP ** (4 * a + 2)
        self.rmax = 2 * a + rr.size - 1
        W = np.zeros(self.rmax + 1)
        W[2 * a : 2 * a + rr.size] = rr
        uu, vv = np.meshgrid(u, u, indexing="ij")
        pp = self.P[:, None] * self.P[None, :]
        for r in range(a + 1, 2 * a + 1):
            mask = np.abs(r + vv) > a
            rem = _up_sum((p.kernel(r + vv - uu) * pp)[mask])
            both = (np.abs(u) <= a) & (np.abs(u - r) <= a)
            left = _up_sum(self.inner_u[both] * p.prelim(u[both] - r))
            W[r] = _up(rem + left, 2)
        W[: a + 1] = 0.0
        self.W = W
        # running max from the right over [r, 2a+1] is the sup over r' >= r
        head = W[a + 1 : 2 * a + 2]
        self.Wsup_head = np.maximum.accumulate(head[::-1])[::-1]
        tail_r = self.P.sum() ** 2 * self.tk(self.rmax + 1 - 2 * a)
        self.Wsum = _up(2 * (_up_sum(W[a + 1 :]) + tail_r), 2)

    def tk(self, m) -> np.ndarray:
        """sum_{t >= m} K(t) for integer m >= 0 (vectorized)."""
        m = np.asarray(m, dtype=np.int64)
        if np.any(m < 0) or np.any(m > self.N + 1):
            raise CertifierError("tail index outside the precomputed range")
        return self.Ksuffix[m]

    def jump(self, t: int) -> float:
        if t <= self.p.a:
            return self.c
        return min(self.c, float(self.jlong[t]))

    def w_sup(self, r0: int) -> float:
        """sup_{r >= r0} W(r) for r0 > a; W decreases beyond 2a."""
        a = self.p.a
        if r0 <= 2 * a + 1:
            return float(self.Wsup_head[r0 - a - 1])
        return float(self.W[min(r0, self.rmax)])


@lru_cache(maxsize=64)
def _profile(p: CertifierParams) -> _Profile:
    return _Profile(p)


def j_row_bound(params: CertifierParams) -> ContractionBound:
    """Rigorous upper bound c̃ on the row sums of J at radius ``params.a``.

    Uses ``P(|n - l|)`` for every n outside the block, which is at most the
    constant ``C0 / (a^alpha_tilde + 1)`` of the proof; tails beyond the window
    are bounded by integral comparison.
    """
    return _profile(params).contraction


def remainder_bound(params: CertifierParams, d: float) -> float:
    """Closed-form bound on R_ij for ``|i - j| = d > 2a``.

    Every pair (k, n) in A_i x A_j is at distance at least d - 2a, there are at
    most (2a+1)^2 such pairs and each covariance factor is at most C2.
    """
    a = params.a
    if not d > 2 * a:
        raise CertifierError(f"distance inside block radius: d={d} <= 2a={2 * a}")
    card = (2 * a + 1) ** 2
    return _up(params.C_M * params.C2**2 * card / ((d - 2 * a) ** (2 + params.alpha) + 1), 4)


def _depth(c: float, alpha_hat: float, d: float) -> int:
    if c == 0:
        return 1
    if not 0 < c < 1:
        raise CertifierError(f"no contraction: c_tilde={c:g} >= 1")
    x = (2 + alpha_hat) * math.log(d) / abs(math.log(c))
    # a relative slack of 1e-14 keeps exact integers (c = 1/e, d = e) at 2
    return max(1, math.ceil(x - 1e-14 * max(1.0, x)))


def iteration_depth(params, d: float, alpha_hat: float | None = None) -> int:
    """l = ceil((2 + alpha_hat) ln d / |ln c̃|), at least 1.

    ``params`` is a CertifierParams, or c̃ itself together with ``alpha_hat``.
    """
    if isinstance(params, CertifierParams):
        return _depth(j_row_bound(params).c_tilde, params.target_alpha_hat, d)
    if alpha_hat is None:
        raise CertifierError("alpha_hat is required when passing c_tilde directly")
    return _depth(float(params), alpha_hat, d)


def event_threshold(L: float) -> float:
    """Threshold ``T = ln(L^(1/2)) / 4`` of the block-count event."""
    if not L > 0:
        raise CertifierError("L must be positive")
    return 0.25 * math.log(math.sqrt(L))


@dataclass(frozen=True)
class LedgerRow:
    d: int
    l_min: int
    l: int
    c_tilde: float
    T: float
    R: float
    total: float
    scaled: float
    fallback: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CertifiedBound:
    """|cov(d)| <= C_out / (d^exponent + 1) for grid distances d >= d_star."""

    exponent: float
    C_out: float
    d_star: int
    a: int
    contraction: ContractionBound
    ledger: tuple = field(repr=False)
    params: CertifierParams | None = field(default=None, repr=False)

    def __call__(self, d) -> np.ndarray:
        return self.C_out / (np.asarray(d, dtype=float) ** self.exponent + 1)

    def total_at(self, d: int) -> float:
        for row in self.ledger:
            if row.d == d:
                return row.total
        raise KeyError(d)


@dataclass(frozen=True)
class NoCertificate:
    reason: str
    d: float
    term: str
    a: int
    contraction: ContractionBound
    ledger: tuple = field(default=(), repr=False)
    params: CertifierParams | None = field(default=None, repr=False)


def _row(prof: _Profile, d: int) -> LedgerRow:
    p, c = prof.p, prof.c
    exponent = 2 + p.target_alpha_hat / 2
    if d <= 2 * p.a:
        total = p.C2
        return LedgerRow(d, 0, 0, c, total, 0.0, total, total * (d**exponent + 1), True)
    l_min = _depth(c, p.target_alpha_hat, d)
    terms = []
    best = None
    m = 0
    cap = l_min + 10_000
    while True:
        t0 = -(-d // (m + 1))
        s = c**m * prof.w_sup(max(t0, p.a + 1))
        if m > 0:
            s += m * c ** (m - 1) * prof.jump(t0) * prof.Wsum
        terms.append(_up(s, 4))
        m += 1
        if m < l_min:
            continue
        R = _up_sum(terms)
        T = p.C2 * c**m
        total = _up(T + R)
        if best is None or total < best[2]:
            best = (m, T, total, R)
        if R >= best[2] or T <= 1e-17 * best[2] or m >= cap or c == 0:
            break
    l, T, total, R = best
    return LedgerRow(d, l_min, l, c, T, R, total, total * (d**exponent + 1), False)


def bound_at(params: CertifierParams, d: int) -> LedgerRow:
    """Ledger row for a single integer distance (no certificate logic)."""
    if int(d) != d or d < 1:
        raise CertifierError("d must be a positive integer")
    prof = _profile(params)
    if not prof.contraction.contracts and d > 2 * params.a:
        raise CertifierError(f"no contraction at radius a={params.a}")
    return _row(prof, int(d))


def certify_decay(params: CertifierParams):
    """Assemble the per-distance ledger and try to emit a certificate.

    For each grid distance the depth ranges over l >= l(d) and the smallest
    total is kept; every such l gives a valid bound, and the minimum is
    monotone in the inputs. A certificate needs c̃ < 1 and a scaled bound
    ``total * (d^exponent + 1)`` that is non-increasing over the last third of
    the grid, so its maximum is not an artifact of the window's end.
    """
    prof = _profile(params)
    con = prof.contraction
    if not con.contracts:
        return NoCertificate("no contraction at this radius", params.d_min, "c_tilde", params.a, con, (), params)
    ledger = tuple(_row(prof, int(d)) for d in params.grid())
    tail = [r for r in ledger if not r.fallback]
    if not tail:
        return NoCertificate("window inside block radius", params.d_max, "fallback", params.a, con, ledger, params)
    start = len(tail) - max(2, len(tail) // 3)
    for prev, cur in zip(tail[start:], tail[start + 1 :]):
        if cur.scaled > prev.scaled * (1 + 1e-12):
            term = "T" if cur.T >= cur.R else "R"
            return NoCertificate(
                "scaled bound not decaying at the output exponent", cur.d, term, params.a, con, ledger, params
            )
    C_out = max(r.scaled for r in tail)
    return CertifiedBound(
        exponent=2 + params.target_alpha_hat / 2,
        C_out=C_out,
        d_star=tail[0].d,
        a=params.a,
        contraction=con,
        ledger=ledger,
        params=params,
    )


def bound_at_result(result: CertifiedBound, d: int) -> float:
    """Total bound at any integer distance for the parameters behind ``result``."""
    return bound_at(result.params, d).total


def search_radius(params: CertifierParams, radii=RADII):
    """Try radii in increasing order; return (first certificate or last failure, tried).

    ``tried`` lists ``(a, c_tilde)`` for every radius attempted.
    """
    tried = []
    result = None
    for a in radii:
        q = params.with_radius(a)
        result = certify_decay(q)
        tried.append((a, result.contraction.c_tilde))
        if isinstance(result, CertifiedBound):
            break
    return result, tried


@dataclass(frozen=True)
class SoundnessRow:
    d: int
    exact: float
    error: float
    bound: float

    @property
    def passed(self) -> bool:
        return abs(self.exact) - self.error <= self.bound


def soundness_rows(model, params: CertifierParams, spacing: int, spec=None) -> list[SoundnessRow]:
    """Compare certified totals with exact covariances of a small embedded model.

    ``model`` is an attractive doubled model whose site k sits at lattice
    position ``spacing * k``. The three hypotheses are verified first: the Simon
    coupling ``2|K_kn|`` against ``K(d)``, exact covariances against ``P(d)``
    and exact variances against ``C2``. A failed hypothesis raises.
    """
    from . import exact
    from .model import Variant

    if getattr(model, "variant", None) is not Variant.ATTRACTIVE:
        raise CertifierError("soundness needs the attractive doubled measure")
    spec = spec or exact.QuadratureSpec(rel_tol=1e-11)
    n = model.n_sites
    idx = np.arange(n)
    dist = spacing * np.abs(idx[:, None] - idx[None, :])
    off = dist > 0
    coupling = 2 * np.abs(np.array(model.K))
    if np.any(coupling[off] > params.kernel(dist[off]) * (1 + 1e-12)):
        raise CertifierError("hypothesis failed: coupling exceeds the interaction profile")
    cov, err = exact.covariance_matrix_exact(model, spec)
    if np.any(np.diag(cov) + np.diag(err) > params.C2):
        raise CertifierError("hypothesis failed: second moment above C2")
    if np.any(cov[off] + err[off] > params.prelim(dist[off])):
        raise CertifierError("hypothesis failed: covariance above the preliminary bound")
    rows = []
    for i in range(n):
        for j in range(i + 1, n):
            d = int(dist[i, j])
            rows.append(SoundnessRow(d, float(cov[i, j]), float(err[i, j]), bound_at(params, d).total))
    return rows


@dataclass(frozen=True)
class DecayFit:
    alpha_fit: float
    ci_low: float
    ci_high: float
    C_fit: float
    distances: tuple
    censored: tuple
    n_boot: int

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def __call__(self, d) -> np.ndarray:
        return self.C_fit * np.asarray(d, dtype=float) ** (-self.alpha_fit)


def _wls(x, y, w):
    W = np.sum(w)
    xm, ym = np.sum(w * x) / W, np.sum(w * y) / W
    slope = np.sum(w * (x - xm) * (y - ym)) / np.sum(w * (x - xm) ** 2)
    return slope, ym - slope * xm


def fit_decay(table, d_min: float = 1, d_max: float | None = None, *, n_boot: int = 2000,
              seed: int = 0, resolve: float = 3.0) -> DecayFit:
    """Fit ``|cov(d)| ~ C d^-alpha`` by weighted least squares in log-log space.

    Only distances with ``|cov| >= resolve * SE`` enter the fit; the others in
    the window are reported as censored. Weights are ``(cov/SE)^2``, the
    inverse variance of ``log|cov|``. The 95% interval comes from a parametric
    bootstrap that redraws each distance from N(cov, SE^2), with SE scaled up by
    the root reduced chi-square when the power law misfits. Exact tables
    (all SE zero) fall back to a residual bootstrap with equal weights.
    """
    d, cov, se = table.by_distance()
    keep = (d >= d_min) & (d > 0)
    if d_max is not None:
        keep &= d <= d_max
    d, cov, se = d[keep].astype(float), cov[keep], se[keep]
    if d.size < 6:
        raise FitError(f"need at least 6 distances in the window, found {d.size}")
    if np.count_nonzero(se < np.abs(cov)) < 4:
        raise FitError("fewer than 4 distances with SE below the estimate")
    ok = (np.abs(cov) >= resolve * se) & (cov != 0)
    if np.count_nonzero(ok) < 3:
        raise FitError(f"only {np.count_nonzero(ok)} resolvable distances; need 3")
    x, y = np.log(d[ok]), np.log(np.abs(cov[ok]))
    c_ok, s_ok = cov[ok], se[ok]
    exact = np.all(s_ok == 0)
    w = np.ones_like(x) if exact else (c_ok / np.maximum(s_ok, 1e-300)) ** 2
    slope, icpt = _wls(x, y, w)
    resid = y - (icpt + slope * x)
    rng = np.random.default_rng(seed)
    slopes = np.empty(n_boot)
    if exact:
        for b in range(n_boot):
            yb = icpt + slope * x + rng.choice(resid, size=resid.size)
            slopes[b] = _wls(x, yb, w)[0]
    else:
        dof = max(x.size - 2, 1)
        scale = max(1.0, math.sqrt(float(np.sum(w * resid**2)) / dof))
        for b in range(n_boot):
            cb = np.abs(c_ok + scale * s_ok * rng.standard_normal(x.size))
            cb = np.maximum(cb, 1e-300)
            wb = (cb / (scale * s_ok)) ** 2
            slopes[b] = _wls(x, np.log(cb), wb)[0]
    lo, hi = np.percentile(-slopes, [2.5, 97.5])
    return DecayFit(
        alpha_fit=float(-slope),
        ci_low=float(min(lo, -slope)),
        ci_high=float(max(hi, -slope)),
        C_fit=float(math.exp(icpt)),
        distances=tuple(int(v) for v in d[ok]),
        censored=tuple(int(v) for v in d[~ok]),
        n_boot=n_boot,
    )
