"""Quadrature oracle for lattices of at most four sites.

Integrals are evaluated on tensor-product Gauss-Legendre grids. The density is a
product of per-site factors and pair factors, so moments are computed as tensor
contractions (``numpy.einsum``) rather than by materialising the full grid; only
non-polynomial (callable) observables fall back to the full grid.

Every factor is bounded by one: the quadratic form is split as

    sum_{k,l} Q_kl z_k z_l = sum_k (Q_kk - r_k) z_k^2
                             + sum_{k<l} [2 Q_kl z_k z_l + |Q_kl| (z_k^2 + z_l^2)]

with ``r_k = sum_{l != k} |Q_kl|``, and every bracket is nonnegative.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import DoubledModel, LatticeModel, ModelError

MAX_SITES = 4
_LETTERS = "abcdefgh"


class QuadratureError(RuntimeError):
    """Refinement did not converge; carries the last two iterates."""

    def __init__(self, message: str, iterates=()):
        super().__init__(message)
        self.iterates = tuple(iterates)


@dataclass(frozen=True)
class QuadratureSpec:
    box_half_width: float | None = None
    nodes_per_site: int = 16
    refinement_factor: int = 2
    rel_tol: float = 1e-9
    max_refinements: int = 6
    tail_tol: float = 1e-12

    def __post_init__(self):
        if self.nodes_per_site < 16:
            raise ValueError("nodes_per_site must be >= 16")
        if self.refinement_factor < 2:
            raise ValueError("refinement_factor must be >= 2")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")


@dataclass(frozen=True)
class Estimate:
    value: float
    error: float
    nodes: int
    history: tuple = field(default=(), repr=False)

    def __float__(self):
        return float(self.value)

    @property
    def errors(self) -> list[float]:
        """Successive-difference error estimates, one per refinement."""
        vals = [v for _, v in self.history]
        return [abs(b - a) for a, b in zip(vals, vals[1:])]


@dataclass(frozen=True, eq=False)
class GhostModel:
    """Doubled measure coupled to a ghost Ising spin.

    ``sigma = -1`` reproduces the original doubled Hamiltonian and ``sigma = +1``
    the attractive one; each value carries weight one half.
    """

    base: DoubledModel

    @property
    def n_sites(self) -> int:
        return self.base.n_sites

    @property
    def omega(self) -> frozenset:
        k = self.base.K
        n = self.n_sites
        return frozenset((a, b) for a in range(n) for b in range(n) if a != b and k[a, b] > 0)

    def coupling(self, sigma: int) -> np.ndarray:
        k = np.array(self.base.K)
        off = ~np.eye(self.n_sites, dtype=bool)
        in_omega = (k > 0) & off
        out = k.copy()
        out[in_omega] = -sigma * k[in_omega]
        return out


# -- measure representation -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Measure:
    site_energy: tuple  # callables z -> energy
    components: tuple  # ((weight, sigma, Q), ...)
    n: int

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.components[0][2])

    @property
    def row_mass(self) -> np.ndarray:
        absq = np.max([np.abs(q) for _, _, q in self.components], axis=0)
        np.fill_diagonal(absq, 0.0)
        return absq.sum(axis=1), absq


def _as_measure(model) -> _Measure:
    if isinstance(model, LatticeModel):
        fns = tuple(functools.partial(model.site_energy, k) for k in range(model.n_sites))
        return _Measure(fns, ((1.0, 0, 0.5 * np.array(model.M)),), model.n_sites)
    if isinstance(model, DoubledModel):
        fns = tuple(functools.partial(model.site_energy, k) for k in range(model.n_sites))
        return _Measure(fns, ((1.0, 0, np.array(model.K)),), model.n_sites)
    if isinstance(model, GhostModel):
        b = model.base
        fns = tuple(functools.partial(b.site_energy, k) for k in range(b.n_sites))
        comps = ((0.5, -1, model.coupling(-1)), (0.5, 1, model.coupling(1)))
        return _Measure(fns, comps, b.n_sites)
    raise TypeError(f"unsupported model type {type(model).__name__}")


@functools.lru_cache(maxsize=64)
def _leggauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _envelope_boxes(meas: _Measure, tail_tol: float, floor: float | None) -> np.ndarray:
    """Per-site half widths with rigorous relative tail mass below ``tail_tol``.

    The density is squeezed between products of one-dimensional envelopes with
    quadratic coefficients ``Q_kk -/+ r_k``; the tail of the upper envelope is
    compared with the lower envelope's mass.
    """
    r, _ = meas.row_mass
    lo_coef = meas.diag - r
    if np.any(lo_coef <= 0):
        raise ModelError("quadratic form is not strictly diagonally dominant")
    hi_coef = meas.diag + r
    tails, upper_mass, lower_mass, grids = [], [], [], []
    for k in range(meas.n):
        zmax = 4.0 / math.sqrt(lo_coef[k])
        f = meas.site_energy[k]
        while True:
            z = np.linspace(-zmax, zmax, 8001)
            lu = -f(z) - lo_coef[k] * z * z
            top = lu.max()
            if lu[0] < top - 60 and lu[-1] < top - 60:
                break
            zmax *= 1.5
        ll = -f(z) - hi_coef[k] * z * z
        eu = np.exp(lu - top)
        el = np.exp(ll - top)
        weight = eu * (1.0 + z**8)
        dz = z[1] - z[0]
        upper_mass.append(np.trapezoid(eu, dx=dz))
        lower_mass.append(np.trapezoid(el, dx=dz))
        # tail(L) of the moment-weighted upper envelope, outside [-L, L]
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (weight[1:] + weight[:-1]) * dz)])
        total = cum[-1]
        grids.append((z, cum, total))
    ratio = float(np.prod(np.array(upper_mass) / np.array(lower_mass)))
    boxes = np.empty(meas.n)
    for k, (z, cum, total) in enumerate(grids):
        half = len(z) // 2
        budget = tail_tol * upper_mass[k] / ratio
        chosen = z[-1]
        for m in range(half, len(z)):
            zL = z[m]
            mirror = len(z) - 1 - m
            tail = cum[mirror] + (total - cum[m])
            if tail <= budget:
                chosen = zL
                break
        boxes[k] = chosen
    if floor is not None:
        boxes = np.maximum(boxes, floor)
    return boxes


class _Grid:
    def __init__(self, meas: _Measure, boxes: np.ndarray, n_q: int):
        self.meas = meas
        self.n_q = n_q
        x, w = _leggauss(n_q)
        r, absq = meas.row_mass
        self.nodes = [boxes[k] * x for k in range(meas.n)]
        self.site = []
        for k in range(meas.n):
            z = self.nodes[k]
            logv = -meas.site_energy[k](z) - (meas.diag[k] - r[k]) * z * z
            logv = logv - logv.max()
            self.site.append(boxes[k] * w * np.exp(logv))
        self._cache = {}
        self.pairs = []
        for _, _, q in meas.components:
            prs = {}
            for k in range(meas.n):
                for l in range(k + 1, meas.n):
                    if absq[k, l] == 0.0:
                        continue
                    zk = self.nodes[k][:, None]
                    zl = self.nodes[l][None, :]
                    prs[(k, l)] = np.exp(-2.0 * q[k, l] * zk * zl - absq[k, l] * (zk * zk + zl * zl))
            self.pairs.append(prs)

    def _pair(self, comp: int, k: int, l: int) -> np.ndarray:
        mat = self.pairs[comp].get((k, l))
        return np.ones((self.n_q, self.n_q)) if mat is None else mat

    def _four_site_cache(self, comp: int):
        # A[a, cd] = F_ac F_ad and B[b, cd] = F_bc F_bd, shared by all observables
        key = ("abcd", comp)
        if key not in self._cache:
            nq = self.n_q
            f = functools.partial(self._pair, comp)
            a = (f(0, 2)[:, :, None] * f(0, 3)[:, None, :]).reshape(nq, nq * nq)
            b = (f(1, 2)[:, :, None] * f(1, 3)[:, None, :]).reshape(nq, nq * nq)
            self._cache[key] = (a, b)
        return self._cache[key]

    def contract(self, comp: int, exps: Sequence[int], absolute: bool = False) -> float:
        ops = []
        for k in range(self.meas.n):
            z = self.nodes[k]
            e = exps[k]
            ops.append(self.site[k] if e == 0 else self.site[k] * (np.abs(z) ** e if absolute else z**e))
        if self.meas.n == 4:
            # sum_{ab,cd} G_ab H_cd A[a,cd] B[b,cd] as one matrix product
            amat, bmat = self._four_site_cache(comp)
            g = ops[0][:, None] * ops[1][None, :] * self._pair(comp, 0, 1)
            h = ops[2][:, None] * ops[3][None, :] * self._pair(comp, 2, 3)
            inner = np.einsum("ij,ij->j", amat, g @ bmat)
            return float(inner @ h.reshape(-1))
        subs = [_LETTERS[k] for k in range(self.meas.n)]
        for (k, l), mat in self.pairs[comp].items():
            ops.append(mat)
            subs.append(_LETTERS[k] + _LETTERS[l])
        return float(np.einsum(",".join(subs) + "->", *ops, optimize="optimal"))

    def full_density(self, comp: int, lead: int | None = None) -> np.ndarray:
        """Density tensor on the grid (optionally only the slice ``a0 == lead``)."""
        n = self.meas.n
        shape = [self.n_q] * n
        dens = np.ones([1] * n)
        for k in range(n):
            v = self.site[k] if (k > 0 or lead is None) else self.site[k][lead : lead + 1]
            sh = [1] * n
            sh[k] = v.shape[0]
            dens = dens * v.reshape(sh)
        for (k, l), mat in self.pairs[comp].items():
            m = mat if (k > 0 or lead is None) else mat[lead : lead + 1]
            sh = [1] * n
            sh[k], sh[l] = m.shape
            dens = dens * m.reshape(sh)
        if lead is not None:
            shape[0] = 1
        return np.broadcast_to(dens, shape)

    def coords(self, lead: int | None = None):
        n = self.meas.n
        out = []
        for k in range(n):
            z = self.nodes[k]
            if k == 0 and lead is not None:
                z = z[lead : lead + 1]
            sh = [1] * n
            sh[k] = z.shape[0]
            out.append(z.reshape(sh))
        return out


def _normalize_observable(obs, n: int):
    """Return ('mono', exps, sigma_power) or ('call', fn)."""
    if callable(obs):
        return ("call", obs, 0)
    if isinstance(obs, dict):
        exps = [0] * n
        sig = 0
        for key, p in obs.items():
            if key == "sigma":
                sig = int(p)
            else:
                exps[int(key)] += int(p)
        return ("mono", tuple(exps), sig)
    exps = tuple(int(e) for e in obs)
    if len(exps) == n + 1:
        return ("mono", exps[:n], exps[n])
    if len(exps) != n:
        raise ValueError("monomial exponent tuple must have one entry per site")
    return ("mono", exps, 0)


def monomial(n: int, *sites: int, sigma: int = 0) -> tuple:
    exps = [0] * n
    for s in sites:
        exps[s] += 1
    return tuple(exps) + ((sigma,) if sigma else ())


def _evaluate(grid: _Grid, parsed, scale_cache: dict | None = None) -> tuple[float, float]:
    """(value, scale) for one observable on one grid; scale ~ E|obs|.

    ``scale_cache`` keeps E|obs| from the first grid, where it is only used as an
    absolute floor for the convergence test.
    """
    meas = grid.meas
    kind = parsed[0]
    if kind == "mono":
        _, exps, sp = parsed
        zs = grid._cache.setdefault("Z", {})
        z_total = num = 0.0
        for c, (w, sigma, _) in enumerate(meas.components):
            if c not in zs:
                zs[c] = grid.contract(c, (0,) * meas.n)
            sgn = float(sigma) ** sp if sp else 1.0
            num += w * sgn * (grid.contract(c, exps) if any(exps) else zs[c])
            z_total += w * zs[c]
        key = (exps, sp)
        if scale_cache is not None and key in scale_cache:
            return num / z_total, scale_cache[key]
        scale = 1.0
        if any(exps):
            scale = sum(w * grid.contract(c, exps, absolute=True) for c, (w, _, _) in enumerate(meas.components)) / z_total
        if scale_cache is not None:
            scale_cache[key] = scale
        return num / z_total, scale
    fn = parsed[1]
    z_total = num = scale = 0.0
    for c, (w, sigma, _) in enumerate(meas.components):
        zc = nc = sc = 0.0
        for a in range(grid.n_q):
            dens = grid.full_density(c, lead=a)
            coords = grid.coords(lead=a)
            vals = fn(*coords, sigma=sigma) if len(meas.components) > 1 else fn(*coords)
            vals = np.broadcast_to(vals, dens.shape)
            zc += float(dens.sum())
            nc += float((dens * vals).sum())
            sc += float((dens * np.abs(vals)).sum())
        num += w * nc
        scale += w * sc
        z_total += w * zc
    return num / z_total, scale / z_total


def moments(model, observables: Sequence, spec: QuadratureSpec = QuadratureSpec()) -> list[Estimate]:
    """Expectations of several observables with a shared refinement schedule."""
    meas = _as_measure(model)
    if meas.n > MAX_SITES:
        raise ModelError(f"exact oracle supports at most {MAX_SITES} sites")
    parsed = [_normalize_observable(o, meas.n) for o in observables]
    boxes = _envelope_boxes(meas, spec.tail_tol, spec.box_half_width)
    n_q = spec.nodes_per_site
    hist: list[list] = [[] for _ in parsed]
    prev = None
    scales: dict = {}
    for level in range(spec.max_refinements + 1):
        grid = _Grid(meas, boxes, n_q)
        cur = [_evaluate(grid, p, scales) for p in parsed]
        for h, (v, _) in zip(hist, cur):
            h.append((n_q, v))
        if prev is not None:
            done = True
            for (v, s), (pv, _) in zip(cur, prev):
                if abs(v - pv) > max(spec.rel_tol * abs(v), 1e-13 * s):
                    done = False
            if done:
                return [
                    Estimate(v, abs(v - pv), n_q, tuple(h))
                    for (v, _), (pv, _), h in zip(cur, prev, hist)
                ]
        prev = cur
        n_q *= spec.refinement_factor
    last = [(h[-2][1], h[-1][1]) for h in hist]
    raise QuadratureError(
        f"quadrature did not converge after {spec.max_refinements} refinements", last
    )


def expectation(model, observable, spec: QuadratureSpec = QuadratureSpec()) -> Estimate:
    """E[observable] under the finite-volume measure of ``model``.

    ``observable`` is a monomial (tuple of per-site exponents, optionally with a
    trailing ghost-spin exponent, or a ``{site: power}`` dict) or a callable
    taking one broadcastable coordinate array per site (and ``sigma=`` for a
    GhostModel).
    """
    return moments(model, [observable], spec)[0]


def covariance_exact(model, i: int, j: int, spec: QuadratureSpec = QuadratureSpec()) -> Estimate:
    n = model.n_sites
    exy, ex, ey = moments(model, [monomial(n, i, j), monomial(n, i), monomial(n, j)], spec)
    val = exy.value - ex.value * ey.value
    err = exy.error + abs(ex.value) * ey.error + abs(ey.value) * ex.error
    hist = tuple(
        (nq, a - b * c) for (nq, a), (_, b), (_, c) in zip(exy.history, ex.history, ey.history)
    )
    return Estimate(val, err, exy.nodes, hist)


def covariance_matrix_exact(model, spec: QuadratureSpec = QuadratureSpec()) -> tuple[np.ndarray, np.ndarray]:
    """All covariances and their error estimates for a small model."""
    n = model.n_sites
    obs = [monomial(n, i) for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    obs += [monomial(n, i, j) for i, j in pairs]
    res = moments(model, obs, spec)
    mean = np.array([r.value for r in res[:n]])
    merr = np.array([r.error for r in res[:n]])
    cov = np.zeros((n, n))
    err = np.zeros((n, n))
    for (i, j), r in zip(pairs, res[n:]):
        cov[i, j] = cov[j, i] = r.value - mean[i] * mean[j]
        err[i, j] = err[j, i] = r.error + abs(mean[i]) * merr[j] + abs(mean[j]) * merr[i]
    return cov, err


def gaussian_covariance(model) -> np.ndarray:
    """Closed-form covariance for purely quadratic potentials.

    LatticeModel: density exp(-sum c2 x^2 - x.Mx/2 - h.x) so cov = (M + 2 C2)^-1.
    DoubledModel: density exp(-2 sum c2 p^2 - p.Kp) so cov = (2K + 4 C2)^-1.
    """
    pots = model.base.potentials if isinstance(model, DoubledModel) else model.potentials
    if any(p.c4 != 0 or p.B != 0 for p in pots):
        raise ModelError("closed form needs c4 = 0 and no bounded part")
    c2 = np.diag([p.c2 for p in pots])
    if isinstance(model, DoubledModel):
        return np.linalg.inv(2.0 * model.K + 4.0 * c2)
    return np.linalg.inv(np.array(model.M) + 2.0 * c2)


def partition_functions(g: GhostModel, spec: QuadratureSpec = QuadratureSpec()) -> tuple[float, float]:
    """(Z_original, Z_attractive) on a common, grid-dependent scale.

    Each grid rescales its factors, so only the ratio is meaningful across
    refinements; convergence is tested on Z_attractive / Z_original.
    """
    meas = _as_measure(g)
    boxes = _envelope_boxes(meas, spec.tail_tol, spec.box_half_width)
    prev = None
    n_q = spec.nodes_per_site
    hist = []
    for _ in range(spec.max_refinements + 1):
        grid = _Grid(meas, boxes, n_q)
        zs = (grid.contract(0, (0,) * meas.n), grid.contract(1, (0,) * meas.n))
        ratio = zs[1] / zs[0]
        hist.append(ratio)
        if prev is not None and abs(ratio - prev) <= spec.rel_tol * abs(ratio):
            return zs
        prev = ratio
        n_q *= spec.refinement_factor
    raise QuadratureError("partition functions did not converge", hist[-2:])


# -- doubling of variables -------------------------------------------------------------


def _eliminate(site_ops, pair, n: int) -> float:
    """Sum over (q, p) of prod_k S_k(q_k, p_k) prod_{k<l} F_kl(q_k, q_l) F_kl(p_k, p_l).

    The p variables are summed out last to first; the running tensor carries
    indices (q_{k+1}, ..., q_n, p_1, ..., p_k), so no intermediate exceeds n_q^n.
    """
    qs = _LETTERS[:n]
    ps = _LETTERS[n : 2 * n]
    t, sub = np.ones(()), ""
    for k in reversed(range(n)):
        ops, subs = [t, site_ops[k]], [sub, qs[k] + ps[k]]
        for l in range(k):
            if (l, k) in pair:
                ops.append(pair[(l, k)])
                subs.append(ps[l] + ps[k])
        present = "".join(subs)
        sub = "".join(c for c in qs[k:] + ps[:k] if c in present)
        t = np.einsum(",".join(subs) + "->" + sub, *ops, optimize=True)
    ops, subs = [t], [sub]
    for (k, l), f in pair.items():
        ops.append(f)
        subs.append(qs[k] + qs[l])
    return float(np.einsum(",".join(subs) + "->", *ops, optimize=True))


def _doubled_joint(model: LatticeModel, i: int, j: int, n_q: int, box: float) -> tuple[float, float]:
    """Nested (q, p) quadrature of 2 E[p_i p_j] under the joint doubled density."""
    n = model.n_sites
    m = np.array(model.M)
    h = model.external_field
    x, w = _leggauss(n_q)
    z = box * x
    wz = box * w
    absm = np.abs(m)
    np.fill_diagonal(absm, 0.0)
    r = absm.sum(axis=1)
    site_ops = []
    for k in range(n):
        qa = z[:, None]
        pb = z[None, :]
        psi = model.potentials[k]
        logw = (
            -psi(qa + pb)
            - psi(qa - pb)
            - 2.0 * h[k] * qa
            - (m[k, k] - r[k]) * (qa * qa + pb * pb)
        )
        logw -= logw.max()
        site_ops.append(wz[:, None] * wz[None, :] * np.exp(logw))
    pair = {}
    for k in range(n):
        for l in range(k + 1, n):
            if absm[k, l] != 0:
                pair[(k, l)] = np.exp(-2.0 * m[k, l] * z[:, None] * z[None, :] - absm[k, l] * (z[:, None] ** 2 + z[None, :] ** 2))
    zval = _eliminate(site_ops, pair, n)
    ops2 = list(site_ops)
    ops2[i] = ops2[i] * z[None, :]
    ops2[j] = ops2[j] * z[None, :]
    num = _eliminate(ops2, pair, n)
    return 2.0 * num / zval, zval


def doubling_identity_check(model: LatticeModel, i: int, j: int, spec: QuadratureSpec = QuadratureSpec()):
    """Compare cov(x_i, x_j) with 2 E_q[E_{mu_q}[p_i p_j]] by nested quadrature.

    Returns (lhs, rhs, gap) with gap relative to max(|lhs|, 1e-12).
    """
    n = model.n_sites
    if n > 3:
        raise ModelError("doubling identity check supports at most 3 sites")
    lhs = covariance_exact(model, i, j, spec)
    meas = _as_measure(model)
    # the (q, p) box contains the image of the x-box for both copies
    box = float(np.max(_envelope_boxes(meas, spec.tail_tol, spec.box_half_width)))
    n_q = spec.nodes_per_site
    prev = None
    hist = []
    for _ in range(spec.max_refinements + 1):
        val, _ = _doubled_joint(model, i, j, n_q, box)
        hist.append((n_q, val))
        if prev is not None and abs(val - prev) <= max(spec.rel_tol * abs(val), 1e-14):
            rhs = Estimate(val, abs(val - prev), n_q, tuple(hist))
            gap = abs(lhs.value - rhs.value) / max(abs(lhs.value), 1e-12)
            return lhs, rhs, gap
        prev = val
        n_q *= spec.refinement_factor
    raise QuadratureError("nested doubling quadrature did not converge", hist[-2:])


def one_dimensional(weight: Callable, fns: Sequence[Callable], box: float, spec: QuadratureSpec = QuadratureSpec()):
    """Integrals of ``f * weight`` on [-box, box] for each f, refined to rel_tol."""
    n_q = spec.nodes_per_site
    prev = None
    for _ in range(spec.max_refinements + 4):
        x, w = _leggauss(n_q)
        z = box * x
        wz = box * w * weight(z)
        vals = [wz * f(z) for f in fns]
        cur = np.array([float(np.sum(v)) for v in vals])
        # absolute floor for integrals that vanish by symmetry, as in moments()
        floor = 1e-13 * np.array([float(np.sum(np.abs(v))) for v in vals])
        if prev is not None and np.all(np.abs(cur - prev) <= np.maximum(spec.rel_tol * np.abs(cur), floor)):
            return cur
        prev = cur
        n_q *= spec.refinement_factor
    raise QuadratureError("one-dimensional quadrature did not converge", (prev, cur))
