"""Metropolis-within-Gibbs sampler with batch-means error bars.

Both measures are written as ``exp(-sum_k phi_k(z_k) - z.Qz)``:

* LatticeModel: ``phi_k = psi_k + h_k z`` and ``Q = M / 2``;
* DoubledModel: ``phi_k(p) = psi_k(q_k + p) + psi_k(q_k - p)`` and ``Q = K``.

Local fields ``s_k = sum_{l != k} Q_kl z_l`` are updated after every accepted
move (only through entries with ``|Q_kl| > kernel_eps``) and recomputed exactly
at the start of every batch. Proposal widths are adapted per site by
Robbins-Monro on ``log sigma`` during burn-in and frozen afterwards.

Each chain owns a Philox generator spawned from one SeedSequence, so results do
not depend on the thread count.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .model import DoubledModel, LatticeModel, ModelError

TARGET_ACCEPTANCE = 0.375


class ScanOrder(str, enum.Enum):
    SYSTEMATIC = "Systematic"
    RANDOM = "RandomScan"


class DivergenceError(RuntimeError):
    def __init__(self, chain: int, site: int, sweep: int, value: float):
        super().__init__(f"chain {chain} diverged at site {site}, sweep {sweep} (|x| = {abs(value):.3g})")
        self.chain, self.site, self.sweep = chain, site, sweep


@dataclass(frozen=True)
class ChainConfig:
    seed: int = 0
    n_chains: int = 4
    burn_in: int = 1000
    sweeps: int = 10000
    scan: ScanOrder = ScanOrder.SYSTEMATIC
    proposal_sigma: float = 1.0
    target_acceptance: tuple = (0.30, 0.45)
    kernel_eps: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scan", ScanOrder(self.scan))
        object.__setattr__(self, "target_acceptance", tuple(float(v) for v in self.target_acceptance))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.n_chains < 2:
            raise ValueError("n_chains must be >= 2")
        if self.burn_in < 0 or self.sweeps < 4:
            raise ValueError("burn_in must be >= 0 and sweeps >= 4")
        if not self.proposal_sigma > 0:
            raise ValueError("proposal_sigma must be positive")
        if self.kernel_eps < 0:
            raise ValueError("kernel_eps must be nonnegative")
        lo, hi = self.target_acceptance
        if not 0 < lo <= TARGET_ACCEPTANCE <= hi < 1:
            raise ValueError("target_acceptance band must contain 0.375")

    @property
    def n_batches(self) -> int:
        return int(math.ceil(math.sqrt(self.sweeps)))

    @property
    def batch_size(self) -> int:
        return max(1, self.sweeps // self.n_batches)

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown chain config field '{bad[0]}'")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "n_chains": self.n_chains,
            "burn_in": self.burn_in,
            "sweeps": self.sweeps,
            "scan": self.scan.value,
            "proposal_sigma": self.proposal_sigma,
            "target_acceptance": list(self.target_acceptance),
            "kernel_eps": self.kernel_eps,
        }


@dataclass
class CovarianceTable:
    """Covariances indexed by site pair.

    When ``translation_averaged`` is set, row ``(0, d)`` holds the average of
    cov(x_i, x_{i+d}) over all translations inside the window.
    """

    pairs: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    tau_int: np.ndarray
    provenance: str = "sampled"
    translation_averaged: bool = False

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        self.cov = np.asarray(self.cov, dtype=float)
        self.se = np.asarray(self.se, dtype=float)
        self.tau_int = np.asarray(self.tau_int, dtype=float)

    def __len__(self) -> int:
        return len(self.pairs)

    def lookup(self, i: int, j: int) -> tuple[float, float]:
        key = {(int(a), int(b)) for a, b in [(i, j), (j, i)]}
        for k, (a, b) in enumerate(self.pairs):
            if (int(a), int(b)) in key:
                return float(self.cov[k]), float(self.se[k])
        raise KeyError((i, j))

    def by_distance(self):
        """(distances, cov, se) with pairs grouped by |i - j|.

        For tables that are not already translation averaged, the standard error
        of a group mean is taken as the mean of the members' errors, which is
        an upper bound whatever their correlation.
        """
        d = np.abs(self.pairs[:, 1] - self.pairs[:, 0])
        uniq = np.unique(d)
        cov = np.array([self.cov[d == u].mean() for u in uniq])
        se = np.array([self.se[d == u].mean() for u in uniq])
        return uniq, cov, se

    def rows(self):
        for (i, j), c, s, t in zip(self.pairs, self.cov, self.se, self.tau_int):
            yield {"i": int(i), "j": int(j), "cov": float(c), "se": float(s), "tau_int": float(t)}


@dataclass
class ChainStats:
    acceptance: np.ndarray  # per chain
    tau_int: np.ndarray  # per observable
    ess: np.ndarray
    rhat: np.ndarray
    proposal_sigma: np.ndarray  # chains x sites, frozen after burn-in
    bias_bound: float
    n_batches: int
    batch_size: int
    seeds: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def max_rhat(self) -> float:
        return float(np.max(self.rhat)) if self.rhat.size else 1.0

    @property
    def converged(self) -> bool:
        return self.max_rhat <= 1.05

    def to_dict(self) -> dict:
        return {
            "acceptance": self.acceptance.tolist(),
            "tau_int_max": float(np.max(self.tau_int)) if self.tau_int.size else 0.0,
            "ess_min": float(np.min(self.ess)) if self.ess.size else 0.0,
            "rhat_max": self.max_rhat,
            "converged": self.converged,
            "bias_bound": self.bias_bound,
            "n_batches_per_chain": self.n_batches,
            "batch_size": self.batch_size,
            "chain_seeds": self.seeds,
            "flags": list(self.flags),
        }


# -- target description ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Target:
    c2: np.ndarray
    c4: np.ndarray
    B: np.ndarray
    om: np.ndarray
    h: np.ndarray
    q: np.ndarray
    doubled: bool
    Q: np.ndarray  # full symmetric matrix

    @property
    def n(self) -> int:
        return len(self.c2)

    def phi(self, k: int, z):
        def psi(x):
            return self.c4[k] * x**4 + self.c2[k] * x**2 + self.B[k] * np.cos(self.om[k] * x)

        if self.doubled:
            return psi(self.q[k] + z) + psi(self.q[k] - z)
        return psi(z) + self.h[k] * z


def _target(model) -> _Target:
    if isinstance(model, DoubledModel):
        pots, Q, h, q, doubled = model.base.potentials, np.array(model.K), np.zeros(model.n_sites), model.q, True
    elif isinstance(model, LatticeModel):
        pots, Q, h, q, doubled = model.potentials, 0.5 * np.array(model.M), model.external_field, np.zeros(model.n_sites), False
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    arr = lambda name: np.array([getattr(p, name) for p in pots], dtype=float)
    return _Target(arr("c2"), arr("c4"), arr("B"), arr("omega"), np.asarray(h, float), np.asarray(q, float), doubled, Q)


def box_half_widths(t: _Target) -> np.ndarray:
    """Per-site width where the one-site envelope has dropped by e^-60."""
    absq = np.abs(t.Q).copy()
    np.fill_diagonal(absq, 0.0)
    lo = np.diag(t.Q) - absq.sum(axis=1)
    if np.any(lo <= 0):
        raise ModelError("quadratic form is not strictly diagonally dominant")
    out = np.empty(t.n)
    for k in range(t.n):
        zmax = 4.0 / math.sqrt(lo[k])
        while True:
            z = np.linspace(-zmax, zmax, 2001)
            lu = -t.phi(k, z) - lo[k] * z * z
            top = lu.max()
            if lu[0] < top - 60 and lu[-1] < top - 60:
                break
            zmax *= 1.5
        inside = np.flatnonzero(lu >= top - 60)
        out[k] = max(abs(z[inside[0]]), abs(z[inside[-1]]))
    return out


def _csr_columns(Q: np.ndarray, eps: float):
    """Off-diagonal entries with |Q_lk| > eps, grouped by column k."""
    off = Q.copy()
    np.fill_diagonal(off, 0.0)
    keep = np.abs(off) > eps
    indptr = np.zeros(Q.shape[0] + 1, dtype=np.int64)
    indices, values = [], []
    for k in range(Q.shape[0]):
        rows = np.flatnonzero(keep[:, k])
        indices.append(rows)
        values.append(off[rows, k])
        indptr[k + 1] = indptr[k] + rows.size
    skipped = np.where(keep, 0.0, np.abs(off))
    return indptr, np.concatenate(indices).astype(np.int64), np.concatenate(values), skipped


# -- compiled kernel -----------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _phi(k, x, c2, c4, B, om, h, q, doubled):
    if doubled:
        a = q[k] + x
        b = q[k] - x
        return (
            c4[k] * (a**4 + b**4) + c2[k] * (a * a + b * b) + B[k] * (math.cos(om[k] * a) + math.cos(om[k] * b))
        )
    return c4[k] * x**4 + c2[k] * x * x + B[k] * math.cos(om[k] * x) + h[k] * x


@numba.njit(cache=True, nogil=True)
def _run_block(
    z, s, diag, indptr, indices, values, c2, c4, B, om, h, q, doubled,
    log_sig, normals, uniforms, order, adapt, t0, accepted, limit,
    pair_i, pair_j, trace_pairs, dmax, margin, trace_dist, track, trace_sites, zsum, zsq,
):
    n_sweeps, n = normals.shape
    for t in range(n_sweeps):
        gamma = 1.0 / (t0 + t + 1.0) ** 0.6
        for u in range(n):
            k = order[t, u]
            zk = z[k]
            zp = zk + math.exp(log_sig[k]) * normals[t, u]
            de = (
                _phi(k, zp, c2, c4, B, om, h, q, doubled)
                - _phi(k, zk, c2, c4, B, om, h, q, doubled)
                + diag[k] * (zp * zp - zk * zk)
                + 2.0 * (zp - zk) * s[k]
            )
            acc = 1.0 if de <= 0.0 else math.exp(-de)
            if uniforms[t, u] < acc:
                if abs(zp) > limit[k]:
                    return k, t, zp
                dz = zp - zk
                z[k] = zp
                for p in range(indptr[k], indptr[k + 1]):
                    s[indices[p]] += values[p] * dz
                accepted[k] += 1
            if adapt:
                log_sig[k] += gamma * (acc - 0.375)
        for p in range(pair_i.size):
            trace_pairs[t, p] = z[pair_i[p]] * z[pair_j[p]]
        for d in range(dmax + 1):
            acc_d = 0.0
            cnt = 0
            for i in range(margin, n - margin - d):
                acc_d += z[i] * z[i + d]
                cnt += 1
            trace_dist[t, d] = acc_d / max(cnt, 1)
        for m in range(track.size):
            trace_sites[t, m] = z[track[m]]
        for i in range(n):
            zsum[i] += z[i]
            zsq[i] += z[i] * z[i]
    return -1, -1, 0.0


# -- driver ----------------------------------------------------------------------------------


@dataclass
class _ChainResult:
    site_means: np.ndarray  # batches x n
    site_sq: np.ndarray
    pair_mean: np.ndarray  # batches x P
    pair_sq: np.ndarray
    dist_mean: np.ndarray  # batches x (D+1)
    dist_sq: np.ndarray
    fn_mean: np.ndarray  # batches x F
    fn_sq: np.ndarray
    acceptance: float
    log_sig: np.ndarray


def _chain(
    t: _Target, cfg: ChainConfig, seed_seq, chain_id: int, csr, limit, pairs, dmax, margin, track, fns
) -> _ChainResult:
    rng = np.random.Generator(np.random.Philox(seed_seq))
    n = t.n
    indptr, indices, values, _ = csr
    diag = np.ascontiguousarray(np.diag(t.Q))
    z = rng.standard_normal(n) * (limit / 40.0)
    log_sig = np.full(n, math.log(cfg.proposal_sigma))
    pair_i = np.ascontiguousarray(pairs[:, 0]) if len(pairs) else np.zeros(0, np.int64)
    pair_j = np.ascontiguousarray(pairs[:, 1]) if len(pairs) else np.zeros(0, np.int64)
    bs = cfg.batch_size
    nb = cfg.n_batches
    accepted = np.zeros(n, dtype=np.int64)
    out = {k: [] for k in ("site", "sq", "pm", "psq", "dm", "dsq", "fm", "fsq")}
    n_burn_blocks = int(math.ceil(cfg.burn_in / bs)) if cfg.burn_in else 0
    sweep = 0
    for block in range(n_burn_blocks + nb):
        adapt = block < n_burn_blocks
        size = min(bs, cfg.burn_in - block * bs) if adapt else bs
        normals = rng.standard_normal((size, n))
        uniforms = rng.random((size, n))
        if cfg.scan is ScanOrder.SYSTEMATIC:
            order = np.broadcast_to(np.arange(n, dtype=np.int64), (size, n)).copy()
        else:
            order = rng.integers(0, n, size=(size, n), dtype=np.int64)
        s = t.Q @ z - diag * z
        tp = np.empty((size, len(pair_i)))
        td = np.empty((size, dmax + 1))
        ts = np.empty((size, len(track)))
        zsum = np.zeros(n)
        zsq = np.zeros(n)
        if block == n_burn_blocks:
            accepted[:] = 0
        site, stp, val = _run_block(
            z, s, diag, indptr, indices, values, t.c2, t.c4, t.B, t.om, t.h, t.q, t.doubled,
            log_sig, normals, uniforms, order, adapt, float(sweep), accepted, limit,
            pair_i, pair_j, tp, dmax, margin, td, track, ts, zsum, zsq,
        )
        if site >= 0:
            raise DivergenceError(chain_id, int(site), sweep + int(stp), float(val))
        sweep += size
        if adapt:
            continue
        out["site"].append(zsum / size)
        out["sq"].append(zsq / size)
        out["pm"].append(tp.mean(axis=0))
        out["psq"].append((tp * tp).mean(axis=0))
        out["dm"].append(td.mean(axis=0))
        out["dsq"].append((td * td).mean(axis=0))
        if fns:
            fv = np.stack([f(ts) for f in fns], axis=1)
            out["fm"].append(fv.mean(axis=0))
            out["fsq"].append((fv * fv).mean(axis=0))
        else:
            out["fm"].append(np.zeros(0))
            out["fsq"].append(np.zeros(0))
    acc = float(accepted.sum()) / float(n * nb * bs)
    arr = {k: np.array(v) for k, v in out.items()}
    return _ChainResult(arr["site"], arr["sq"], arr["pm"], arr["psq"], arr["dm"], arr["dsq"], arr["fm"], arr["fsq"], acc, log_sig)


def split_rhat(x: np.ndarray) -> float:
    """Split-chain potential scale reduction for a (chains, draws) array."""
    c, m = x.shape
    half = m // 2
    if half < 2:
        return float("nan")
    seqs = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    w = seqs.var(axis=1, ddof=1).mean()
    b = half * seqs.mean(axis=1).var(ddof=1)
    if w <= 0:
        return 1.0
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


def _summarize(y: np.ndarray, estimate: np.ndarray, sample_var: np.ndarray, batch_size: int):
    """y: (chains, batches, k) linearized batch values; returns se, tau, rhat."""
    c, b, k = y.shape
    flat = y.reshape(c * b, k)
    bvar = flat.var(axis=0, ddof=1)
    se = np.sqrt(bvar / (c * b))
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(sample_var > 0, batch_size * bvar / sample_var, 1.0)
    tau = np.maximum(tau, 1e-12)
    rhat = np.array([split_rhat(y[:, :, q]) for q in range(k)])
    return se, tau, rhat


def run_sampler(
    model,
    config: ChainConfig,
    pairs: Sequence[tuple[int, int]] = (),
    max_distance: int = 0,
    margin: int = 0,
    track: Sequence[int] = (),
    fns: Sequence[Callable] = (),
    threads: int = 1,
):
    """Run all chains; returns the raw per-chain results and shared metadata."""
    t = _target(model)
    n = t.n
    pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise ModelError("pair index outside the lattice")
    if max_distance < 0 or (max_distance > 0 and max_distance >= n - 2 * margin):
        raise ModelError("max_distance must be smaller than the usable window")
    track = np.asarray(list(track), dtype=np.int64)
    csr = _csr_columns(t.Q, config.kernel_eps)
    limit = 10.0 * box_half_widths(t)
    children = np.random.SeedSequence(int(config.seed)).spawn(config.n_chains)
    seeds = [f"{int(config.seed)}/{c}" for c in range(config.n_chains)]

    def work(c):
        return _chain(t, config, children[c], c, csr, limit, pairs, int(max_distance), int(margin), track, list(fns))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(config.n_chains)))
    else:
        results = [work(c) for c in range(config.n_chains)]
    return t, results, csr[3], seeds


def _bias_bound(skipped: np.ndarray, results, scale: float) -> float:
    """max_i sum_{k skipped} |M_ik| E|x_k|, with E|x_k| <= sqrt(E x_k^2)."""
    if not np.any(skipped):
        return 0.0
    m2 = np.mean([r.site_sq.mean(axis=0) for r in results], axis=0)
    return float(scale * (skipped @ np.sqrt(np.maximum(m2, 0.0))).max())


def run_chains(
    model,
    config: ChainConfig,
    pairs: Sequence[tuple[int, int]] | None = None,
    threads: int = 1,
) -> tuple[CovarianceTable, ChainStats]:
    """Covariance estimates for the requested site pairs (all i <= j when None)."""
    if pairs is None:
        n = _target(model).n
        pairs = [(i, j) for i in range(n) for j in range(i, n)]
    pairs = [tuple(int(v) for v in p) for p in pairs]
    t, results, skipped, seeds = run_sampler(model, config, pairs, threads=threads)
    table, stats = _pair_table(t, config, pairs, results, skipped, seeds)
    return table, stats


def _pair_table(t, config, pairs, results, skipped, seeds):
    p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    sm = np.stack([r.site_means for r in results])  # C x B x n
    pm = np.stack([r.pair_mean for r in results])
    psq = np.stack([r.pair_sq for r in results])
    m = sm.mean(axis=(0, 1))
    i, j = p[:, 0], p[:, 1]
    est = pm.mean(axis=(0, 1)) - m[i] * m[j]
    y = pm - m[i] * sm[:, :, j] - sm[:, :, i] * m[j]
    sample_var = psq.mean(axis=(0, 1)) - pm.mean(axis=(0, 1)) ** 2
    se, tau, rhat = _summarize(y, est, sample_var, config.batch_size)
    stats = _stats(config, results, tau, rhat, skipped, seeds, t)
    table = CovarianceTable(p, est, se, tau)
    return table, stats


def _stats(config, results, tau, rhat, skipped, seeds, t):
    total = config.n_chains * config.n_batches * config.batch_size
    ess = total / tau
    scale = 2.0 if not t.doubled else 1.0  # bound in units of M_ik (Q = M/2 on the lattice)
    stats = ChainStats(
        acceptance=np.array([r.acceptance for r in results]),
        tau_int=tau,
        ess=ess,
        rhat=rhat,
        proposal_sigma=np.exp(np.stack([r.log_sig for r in results])),
        bias_bound=_bias_bound(skipped, results, scale),
        n_batches=config.n_batches,
        batch_size=config.batch_size,
        seeds=seeds,
    )
    lo, hi = config.target_acceptance
    if not stats.converged:
        stats.flags.append(f"split R-hat {stats.max_rhat:.4f} > 1.05")
    if ess.size and ess.min() < 100:
        stats.flags.append(f"effective sample size {ess.min():.1f} < 100")
    for c, a in enumerate(stats.acceptance):
        if not lo <= a <= hi:
            stats.flags.append(f"chain {c} acceptance {a:.3f} outside [{lo}, {hi}]")
    return stats


def run_translation_averaged(
    model,
    config: ChainConfig,
    max_distance: int,
    margin: int = 0,
    threads: int = 1,
) -> tuple[CovarianceTable, ChainStats]:
    """Translation-averaged covariance C(d) for d = 0..max_distance."""
    t, results, skipped, seeds = run_sampler(model, config, (), max_distance, margin, threads=threads)
    n = t.n
    sm = np.stack([r.site_means for r in results])
    dm = np.stack([r.dist_mean for r in results])
    dsq = np.stack([r.dist_sq for r in results])
    m = sm.mean(axis=(0, 1))
    D = max_distance + 1
    est = np.empty(D)
    y = np.empty(dm.shape)
    for d in range(D):
        idx = np.arange(margin, n - margin - d)
        est[d] = dm[:, :, d].mean() - np.mean(m[idx] * m[idx + d])
        y[:, :, d] = dm[:, :, d] - np.mean(m[idx] * sm[:, :, idx + d] + sm[:, :, idx] * m[idx + d], axis=-1)
    sample_var = dsq.mean(axis=(0, 1)) - dm.mean(axis=(0, 1)) ** 2
    se, tau, rhat = _summarize(y, est, sample_var, config.batch_size)
    stats = _stats(config, results, tau, rhat, skipped, seeds, t)
    pairs = np.stack([np.zeros(D, dtype=int), np.arange(D)], axis=1)
    return CovarianceTable(pairs, est, se, tau, translation_averaged=True), stats


@dataclass(frozen=True)
class MomentProbe:
    a: float
    exp_moment: float
    exp_se: float
    even_moments: np.ndarray  # E[x^{2k}], k = 1..4
    even_se: np.ndarray
    stats: ChainStats


def moment_probe(model, config: ChainConfig, site: int, a: float, threads: int = 1) -> MomentProbe:
    """E[exp(a x_i^2)] and E[x_i^{2k}] (k <= 4) with batch-means errors."""
    t = _target(model)
    delta = float(model.base.interaction.delta if isinstance(model, DoubledModel) else model.interaction.delta)
    if not 0 <= a <= delta / 2:
        raise ModelError(f"a must lie in [0, delta/2] = [0, {delta / 2:g}]")
    if not 0 <= site < t.n:
        raise ModelError("site outside the lattice")
    fns = [lambda ts: np.exp(a * ts[:, 0] ** 2)] + [
        (lambda k: (lambda ts: ts[:, 0] ** (2 * k)))(k) for k in range(1, 5)
    ]
    t, results, skipped, seeds = run_sampler(model, config, track=[site], fns=fns, threads=threads)
    fm = np.stack([r.fn_mean for r in results])
    fsq = np.stack([r.fn_sq for r in results])
    est = fm.mean(axis=(0, 1))
    sample_var = fsq.mean(axis=(0, 1)) - est**2
    se, tau, rhat = _summarize(fm, est, sample_var, config.batch_size)
    if a == 0:
        est[0], se[0] = 1.0, 0.0
    stats = _stats(config, results, tau, rhat, skipped, seeds, t)
    return MomentProbe(float(a), float(est[0]), float(se[0]), est[1:], se[1:], stats)
