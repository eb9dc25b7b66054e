"""Inverse positivity of strictly diagonally dominant M-matrices.

If ``A_ii - sum_{j != i} |A_ij| >= delta > 0`` and ``A_ij <= 0`` off the diagonal,
then ``A^-1`` is entrywise nonnegative and its row sums are at most ``1/delta``.
The lemma's conclusion is checked by a dense LU solve; the semigroup argument
behind it is kept as an explicit-Euler probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class MatrixLemmaError(ValueError):
    """The matrix violates the lemma's hypotheses or the probe is unstable."""


@dataclass(frozen=True, eq=False)
class SddMatrix:
    """Square matrix with a declared dominance margin.

    ``m_matrix`` requests the additional sign condition ``A_ij <= 0`` for
    ``i != j``. Hypotheses are checked on construction with a relative slack of
    a few ulps, so a diagonal built as ``row_mass + delta`` is accepted.
    """

    A: np.ndarray
    delta: float
    m_matrix: bool = True

    def __post_init__(self):
        a = np.array(self.A, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise MatrixLemmaError("A must be a nonempty square matrix")
        if not np.all(np.isfinite(a)):
            raise MatrixLemmaError("A must be finite")
        if not self.delta > 0:
            raise MatrixLemmaError("delta must be positive")
        a.setflags(write=False)
        object.__setattr__(self, "A", a)
        margins = self.margins
        slack = 8 * np.finfo(float).eps * np.abs(np.diag(a))
        bad = np.flatnonzero(margins < self.delta - slack)
        if bad.size:
            i = int(bad[0])
            raise MatrixLemmaError(
                f"row {i}: dominance margin {margins[i]:.6g} below delta {self.delta:.6g}"
            )
        if self.m_matrix:
            off = a - np.diag(np.diag(a))
            if np.any(off > 0):
                i, j = np.argwhere(off > 0)[0]
                raise MatrixLemmaError(f"entry ({i}, {j}) is positive off the diagonal")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def margins(self) -> np.ndarray:
        off = np.abs(self.A).sum(axis=1) - np.abs(np.diag(self.A))
        return np.diag(self.A) - off

    def scaled(self, c: float) -> "SddMatrix":
        return SddMatrix(c * self.A, c * self.delta, self.m_matrix)


@dataclass(frozen=True)
class InverseReport:
    n: int
    delta: float
    min_entry: float
    max_row_sum: float
    residual: float
    tol: float

    @property
    def row_sum_bound(self) -> float:
        return 1.0 / self.delta

    @property
    def passed(self) -> bool:
        return self.min_entry >= -self.tol and self.max_row_sum <= self.row_sum_bound + self.tol


def verify_inverse_positivity(m: SddMatrix, tol: float = 1e-10) -> InverseReport:
    """Invert by LU with partial pivoting and report the lemma's two quantities."""
    eye = np.eye(m.n)
    try:
        lu = scipy.linalg.lu_factor(m.A, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:  # pragma: no cover - cannot occur for SDD input
        raise RuntimeError(f"internal error: LU failed on an SDD matrix ({exc})") from exc
    inv = scipy.linalg.lu_solve(lu, eye, check_finite=False)
    if not np.all(np.isfinite(inv)):  # pragma: no cover
        raise RuntimeError("internal error: singular solve on an SDD matrix")
    residual = float(np.abs(m.A @ inv - eye).sum(axis=1).max())
    return InverseReport(
        n=m.n,
        delta=float(m.delta),
        min_entry=float(inv.min()),
        max_row_sum=float(inv.sum(axis=1).max()),
        residual=residual,
        tol=float(tol),
    )


@dataclass(frozen=True)
class SemigroupReport:
    min_value: float
    steps: int
    final: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.min_value >= -self.tol


def semigroup_invariance_probe(
    m: SddMatrix, y0, t_max: float, dt: float, tol: float = 1e-12
) -> SemigroupReport:
    """Explicit Euler for dy/dt = -A y; the nonnegative orthant should be invariant."""
    y = np.array(y0, dtype=float)
    if y.shape != (m.n,):
        raise MatrixLemmaError("y0 must have one entry per row of A")
    if np.any(y < 0):
        raise MatrixLemmaError("y0 must be nonnegative")
    limit = 1.0 / (2.0 * float(np.max(np.diag(m.A))))
    if not 0 < dt <= limit:
        raise MatrixLemmaError(f"unstable step dt={dt:g}; need 0 < dt <= {limit:g}")
    steps = int(np.ceil(t_max / dt))
    lowest = float(y.min())
    for _ in range(steps):
        y = y - dt * (m.A @ y)
        lowest = min(lowest, float(y.min()))
    return SemigroupReport(lowest, steps, y, tol)


def random_sdd(rng: np.random.Generator, n: int, delta: float, density: float = 0.7) -> SddMatrix:
    """Random SDD M-matrix with margin exactly ``delta`` on at least one row."""
    off = -rng.exponential(1.0, size=(n, n)) * (rng.random((n, n)) < density)
    np.fill_diagonal(off, 0.0)
    extra = rng.exponential(0.5, size=n)
    extra[rng.integers(n)] = 0.0
    diag = -off.sum(axis=1) + delta + extra
    return SddMatrix(off + np.diag(diag), delta)


def corpus(seed: int, count: int, sizes=(2, 64), deltas=(0.1, 2.0)):
    """Seeded corpus of SDD M-matrices; instance k depends only on (seed, k)."""
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        n = int(rng.integers(sizes[0], sizes[1] + 1))
        delta = float(rng.uniform(*deltas))
        yield random_sdd(rng, n, delta)


@dataclass(frozen=True)
class MomentLemmaSystem:
    """The exponential-moment lemma's linear system for one finite model.

    Quantities are in the units of a Hamiltonian ``sum M'_ij x_i x_j`` over all
    pairs, so ``M' = M / 2`` for the lattice energy ``x.Mx / 2``. ``delta`` is the
    dominance margin of ``M'`` including every coupling to outside sites, ``a``
    is the largest admissible exponent ``delta / 2`` and ``b`` carries the fixed
    collar spins: ``b_i = a sum_{j outside} |M'_ij| x_j^2``.
    """

    delta: float
    a: float
    matrix: SddMatrix
    b: np.ndarray

    @property
    def predicted_log_ratio(self) -> float:
        """Row-sum bound on ``(A^-1 b)_i``: ``max_i b_i / delta_A``."""
        return float(np.max(self.b, initial=0.0)) / self.matrix.delta


def _outside_mass(kernel, m: int, explicit: int = 100_000) -> float:
    """sum_{t >= m} kernel(t), explicit terms plus a crude integral tail."""
    t = np.arange(m, m + explicit, dtype=float)
    head = float(np.sum(kernel(t)))
    last = float(kernel(m + explicit - 1))
    return head + last * (m + explicit)  # kernel decays faster than 1/t^2


def moment_lemma_system(model) -> MomentLemmaSystem:
    inter = model.interaction
    n = model.n_sites
    Mp = np.asarray(model.M, dtype=float) / 2
    off = np.abs(Mp) - np.diag(np.abs(np.diag(Mp)))
    outside = np.array([(_outside_mass(inter.kernel, i + 1) + _outside_mass(inter.kernel, n - i)) / 2 for i in range(n)])
    margins = np.diag(Mp) - off.sum(axis=1) - outside
    delta = float(margins.min())
    if not delta > 0:
        raise MatrixLemmaError(f"model is not strictly dominant once outside couplings are counted (margin {delta:.4g})")
    a = delta / 2
    A = -off + np.diag(np.diag(Mp) - delta / 4 - a)
    delta_A = float(np.min(np.diag(A) - off.sum(axis=1)))
    b = np.zeros(n)
    for j, xj in model.boundary.outside_sites(n):
        for i in range(n):
            b[i] += a * float(inter.kernel(abs(i - j))) / 2 * xj**2
    return MomentLemmaSystem(delta, a, SddMatrix(A, delta_A), b)
