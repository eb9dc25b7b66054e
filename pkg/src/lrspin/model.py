"""Hamiltonians, interaction kernels and the derived doubled/truncated measures.

Conventions
-----------
The lattice energy carries the one-half convention

    U(x) = sum_i psi_i(x_i) + 1/2 sum_{i,j} M_ij x_i x_j + sum_i x_i h_i,

with ``h_i = b_i + sum_{j outside} M_ij x_j`` (field plus boundary). The doubled
measure in the variables ``p`` has no one-half:

    -log density = sum_k psi_{k,q}(p_k) + sum_{k,l} K_kl p_k p_l,

so the pair coupling (coefficient of ``p_k p_l`` for ``k != l``) is ``2 K_kl``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Any, Mapping, Sequence

import numpy as np


class ModelError(ValueError):
    """Invalid model description or argument."""


class SignPattern(str, enum.Enum):
    ALL_POSITIVE = "AllPositive"
    ALL_NEGATIVE = "AllNegative"
    SEEDED_RANDOM = "SeededRandom"


class Variant(str, enum.Enum):
    ORIGINAL = "Original"
    ATTRACTIVE = "Attractive"


@dataclass(frozen=True)
class SingleSitePotential:
    """psi(z) = c4 z^4 + c2 z^2 + B cos(omega z).

    The convex part is quadratic (``c4 == 0``) or quartic and always attains its
    minimum at zero; the cosine is the bounded perturbation.
    """

    c2: float = 0.0
    c4: float = 0.0
    B: float = 0.0
    omega: float = 1.0

    def __post_init__(self):
        for name in ("c2", "c4", "B"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ModelError(f"{name} must be finite and nonnegative, got {v}")
        if not (math.isfinite(self.omega) and self.omega > 0):
            raise ModelError(f"omega must be positive, got {self.omega}")

    @property
    def convex_kind(self) -> str:
        return "Quartic" if self.c4 > 0 else "Quadratic"

    @property
    def bounded_kind(self) -> str:
        return "Cosine" if self.B > 0 else "None"

    @property
    def min_at_zero(self) -> bool:
        return True

    def convex(self, z):
        z2 = np.square(z)
        return self.c4 * z2 * z2 + self.c2 * z2

    def convex_d2(self, z):
        return 12.0 * self.c4 * np.square(z) + 2.0 * self.c2

    def bounded(self, z):
        if self.B == 0.0:
            return np.zeros_like(np.asarray(z, dtype=float))
        return self.B * np.cos(self.omega * np.asarray(z, dtype=float))

    def bounded_d1(self, z):
        if self.B == 0.0:
            return np.zeros_like(np.asarray(z, dtype=float))
        return -self.B * self.omega * np.sin(self.omega * np.asarray(z, dtype=float))

    def __call__(self, z):
        return self.convex(z) + self.bounded(z)

    def symmetrized(self, q: float):
        """Return ``p -> psi(q + p) + psi(q - p)``."""
        return lambda p: self(q + np.asarray(p, dtype=float)) + self(q - np.asarray(p, dtype=float))

    @property
    def is_even(self) -> bool:
        return True


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Dense symmetric coupling matrix with algebraic off-diagonal decay.

    Off-diagonal magnitudes are ``C / (dist^(2+alpha) + 1)`` where ``dist`` is the
    lattice distance times ``spacing``; the diagonal is the row's off-diagonal mass
    plus ``delta``. ``entries`` may be overridden (truncation, masking) as long as
    the decay bound and the dominance margin still hold.
    """

    n_sites: int
    coupling_C: float
    alpha: float
    sign_pattern: SignPattern
    delta: float
    sign_seed: int = 0
    spacing: int = 1
    entries: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self.n_sites < 1:
            raise ModelError("n_sites must be >= 1")
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise ModelError("delta: margin must be positive")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ModelError("alpha: decay exponent must be positive")
        if not (math.isfinite(self.coupling_C) and self.coupling_C >= 0):
            raise ModelError("coupling_C must be finite and nonnegative")
        if self.spacing < 1:
            raise ModelError("spacing must be >= 1")
        object.__setattr__(self, "sign_pattern", SignPattern(self.sign_pattern))
        if self.entries is None:
            object.__setattr__(self, "entries", self._build())
        m = np.array(self.entries, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    def kernel(self, dist) -> np.ndarray:
        """Upper bound |M| at lattice distance ``dist`` (scaled by spacing)."""
        d = np.asarray(dist, dtype=float) * self.spacing
        return self.coupling_C / (d ** (2.0 + self.alpha) + 1.0)

    def sign(self, i: int, j: int) -> float:
        """Sign of the coupling between (possibly outside) sites i and j."""
        if self.sign_pattern is SignPattern.ALL_POSITIVE:
            return 1.0
        if self.sign_pattern is SignPattern.ALL_NEGATIVE:
            return -1.0
        a, b = min(i, j), max(i, j)
        bits = np.random.default_rng([self.sign_seed, a + 2**31, b + 2**31]).integers(0, 2)
        return 1.0 if bits else -1.0

    def _build(self) -> np.ndarray:
        n = self.n_sites
        idx = np.arange(n)
        dist = np.abs(idx[:, None] - idx[None, :])
        mag = self.kernel(dist)
        np.fill_diagonal(mag, 0.0)
        if self.sign_pattern is SignPattern.ALL_POSITIVE:
            signs = np.ones((n, n))
        elif self.sign_pattern is SignPattern.ALL_NEGATIVE:
            signs = -np.ones((n, n))
        else:
            rng = np.random.default_rng(self.sign_seed)
            upper = rng.choice([-1.0, 1.0], size=(n, n))
            signs = np.triu(upper, 1)
            signs = signs + signs.T
        m = signs * mag
        np.fill_diagonal(m, np.abs(m).sum(axis=1) + self.delta)
        return m

    def outside_coupling(self, i: int, j: int) -> float:
        """M_ij for i inside the window and j outside it."""
        return self.sign(i, j) * float(self.kernel(abs(i - j)))

    def offdiag_row_mass(self) -> np.ndarray:
        a = np.abs(self.entries)
        return a.sum(axis=1) - np.diag(a)

    def margin(self) -> np.ndarray:
        return np.diag(self.entries) - self.offdiag_row_mass()

    def with_entries(self, entries: np.ndarray) -> "InteractionMatrix":
        return replace(self, entries=np.array(entries, dtype=float))


@dataclass(frozen=True, eq=False)
class BoundaryCondition:
    """Fixed spins on a collar of width W on each side; zero beyond the collar.

    ``left_values`` are listed in lattice order (sites -W, ..., -1) and
    ``right_values`` are sites n, ..., n+W-1.
    """

    collar_width: int = 0
    left_values: tuple = ()
    right_values: tuple = ()

    def __post_init__(self):
        if self.collar_width < 0:
            raise ModelError("collar width must be nonnegative")
        left = tuple(float(v) for v in self.left_values)
        right = tuple(float(v) for v in self.right_values)
        if len(left) != self.collar_width or len(right) != self.collar_width:
            raise ModelError("collar: left/right must each have collar_width entries")
        if not all(math.isfinite(v) for v in left + right):
            raise ModelError("collar: boundary values must be finite")
        object.__setattr__(self, "left_values", left)
        object.__setattr__(self, "right_values", right)

    def outside_sites(self, n_sites: int):
        w = self.collar_width
        left = [(-w + k, v) for k, v in enumerate(self.left_values)]
        right = [(n_sites + k, v) for k, v in enumerate(self.right_values)]
        return left + right


@dataclass(frozen=True, eq=False)
class LatticeModel:
    potentials: tuple
    interaction: InteractionMatrix
    field: np.ndarray | None = None
    boundary: BoundaryCondition = dc_field(default_factory=BoundaryCondition)

    def __post_init__(self):
        n = self.interaction.n_sites
        object.__setattr__(self, "potentials", tuple(self.potentials))
        if len(self.potentials) != n:
            raise ModelError("potentials must have n_sites entries")
        if self.field is not None:
            f = np.array(self.field, dtype=float)
            if f.shape != (n,):
                raise ModelError("field must have n_sites entries")
            if not np.all(np.isfinite(f)):
                raise ModelError("field must be finite")
            f.setflags(write=False)
            object.__setattr__(self, "field", f)
        h = self._external_field()
        h.setflags(write=False)
        object.__setattr__(self, "_h", h)

    @property
    def n_sites(self) -> int:
        return self.interaction.n_sites

    @property
    def M(self) -> np.ndarray:
        return self.interaction.entries

    def _external_field(self) -> np.ndarray:
        n = self.n_sites
        h = np.zeros(n) if self.field is None else np.array(self.field, dtype=float)
        for j, xj in self.boundary.outside_sites(n):
            if xj == 0.0:
                continue
            for i in range(n):
                h[i] += self.interaction.outside_coupling(i, j) * xj
        return h

    @property
    def external_field(self) -> np.ndarray:
        """Field plus boundary contribution ``h_i``."""
        return self._h

    def temperedness(self) -> np.ndarray:
        """sum_{j outside} |M_ij| |x_j| for every interior site (finite by construction)."""
        n = self.n_sites
        out = np.zeros(n)
        for j, xj in self.boundary.outside_sites(n):
            for i in range(n):
                out[i] += float(self.interaction.kernel(abs(i - j))) * abs(xj)
        return out

    def with_interaction(self, interaction: InteractionMatrix) -> "LatticeModel":
        return replace(self, interaction=interaction)

    def site_energy(self, k: int, z):
        """psi_k(z) + h_k z, vectorised in z."""
        return self.potentials[k](z) + self._h[k] * np.asarray(z, dtype=float)


@dataclass(frozen=True, eq=False)
class DoubledModel:
    """The conditional measure in ``p`` for fixed ``q``, original or attractive."""

    base: LatticeModel
    q: np.ndarray
    variant: Variant = Variant.ORIGINAL
    coupling: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.shape != (self.base.n_sites,):
            raise ModelError("q must have n_sites entries")
        if not np.all(np.isfinite(q)):
            raise ModelError("q must be finite")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.coupling is None:
            k = attractive_coupling(self.base.M) if self.variant is Variant.ATTRACTIVE else np.array(self.base.M)
        else:
            k = np.array(self.coupling, dtype=float)
        k.setflags(write=False)
        object.__setattr__(self, "coupling", k)

    @property
    def n_sites(self) -> int:
        return self.base.n_sites

    @property
    def K(self) -> np.ndarray:
        return self.coupling

    def site_energy(self, k: int, p):
        p = np.asarray(p, dtype=float)
        psi = self.base.potentials[k]
        return psi(self.q[k] + p) + psi(self.q[k] - p)

    def with_coupling(self, coupling: np.ndarray) -> "DoubledModel":
        return replace(self, coupling=np.array(coupling, dtype=float))

    def log_density(self, p) -> float:
        """Unnormalised log density (for tests and pointwise checks)."""
        p = np.asarray(p, dtype=float)
        site = sum(float(self.site_energy(k, p[k])) for k in range(self.n_sites))
        return -site - float(p @ self.K @ p)


def attractive_coupling(m: np.ndarray) -> np.ndarray:
    k = -np.abs(np.asarray(m, dtype=float))
    np.fill_diagonal(k, np.diag(m))
    return k


@dataclass(frozen=True)
class TruncationSet:
    pairs: frozenset
    cutoff: int
    dropped_mass: float

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)


# -- construction ---------------------------------------------------------------


def _get(d: Mapping, key: str, default: Any = ...):
    if key in d:
        return d[key]
    if default is ...:
        raise ModelError(f"missing field '{key}'")
    return default


def _num(d: Mapping, key: str, default: Any = ...) -> float:
    v = _get(d, key, default)
    try:
        out = float(v)
    except (TypeError, ValueError):
        raise ModelError(f"field '{key}' must be numeric, got {v!r}") from None
    if not math.isfinite(out):
        raise ModelError(f"field '{key}' must be finite")
    return out


def canonical_spec(spec: Mapping) -> dict:
    """Validate a model spec mapping and return it with every default filled in."""
    if not isinstance(spec, Mapping):
        raise ModelError("model spec must be a JSON object")
    n = _get(spec, "n_sites")
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ModelError(f"field 'n_sites' must be a positive integer, got {n!r}")
    bounded = _get(spec, "bounded", {}) or {}
    collar = _get(spec, "collar", {}) or {}
    width = int(_get(collar, "width", 0))
    left = [float(v) for v in _get(collar, "left", [0.0] * width)]
    right = [float(v) for v in _get(collar, "right", [0.0] * width)]
    if not all(math.isfinite(v) for v in left + right):
        raise ModelError("field 'collar': values must be finite")
    fld = _get(spec, "field", None)
    if fld is not None:
        if isinstance(fld, (int, float)):
            fld = [float(fld)] * n
        fld = [float(v) for v in fld]
    out = {
        "n_sites": n,
        "c2": _num(spec, "c2", 0.0),
        "c4": _num(spec, "c4", 0.0),
        "bounded": {"B": _num(bounded, "B", 0.0), "omega": _num(bounded, "omega", 1.0)},
        "coupling_C": _num(spec, "coupling_C"),
        "alpha": _num(spec, "alpha"),
        "sign_pattern": str(_get(spec, "sign_pattern", "AllPositive")),
        "sign_seed": int(_get(spec, "sign_seed", 0)),
        "delta": _num(spec, "delta"),
        "field": fld,
        "collar": {"width": width, "left": left, "right": right},
    }
    try:
        SignPattern(out["sign_pattern"])
    except ValueError:
        raise ModelError(f"field 'sign_pattern' must be one of {[s.value for s in SignPattern]}") from None
    if out["delta"] <= 0:
        raise ModelError("field 'delta': margin must be positive")
    if out["alpha"] <= 0:
        raise ModelError("field 'alpha': decay exponent must be positive")
    return out


def build_model(spec: Mapping) -> LatticeModel:
    """Build a homogeneous LatticeModel from a (JSON-style) spec mapping."""
    s = canonical_spec(spec)
    pot = SingleSitePotential(c2=s["c2"], c4=s["c4"], B=s["bounded"]["B"], omega=s["bounded"]["omega"])
    inter = InteractionMatrix(
        n_sites=s["n_sites"],
        coupling_C=s["coupling_C"],
        alpha=s["alpha"],
        sign_pattern=SignPattern(s["sign_pattern"]),
        delta=s["delta"],
        sign_seed=s["sign_seed"],
    )
    c = s["collar"]
    bc = BoundaryCondition(c["width"], tuple(c["left"]), tuple(c["right"]))
    fld = None if s["field"] is None else np.array(s["field"])
    return LatticeModel((pot,) * s["n_sites"], inter, fld, bc)


def load_spec(path) -> dict:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"malformed JSON in {path}: {exc.msg}") from None
    return canonical_spec(data)


def energy(model: LatticeModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_sites,):
        raise ModelError("configuration must have n_sites entries")
    if not np.all(np.isfinite(x)):
        raise ModelError("configuration must be finite")
    site = sum(float(model.potentials[i](x[i])) for i in range(model.n_sites))
    return site + 0.5 * float(x @ model.M @ x) + float(x @ model.external_field)


def double(model: LatticeModel, q, variant: Variant | str = Variant.ORIGINAL) -> DoubledModel:
    return DoubledModel(model, np.asarray(q, dtype=float), Variant(variant))


def truncation_cutoff(i: int, j: int, epsilon: float) -> int:
    return int(math.ceil(abs(i - j) ** (1.0 - epsilon) - 1e-12))


def truncation_pairs(n: int, i: int, j: int, cutoff: int) -> frozenset:
    out = set()
    for k in range(n):
        for l in range(n):
            if abs(k - l) < cutoff:
                continue
            if (k < i and l < i) or (k > j and l > j):
                continue
            out.add((k, l))
    return frozenset(out)


def truncate_interactions(model: LatticeModel, i: int, j: int, epsilon: float):
    """Drop couplings in the index set I for the pair (i, j); return (model, I)."""
    n = model.n_sites
    if not (0 <= i < j < n):
        raise ModelError("truncation requires 0 <= i < j < n_sites")
    if j - i < 2:
        raise ModelError("truncation requires |i - j| >= 2")
    if not (0.0 < epsilon < 1.0):
        raise ModelError("epsilon must lie in (0, 1)")
    cutoff = truncation_cutoff(i, j, epsilon)
    pairs = truncation_pairs(n, i, j, cutoff)
    m = np.array(model.M)
    mass = 0.0
    for k, l in pairs:
        mass += abs(m[k, l])
        m[k, l] = 0.0
    new = model.with_interaction(model.interaction.with_entries(m))
    return new, TruncationSet(pairs, cutoff, mass)


def mask_couplings(model: LatticeModel, keep: np.ndarray) -> LatticeModel:
    """Zero every off-diagonal coupling where ``keep`` is False; the diagonal is kept."""
    keep = np.asarray(keep, dtype=bool)
    m = np.where(keep, model.M, 0.0)
    np.fill_diagonal(m, np.diag(model.M))
    return model.with_interaction(model.interaction.with_entries(m))


def block_mask(blocks: Sequence[Sequence[int]], n: int) -> np.ndarray:
    """Couplings allowed inside a block and between adjacent blocks only."""
    label = np.full(n, -1)
    for b, sites in enumerate(blocks):
        for s in sites:
            label[s] = b
    if np.any(label < 0):
        raise ModelError("blocks must cover every site")
    return np.abs(label[:, None] - label[None, :]) <= 1


def random_model(
    rng: np.random.Generator,
    n: int,
    *,
    quartic: bool = True,
    cosine: bool = False,
    gaussian: bool = False,
    sign: str | None = None,
    coupling_range=(0.2, 1.5),
    delta_range=(0.3, 1.5),
) -> LatticeModel:
    """Random small model used by the inequality corpora."""
    if gaussian:
        pots = tuple(SingleSitePotential(c2=float(rng.uniform(0.0, 0.5))) for _ in range(n))
    else:
        pots = tuple(
            SingleSitePotential(
                c2=float(rng.uniform(0.0, 0.5)),
                c4=float(rng.uniform(0.05, 0.5)) if quartic else 0.0,
                B=float(rng.uniform(0.1, 0.8)) if cosine else 0.0,
                omega=float(rng.uniform(0.5, 2.0)),
            )
            for _ in range(n)
        )
    pattern = sign or str(rng.choice(["AllPositive", "AllNegative", "SeededRandom"]))
    inter = InteractionMatrix(
        n_sites=n,
        coupling_C=float(rng.uniform(*coupling_range)),
        alpha=float(rng.uniform(0.25, 2.0)),
        sign_pattern=SignPattern(pattern),
        delta=float(rng.uniform(*delta_range)),
        sign_seed=int(rng.integers(0, 2**31)),
    )
    return LatticeModel(pots, inter)
