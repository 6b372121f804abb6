"""Bromwich inversion of the resolvent and the weak (D -> TV) operator norm.

The weak norm ``sup{|A mu|_TV : |mu|_D <= 1}`` maximises a convex function
over a polytope, so its exact value needs the polytope's vertices. We
evaluate it on a dictionary of D-normalised rectangle indicators (dyadic
widths and heights, half-overlapping positions, every strip chart). This is
a certified lower bound on the sup and never exceeds the TV operator norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .measure_space import CellBasis, OperatorMatrix, derivative_operators, tv_operator_norm


class ConfigurationError(ValueError):
    pass


# --------------------------------------------------------------------------
# weak norm


def _dyadic(n: int) -> list[int]:
    out, w = [], 1
    while w < n:
        out.append(w)
        w *= 2
    out.append(n)
    return out


def rectangle_dictionary(basis: CellBasis) -> np.ndarray:
    """Columns: unit-D-norm measures with constant density on chart rectangles."""
    cols = []
    for j in range(basis.n_strips):
        for w in _dyadic(basis.nx):
            for h in _dyadic(basis.ny):
                for x0 in range(0, basis.nx - w + 1, max(1, w // 2)):
                    for y0 in range(0, basis.ny - h + 1, max(1, h // 2)):
                        ix, iy = np.meshgrid(np.arange(x0, x0 + w), np.arange(y0, y0 + h), indexing="ij")
                        c = np.zeros(basis.n_cells)
                        idx = basis.index(j, ix.ravel(), iy.ravel())
                        c[idx] = basis.areas[idx]
                        cols.append(c)
    D = np.array(cols).T
    norms = derivative_operators(basis).d_norm_columns(D)
    if np.any(norms <= 0):
        raise ConfigurationError("degenerate derivative stencil: a dictionary element has zero D-norm")
    return D / norms


_DICT_CACHE: dict[int, tuple[CellBasis, np.ndarray]] = {}


def _dictionary(basis: CellBasis) -> np.ndarray:
    hit = _DICT_CACHE.get(id(basis))
    if hit is None or hit[0] is not basis:
        hit = (basis, rectangle_dictionary(basis))
        _DICT_CACHE[id(basis)] = hit
    return hit[1]


def weak_operator_norm(A, basis: CellBasis, dictionary: np.ndarray | None = None) -> float:
    """Lower bound of ``|A|_{D -> TV}`` over the rectangle dictionary."""
    M = A.matrix if isinstance(A, OperatorMatrix) else np.asarray(A)
    if M.shape != (basis.n_cells, basis.n_cells):
        raise ValueError("operator does not match the basis")
    D = _dictionary(basis) if dictionary is None else dictionary
    return float(np.max(np.abs(M @ D).sum(axis=0)))


# --------------------------------------------------------------------------
# Bromwich


@dataclass(frozen=True)
class InversionConfig:
    a: float = 1.0
    k: float = 100.0
    t: float = 1.0
    n_nodes: int | None = None

    def __post_init__(self):
        if self.a <= 0:
            raise ConfigurationError("abscissa a must be positive")
        if self.t < 0:
            raise ConfigurationError("t must be non-negative")
        if self.n_nodes is not None and self.n_nodes < 8 * self.k / math.pi:
            raise ConfigurationError("n_nodes must be at least 8 k / pi")

    @property
    def spacing(self) -> float:
        """Node spacing: at most ``pi / (4 t)`` and dividing ``k``."""
        if self.n_nodes is not None:
            return 2 * self.k / (self.n_nodes - 1)
        return self.k / _even_count(self.k, self.t)


def _even_count(k: float, t: float) -> int:
    """Smallest even number of intervals on ``[0, k]`` with spacing at most ``pi / (4 t)``."""
    n = math.ceil(k / (math.pi / (4 * max(t, 0.25))))
    return n + (n % 2)


def scalar_bromwich(a: float, t: float, k: float, h: float) -> float:
    """Trapezoid value of ``(1/2 pi) int_{-k}^{k} e^{(a+ib)t} / (a+ib) db`` (the inverse of ``1/z``)."""
    J = int(round(k / h))
    b = h * np.arange(J + 1)
    w = np.full(J + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    z = a + 1j * b
    return float(h / (2 * math.pi) * np.sum(w * (np.exp(z * t) / z).real))


@dataclass
class InversionResult:
    approx: OperatorMatrix
    k: float
    weak_error: float | None
    tv_error: float | None
    budget: float


@dataclass
class LadderRow:
    k: float
    n_nodes: int
    weak_error: float | None
    tv_error: float | None
    budget: float
    scalar_error: float

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class Ladder:
    a: float
    t: float
    h: float
    rows: list[LadderRow] = field(default_factory=list)
    approximants: dict = field(default_factory=dict)


def bromwich_ladder(
    evaluator,
    a: float,
    t: float,
    ks: list[float],
    reference: OperatorMatrix | None = None,
    basis: CellBasis | None = None,
    h: float | None = None,
) -> Ladder:
    """Trapezoid Bromwich sums for every ``k`` in ``ks`` on a shared node set.

    Nodes ``a + i j h`` are evaluated once for the largest ``k``; the
    conjugate half follows from ``R(conj z) = conj R(z)``. The budget for
    each ``k`` is the scalar truncation error of inverting ``1/z`` with the
    same rule plus the TV (or weak, when a basis is given) change on
    doubling the spacing.
    """
    ks = sorted(float(k) for k in ks)
    if h is None:
        h = ks[0] / _even_count(ks[0], t)
    for k in ks:
        if abs(k / h - round(k / h)) > 1e-9 or round(k / h) % 2:
            raise ConfigurationError(f"k={k} is not an even multiple of the spacing {h}")
    J = int(round(ks[-1] / h))
    counts = [int(round(k / h)) for k in ks]
    fine = [0.0] * len(ks)
    coarse = [0.0] * len(ks)
    for j in range(J + 1):
        z = a + 1j * j * h
        try:
            F = np.exp(z * t) * evaluator(z)
        except Exception as exc:
            raise RuntimeError(f"resolvent evaluation failed at node z={z:.6g}") from exc
        for i, Jk in enumerate(counts):
            if j > Jk:
                continue
            w = 0.5 if j in (0, Jk) else 1.0
            fine[i] = fine[i] + w * F
            if j % 2 == 0:
                coarse[i] = coarse[i] + w * F
    lad = Ladder(a, t, h)
    norm = (lambda X: weak_operator_norm(X, basis)) if basis is not None else tv_operator_norm
    for i, k in enumerate(ks):
        # only nodes with b >= 0 were summed; the mirrored half is the conjugate
        approx = h / math.pi * np.real(fine[i])
        approx_2h = 2 * h / math.pi * np.real(coarse[i])
        scalar_err = abs(scalar_bromwich(a, t, k, h) - 1.0)
        budget = scalar_err + norm(approx - approx_2h)
        weak = tv = None
        if reference is not None:
            diff = approx - reference.matrix
            tv = tv_operator_norm(diff)
            weak = weak_operator_norm(diff, basis) if basis is not None else None
        lad.rows.append(LadderRow(k, 2 * counts[i] + 1, weak, tv, budget, scalar_err))
        lad.approximants[k] = OperatorMatrix(approx, "bromwich", evaluator.basis_id, {"a": a, "t": t, "k": k, "h": h})
    return lad


def bromwich_invert(
    evaluator,
    config: InversionConfig,
    reference: OperatorMatrix | None = None,
    basis: CellBasis | None = None,
) -> InversionResult:
    """Single-``k`` inversion; see :func:`bromwich_ladder`."""
    h = config.spacing
    lad = bromwich_ladder(evaluator, config.a, config.t, [config.k], reference, basis, h)
    row = lad.rows[0]
    return InversionResult(lad.approximants[config.k], config.k, row.weak_error, row.tv_error, row.budget)
