"""Eigenstructure of the discretised transfer and resolvent operators.

Pole scans run on any evaluator exposing ``__call__(z)`` (the dense
resolvent) and ``fast_indicator(z)`` / ``singularity_indicator(z)`` (small
exactly at poles). With the panel evaluator the poles are those of the
quadrature resolvent itself, which for a constant roof sit exactly at
``2 pi i k / r``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linear_sum_assignment, minimize

from .branched_surface import DomainError
from .measure_space import (
    CellBasis,
    DiscreteMeasure,
    OperatorMatrix,
    segment_kernel,
    trajectory_segments,
    transfer_sparse,
)
from .semiflow_model import SuspensionModel


class SolverError(RuntimeError):
    pass


class SpectralAnomalyError(RuntimeError):
    pass


class ContourError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# eigenpairs


@dataclass
class EigenPair:
    eigenvalue: complex
    vector: DiscreteMeasure
    residual: float


def _normalise(v: np.ndarray) -> np.ndarray:
    v = v / np.abs(v).sum()
    k = int(np.argmax(np.abs(v)))
    return v * (abs(v[k]) / v[k])


def eigen(A: OperatorMatrix, k: int = 6) -> list[EigenPair]:
    """``k`` largest-modulus eigenpairs from a full dense eigendecomposition (LAPACK QR)."""
    M = A.matrix
    try:
        w, V = sla.eig(M)
    except sla.LinAlgError as exc:
        raise SolverError(f"dense eigensolver did not converge: {exc}") from exc
    order = np.argsort(-np.abs(w), kind="stable")[:k]
    out = []
    for i in order:
        v = _normalise(V[:, i])
        res = float(np.abs(M @ v - w[i] * v).sum())
        out.append(EigenPair(complex(w[i]), DiscreteMeasure(A.basis_id, v), res))
    return out


def invariant_measure(
    model: SuspensionModel,
    basis: CellBasis,
    t_probe: float = 0.5 * (math.sqrt(5.0) - 1.0),
    t_check: float = math.sqrt(2.0),
    tol: float = 1e-6,
) -> tuple[DiscreteMeasure, float]:
    """Eigenvector of ``M(t_probe)`` for the eigenvalue nearest 1, normalised to unit mass.

    Returns the measure and the TV defect ``|M(t_check) mu - mu|``. The
    default probe time is incommensurate with rational roofs: at ``t = r``
    a constant roof makes 1 a multiple eigenvalue of the discretised ``M(t)``.
    """
    M = transfer_sparse(model, basis, t_probe)
    if basis.n_cells <= 3000:
        w, V = sla.eig(M.toarray())
    else:
        w, V = spla.eigs(M, k=6, which="LM")
    i = int(np.argmin(np.abs(w - 1)))
    if abs(w[i] - 1) > tol:
        raise SpectralAnomalyError(f"no eigenvalue within {tol:g} of 1 (nearest {w[i]:.10g})")
    v = V[:, i]
    v = v / v.sum()
    if np.max(np.abs(v.imag)) < 1e-12 * np.max(np.abs(v.real)):
        v = v.real
    mu = DiscreteMeasure(basis.id, v)
    defect = float(np.abs(transfer_sparse(model, basis, t_check) @ v - v).sum())
    return mu, defect


# --------------------------------------------------------------------------
# projectors and poles


def spectral_projector(evaluator, center: complex, radius: float, n_nodes: int = 64) -> OperatorMatrix:
    """``(1/2 pi i) contour integral of R`` on a positively oriented circle, by the trapezoid rule."""
    acc = np.zeros((evaluator.dim, evaluator.dim), dtype=complex)
    for k in range(n_nodes):
        e = np.exp(2j * np.pi * k / n_nodes)
        z = center + radius * e
        try:
            acc += evaluator(z) * (radius * e)
        except Exception as exc:
            raise ContourError(f"resolvent failed at contour node {z:.6g}; try another radius") from exc
    return OperatorMatrix(acc / n_nodes, "projector", evaluator.basis_id, {"center": complex(center), "radius": radius, "n_nodes": n_nodes})


def numerical_rank(A: np.ndarray, rel_tol: float = 1e-6) -> int:
    s = sla.svdvals(A)
    return int(np.sum(s > rel_tol * max(s[0], 1e-300))) if s[0] > 1e-12 else 0


@dataclass
class PoleRecord:
    location: complex
    order: int
    rank: int
    strength: float
    converged: bool = True
    order_label: str = ""

    def to_dict(self) -> dict:
        return {
            "re": self.location.real,
            "im": self.location.imag,
            "order": self.order_label or str(self.order),
            "rank": self.rank,
            "strength": self.strength,
            "converged": self.converged,
        }


@dataclass
class ScanResult:
    poles: list[PoleRecord]
    re_grid: np.ndarray
    im_grid: np.ndarray
    log_norm: np.ndarray  # shape (len(re), len(im)), log of 1/indicator
    unresolved: list[dict] = field(default_factory=list)


def _nelder_mead(f, z0: complex, step: float, maxiter: int):
    res = minimize(
        lambda p: f(p[0] + 1j * p[1]), [z0.real, z0.imag], method="Nelder-Mead",
        options={
            "xatol": 1e-11, "fatol": 1e-15, "maxiter": maxiter,
            "initial_simplex": [[z0.real, z0.imag], [z0.real + step, z0.imag], [z0.real, z0.imag + step]],
        },
    )
    return complex(res.x[0], res.x[1]), float(res.fun), bool(res.success)


def _refine(evaluator, z0: complex, step: float) -> tuple[complex, float, bool]:
    """Coarse descent on the sparse indicator, then a short polish on the smallest singular value."""
    z, _, ok1 = _nelder_mead(evaluator.fast_indicator, z0, step, 300)
    z, val, ok2 = _nelder_mead(evaluator.singularity_indicator, z, 1e-6, 80)
    return z, val, ok1


def pole_order(evaluator, pole: complex, eps=(1e-2, 1e-3, 1e-4)) -> tuple[int, str]:
    """Order from the log-log slope of ``|R|`` approaching the pole along the real direction."""
    norms = [np.abs(evaluator(pole + e)).sum(axis=0).max() for e in eps]
    slope = -np.polyfit(np.log(eps), np.log(norms), 1)[0]
    order = max(1, int(round(slope)))
    return order, (">=3" if order >= 3 else str(order))


def pole_scan(
    evaluator,
    re_min: float,
    re_max: float,
    im_max: float,
    d_re: float = 0.1,
    d_im: float = 0.1,
    lambda_fit: float | None = None,
    threshold: float = 1e-6,
    screen: float = 0.25,
    radius: float = 0.05,
    compute_rank: bool = True,
) -> ScanResult:
    """Scan ``re_min <= Re z <= re_max``, ``|Im z| <= im_max`` for poles.

    The half ``Im z >= 0`` is scanned and mirrored (real semigroup). Local
    minima of the indicator are refined by Nelder-Mead on the smallest
    singular value. Only minima below ``screen`` times the median indicator
    are refined; refined points whose singular value is below ``threshold``
    are poles, others are reported as unresolved.
    """
    if lambda_fit is not None and re_min <= -lambda_fit:
        raise DomainError("strip must satisfy re_min > -lambda_fit")
    re = np.arange(re_min, re_max + 0.5 * d_re, d_re)
    im = np.arange(0.0, im_max + 0.5 * d_im, d_im)
    ind = np.array([[evaluator.fast_indicator(a + 1j * b) for b in im] for a in re])
    cands = []
    cutoff = screen * float(np.median(ind))
    pad = np.pad(ind, 1, mode="constant", constant_values=np.inf)
    for i in range(len(re)):
        for j in range(len(im)):
            v = ind[i, j]
            nb = pad[i : i + 3, j : j + 3].copy()
            nb[1, 1] = np.inf
            # mirror neighbour across the real axis
            if j == 0 and len(im) > 1:
                nb[1, 0] = ind[i, 1]
            if v <= nb.min() and v <= cutoff:
                cands.append(complex(re[i], im[j]))
    found: list[tuple[complex, float]] = []
    unresolved = []
    for c in cands:
        z, val, ok = _refine(evaluator, c, 0.5 * min(d_re, d_im))
        if abs(z.imag) < 1e-7:
            z = complex(z.real, 0.0)
        if not (re_min - d_re <= z.real <= re_max + d_re and -d_im <= z.imag <= im_max + d_im):
            continue
        if val > threshold:
            unresolved.append({"start": [c.real, c.imag], "end": [z.real, z.imag], "sigma_min": val})
            continue
        if all(abs(z - f) > 1e-6 for f, _ in found):
            found.append((z, val))
    poles = []
    for z, val in found:
        order, label = pole_order(evaluator, z)
        rank = -1
        if compute_rank:
            P = spectral_projector(evaluator, z, radius)
            rank = numerical_rank(P.matrix)
        strength = float(1.0 / max(val, 1e-300))
        poles.append(PoleRecord(z, order, rank, strength, True, label))
        if z.imag > 1e-7:
            poles.append(PoleRecord(z.conjugate(), order, rank, strength, True, label))
    poles.sort(key=lambda p: (round(p.location.imag, 8), p.location.real))
    log_norm = -np.log(np.maximum(ind, 1e-300))
    return ScanResult(poles, re, im, log_norm, unresolved)


def mixing_verdict(poles: list[PoleRecord], axis_tol: float = 1e-2) -> bool:
    """Mixing iff ``z = 0`` is the only pole within ``axis_tol`` of the imaginary axis."""
    on_axis = [p for p in poles if abs(p.location.real) <= axis_tol]
    return all(abs(p.location) <= axis_tol for p in on_axis)


def simplicity_verdict(poles: list[PoleRecord], axis_tol: float = 1e-2) -> bool:
    """Pole at zero is simple: order 1 and rank-1 residue."""
    zero = [p for p in poles if abs(p.location) <= axis_tol]
    return len(zero) == 1 and zero[0].order == 1 and zero[0].rank == 1


# --------------------------------------------------------------------------
# Yosida approximation


def yosida_approx(evaluator, nu: DiscreteMeasure, t: float, n: int) -> DiscreteMeasure:
    """``((n/t) R(n/t))^n nu`` by ``n`` solves with one factorisation."""
    if t <= 0 or n < 1:
        raise ValueError("need t > 0 and n >= 1")
    z = n / t
    v = np.asarray(nu.coeffs, dtype=complex)
    if hasattr(evaluator, "factor"):
        lu = evaluator.factor(z)
        for _ in range(n):
            v = z * sla.lu_solve(lu, v)
    else:
        R = evaluator(z)
        for _ in range(n):
            v = z * (R @ v)
    if np.isrealobj(nu.coeffs):
        v = v.real
    return DiscreteMeasure(nu.basis_id, v)


def smooth_random_measure(basis: CellBasis, rng: np.random.Generator, modes: int = 2) -> DiscreteMeasure:
    """Positive unit-mass measure with a random low-frequency density."""
    x, s = basis.centres()
    d = np.ones_like(x)
    for k in range(1, modes + 1):
        d += rng.uniform(-0.4, 0.4) / k * np.cos(2 * np.pi * k * s + rng.uniform(0, 2 * np.pi))
        d += rng.uniform(-0.4, 0.4) / k * np.cos(2 * np.pi * k * x + rng.uniform(0, 2 * np.pi))
    mu = d * basis.areas
    return DiscreteMeasure(basis.id, mu / mu.sum())


# --------------------------------------------------------------------------
# essential radius


@dataclass
class RefinementRow:
    grid: tuple[int, int]
    n_cells: int
    outliers: list[complex]
    interior: list[complex]
    outlier_match: float | None = None
    interior_churn: float | None = None


@dataclass
class RefinementTable:
    z: complex
    radius: float
    margin: float
    rows: list[RefinementRow]
    count_stable: bool
    outliers_stable: bool
    interior_flagged: bool
    inverse_z_present: bool

    def to_dict(self) -> dict:
        c = lambda w: [float(w.real), float(w.imag)]
        return {
            "z": c(self.z),
            "radius": self.radius,
            "margin": self.margin,
            "count_stable": self.count_stable,
            "outliers_stable": self.outliers_stable,
            "interior_flagged_uncertified": self.interior_flagged,
            "inverse_z_present": self.inverse_z_present,
            "rows": [
                {
                    "grid": list(r.grid),
                    "n_cells": r.n_cells,
                    "outliers": [c(w) for w in r.outliers],
                    "interior": [c(w) for w in r.interior],
                    "outlier_match": r.outlier_match,
                    "interior_churn": r.interior_churn,
                }
                for r in self.rows
            ],
        }


def _match_distance(a: list[complex], b: list[complex]) -> float:
    if not a and not b:
        return 0.0
    if len(a) != len(b):
        return math.inf
    C = np.abs(np.subtract.outer(np.array(a), np.array(b)))
    r, c = linear_sum_assignment(C)
    return float(C[r, c].max())


def _partial_match(a: list[complex], b: list[complex]) -> float:
    """Largest distance in an optimal matching of the shorter list into the longer one."""
    if not a or not b:
        return math.inf
    C = np.abs(np.subtract.outer(np.array(a), np.array(b)))
    r, c = linear_sum_assignment(C)
    return float(C[r, c].max())


def resolvent_linear_operator(model: SuspensionModel, basis: CellBasis, z: complex, n_nodes: int = 16) -> spla.LinearOperator:
    """Matrix-free ``R_q(z)`` via a sparse LU of ``I - e^{-zT} M_T``."""
    T = model.roof.r_min / basis.ny
    M_T = transfer_sparse(model, basis, T)
    segs = trajectory_segments(model, basis, T)
    K = segment_kernel(basis, segs, lambda tau: np.exp(-z * tau), n_nodes, complex).tocsr()
    A = (sp.identity(basis.n_cells, format="csc") - np.exp(-z * T) * M_T).tocsc()
    lu = spla.splu(A.astype(complex))
    return spla.LinearOperator((basis.n_cells, basis.n_cells), matvec=lambda v: K @ lu.solve(np.asarray(v, dtype=complex)), dtype=complex)


def essential_radius_probe(
    model: SuspensionModel,
    z: complex,
    grids: list[tuple[int, int]],
    lambda_fit: float,
    margin: float = 0.05,
    match_tol: float = 0.02,
    k: int = 12,
    q: int = 8,
    seed: int = 0,
) -> RefinementTable:
    """Leading eigenvalues of ``R_q(z)`` across refinements, by Arnoldi iteration.

    Outliers are eigenvalues with modulus above ``1/(Re z + lambda_fit) + margin``.
    Interior eigenvalues are never certified: they are matched across grids
    only to report their churn.
    """
    if np.real(z) <= 0:
        raise DomainError("need Re z > 0")
    radius = 1.0 / (np.real(z) + lambda_fit) + margin
    rows = []
    for nx, ny in grids:
        basis = CellBasis(model, nx, ny, q)
        op = resolvent_linear_operator(model, basis, z)
        v0 = np.random.default_rng(seed).standard_normal(basis.n_cells).astype(complex)
        w = spla.eigs(op, k=min(k, basis.n_cells - 2), which="LM", v0=v0, return_eigenvectors=False, tol=1e-12)
        w = sorted(w, key=lambda x: -abs(x))
        rows.append(RefinementRow((nx, ny), basis.n_cells, [complex(x) for x in w if abs(x) > radius], [complex(x) for x in w if abs(x) <= radius]))
    for prev, row in zip(rows[:-1], rows[1:]):
        row.outlier_match = _match_distance(prev.outliers, row.outliers)
        row.interior_churn = _partial_match(prev.interior, row.interior)
    counts = {len(r.outliers) for r in rows}
    matches = [r.outlier_match for r in rows[1:]]
    inv_z = 1.0 / z
    return RefinementTable(
        complex(z), float(radius), margin, rows,
        count_stable=len(counts) == 1,
        outliers_stable=all(m is not None and m <= match_tol for m in matches),
        interior_flagged=True,
        inverse_z_present=all(any(abs(w - inv_z) < 1e-8 for w in r.outliers) for r in rows),
    )


# --------------------------------------------------------------------------
# report


@dataclass
class SpectralReport:
    model: str
    grid: tuple[int, int]
    transfer_eigenvalues: list[complex] = field(default_factory=list)
    resolvent_eigenvalues: list[complex] = field(default_factory=list)
    poles: list[PoleRecord] = field(default_factory=list)
    mixing: bool | None = None
    simple_zero: bool | None = None
    thresholds: dict = field(default_factory=dict)
    refinement: RefinementTable | None = None

    def to_dict(self) -> dict:
        c = lambda w: [float(np.real(w)), float(np.imag(w))]
        return {
            "model": self.model,
            "grid": list(self.grid),
            "transfer_eigenvalues": [c(w) for w in self.transfer_eigenvalues],
            "resolvent_eigenvalues": [c(w) for w in self.resolvent_eigenvalues],
            "poles": [p.to_dict() for p in self.poles],
            "mixing": self.mixing,
            "simple_zero": self.simple_zero,
            "thresholds": self.thresholds,
            "refinement": self.refinement.to_dict() if self.refinement else None,
        }
