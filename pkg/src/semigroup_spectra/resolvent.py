"""Resolvent of the discretised transfer semigroup along two independent paths.

Quadrature path
    The Laplace integral is split into panels of length ``T = r_min / n_y``.
    On each panel the sampled trajectories cross at most one cell boundary,
    so the panel kernel ``K(z) = int_0^T e^{-z tau} M(tau) dtau`` is exact
    per residence segment up to Gauss-Legendre error. Reusing the semigroup
    at the panel endpoints gives the geometric series
    ``R_q(z) = K(z) (I - e^{-zT} M(T))^{-1}`` with no truncated tail. The
    same expression is meromorphic in ``z``, which the pole scan exploits.

Generator path
    ``Z_h = z0 I - R_q(z0)^{-1}`` at an anchor ``z0``; afterwards
    ``R(z) = (z I - Z_h)^{-1}`` by dense LU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .branched_surface import DomainError
from .measure_space import (
    CellBasis,
    DiscreteMeasure,
    OperatorMatrix,
    d_norm,
    segment_kernel,
    trajectory_segments,
    transfer_sparse,
    tv_operator_norm,
)
from .semiflow_model import SuspensionModel


class ConditioningError(RuntimeError):
    """``z I - Z_h`` is numerically singular; ``eigenvalue`` is the nearest eigenvalue of ``Z_h``."""

    def __init__(self, message: str, eigenvalue: complex, condition: float):
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.condition = condition


class AnchorError(RuntimeError):
    """The reference resolvent is singular to working tolerance."""


class PoleProximityError(RuntimeError):
    def __init__(self, message: str, eigenvalue: complex):
        super().__init__(message)
        self.eigenvalue = eigenvalue


@dataclass(frozen=True)
class ResolventConfig:
    """Quadrature and anchor settings.

    ``T_max`` is only used by the power formula, whose panel sum is
    truncated; when left as ``None`` it is the smallest horizon whose
    discarded tail is below ``tail_tol``.
    """

    T_max: float | None = None
    n_time_nodes: int = 16
    tail_tol: float = 1e-12
    reference_z: complex = 2.0
    cond_threshold: float = 1e12

    def __post_init__(self):
        if not (0 < self.tail_tol <= 1e-10):
            raise ValueError("tail_tol must lie in (0, 1e-10]")
        if self.n_time_nodes < 2:
            raise ValueError("n_time_nodes must be at least 2")

    def horizon(self, z: complex, n: int = 1) -> float:
        """Horizon whose tail ``int_T^inf t^(n-1) e^{-Re z t} dt / (n-1)!`` is below ``tail_tol``."""
        a = float(np.real(z))
        if self.T_max is not None:
            return float(self.T_max)
        T = -math.log(self.tail_tol * a) / a
        for _ in range(200):
            tail = sum((a * T) ** j / math.factorial(j) for j in range(n)) * math.exp(-a * T) / a
            if tail <= self.tail_tol:
                break
            T *= 1.1
        return T


# --------------------------------------------------------------------------
# evaluators


class PanelResolvent:
    """Meromorphic quadrature-path evaluator ``z -> R_q(z)``.

    Calling the object performs no half-plane check, so the same expression
    can be evaluated for ``Re z <= 0`` (its poles are where ``e^{zT}`` is an
    eigenvalue of ``M(T)``). Use :func:`resolvent_quadrature` for the
    checked entry point.
    """

    kind = "quad"

    def __init__(self, model: SuspensionModel, basis: CellBasis, config: ResolventConfig | None = None):
        self.model = model
        self.basis = basis
        self.config = config or ResolventConfig()
        self.T = model.roof.r_min / basis.ny
        self.M_T = transfer_sparse(model, basis, self.T)
        self.segments = trajectory_segments(model, basis, self.T)
        self.dim = basis.n_cells
        self.basis_id = basis.id
        self._eye = sp.identity(self.dim, format="csc")

    def kernel(self, z: complex, power: int = 0, n_nodes: int | None = None) -> sp.csc_matrix:
        """``int_0^T tau^power e^{-z tau} M(tau) dtau``."""
        n = n_nodes or self.config.n_time_nodes
        return segment_kernel(self.basis, self.segments, lambda tau: tau**power * np.exp(-z * tau), n, complex)

    def panel_operator(self, z: complex) -> sp.csc_matrix:
        return (self._eye - np.exp(-z * self.T) * self.M_T).tocsc()

    def _geometric(self, z: complex) -> np.ndarray:
        """Dense ``(I - e^{-zT} M_T)^{-1}``."""
        return sla.solve(self.panel_operator(z).toarray(), np.eye(self.dim, dtype=complex))

    def __call__(self, z: complex) -> np.ndarray:
        return (self.kernel(z) @ self._geometric(z)).astype(complex)

    def with_budget(self, z: complex) -> tuple[np.ndarray, float]:
        G = self._geometric(z)
        K = self.kernel(z)
        R = np.asarray(K @ G)
        K_half = self.kernel(z, n_nodes=max(2, self.config.n_time_nodes // 2))
        quad = tv_operator_norm(np.asarray((K - K_half) @ G))
        # the geometric sum is closed-form; only roundoff in the dense solve remains
        roundoff = 16 * np.finfo(float).eps * self.dim * tv_operator_norm(G) * tv_operator_norm(K.toarray())
        return R, quad + roundoff + self.config.tail_tol

    def singularity_indicator(self, z: complex, n_iter: int = 30) -> float:
        """Smallest singular value of ``I - e^{-zT} M_T`` (zero exactly at poles).

        Dense SVD for small bases, otherwise inverse iteration on ``A^H A``
        with a sparse LU of ``A``.
        """
        A = self.panel_operator(z)
        if self.dim <= 400:
            return float(sla.svdvals(A.toarray())[-1])
        try:
            lu = spla.splu(A)
        except RuntimeError:
            return 0.0
        v = self._probes[:, 0] / np.linalg.norm(self._probes[:, 0])
        sigma = np.inf
        for _ in range(n_iter):
            w = lu.solve(lu.solve(v), trans="H")
            nw = np.linalg.norm(w)
            if nw == 0 or not np.isfinite(nw):
                return 0.0
            new = 1.0 / np.sqrt(nw)
            v = w / nw
            if abs(new - sigma) <= 1e-12 * new:
                return float(new)
            sigma = new
        return float(sigma)

    @cached_property
    def _probes(self) -> np.ndarray:
        rng = np.random.default_rng(12345)
        return rng.standard_normal((self.dim, 4)) + 1j * rng.standard_normal((self.dim, 4))

    def fast_indicator(self, z: complex) -> float:
        """Cheap pole indicator: ``1 / max_k |(I - e^{-zT} M_T)^{-1} v_k|_1 * |v_k|_1``."""
        try:
            lu = spla.splu(self.panel_operator(z))
        except RuntimeError:  # exactly singular: z is a pole
            return 0.0
        y = lu.solve(self._probes)
        return float(1.0 / np.max(np.abs(y).sum(axis=0) / np.abs(self._probes).sum(axis=0)))


@dataclass
class GeneratorMatrix:
    matrix: np.ndarray
    reference_z: complex
    basis_id: str
    basis: CellBasis | None = field(default=None, repr=False)
    tag: str = "from reference resolvent"

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return sla.eigvals(self.matrix)

    def z_norm(self, mu: DiscreteMeasure) -> float:
        """``|Z_h mu|_D + |mu|_D``."""
        if self.basis is None:
            raise ValueError("generator carries no basis")
        zmu = DiscreteMeasure(mu.basis_id, self.matrix @ mu.coeffs)
        return d_norm(zmu, self.basis) + d_norm(mu, self.basis)


class GeneratorResolvent:
    """Generator-path evaluator ``z -> (z I - Z_h)^{-1}``."""

    kind = "gen"

    def __init__(self, gen: GeneratorMatrix, cond_threshold: float = 1e12):
        self.gen = gen
        self.dim = gen.matrix.shape[0]
        self.basis_id = gen.basis_id
        self.cond_threshold = cond_threshold

    def factor(self, z: complex):
        A = z * np.eye(self.dim) - self.gen.matrix
        lu, piv = sla.lu_factor(A)
        anorm = np.max(np.abs(A).sum(axis=0))
        rcond, info = sla.lapack.zgecon(lu.astype(complex), anorm, norm="1")
        cond = np.inf if rcond == 0 else 1.0 / rcond
        if not np.isfinite(cond) or cond > self.cond_threshold:
            ev = self.gen.eigenvalues
            near = complex(ev[np.argmin(np.abs(ev - z))])
            raise ConditioningError(
                f"z I - Z_h is ill conditioned at z={z:.6g} (cond {cond:.3g}); nearest eigenvalue {near:.8g}",
                near,
                cond,
            )
        return lu, piv

    def __call__(self, z: complex) -> np.ndarray:
        lu = self.factor(z)
        return sla.lu_solve(lu, np.eye(self.dim, dtype=complex))

    def solve(self, z: complex, rhs: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self.factor(z), rhs)

    def singularity_indicator(self, z: complex) -> float:
        return float(sla.svdvals(z * np.eye(self.dim) - self.gen.matrix)[-1])

    fast_indicator = singularity_indicator


class ContinuationResolvent:
    """Evaluator built on a single reference ``R(z0)`` via the continuation formula."""

    kind = "cont"

    def __init__(self, ref: OperatorMatrix, z0: complex | None = None):
        self.ref = ref
        self.z0 = complex(ref.params["z"] if z0 is None else z0)
        self.dim = ref.dim
        self.basis_id = ref.basis_id

    def __call__(self, z: complex) -> np.ndarray:
        return continuation_to(self.ref, z, self.z0).matrix

    def singularity_indicator(self, z: complex) -> float:
        eta = 1.0 / (self.z0 - z)
        return float(sla.svdvals(eta * np.eye(self.dim) - self.ref.matrix)[-1] / abs(eta))

    fast_indicator = singularity_indicator


# --------------------------------------------------------------------------
# public operations


def _params(z, **extra) -> dict:
    return {"z": complex(z), **extra}


def resolvent_quadrature(
    model: SuspensionModel,
    basis: CellBasis,
    z: complex,
    config: ResolventConfig | None = None,
    evaluator: PanelResolvent | None = None,
) -> OperatorMatrix:
    """Checked quadrature-path resolvent; ``params['error_budget']`` holds the budget."""
    if np.real(z) <= 0:
        raise DomainError("the Laplace integral diverges for Re z <= 0")
    ev = evaluator or PanelResolvent(model, basis, config)
    R, budget = ev.with_budget(z)
    return OperatorMatrix(R, "resolvent", basis.id, _params(z, path="quad", error_budget=budget, T_panel=ev.T))


def resolvent_power(
    model: SuspensionModel,
    basis: CellBasis,
    z: complex,
    n: int,
    config: ResolventConfig | None = None,
    evaluator: PanelResolvent | None = None,
) -> OperatorMatrix:
    """``(1/(n-1)!) int_0^inf t^(n-1) e^{-zt} M(t) dt`` summed panel by panel.

    With ``t = mT + tau`` the integrand on panel ``m`` is
    ``e^{-zmT} sum_j C(n-1, j) (mT)^(n-1-j) tau^j e^{-z tau} M(tau) M(T)^m``.
    Panels are summed until the bound on the remaining tail drops below
    ``tail_tol``. For ``n = 1`` this is the closed-form quadrature resolvent.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if np.real(z) <= 0:
        raise DomainError("the Laplace integral diverges for Re z <= 0")
    ev = evaluator or PanelResolvent(model, basis, config)
    if n == 1:
        return resolvent_quadrature(model, basis, z, config, ev)
    cfg = ev.config
    T = ev.T
    horizon = cfg.horizon(z, n)
    m_max = int(math.ceil(horizon / T))
    kernels = [ev.kernel(z, j) for j in range(n)]
    w = np.exp(-z * T)
    out = np.zeros((ev.dim, ev.dim), dtype=complex)
    Mp = np.eye(ev.dim, dtype=complex)
    for m in range(m_max + 1):
        Q = sum(math.comb(n - 1, j) * (m * T) ** (n - 1 - j) * kernels[j] for j in range(n))
        out += w**m * (Q @ Mp)
        Mp = ev.M_T @ Mp
    out /= math.factorial(n - 1)
    half = [ev.kernel(z, j, n_nodes=max(2, cfg.n_time_nodes // 2)) for j in range(n)]
    quad_est = sum(
        math.comb(n - 1, j) * tv_operator_norm((kernels[j] - half[j]).toarray())
        * sum(abs(w) ** m * (m * T) ** (n - 1 - j) for m in range(m_max + 1))
        for j in range(n)
    ) / math.factorial(n - 1)
    budget = quad_est + cfg.tail_tol
    return OperatorMatrix(out, "resolvent_power", basis.id, _params(z, n=n, path="quad", error_budget=budget, horizon=horizon))


def build_generator(
    model: SuspensionModel,
    basis: CellBasis,
    config: ResolventConfig | None = None,
    evaluator: PanelResolvent | None = None,
) -> GeneratorMatrix:
    """``Z_h = z0 I - R_q(z0)^{-1}`` at the configured anchor."""
    cfg = config or (evaluator.config if evaluator else ResolventConfig())
    ev = evaluator or PanelResolvent(model, basis, cfg)
    z0 = complex(cfg.reference_z)
    if z0.real <= 0:
        raise AnchorError("anchor must satisfy Re z0 > 0")
    R0 = ev(z0)
    cond = np.linalg.cond(R0, 1)
    if not np.isfinite(cond) or cond > cfg.cond_threshold:
        raise AnchorError(f"R(z0) is singular to tolerance (cond {cond:.3g}); choose a larger Re z0")
    Z = z0 * np.eye(ev.dim) - sla.inv(R0)
    if z0.imag == 0:
        Z = Z.real
    return GeneratorMatrix(Z, z0, basis.id, basis)


def resolvent_from_generator(gen: GeneratorMatrix, z: complex, cond_threshold: float = 1e12) -> OperatorMatrix:
    R = GeneratorResolvent(gen, cond_threshold)(z)
    return OperatorMatrix(R, "resolvent", gen.basis_id, _params(z, path="gen", anchor=gen.reference_z))


def continuation(ref: OperatorMatrix, eta: complex, z0: complex | None = None, pole_tol: float = 1e-6) -> OperatorMatrix:
    """``eta R(z0) (eta I - R(z0))^{-1}``, the resolvent at ``z0 - 1/eta``.

    Defined wherever ``eta`` avoids the spectrum of ``R(z0)``, in
    particular for ``Re(z0 - 1/eta) <= 0``.
    """
    z0 = complex(ref.params["z"] if z0 is None else z0)
    eta = complex(eta)
    R0 = ref.matrix
    ev = _eigvals_cached(ref)
    near = ev[np.argmin(np.abs(ev - eta))]
    if abs(near - eta) <= pole_tol:
        raise PoleProximityError(f"eta={eta:.8g} is within {pole_tol:g} of the eigenvalue {near:.8g} of R(z0)", complex(near))
    out = eta * sla.solve((eta * np.eye(ref.dim) - R0).T, R0.T).T
    z = z0 - 1.0 / eta
    return OperatorMatrix(out, "resolvent", ref.basis_id, _params(z, path="cont", anchor=z0, eta=eta))


def continuation_to(ref: OperatorMatrix, z: complex, z0: complex | None = None, pole_tol: float = 1e-6) -> OperatorMatrix:
    """Continuation evaluated at a target ``z`` (``eta = 1 / (z0 - z)``)."""
    z0 = complex(ref.params["z"] if z0 is None else z0)
    if z == z0:
        return OperatorMatrix(ref.matrix.copy(), "resolvent", ref.basis_id, _params(z, path="cont", anchor=z0))
    return continuation(ref, 1.0 / (z0 - z), z0, pole_tol)


_EIG_CACHE: dict[int, tuple[OperatorMatrix, np.ndarray]] = {}


def _eigvals_cached(ref: OperatorMatrix) -> np.ndarray:
    hit = _EIG_CACHE.get(id(ref))
    if hit is None or hit[0] is not ref:
        _EIG_CACHE.clear()
        hit = (ref, sla.eigvals(ref.matrix))
        _EIG_CACHE[id(ref)] = hit
    return hit[1]


def pseudo_resolvent_residual(R_z: np.ndarray, R_zeta: np.ndarray, z: complex, zeta: complex) -> float:
    """``|(z - zeta) R(zeta) R(z) - R(zeta) + R(z)|_TV``."""
    return tv_operator_norm((z - zeta) * (R_zeta @ R_z) - R_zeta + R_z)
