"""Suspension semiflows over branched expanding interval maps.

Points of the suspension are stored in normalised strip coordinates
``(x, s)`` with ``s = y / r(x)`` in ``[0, 1)``, so every strip is the
rectangle ``cl(I_j) x [0, 1]`` whatever the roof. The flow rises at unit
speed in the physical height ``y``, i.e. with speed ``1 / r(x)`` in ``s``;
on reaching the roof the point re-enters at ``(f(x), 0)``. Evaluation is
exact per segment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .branched_surface import (
    BranchedSurfaceAtlas,
    Chart,
    DomainError,
    FoliationSpec,
    Rect,
    Subchart,
    SurfacePoint,
    TransitionMap,
    TriangularMap,
    UnivariateMap,
    IDENTITY_MAP,
)

ENDPOINT_TOL = 1e-13
MAX_ROOF_DEGREE = 4


class ModelError(ValueError):
    """Malformed model description."""


class SamplingError(RuntimeError):
    """Not enough valid orbit samples to fit the expansion rate."""


@dataclass(frozen=True)
class Branch:
    interval: tuple[float, float]
    coeffs: tuple[float, ...]

    def __call__(self, x):
        return P.polyval(x, self.coeffs)

    def derivative(self, x):
        return P.polyval(x, P.polyder(self.coeffs))

    def second_derivative(self, x):
        return P.polyval(x, P.polyder(self.coeffs, 2)) if len(self.coeffs) > 2 else np.zeros_like(np.asarray(x, float))


@dataclass(frozen=True)
class BranchedMap1D:
    """Piecewise polynomial interval map; shared endpoints use the left branch."""

    branches: tuple[Branch, ...]
    margin: float = 1e-3

    def __post_init__(self):
        ordered = tuple(sorted(self.branches, key=lambda b: b.interval[0]))
        object.__setattr__(self, "branches", ordered)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @cached_property
    def breakpoints(self) -> np.ndarray:
        return np.array([b.interval[0] for b in self.branches] + [self.branches[-1].interval[1]])

    def branch_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        his = np.array([b.interval[1] for b in self.branches])
        return np.minimum(np.searchsorted(his, x, side="left"), len(self.branches) - 1)

    def _piecewise(self, x, attr):
        x = np.asarray(x, dtype=float)
        idx = self.branch_index(x)
        out = np.empty_like(x)
        for j, b in enumerate(self.branches):
            m = idx == j
            if np.any(m):
                out[m] = getattr(b, attr)(x[m])
        return out

    def __call__(self, x):
        return self._piecewise(x, "__call__")

    def derivative(self, x):
        return self._piecewise(x, "derivative")

    def second_derivative(self, x):
        return self._piecewise(x, "second_derivative")

    def inverse_branch(self, j: int) -> UnivariateMap:
        b = self.branches[j]
        return UnivariateMap(b.coeffs, "poly_inverse", b.interval)

    def near_endpoint(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        bp = self.breakpoints
        return np.min(np.abs(x[..., None] - bp), axis=-1) <= ENDPOINT_TOL

    def issues(self, n_check: int = 2001) -> list[str]:
        out = []
        lo, hi = self.breakpoints[0], self.breakpoints[-1]
        if abs(lo) > 1e-12 or abs(hi - 1) > 1e-12:
            out.append("branch intervals must partition [0, 1]")
        for a, b in zip(self.branches[:-1], self.branches[1:]):
            if abs(a.interval[1] - b.interval[0]) > 1e-12:
                out.append(f"gap or overlap between branches at {a.interval[1]}")
        for j, b in enumerate(self.branches):
            xs = np.linspace(*b.interval, n_check)
            d = b.derivative(xs)
            if not (np.all(d > 0) or np.all(d < 0)):
                out.append(f"branch {j} is not monotone")
            if np.min(np.abs(d)) < 1 + self.margin:
                out.append(f"branch {j} is not expanding: min |f'| = {np.min(np.abs(d)):.6g}")
            ends = sorted([float(b(b.interval[0])), float(b(b.interval[1]))])
            if abs(ends[0]) > 1e-9 or abs(ends[1] - 1) > 1e-9:
                out.append(f"branch {j} is not full: image [{ends[0]:.6g}, {ends[1]:.6g}]")
        return out


@dataclass(frozen=True)
class RoofFunction:
    """Positive piecewise polynomial roof, pieces aligned with branch intervals."""

    pieces: tuple[Branch, ...]

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(sorted(self.pieces, key=lambda b: b.interval[0])))

    def _index(self, x):
        his = np.array([b.interval[1] for b in self.pieces])
        return np.minimum(np.searchsorted(his, np.asarray(x, float), side="left"), len(self.pieces) - 1)

    def _piecewise(self, x, attr):
        x = np.asarray(x, dtype=float)
        idx = self._index(x)
        out = np.empty_like(x)
        for j, b in enumerate(self.pieces):
            m = idx == j
            if np.any(m):
                out[m] = getattr(b, attr)(x[m])
        return out

    def __call__(self, x):
        return self._piecewise(x, "__call__")

    def derivative(self, x):
        return self._piecewise(x, "derivative")

    def integral(self, a, b) -> np.ndarray:
        """Exact integral of ``r`` over ``[a, b]`` (vectorised; each interval inside one piece)."""
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        idx = self._index(0.5 * (a + b))
        out = np.empty(np.broadcast(a, b).shape)
        for j, piece in enumerate(self.pieces):
            m = idx == j
            if np.any(m):
                anti = P.polyint(piece.coeffs)
                out[m] = P.polyval(b[m], anti) - P.polyval(a[m], anti)
        return out

    @cached_property
    def r_min(self) -> float:
        xs = np.concatenate([np.linspace(*p.interval, 4001) for p in self.pieces])
        return float(np.min(self(xs)))

    @cached_property
    def r_max(self) -> float:
        xs = np.concatenate([np.linspace(*p.interval, 4001) for p in self.pieces])
        return float(np.max(self(xs)))

    @property
    def is_constant(self) -> bool:
        return all(len(np.trim_zeros(np.asarray(p.coeffs[1:]), "b")) == 0 for p in self.pieces) and (
            len({float(p.coeffs[0]) for p in self.pieces}) == 1
        )

    def issues(self) -> list[str]:
        out = []
        for j, p in enumerate(self.pieces):
            if len(p.coeffs) - 1 > MAX_ROOF_DEGREE:
                out.append(f"roof piece {j} has degree > {MAX_ROOF_DEGREE}")
        if self.r_min <= 0:
            out.append(f"roof is not positive: r_min = {self.r_min:.6g}")
        return out


@dataclass(frozen=True)
class JacobianSplit:
    a_t: float
    b_t: float
    valid: bool

    @property
    def inverse_matrix(self) -> np.ndarray:
        """``(D flow)^{-1}`` in the (V, X) basis."""
        return np.array([[self.a_t, 0.0], [self.b_t, 1.0]])


@dataclass
class ExpansionReport:
    lambda_hat: float
    C_hat: float
    passed: bool
    b_bound: float
    n_valid: int
    lambda_target: float
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "lambda_hat": self.lambda_hat,
            "C_hat": self.C_hat,
            "pass": self.passed,
            "b_bound": self.b_bound,
            "n_valid": self.n_valid,
            "lambda_target": self.lambda_target,
            "tolerance": self.tolerance,
        }


@dataclass(frozen=True)
class SuspensionModel:
    """Suspension of ``base`` under ``roof``.

    Parameters
    ----------
    base, roof
        The branched interval map and the return-time function.
    lambda_target
        Claimed expansion exponent, checked by :func:`verify_expansion`.
    delta
        Minimal leaf length of the foliation.
    band
        Half-height of the chart straddling the branch line.
    """

    base: BranchedMap1D
    roof: RoofFunction
    lambda_target: float = 0.0
    delta: float = 0.1
    band: float = 0.1
    name: str = "model"

    @property
    def n_strips(self) -> int:
        return self.base.n_branches

    def issues(self) -> list[str]:
        out = self.base.issues() + self.roof.issues()
        bb = self.base.breakpoints
        rb = np.array([p.interval[0] for p in self.roof.pieces] + [self.roof.pieces[-1].interval[1]])
        if len(bb) != len(rb) or np.max(np.abs(bb - rb)) > 1e-12:
            out.append("roof pieces are not aligned with branch intervals")
        if self.delta <= 0:
            out.append("delta must be positive")
        return out

    # ---- flow
    def flow_arrays(self, x, s, t, max_returns: int = 100000):
        """Vectorised flow in strip coordinates; returns ``(x, s, n_returns)``."""
        x, s, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        shape = x.shape
        x, s, t = (np.array(v, copy=True).reshape(-1) for v in (x, s, t))
        if np.any(t < 0):
            raise DomainError("flow time must be non-negative")
        n = np.zeros(x.shape, dtype=np.int64)
        active = np.ones(x.shape, dtype=bool)
        for _ in range(max_returns):
            rem = (1.0 - s[active]) * self.roof(x[active])
            hit = t[active] >= rem
            if not hit.any():
                break
            idx = np.flatnonzero(active)[hit]
            t[idx] -= rem[hit]
            x[idx] = self.base(x[idx])
            s[idx] = 0.0
            n[idx] += 1
            active[:] = False
            active[idx] = True
        s = s + t / self.roof(x)
        return x.reshape(shape), s.reshape(shape), n.reshape(shape)

    def to_strip(self, p: SurfacePoint) -> tuple[float, float]:
        """Strip coordinates of a surface point given in any chart of the induced atlas."""
        J = self.n_strips
        if 0 <= p.chart < J:
            x, s = p.coords
            lo, hi = self.base.branches[p.chart].interval
            if not (lo - 1e-12 <= x <= hi + 1e-12):
                raise DomainError(f"x = {x} outside strip {p.chart}")
            return float(x), float(s)
        if p.chart == J:
            xp, sp = p.coords
            if sp >= 0:
                return float(xp), float(sp)
            if p.sheet is None:
                raise DomainError("points below the branch line need a sheet")
            j = (p.sheet - J) // J
            x = float(self.base.inverse_branch(j)(np.array([xp]))[0])
            return x, 1.0 + float(sp)
        raise DomainError(f"unknown chart {p.chart}")

    def strip_point(self, x: float, s: float) -> SurfacePoint:
        j = int(self.base.branch_index(np.array([x]))[0])
        return SurfacePoint(j, (float(x), float(s)), j)

    # ---- Jacobian
    def jacobian_arrays(self, x, s, t):
        """Flow together with the (V, X) split of the inverse Jacobian.

        Returns ``(x_t, s_t, a_t, b_t, valid)``. With ``D`` the derivative of
        the iterated base map along the orbit, ``a_t = 1 / D`` and ``b_t`` is
        the flow-direction component produced by the moving roof height.
        """
        x0, s0, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        shape = x0.shape
        x0, s0, t = (np.array(v, copy=True).reshape(-1) for v in (x0, s0, t))
        xk = x0.copy(); sk = s0.copy()
        deriv = np.ones_like(xk)
        acc = np.zeros_like(xk)
        valid = ~self.base.near_endpoint(xk)
        for _ in range(100000):
            rem = (1.0 - sk) * self.roof(xk)
            hit = t >= rem
            if not hit.any():
                break
            acc[hit] += self.roof.derivative(xk[hit]) * deriv[hit]
            deriv[hit] *= self.base.derivative(xk[hit])
            t[hit] -= rem[hit]
            xk[hit] = self.base(xk[hit])
            sk[hit] = 0.0
            valid[hit] &= ~self.base.near_endpoint(xk[hit])
        sk = sk + t / self.roof(xk)
        beta = s0 * self.roof.derivative(x0) - acc - sk * self.roof.derivative(xk) * deriv
        return tuple(v.reshape(shape) for v in (xk, sk, 1.0 / deriv, -beta / deriv, valid))

    # ---- atlas
    @cached_property
    def atlas(self) -> BranchedSurfaceAtlas:
        return induced_atlas(self)

    # ---- serialisation
    def to_json(self) -> dict:
        def poly(b):
            return {"interval": [repr(float(v)) for v in b.interval], "poly_coeffs": [repr(float(c)) for c in b.coeffs]}

        return {
            "name": self.name,
            "base": {"branches": [poly(b) for b in self.base.branches]},
            "roof": {"pieces": [poly(p) for p in self.roof.pieces]},
            "lambda_target": repr(float(self.lambda_target)),
            "delta": repr(float(self.delta)),
        }


def model_from_json(data: dict) -> SuspensionModel:
    """Parse a model document (numbers or decimal strings accepted)."""
    try:
        branches = tuple(
            Branch(tuple(float(v) for v in b["interval"]), tuple(float(c) for c in b["poly_coeffs"]))
            for b in data["base"]["branches"]
        )
        pieces = tuple(
            Branch(tuple(float(v) for v in p["interval"]), tuple(float(c) for c in p["poly_coeffs"]))
            for p in data["roof"]["pieces"]
        )
        return SuspensionModel(
            BranchedMap1D(branches),
            RoofFunction(pieces),
            lambda_target=float(data.get("lambda_target", 0.0)),
            delta=float(data.get("delta", 0.1)),
            name=str(data.get("name", "model")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed model document: {exc}") from exc


def load_model(path) -> SuspensionModel:
    with open(path) as fh:
        try:
            return model_from_json(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ModelError(f"invalid JSON: {exc}") from exc


def save_model(model: SuspensionModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=2)


def bundled_model(kind: str = "constant") -> SuspensionModel:
    """Reference doubling suspension: ``"constant"`` or ``"perturbed"`` roof."""
    name = {"constant": "doubling_constant.json", "perturbed": "doubling_perturbed.json"}[kind]
    with resources.files("semigroup_spectra.models").joinpath(name).open() as fh:
        return model_from_json(json.load(fh))


def linear_full_branch_model(slope: int, roof: float = 1.0, lambda_target: float | None = None) -> SuspensionModel:
    """``x -> slope * x mod 1`` under a constant roof (``slope = 1`` gives the identity)."""
    k = int(slope)
    branches = tuple(Branch((j / k, (j + 1) / k), (-float(j), float(k))) for j in range(k))
    pieces = tuple(Branch(b.interval, (float(roof),)) for b in branches)
    lam = np.log(k) if lambda_target is None else lambda_target
    return SuspensionModel(BranchedMap1D(branches), RoofFunction(pieces), lambda_target=float(lam))


# --------------------------------------------------------------------------
# operations


def flow(model: SuspensionModel, p: SurfacePoint, t: float) -> SurfacePoint:
    """Image of ``p`` after time ``t``, returned in its strip chart."""
    if t < 0:
        raise DomainError("flow time must be non-negative")
    x, s = model.to_strip(p)
    xt, st, _ = model.flow_arrays(np.array([x]), np.array([s]), t)
    return model.strip_point(float(xt[0]), float(st[0]))


def jacobian_split(model: SuspensionModel, p: SurfacePoint, t: float) -> JacobianSplit:
    x, s = model.to_strip(p)
    _, _, a, b, v = model.jacobian_arrays(np.array([x]), np.array([s]), t)
    return JacobianSplit(float(a[0]), float(b[0]), bool(v[0]))


def sample_points(model: SuspensionModel, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    # row-major fill makes the first n samples of a 2n draw identical
    u = np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 2))
    return u[:, 0].copy(), u[:, 1].copy()


def verify_expansion(
    model: SuspensionModel,
    n_samples: int = 2000,
    t_grid: Sequence[float] | None = None,
    tolerance: float = 0.01,
    seed: int = 0,
) -> ExpansionReport:
    """Fit ``sup_p A_t <= C exp(-lambda t)`` over sampled points and times.

    ``lambda_hat`` is the least-squares slope of ``-log sup_p A_t`` against
    ``t``; ``C_hat`` is the smallest constant making the bound hold on the
    grid. The uniform bound on ``|B_t|`` is reported alongside.
    """
    t_grid = np.arange(0.0, 20.0 + 1e-12, 0.25) if t_grid is None else np.asarray(t_grid, float)
    x, s = sample_points(model, n_samples, seed)
    sup_a = np.empty(len(t_grid))
    b_bound = 0.0
    n_valid = n_samples
    for k, t in enumerate(t_grid):
        _, _, a, b, valid = model.jacobian_arrays(x, s, t)
        n_valid = min(n_valid, int(valid.sum()))
        if not valid.any():
            raise SamplingError(f"no valid orbit samples at t = {t}")
        sup_a[k] = np.max(a[valid])
        b_bound = max(b_bound, float(np.max(np.abs(b[valid]))))
    if n_valid < 10:
        raise SamplingError(f"only {n_valid} valid samples")
    logs = np.log(sup_a)
    slope = np.polyfit(t_grid, logs, 1)[0]
    lam = float(-slope)
    c_hat = float(np.max(sup_a * np.exp(lam * t_grid)))
    passed = bool(lam >= model.lambda_target - tolerance)
    return ExpansionReport(lam, c_hat, passed, b_bound, n_valid, model.lambda_target, tolerance)


def poincare_section(model: SuspensionModel) -> BranchedMap1D:
    """The base map, i.e. the first-return map to the section ``s = 0``."""
    return model.base


def first_return(model: SuspensionModel, x) -> tuple[np.ndarray, np.ndarray]:
    """First return of ``(x, 0)`` to the section by flowing; returns ``(x', tau)``."""
    x = np.asarray(x, dtype=float)
    tau = model.roof(x)
    xr, sr, _ = model.flow_arrays(x, np.zeros_like(x), tau)
    return xr, tau


# --------------------------------------------------------------------------
# induced atlas


def induced_atlas(model: SuspensionModel) -> BranchedSurfaceAtlas:
    """Flow-box atlas: one strip chart per branch plus one chart across the branch line.

    Strip ``j`` has coordinates ``cl(I_j) x [0, 1 - band/2]``. The branch
    chart has coordinates ``[0, 1] x [-band, band]``; its sheet ``(j, k)``
    holds the top band of strip ``j`` above ``f_j^{-1}(I_k)`` (mapped by
    ``(x, s) -> (f_j(x), s - 1)``) together with the bottom band of strip ``k``.
    """
    J = model.n_strips
    eps = model.band
    top = 1.0 - eps / 2
    B = J
    intervals = [b.interval for b in model.base.branches]

    def sub_id(j, k):
        return J + j * J + k

    charts = [Chart(j, (j,), Rect(intervals[j][0], intervals[j][1], 0.0, top)) for j in range(J)]
    charts.append(Chart(B, tuple(sub_id(j, k) for j in range(J) for k in range(J)), Rect(0.0, 1.0, -eps, eps)))
    subs = [Subchart(j, j, (Rect(intervals[j][0], intervals[j][1], 0.0, top),)) for j in range(J)]
    for j in range(J):
        for k in range(J):
            subs.append(Subchart(sub_id(j, k), B, (Rect(intervals[k][0], intervals[k][1], -eps, eps),)))

    trans: list[TransitionMap] = []
    for j in range(J):
        br = model.base.branches[j]
        inv = model.base.inverse_branch(j)
        fwd = UnivariateMap(br.coeffs, "poly", br.interval)
        for k in range(J):
            lo, hi = intervals[k]
            pre = sorted(inv(np.array([lo, hi])).tolist())
            # top band of strip j <-> lower half of sheet (j, k)
            trans.append(TransitionMap(j, B, Rect(pre[0], pre[1], 1 - eps, top), TriangularMap(fwd, (-1.0,), (1.0,)), j, sub_id(j, k)))
            trans.append(TransitionMap(B, j, Rect(lo, hi, -eps, -eps / 2), TriangularMap(inv, (1.0,), (1.0,)), sub_id(j, k), j))
            # bottom band of strip k <-> upper half of sheet (j, k)
            trans.append(TransitionMap(k, B, Rect(lo, hi, 0.0, eps), IDENTITY_MAP, k, sub_id(j, k)))
            trans.append(TransitionMap(B, k, Rect(lo, hi, 0.0, eps), IDENTITY_MAP, sub_id(j, k), k))
            # sheets over the same bottom band coincide in the upper half
            for j2 in range(J):
                if j2 != j:
                    trans.append(TransitionMap(B, B, Rect(lo, hi, 0.0, eps), IDENTITY_MAP, sub_id(j, k), sub_id(j2, k)))
        # the lower half of sheet j is connected across the interval endpoints
        for k in range(J - 1):
            c = intervals[k][1]
            line = Rect(c, c, -eps, 0.0)
            trans.append(TransitionMap(B, B, line, IDENTITY_MAP, sub_id(j, k), sub_id(j, k + 1)))
            trans.append(TransitionMap(B, B, line, IDENTITY_MAP, sub_id(j, k + 1), sub_id(j, k)))

    orient = {c.id: 1 for c in charts}
    for j, br in enumerate(model.base.branches):
        if br.derivative(np.mean(br.interval)) < 0:
            orient[j] = -1
    fol = FoliationSpec(delta=model.delta, orientation=orient, label_axis={c.id: 1 for c in charts})
    return BranchedSurfaceAtlas(charts, subs, trans, fol)
