"""Discrete measures on a suspension surface and Ulam transfer matrices.

Measures are stored as complex cell masses on a :class:`CellBasis`. The
transfer matrix ``M(t)`` is assembled by flowing ``q x q`` subcell centres of
each cell and depositing their masses. Time integrals of the transfer family
(the averaging operator, Laplace-type kernels) are computed exactly per
sample by splitting each trajectory into cell-residence segments.

Derivative measures live on the cell edges: ``D_V`` on the vertical edges
(strip boundaries included) and ``D_X`` on the horizontal edges, with the
branch line represented by the common refinement of the bottom-cell
partition and the images of the top-cell partition.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import leggauss

from .branched_surface import DomainError
from .semiflow_model import SuspensionModel


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class DiscreteMeasure:
    basis_id: str
    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs))

    def pair_one(self) -> complex:
        """The pairing with the constant function 1 (total mass)."""
        return complex(np.sum(self.coeffs))

    def density(self, basis: "CellBasis") -> np.ndarray:
        return self.coeffs / basis.areas

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        _same_basis(self, other)
        return DiscreteMeasure(self.basis_id, self.coeffs + other.coeffs)

    def __sub__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        _same_basis(self, other)
        return DiscreteMeasure(self.basis_id, self.coeffs - other.coeffs)

    def __rmul__(self, c) -> "DiscreteMeasure":
        return DiscreteMeasure(self.basis_id, c * self.coeffs)


def _same_basis(a: DiscreteMeasure, b: DiscreteMeasure) -> None:
    if a.basis_id != b.basis_id:
        raise ValueError(f"basis mismatch: {a.basis_id} vs {b.basis_id}")


@dataclass(frozen=True)
class OperatorMatrix:
    """Dense matrix with provenance (``transfer``, ``resolvent``, ``projector``, ...)."""

    matrix: np.ndarray
    provenance: str
    basis_id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("operator matrices are square")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def tv_norm(self) -> float:
        return tv_operator_norm(self.matrix)

    def apply(self, mu: DiscreteMeasure) -> DiscreteMeasure:
        if mu.basis_id != self.basis_id:
            raise ValueError(f"basis mismatch: {mu.basis_id} vs {self.basis_id}")
        return DiscreteMeasure(self.basis_id, self.matrix @ mu.coeffs)


def tv_operator_norm(A) -> float:
    """TV -> TV operator norm: the maximal column l1 norm."""
    if sp.issparse(A):
        return float(np.max(np.asarray(abs(A).sum(axis=0)).ravel()))
    return float(np.max(np.sum(np.abs(A), axis=0)))


# --------------------------------------------------------------------------
# cell basis


class CellBasis:
    """``nx x ny`` cells per strip in normalised coordinates ``(x, s)``.

    Global index ``j * nx * ny + ix * ny + iy`` for strip ``j``, column
    ``ix`` and row ``iy``. ``areas`` is the reference (two-dimensional
    Hausdorff) measure of each cell, ``chart_areas`` its Lebesgue measure in
    chart coordinates.
    """

    def __init__(self, model: SuspensionModel, nx: int, ny: int, q: int = 8):
        if nx < 1 or ny < 1 or q < 1:
            raise ValueError("grid sizes must be positive")
        self.model = model
        self.nx, self.ny, self.q = int(nx), int(ny), int(q)
        self.n_strips = model.n_strips
        self.n_cells = self.n_strips * self.nx * self.ny
        self.id = f"{model.name}:{nx}x{ny}:q{q}"
        iv = np.array([b.interval for b in model.base.branches])
        self.strip_lo = iv[:, 0]
        self.strip_hi = iv[:, 1]
        self.dx_strip = (iv[:, 1] - iv[:, 0]) / self.nx
        self.ds = 1.0 / self.ny
        j, ix, iy = np.meshgrid(np.arange(self.n_strips), np.arange(self.nx), np.arange(self.ny), indexing="ij")
        self.cell_strip = j.ravel()
        self.cell_ix = ix.ravel()
        self.cell_iy = iy.ravel()
        self.cell_x0 = self.strip_lo[self.cell_strip] + self.cell_ix * self.dx_strip[self.cell_strip]
        self.cell_dx = self.dx_strip[self.cell_strip]
        self.cell_s0 = self.cell_iy * self.ds
        self.chart_areas = self.cell_dx * self.ds
        self.areas = model.roof.integral(self.cell_x0, self.cell_x0 + self.cell_dx) * self.ds
        gx, gw = leggauss(16)
        mid = self.cell_x0 + 0.5 * self.cell_dx
        nodes = mid[:, None] + 0.5 * self.cell_dx[:, None] * gx[None, :]
        # column mean of 1/r: the coefficient of the flow direction X = (1/r) d/ds
        self.kappa = (0.5 * gw[None, :] / model.roof(nodes)).sum(axis=1)

    def index(self, j, ix, iy) -> np.ndarray:
        return (np.asarray(j) * self.nx + np.asarray(ix)) * self.ny + np.asarray(iy)

    def locate(self, x, s) -> np.ndarray:
        """Cell index of points in strip coordinates (left branch at shared endpoints)."""
        x = np.asarray(x, float)
        s = np.asarray(s, float)
        j = self.model.base.branch_index(x)
        ix = np.clip(np.floor((x - self.strip_lo[j]) / self.dx_strip[j]).astype(np.int64), 0, self.nx - 1)
        iy = np.clip(np.floor(s * self.ny).astype(np.int64), 0, self.ny - 1)
        return self.index(j, ix, iy)

    @cached_property
    def samples(self):
        """Subcell centres ``(x, s)``, owning cell and mass weights (sum 1 per cell)."""
        q = self.q
        a, b = np.meshgrid(np.arange(q), np.arange(q), indexing="ij")
        a = a.ravel(); b = b.ravel()
        col = np.repeat(np.arange(self.n_cells), q * q)
        x0 = self.cell_x0[col] + a[None, :].repeat(self.n_cells, 0).ravel() * self.cell_dx[col] / q
        x1 = x0 + self.cell_dx[col] / q
        s = self.cell_s0[col] + (b[None, :].repeat(self.n_cells, 0).ravel() + 0.5) * self.ds / q
        x = 0.5 * (x0 + x1)
        w = self.model.roof.integral(x0, x1)
        w = w / np.bincount(col, w, minlength=self.n_cells)[col]
        return x, s, col, w

    def uniform_measure(self) -> DiscreteMeasure:
        """Normalised reference measure."""
        return DiscreteMeasure(self.id, self.areas / self.areas.sum())

    def measure_from_density(self, density: np.ndarray) -> DiscreteMeasure:
        return DiscreteMeasure(self.id, np.asarray(density) * self.areas)

    def centres(self) -> tuple[np.ndarray, np.ndarray]:
        return self.cell_x0 + 0.5 * self.cell_dx, self.cell_s0 + 0.5 * self.ds


# --------------------------------------------------------------------------
# transfer matrices


def _check_time(t: float) -> None:
    if t < 0:
        raise DomainError("transfer time must be non-negative")


def transfer_sparse(model: SuspensionModel, basis: CellBasis, t: float) -> sp.csc_matrix:
    """Ulam matrix ``M(t)`` in compressed sparse column form."""
    _check_time(t)
    x, s, col, w = basis.samples
    xt, st, _ = model.flow_arrays(x, s, t)
    M = sp.csc_matrix((w, (basis.locate(xt, st), col)), shape=(basis.n_cells, basis.n_cells))
    M.sum_duplicates()
    return M


def assemble_transfer(model: SuspensionModel, basis: CellBasis, t: float) -> OperatorMatrix:
    """Dense Ulam transfer matrix; column ``c`` holds the image masses of cell ``c``."""
    M = transfer_sparse(model, basis, t).toarray()
    return OperatorMatrix(M, "transfer", basis.id, {"t": float(t), "q": basis.q})


@dataclass
class Segments:
    """Cell-residence segments of the sampled trajectories over ``[0, horizon]``."""

    sample: np.ndarray
    cell: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    weight: np.ndarray
    col: np.ndarray


def trajectory_segments(model: SuspensionModel, basis: CellBasis, horizon: float) -> Segments:
    """Split each sample trajectory on ``[0, horizon]`` at its cell crossings."""
    x, s, col, w = basis.samples
    n = len(x)
    cur_x = x.copy(); cur_s = s.copy(); cur_t = np.zeros(n)
    active = np.arange(n)
    out_sample, out_cell, out_t0, out_t1 = [], [], [], []
    ny = basis.ny
    while active.size:
        xa, sa, ta = cur_x[active], cur_s[active], cur_t[active]
        cell = basis.locate(xa, sa)
        iy = np.clip(np.floor(sa * ny + 1e-12).astype(np.int64), 0, ny - 1)
        s_next = (iy + 1) / ny
        r = model.roof(xa)
        t_exit = ta + (s_next - sa) * r
        t_end = np.minimum(t_exit, horizon)
        keep = t_end > ta
        out_sample.append(active[keep]); out_cell.append(cell[keep]); out_t0.append(ta[keep]); out_t1.append(t_end[keep])
        go = t_exit < horizon
        idx = active[go]
        top = iy[go] == ny - 1
        new_x = xa[go].copy()
        new_s = s_next[go].copy()
        new_x[top] = model.base(new_x[top])
        new_s[top] = 0.0
        cur_x[idx] = new_x; cur_s[idx] = new_s; cur_t[idx] = t_exit[go]
        active = idx
    smp = np.concatenate(out_sample)
    return Segments(smp, np.concatenate(out_cell), np.concatenate(out_t0), np.concatenate(out_t1), w[smp], col[smp])


def segment_kernel(
    basis: CellBasis,
    segs: Segments,
    weight_fn: Callable[[np.ndarray], np.ndarray],
    n_quad: int = 16,
    dtype=float,
) -> sp.csc_matrix:
    """``sum over segments of int_{t0}^{t1} weight_fn(tau) dtau`` deposited at (cell, col).

    The integral over each residence segment uses ``n_quad``-point
    Gauss-Legendre quadrature, which is exact for polynomial weights of
    degree below ``2 n_quad``.
    """
    gx, gw = leggauss(n_quad)
    mid = 0.5 * (segs.t0 + segs.t1)
    half = 0.5 * (segs.t1 - segs.t0)
    vals = np.zeros(len(mid), dtype=dtype)
    for xg, wg in zip(gx, gw):
        vals = vals + wg * weight_fn(mid + half * xg)
    vals = vals * half * segs.weight
    K = sp.csc_matrix((vals, (segs.cell, segs.col)), shape=(basis.n_cells, basis.n_cells))
    K.sum_duplicates()
    return K


def average_operator(model: SuspensionModel, basis: CellBasis, s: float, n_quad: int = 16) -> OperatorMatrix:
    """``(1/s) int_0^s M(t) dt`` integrated exactly over the cell-residence segments."""
    if s <= 0:
        raise DomainError("averaging window must be positive")
    segs = trajectory_segments(model, basis, s)
    K = segment_kernel(basis, segs, lambda tau: np.ones_like(tau), n_quad)
    return OperatorMatrix(K.toarray() / s, "average", basis.id, {"s": float(s), "n_quad": n_quad})


# --------------------------------------------------------------------------
# norms and derivatives


def tv_norm(mu: DiscreteMeasure) -> float:
    return float(np.sum(np.abs(mu.coeffs)))


class DerivativeOperators:
    """Sparse maps from cell masses to edge masses of ``D_V mu`` and ``D_X mu``.

    For a test function ``eta`` on the edges the discrete directional
    derivatives are ``(V eta)_c = (eta_right - eta_left) / dx`` and
    ``(X eta)_c = kappa_c (eta_top - eta_bottom) / ds``; on the branch line the
    top edge value of a cell is the average of ``eta`` over the image of that
    edge. With these conventions ``mu(U eta) = -D_U mu(eta)`` holds exactly
    for ``eta`` vanishing on the boundary.
    """

    def __init__(self, basis: CellBasis):
        self.basis = basis
        self._build_v()
        self._build_x()

    def _build_v(self):
        b = self.basis
        rows, cols, vals = [], [], []
        # edge e = (j, ie, iy) with ie in 0..nx, vertical edge at x0_j + ie * dx
        n_e = b.nx + 1
        self.v_edge_x = np.empty(b.n_strips * n_e * b.ny)
        self.v_edge_s = np.empty_like(self.v_edge_x)
        self.v_edge_boundary = np.zeros(len(self.v_edge_x), dtype=bool)
        for j in range(b.n_strips):
            for ie in range(n_e):
                for_iy = np.arange(b.ny)
                e = (j * n_e + ie) * b.ny + for_iy
                self.v_edge_x[e] = b.strip_lo[j] + ie * b.dx_strip[j]
                self.v_edge_s[e] = (for_iy + 0.5) * b.ds
                if ie == 0 or ie == b.nx:
                    self.v_edge_boundary[e] = True
                if ie < b.nx:  # cell to the right
                    c = b.index(j, ie, for_iy)
                    rows.append(e); cols.append(c); vals.append(b.ds / b.chart_areas[c])
                if ie > 0:  # cell to the left
                    c = b.index(j, ie - 1, for_iy)
                    rows.append(e); cols.append(c); vals.append(-b.ds / b.chart_areas[c])
        self.D_V = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(self.v_edge_x), b.n_cells),
        )

    def _build_x(self):
        b = self.basis
        model = b.model
        rows, cols, vals = [], [], []
        # interior horizontal edges: (j, ix, ie) with ie in 1..ny-1, between rows ie-1 and ie
        n_int = b.n_strips * b.nx * (b.ny - 1)
        e = 0
        j, ix, ie = np.meshgrid(np.arange(b.n_strips), np.arange(b.nx), np.arange(1, b.ny), indexing="ij")
        j = j.ravel(); ix = ix.ravel(); ie = ie.ravel()
        e_idx = np.arange(n_int)
        up = b.index(j, ix, ie)
        down = b.index(j, ix, ie - 1)
        rows += [e_idx, e_idx]
        cols += [up, down]
        vals += [b.kappa[up] * b.cell_dx[up] / b.chart_areas[up], -b.kappa[down] * b.cell_dx[down] / b.chart_areas[down]]
        self.x_edge_kind = ["interior"] * n_int
        # branch line: common refinement of bottom cells and images of top cells
        bps = [np.concatenate([b.strip_lo[jj] + np.arange(b.nx + 1) * b.dx_strip[jj] for jj in range(b.n_strips)])]
        for jj in range(b.n_strips):
            edges = b.strip_lo[jj] + np.arange(b.nx + 1) * b.dx_strip[jj]
            bps.append(model.base.branches[jj](edges))
        bp = np.unique(np.round(np.concatenate(bps), 14))
        bp = bp[(bp >= -1e-14) & (bp <= 1 + 1e-14)]
        lo, hi = bp[:-1], bp[1:]
        keep = hi - lo > 1e-13
        lo, hi = lo[keep], hi[keep]
        mid = 0.5 * (lo + hi)
        n_seg = len(lo)
        seg_idx = n_int + np.arange(n_seg)
        bottom = b.locate(mid, np.zeros_like(mid))
        rows.append(seg_idx); cols.append(bottom)
        vals.append(b.kappa[bottom] * (hi - lo) / b.chart_areas[bottom])
        for jj in range(b.n_strips):
            inv = model.base.inverse_branch(jj)
            plo, phi, pmid = inv(lo), inv(hi), inv(mid)
            topc = b.index(jj, np.clip(np.floor((pmid - b.strip_lo[jj]) / b.dx_strip[jj]).astype(np.int64), 0, b.nx - 1), b.ny - 1)
            rows.append(seg_idx); cols.append(topc)
            vals.append(-b.kappa[topc] * np.abs(phi - plo) / b.chart_areas[topc])
        self.branch_segments = np.column_stack([lo, hi])
        self.n_interior_x_edges = n_int
        self.D_X = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_int + n_seg, b.n_cells),
        )

    def apply(self, coeffs: np.ndarray, direction: str) -> np.ndarray:
        if direction == "V":
            return self.D_V @ coeffs
        if direction == "X":
            return self.D_X @ coeffs
        raise ValueError("direction must be 'V' or 'X'")

    def d_norm_columns(self, A: np.ndarray) -> np.ndarray:
        """D-norm of every column of ``A`` (a matrix of cell masses)."""
        return (
            np.abs(A).sum(axis=0)
            + np.abs(self.D_V @ A).sum(axis=0)
            + np.abs(self.D_X @ A).sum(axis=0)
        )


_DERIV_CACHE: dict[int, DerivativeOperators] = {}


def derivative_operators(basis: CellBasis) -> DerivativeOperators:
    key = id(basis)
    ops = _DERIV_CACHE.get(key)
    if ops is None or ops.basis is not basis:
        ops = DerivativeOperators(basis)
        _DERIV_CACHE[key] = ops
    return ops


def derivative_measure(mu: DiscreteMeasure, direction: str, basis: CellBasis) -> DiscreteMeasure:
    """``D_V mu`` or ``D_X mu`` as a measure on the corresponding edge basis."""
    if mu.basis_id != basis.id:
        raise ValueError("measure is not on this basis")
    ops = derivative_operators(basis)
    return DiscreteMeasure(f"{basis.id}:{direction}-edges", ops.apply(mu.coeffs, direction))


def d_norm(mu: DiscreteMeasure, basis: CellBasis) -> float:
    """``|D_V mu|_TV + |D_X mu|_TV + |mu|_TV``."""
    ops = derivative_operators(basis)
    c = mu.coeffs
    return float(np.abs(c).sum() + np.abs(ops.D_V @ c).sum() + np.abs(ops.D_X @ c).sum())


# --------------------------------------------------------------------------
# Lasota-Yorke fit


def lasota_yorke_fit(
    d_before: np.ndarray, d_after: np.ndarray, tv: np.ndarray, K: float | None = None
) -> tuple[float, float]:
    """Smallest ``theta`` (then ``K``) with ``d_after <= theta d_before + K tv`` on the samples.

    Solved as a linear program minimising ``theta + K / median(d_before / tv)``
    so that both terms are measured on the scale of a typical sample. With
    ``K`` given, only ``theta`` is fitted, which makes fits at different
    times comparable.
    """
    if K is not None:
        return float(np.max(np.maximum(d_after - K * tv, 0.0) / d_before)), float(K)
    from scipy.optimize import linprog

    scale = float(np.median(d_before / tv))
    res = linprog(
        c=[1.0, 1.0 / scale],
        A_ub=-np.column_stack([d_before, tv]),
        b_ub=-d_after,
        bounds=[(0, None), (0, None)],
        method="highs",
    )
    if not res.success:
        raise RuntimeError(res.message)
    return float(res.x[0]), float(res.x[1])


# --------------------------------------------------------------------------
# I/O


def save_measure_csv(mu: DiscreteMeasure, path) -> None:
    with open(path, "w") as fh:
        fh.write("cell_index,re,im\n")
        for k, c in enumerate(np.asarray(mu.coeffs, dtype=complex)):
            fh.write(f"{k},{c.real:.17g},{c.imag:.17g}\n")


def load_measure_csv(path, basis_id: str) -> DiscreteMeasure:
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    if list(data.dtype.names) != ["cell_index", "re", "im"]:
        raise ValueError("measure CSV header must be cell_index,re,im")
    n = int(data["cell_index"].max()) + 1
    coeffs = np.zeros(n, dtype=complex)
    coeffs[data["cell_index"].astype(int)] = data["re"] + 1j * data["im"]
    return DiscreteMeasure(basis_id, coeffs)


def save_matrix(op: OperatorMatrix, path) -> None:
    """Row-major complex128 payload after an 8-byte little-endian dimension header."""
    import json

    m = np.ascontiguousarray(op.matrix, dtype=np.complex128)
    with open(path, "wb") as fh:
        fh.write(np.uint64(m.shape[0]).astype("<u8").tobytes())
        fh.write(m.astype("<c16").tobytes(order="C"))
    side = {"provenance": op.provenance, "basis_id": op.basis_id, "dim": int(m.shape[0]), "params": _jsonable(op.params)}
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_matrix(path) -> OperatorMatrix:
    import json

    with open(path, "rb") as fh:
        n = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        m = np.frombuffer(fh.read(), dtype="<c16").reshape(n, n)
    try:
        with open(str(path) + ".json") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        side = {"provenance": "unknown", "basis_id": "unknown", "params": {}}
    return OperatorMatrix(m.copy(), side["provenance"], side["basis_id"], side.get("params", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, complex) or isinstance(obj, np.complexfloating):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
