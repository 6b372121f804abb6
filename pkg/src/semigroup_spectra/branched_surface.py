"""Two-dimensional branched surfaces: charts, subcharts, transitions, foliation.

A surface is described by a finite atlas of rectangular charts. Each chart is
covered by subcharts ("sheets"); a chart may carry several sheets whose planar
images overlap, which is how branch lines are represented. Surface points are
identified through the transition maps, so every question about the surface
(is a point interior, which leaf passes through it, how does a tangent vector
look in another chart) is answered by exploring the set of chart
representations of a point.

All checks are sample based on deterministic grids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

COORD_TOL = 1e-12
_KEY_DECIMALS = 9


class AtlasStructureError(ValueError):
    """Unresolved or inconsistent ids in an atlas description."""


class DomainError(ValueError):
    """A point or vector lies outside the region where an operation is defined."""


class FoliationIntegrityError(RuntimeError):
    """A leaf could not be followed to the boundary within the iteration budget."""


# --------------------------------------------------------------------------
# planar primitives


@dataclass(frozen=True)
class Rect:
    """Closed axis-aligned rectangle ``[x0, x1] x [y0, y1]`` (may be degenerate)."""

    x0: float
    x1: float
    y0: float
    y1: float

    def contains(self, pts: np.ndarray, tol: float = COORD_TOL) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return (
            (pts[:, 0] >= self.x0 - tol)
            & (pts[:, 0] <= self.x1 + tol)
            & (pts[:, 1] >= self.y0 - tol)
            & (pts[:, 1] <= self.y1 + tol)
        )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def vertices(self) -> np.ndarray:
        return np.array(
            [[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]]
        )

    def grid(self, n: int) -> np.ndarray:
        """``n x n`` cell-centre samples plus the four vertices."""
        xs = self.x0 + (np.arange(n) + 0.5) / n * self.width
        ys = self.y0 + (np.arange(n) + 0.5) / n * self.height
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        inner = np.column_stack([gx.ravel(), gy.ravel()])
        return np.vstack([inner, self.vertices])

    def edge_grid(self, n: int) -> np.ndarray:
        """Points on the rectangle's boundary, ``n`` per edge."""
        u = (np.arange(n) + 0.5) / n
        bottom = np.column_stack([self.x0 + u * self.width, np.full(n, self.y0)])
        top = np.column_stack([self.x0 + u * self.width, np.full(n, self.y1)])
        left = np.column_stack([np.full(n, self.x0), self.y0 + u * self.height])
        right = np.column_stack([np.full(n, self.x1), self.y0 + u * self.height])
        return np.vstack([bottom, top, left, right, self.vertices])

    def to_json(self) -> list[str]:
        return [repr(float(v)) for v in (self.x0, self.x1, self.y0, self.y1)]

    @classmethod
    def from_json(cls, data: Sequence) -> "Rect":
        return cls(*(float(v) for v in data))


def _union_contains(rects: Iterable[Rect], pts: np.ndarray, tol: float = COORD_TOL) -> np.ndarray:
    pts = np.atleast_2d(pts)
    out = np.zeros(len(pts), dtype=bool)
    for r in rects:
        out |= r.contains(pts, tol)
    return out


@dataclass(frozen=True)
class UnivariateMap:
    """Monotone C^2 map of one variable.

    ``kind == "poly"`` evaluates the polynomial with ascending ``coeffs``.
    ``kind == "poly_inverse"`` evaluates the inverse of that polynomial,
    which must be monotone on ``interval``.
    """

    coeffs: tuple[float, ...]
    kind: str = "poly"
    interval: tuple[float, float] = (0.0, 1.0)

    def _fwd(self, x):
        return P.polyval(x, self.coeffs)

    def _dfwd(self, x):
        return P.polyval(x, P.polyder(self.coeffs)) if len(self.coeffs) > 1 else np.zeros_like(x)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "poly":
            return self._fwd(x)
        return self._invert(x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "poly":
            return self._dfwd(x)
        return 1.0 / self._dfwd(self._invert(x))

    def _invert(self, y):
        lo, hi = self.interval
        flo, fhi = self._fwd(lo), self._fwd(hi)
        increasing = fhi >= flo
        a = np.full_like(y, lo, dtype=float)
        b = np.full_like(y, hi, dtype=float)
        # bisection keeps the bracket, a few Newton steps polish to full precision
        for _ in range(60):
            m = 0.5 * (a + b)
            fm = self._fwd(m)
            go_right = (fm < y) if increasing else (fm > y)
            a = np.where(go_right, m, a)
            b = np.where(go_right, b, m)
        x = 0.5 * (a + b)
        for _ in range(2):
            d = self._dfwd(x)
            step = np.where(d != 0, (self._fwd(x) - y) / np.where(d != 0, d, 1.0), 0.0)
            x = np.clip(x - step, lo, hi)
        return x

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "coeffs": [repr(float(c)) for c in self.coeffs],
            "interval": [repr(float(v)) for v in self.interval],
        }

    @classmethod
    def from_json(cls, data: dict) -> "UnivariateMap":
        return cls(
            coeffs=tuple(float(c) for c in data["coeffs"]),
            kind=data.get("kind", "poly"),
            interval=tuple(float(v) for v in data.get("interval", ("0", "1"))),
        )


@dataclass(frozen=True)
class TriangularMap:
    """Planar map ``(x, y) -> (g(x), a(x) + b(x) * y)`` with polynomial ``a``, ``b``."""

    g: UnivariateMap
    a: tuple[float, ...] = (0.0,)
    b: tuple[float, ...] = (1.0,)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        x, y = u[:, 0], u[:, 1]
        return np.column_stack([self.g(x), P.polyval(x, self.a) + P.polyval(x, self.b) * y])

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        """Array of shape ``(n, 2, 2)``."""
        u = np.atleast_2d(u)
        x, y = u[:, 0], u[:, 1]
        da = P.polyval(x, P.polyder(self.a)) if len(self.a) > 1 else np.zeros_like(x)
        db = P.polyval(x, P.polyder(self.b)) if len(self.b) > 1 else np.zeros_like(x)
        jac = np.zeros((len(u), 2, 2))
        jac[:, 0, 0] = self.g.derivative(x)
        jac[:, 1, 0] = da + db * y
        jac[:, 1, 1] = P.polyval(x, self.b)
        return jac

    @property
    def second_depends_on_first(self) -> bool:
        return len(np.trim_zeros(np.asarray(self.a[1:]), "b")) > 0 or len(
            np.trim_zeros(np.asarray(self.b[1:]), "b")
        ) > 0

    def to_json(self) -> dict:
        return {
            "g": self.g.to_json(),
            "a": [repr(float(c)) for c in self.a],
            "b": [repr(float(c)) for c in self.b],
        }

    @classmethod
    def from_json(cls, data: dict) -> "TriangularMap":
        return cls(
            g=UnivariateMap.from_json(data["g"]),
            a=tuple(float(c) for c in data.get("a", ("0",))),
            b=tuple(float(c) for c in data.get("b", ("1",))),
        )


def affine_map(scale_x: float = 1.0, shift_x: float = 0.0, scale_y: float = 1.0, shift_y: float = 0.0) -> TriangularMap:
    return TriangularMap(UnivariateMap((shift_x, scale_x)), (shift_y,), (scale_y,))


IDENTITY_MAP = affine_map()


# --------------------------------------------------------------------------
# atlas data model


@dataclass(frozen=True)
class Subchart:
    id: int
    parent_chart: int
    image_polygon: tuple[Rect, ...]

    def contains(self, pts: np.ndarray, tol: float = COORD_TOL) -> np.ndarray:
        return _union_contains(self.image_polygon, pts, tol)


@dataclass(frozen=True)
class Chart:
    id: int
    domain_cells: tuple[int, ...]
    ball: Rect


@dataclass(frozen=True)
class TransitionMap:
    """Transition from ``from_chart`` coordinates to ``to_chart`` coordinates.

    ``domain`` is a rectangle in the source chart. ``from_subchart`` restricts
    the transition to one sheet of the source chart; ``to_subchart`` names the
    sheet of the target chart that receives the image (``None`` means the
    target is single-sheeted there).
    """

    from_chart: int
    to_chart: int
    domain: Rect
    map: TriangularMap
    from_subchart: int | None = None
    to_subchart: int | None = None


@dataclass(frozen=True)
class FoliationSpec:
    """Straightened foliation convention.

    ``label_axis[c] == 0`` means the plaques in chart ``c`` are the lines
    ``x = const`` (leaf parameter ``y``); ``1`` means plaques ``y = const``.
    """

    delta: float = 0.1
    orientation: dict[int, int] = field(default_factory=dict)
    label_axis: dict[int, int] = field(default_factory=dict)

    def axis(self, chart: int) -> int:
        return self.label_axis.get(chart, 0)

    def param_axis(self, chart: int) -> int:
        return 1 - self.axis(chart)


@dataclass(frozen=True)
class SurfacePoint:
    chart: int
    coords: tuple[float, float]
    sheet: int | None = None

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


@dataclass(frozen=True)
class TangentVector:
    base: SurfacePoint
    components: tuple[float, float]


@dataclass
class Leaf:
    points: list[SurfacePoint]
    length: float
    endpoints: tuple[SurfacePoint, SurfacePoint]


@dataclass
class AxiomResult:
    axiom: int
    name: str
    passed: bool
    witnesses: list[SurfacePoint] = field(default_factory=list)
    detail: str = ""


@dataclass
class ValidationReport:
    axioms: list[AxiomResult]
    foliation: list[AxiomResult]
    grid: int
    seed: int

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.axioms) and all(a.passed for a in self.foliation)

    def to_dict(self) -> dict:
        def res(a: AxiomResult) -> dict:
            return {
                "axiom": a.axiom,
                "name": a.name,
                "passed": a.passed,
                "detail": a.detail,
                "witnesses": [
                    {"chart": w.chart, "sheet": w.sheet, "coords": [round(c, 12) for c in w.coords]}
                    for w in a.witnesses
                ],
            }

        return {
            "passed": self.passed,
            "grid": self.grid,
            "seed": self.seed,
            "axioms": [res(a) for a in self.axioms],
            "foliation": [res(a) for a in self.foliation],
        }


class BranchedSurfaceAtlas:
    """Immutable collection of charts, subcharts, transitions and foliation data."""

    def __init__(
        self,
        charts: Sequence[Chart],
        subcharts: Sequence[Subchart],
        transitions: Sequence[TransitionMap],
        foliation: FoliationSpec | None = None,
    ):
        self.charts = tuple(charts)
        self.subcharts = tuple(subcharts)
        self.transitions = tuple(transitions)
        self.foliation = foliation
        self._chart = {c.id: c for c in self.charts}
        self._sub = {s.id: s for s in self.subcharts}
        self._from: dict[int, list[TransitionMap]] = {}
        for t in self.transitions:
            self._from.setdefault(t.from_chart, []).append(t)

    # ---- structure
    def check_structure(self) -> None:
        if len(self._chart) != len(self.charts):
            raise AtlasStructureError("duplicate chart id")
        if len(self._sub) != len(self.subcharts):
            raise AtlasStructureError("duplicate subchart id")
        for c in self.charts:
            for s in c.domain_cells:
                if s not in self._sub:
                    raise AtlasStructureError(f"chart {c.id} references unknown subchart {s}")
                if self._sub[s].parent_chart != c.id:
                    raise AtlasStructureError(f"subchart {s} listed by chart {c.id} has parent {self._sub[s].parent_chart}")
        for s in self.subcharts:
            if s.parent_chart not in self._chart:
                raise AtlasStructureError(f"subchart {s.id} has unknown parent chart {s.parent_chart}")
            if s.id not in self._chart[s.parent_chart].domain_cells:
                raise AtlasStructureError(f"subchart {s.id} missing from chart {s.parent_chart} domain_cells")
        for k, t in enumerate(self.transitions):
            for cid in (t.from_chart, t.to_chart):
                if cid not in self._chart:
                    raise AtlasStructureError(f"transition {k} references unknown chart {cid}")
            for sid, cid in ((t.from_subchart, t.from_chart), (t.to_subchart, t.to_chart)):
                if sid is None:
                    continue
                if sid not in self._sub:
                    raise AtlasStructureError(f"transition {k} references unknown subchart {sid}")
                if self._sub[sid].parent_chart != cid:
                    raise AtlasStructureError(f"transition {k}: subchart {sid} is not in chart {cid}")
        if self.foliation is not None:
            for cid in list(self.foliation.orientation) + list(self.foliation.label_axis):
                if cid not in self._chart:
                    raise AtlasStructureError(f"foliation references unknown chart {cid}")

    def chart(self, cid: int) -> Chart:
        try:
            return self._chart[cid]
        except KeyError:
            raise DomainError(f"unknown chart {cid}") from None

    def subchart(self, sid: int) -> Subchart:
        return self._sub[sid]

    def sheets_at(self, chart: int, u: np.ndarray) -> list[int]:
        c = self.chart(chart)
        return [s for s in c.domain_cells if self._sub[s].contains(u)[0]]

    # ---- point identity
    def _closure(self, idx, chart, sheet, pts, max_depth: int = 8):
        """Vectorised exploration of chart representations.

        Returns arrays ``(idx, chart, sheet, coords)`` listing every
        representation reachable from the seeds through transitions.
        ``sheet == -1`` encodes an unspecified sheet.
        """
        idx = np.asarray(idx, dtype=np.int64)
        chart = np.asarray(chart, dtype=np.int64)
        sheet = np.asarray(sheet, dtype=np.int64)
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)

        def keys(i, c, s, u):
            q = np.round(u, _KEY_DECIMALS)
            return np.column_stack([i, c, s, q[:, 0], q[:, 1]])

        all_i, all_c, all_s, all_u = [idx], [chart], [sheet], [pts]
        seen = {tuple(r) for r in keys(idx, chart, sheet, pts)}
        fi, fc, fs, fu = idx, chart, sheet, pts
        for _ in range(max_depth):
            ni, nc, ns, nu = [], [], [], []
            for t in self.transitions:
                m = fc == t.from_chart
                if t.from_subchart is not None:
                    m &= (fs == t.from_subchart) | (fs == -1)
                if not m.any():
                    continue
                m[m] &= t.domain.contains(fu[m])
                if t.from_subchart is not None and m.any():
                    unspecified = m & (fs == -1)
                    if unspecified.any():
                        m[unspecified] &= self._sub[t.from_subchart].contains(fu[unspecified])
                if not m.any():
                    continue
                img = t.map(fu[m])
                if t.to_subchart is not None:
                    ok = self._sub[t.to_subchart].contains(img)
                    ni.append(fi[m][ok]); nc.append(np.full(ok.sum(), t.to_chart)); ns.append(np.full(ok.sum(), t.to_subchart)); nu.append(img[ok])
                else:
                    for sid in self._chart[t.to_chart].domain_cells:
                        ok = self._sub[sid].contains(img)
                        ni.append(fi[m][ok]); nc.append(np.full(ok.sum(), t.to_chart)); ns.append(np.full(ok.sum(), sid)); nu.append(img[ok])
            if not ni:
                break
            ni = np.concatenate(ni); nc = np.concatenate(nc); ns = np.concatenate(ns); nu = np.concatenate(nu).reshape(-1, 2)
            fresh = []
            for row_k, row in enumerate(keys(ni, nc, ns, nu)):
                tup = tuple(row)
                if tup not in seen:
                    seen.add(tup)
                    fresh.append(row_k)
            if not fresh:
                break
            fresh = np.asarray(fresh)
            fi, fc, fs, fu = ni[fresh], nc[fresh], ns[fresh], nu[fresh]
            all_i.append(fi); all_c.append(fc); all_s.append(fs); all_u.append(fu)
        return (np.concatenate(all_i), np.concatenate(all_c), np.concatenate(all_s), np.concatenate(all_u).reshape(-1, 2))

    def _seed(self, points: Sequence[SurfacePoint]):
        idx, chart, sheet, pts = [], [], [], []
        for k, p in enumerate(points):
            u = p.array
            c = self.chart(p.chart)
            if p.sheet is not None:
                if p.sheet not in c.domain_cells or not self._sub[p.sheet].contains(u)[0]:
                    raise DomainError(f"point {p} is not in sheet {p.sheet}")
                sheets = [p.sheet]
            else:
                sheets = self.sheets_at(p.chart, u)
            if not sheets:
                raise DomainError(f"point {p} lies outside every subchart of chart {p.chart}")
            for s in sheets:
                idx.append(k); chart.append(p.chart); sheet.append(s); pts.append(u)
        return idx, chart, sheet, np.array(pts)

    def representations(self, p: SurfacePoint) -> list[SurfacePoint]:
        _, c, s, u = self._closure(*self._seed([p]))
        return [SurfacePoint(int(ci), (float(ui[0]), float(ui[1])), int(si)) for ci, si, ui in zip(c, s, u)]

    def canonical(self, p: SurfacePoint) -> SurfacePoint:
        """Representation in the lowest chart id (then lowest sheet, then coordinates)."""
        reps = self.representations(p)
        best = min(reps, key=lambda r: (r.chart, r.sheet if r.sheet is not None else -1, round(r.coords[0], _KEY_DECIMALS), round(r.coords[1], _KEY_DECIMALS)))
        return best

    def same_point(self, p: SurfacePoint, q: SurfacePoint, tol: float = 1e-9) -> bool:
        reps = self.representations(p)
        qc = q.array
        for r in reps:
            if r.chart == q.chart and (q.sheet is None or r.sheet == q.sheet or not self._multi_sheet(q.chart, qc)):
                if np.max(np.abs(r.array - qc)) <= tol:
                    return True
        return False

    def _multi_sheet(self, chart: int, u: np.ndarray) -> bool:
        return len(self.sheets_at(chart, u)) > 1

    # ---- local geometry
    def _disk_radius(self, chart: int) -> float:
        b = self.chart(chart).ball
        return 1e-7 * max(b.width, b.height, 1.0)

    def _disk_covered(self, sheets: Sequence[int], u: np.ndarray, rho: float) -> bool:
        ang = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)
        ring = np.concatenate([u + r * np.column_stack([np.cos(ang), np.sin(ang)]) for r in (rho, 0.5 * rho)])
        covered = np.zeros(len(ring), dtype=bool)
        for s in sheets:
            covered |= self._sub[s].contains(ring, tol=0.0)
        return bool(covered.all())

    def _interior_flags(self, idx, chart, sheet, pts, n_points: int) -> np.ndarray:
        flags = np.zeros(n_points, dtype=bool)
        groups: dict[tuple[int, int], tuple[np.ndarray, set]] = {}
        for i, c, s, u in zip(idx, chart, sheet, pts):
            key = (int(i), int(c))
            if key not in groups:
                groups[key] = (u, set())
            groups[key][1].add(int(s))
        for (i, c), (u, sheets) in groups.items():
            if flags[i]:
                continue
            if self._disk_covered(sorted(sheets), u, self._disk_radius(c)):
                flags[i] = True
        return flags


# --------------------------------------------------------------------------
# operations


def classify_point(atlas: BranchedSurfaceAtlas, p: SurfacePoint) -> str:
    """Return ``"Interior"`` or ``"Boundary"``.

    A point is interior when, in some chart, the images of the sheets that
    contain it cover a small disk around its coordinates.
    """
    seeds = atlas._seed([p])
    flags = atlas._interior_flags(*atlas._closure(*seeds), n_points=1)
    return "Interior" if flags[0] else "Boundary"


def classify_points(atlas: BranchedSurfaceAtlas, points: Sequence[SurfacePoint]) -> list[str]:
    seeds = atlas._seed(points)
    flags = atlas._interior_flags(*atlas._closure(*seeds), n_points=len(points))
    return ["Interior" if f else "Boundary" for f in flags]


def _path_jacobian(atlas: BranchedSurfaceAtlas, p: SurfacePoint, to_chart: int):
    """Breadth-first search for a transition chain; returns (target point, Jacobian)."""
    start_sheets = [p.sheet] if p.sheet is not None else atlas.sheets_at(p.chart, p.array)
    if not start_sheets:
        raise DomainError(f"point {p} lies outside chart {p.chart}")
    frontier = [(p.chart, s, p.array, np.eye(2)) for s in start_sheets]
    seen = {(p.chart, s, tuple(np.round(p.array, _KEY_DECIMALS))) for s in start_sheets}
    for _ in range(8):
        for c, s, u, jac in frontier:
            if c == to_chart:
                return SurfacePoint(c, (float(u[0]), float(u[1])), s), jac
        nxt = []
        # direct transitions into the target are tried first so the chain is as short as possible
        for c, s, u, jac in frontier:
            ts = sorted(atlas._from.get(c, []), key=lambda t: t.to_chart != to_chart)
            for t in ts:
                if t.from_subchart is not None and t.from_subchart != s:
                    continue
                if not t.domain.contains(u)[0]:
                    continue
                v = t.map(u)[0]
                dj = t.map.jacobian(u)[0] @ jac
                targets = [t.to_subchart] if t.to_subchart is not None else atlas.sheets_at(t.to_chart, v)
                for s2 in targets:
                    key = (t.to_chart, s2, tuple(np.round(v, _KEY_DECIMALS)))
                    if key in seen:
                        continue
                    seen.add(key)
                    nxt.append((t.to_chart, s2, v, dj))
        if not nxt:
            break
        frontier = nxt
    raise DomainError(f"point {p} is not in the overlap of charts {p.chart} and {to_chart}")


def translate_tangent(atlas: BranchedSurfaceAtlas, v: TangentVector, to_chart: int) -> TangentVector:
    """Express ``v`` in ``to_chart`` by multiplying with the transition derivative."""
    q, jac = _path_jacobian(atlas, v.base, to_chart)
    comp = jac @ np.asarray(v.components, dtype=float)
    return TangentVector(q, (float(comp[0]), float(comp[1])))


def _extent(sub: Subchart, u: np.ndarray, d: np.ndarray, tol: float = 1e-12) -> float:
    """Largest ``tau`` with ``u + s d`` inside the sheet for all ``s`` in ``[0, tau]``."""
    tau = 0.0
    for _ in range(64):
        best = None
        pos = u + tau * d
        for r in sub.image_polygon:
            if not r.contains(pos, tol)[0]:
                continue
            # exit parameter of the ray from this rectangle
            if d[0] > 0:
                ex = (r.x1 - u[0]) / d[0]
            elif d[0] < 0:
                ex = (r.x0 - u[0]) / d[0]
            elif d[1] > 0:
                ex = (r.y1 - u[1]) / d[1]
            else:
                ex = (r.y0 - u[1]) / d[1]
            if d[0] != 0 and d[1] != 0:
                raise ValueError("leaf directions are axis aligned")
            if best is None or ex > best:
                best = ex
        if best is None or best <= tau + tol:
            return tau
        tau = best
    return tau


def leaf_through(atlas: BranchedSurfaceAtlas, p: SurfacePoint, max_steps: int = 64) -> Leaf:
    """Follow the plaques through ``p`` in both directions until the boundary."""
    fol = atlas.foliation
    if fol is None:
        raise FoliationIntegrityError("atlas has no foliation")
    sheet = p.sheet if p.sheet is not None else atlas.sheets_at(p.chart, p.array)[0]
    halves = []
    total = 0.0
    for sign in (-1.0, 1.0):
        c, s, u = p.chart, sheet, p.array
        axis = fol.param_axis(c)
        d = np.zeros(2); d[axis] = sign
        pts = [SurfacePoint(c, (float(u[0]), float(u[1])), s)]
        for _ in range(max_steps):
            tau = _extent(atlas.subchart(s), u, d)
            e = u + tau * d
            total += tau
            end = SurfacePoint(c, (float(e[0]), float(e[1])), s)
            pts.append(end)
            if classify_point(atlas, end) == "Boundary":
                break
            nxt = _continue_leaf(atlas, end, d)
            if nxt is None:
                raise FoliationIntegrityError(f"leaf through {p} stops at interior point {end}")
            c, s, u, d = nxt
        else:
            raise FoliationIntegrityError(f"leaf through {p} did not reach the boundary in {max_steps} steps")
        halves.append(pts)
    back, fwd = halves
    points = list(reversed(back)) + fwd[1:]
    return Leaf(points=points, length=total, endpoints=(points[0], points[-1]))


def _continue_leaf(atlas: BranchedSurfaceAtlas, end: SurfacePoint, d: np.ndarray):
    """Pick a representation of ``end`` in which the plaque continues forward."""
    fol = atlas.foliation
    h = 1e-6
    back = end.array - h * d
    back_pt = SurfacePoint(end.chart, (float(back[0]), float(back[1])), end.sheet)
    for r in sorted(atlas.representations(end), key=lambda r: (r.chart, r.sheet)):
        axis = fol.param_axis(r.chart)
        for sign in (1.0, -1.0):
            d2 = np.zeros(2)
            d2[axis] = sign
            sub = atlas.subchart(r.sheet)
            if _extent(sub, r.array, d2) <= 1e-12:
                continue
            probe = r.array + h * d2
            probe_pt = SurfacePoint(r.chart, (float(probe[0]), float(probe[1])), r.sheet)
            if atlas.same_point(probe_pt, back_pt, tol=1e-8):
                continue
            return r.chart, r.sheet, r.array, d2
    return None


# --------------------------------------------------------------------------
# validation


def validate_atlas(atlas: BranchedSurfaceAtlas, grid: int = 64, seed: int = 0, max_witnesses: int = 5) -> ValidationReport:
    """Sample-based check of the branched-manifold axioms.

    Axioms are numbered as follows: (1) charts map to closed balls, (2)
    subcharts are closed subsets of their chart, (3) subcharts cover their
    chart, (4) chart interiors cover the surface, (5) the coordinate map is a
    homeomorphism onto a closed image on each subchart, (6) transition maps
    are C^2 diffeomorphisms compatible with the coordinate maps.

    Raises
    ------
    AtlasStructureError
        When ids do not resolve; this is distinct from an axiom failure.
    """
    atlas.check_structure()
    rng = np.random.default_rng(seed)
    results: list[AxiomResult] = []

    def wit(chart, pts, sheet=None):
        return [SurfacePoint(chart, (float(u[0]), float(u[1])), sheet) for u in pts[:max_witnesses]]

    # (1)
    bad = [c for c in atlas.charts if not (c.ball.width > 0 and c.ball.height > 0)]
    results.append(AxiomResult(1, "charts map to closed balls", not bad,
                               [SurfacePoint(c.id, (c.ball.x0, c.ball.y0)) for c in bad][:max_witnesses]))
    # (2)
    w2: list[SurfacePoint] = []
    for s in atlas.subcharts:
        ball = atlas.chart(s.parent_chart).ball
        for r in s.image_polygon:
            out = ~ball.contains(r.vertices)
            if r.width < 0 or r.height < 0 or out.any():
                w2 += wit(s.parent_chart, r.vertices[out] if out.any() else r.vertices[:1], s.id)
    results.append(AxiomResult(2, "subcharts are closed subsets of their chart", not w2, w2[:max_witnesses]))
    # (3)
    w3: list[SurfacePoint] = []
    for c in atlas.charts:
        pts = c.ball.grid(grid)
        cov = _union_contains([r for s in c.domain_cells for r in atlas.subchart(s).image_polygon], pts)
        if not cov.all():
            w3 += wit(c.id, pts[~cov])
    results.append(AxiomResult(3, "subcharts cover each chart", not w3, w3[:max_witnesses]))

    # samples of every sheet, shared by axioms 4 and 5
    s_idx, s_chart, s_sheet, s_pts = [], [], [], []
    for s in atlas.subcharts:
        for r in s.image_polygon:
            pts = r.grid(grid)
            s_pts.append(pts); s_chart.append(np.full(len(pts), s.parent_chart)); s_sheet.append(np.full(len(pts), s.id))
    s_pts = np.vstack(s_pts); s_chart = np.concatenate(s_chart); s_sheet = np.concatenate(s_sheet)
    s_idx = np.arange(len(s_pts))
    ci, cc, cs, cu = atlas._closure(s_idx, s_chart, s_sheet, s_pts)

    # (5) one coordinate value per (point, chart, sheet)
    w5: list[SurfacePoint] = []
    order = np.lexsort((cs, cc, ci))
    ci5, cc5, cs5, cu5 = ci[order], cc[order], cs[order], cu[order]
    same = (ci5[1:] == ci5[:-1]) & (cc5[1:] == cc5[:-1]) & (cs5[1:] == cs5[:-1])
    diff = np.max(np.abs(cu5[1:] - cu5[:-1]), axis=1) > 1e-9
    clash = np.nonzero(same & diff)[0]
    for k in clash[:max_witnesses]:
        w5.append(SurfacePoint(int(cc5[k]), (float(cu5[k, 0]), float(cu5[k, 1])), int(cs5[k])))
    results.append(AxiomResult(5, "coordinate map injective with closed image on each subchart", not w5, w5,
                               "" if not w5 else "two coordinates of one sheet represent the same point"))

    # (4) every sample lies in the topological interior of some chart
    charts_of = {}
    for i, c in zip(ci, cc):
        charts_of.setdefault(int(i), set()).add(int(c))
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    nb_owner, nb_chart, nb_sheet, nb_pts = [], [], [], []
    for i, c, s, u in zip(ci, cc, cs, cu):
        rho = 1e-6 * max(atlas.chart(int(c)).ball.width, atlas.chart(int(c)).ball.height)
        q = u + rho * dirs
        ok = atlas.subchart(int(s)).contains(q, tol=0.0)
        for qq in q[ok]:
            nb_owner.append(int(i)); nb_chart.append(int(c)); nb_sheet.append(int(s)); nb_pts.append(qq)
    nb_owner = np.asarray(nb_owner)
    ni, nc, _, _ = atlas._closure(np.arange(len(nb_owner)), nb_chart, nb_sheet, np.asarray(nb_pts))
    nb_charts: dict[int, set] = {}
    for i, c in zip(ni, nc):
        nb_charts.setdefault(int(i), set()).add(int(c))
    candidates = {i: set(v) for i, v in charts_of.items()}
    for k, owner in enumerate(nb_owner):
        candidates[int(owner)] &= nb_charts.get(k, set())
    bad4 = [i for i in range(len(s_pts)) if not candidates.get(i)]
    w4 = [SurfacePoint(int(s_chart[i]), (float(s_pts[i, 0]), float(s_pts[i, 1])), int(s_sheet[i])) for i in bad4[:max_witnesses]]
    results.append(AxiomResult(4, "chart interiors cover the surface", not bad4, w4))

    # (6) transitions
    w6: list[SurfacePoint] = []
    details = []
    for k, t in enumerate(atlas.transitions):
        pts = t.domain.grid(grid)
        if t.from_subchart is not None:
            pts = pts[atlas.subchart(t.from_subchart).contains(pts)]
        if len(pts) == 0:
            continue
        det = np.linalg.det(t.map.jacobian(pts))
        sing = np.abs(det) < 1e-10
        if sing.any():
            w6 += wit(t.from_chart, pts[sing], t.from_subchart)
            details.append(f"transition {k}: singular derivative")
        img = t.map(pts)
        target_ok = atlas.chart(t.to_chart).ball.contains(img, tol=1e-9)
        if t.to_subchart is not None:
            target_ok &= atlas.subchart(t.to_subchart).contains(img, tol=1e-9)
        if not target_ok.all():
            w6 += wit(t.from_chart, pts[~target_ok], t.from_subchart)
            details.append(f"transition {k}: image leaves the target chart")
        # round trip through any reverse transition
        for back in atlas._from.get(t.to_chart, []):
            if back.to_chart != t.from_chart:
                continue
            if t.to_subchart is not None and back.from_subchart not in (None, t.to_subchart):
                continue
            if t.from_subchart is not None and back.to_subchart not in (None, t.from_subchart):
                continue
            m = back.domain.contains(img)
            if not m.any():
                continue
            err = np.max(np.abs(back.map(img[m]) - pts[m]), axis=1)
            if (err > 1e-9).any():
                w6 += wit(t.from_chart, pts[m][err > 1e-9], t.from_subchart)
                details.append(f"transition {k}: inconsistent with reverse transition")
    results.append(AxiomResult(6, "transition maps are compatible diffeomorphisms", not w6, w6[:max_witnesses], "; ".join(details)))
    results.sort(key=lambda a: a.axiom)

    fol_results = _check_foliation(atlas, grid, rng, max_witnesses) if atlas.foliation is not None else []
    return ValidationReport(results, fol_results, grid, seed)


def _check_foliation(atlas: BranchedSurfaceAtlas, grid: int, rng: np.random.Generator, max_witnesses: int) -> list[AxiomResult]:
    fol = atlas.foliation
    out = []
    wt: list[SurfacePoint] = []
    wo: list[SurfacePoint] = []
    for t in atlas.transitions:
        la, lb = fol.axis(t.from_chart), fol.axis(t.to_chart)
        ok = la == lb and (la == 0 or not t.map.second_depends_on_first)
        if not ok:
            wt.append(SurfacePoint(t.from_chart, (t.domain.x0, t.domain.y0), t.from_subchart))
            continue
        pts = t.domain.grid(min(grid, 8))
        jac = t.map.jacobian(pts)
        pa = fol.param_axis(t.from_chart)
        sgn = np.sign(jac[:, pa, pa])
        expected = fol.orientation.get(t.from_chart, 1) * fol.orientation.get(t.to_chart, 1)
        if np.any(sgn != expected):
            wo.append(SurfacePoint(t.from_chart, (t.domain.x0, t.domain.y0), t.from_subchart))
    out.append(AxiomResult(7, "transitions preserve the plaques", not wt, wt[:max_witnesses]))
    out.append(AxiomResult(8, "leaf orientation consistent on overlaps", not wo, wo[:max_witnesses]))

    wl: list[SurfacePoint] = []
    detail = []
    for s in atlas.subcharts:
        r = s.image_polygon[0]
        for u in r.grid(3)[:9]:
            if not s.contains(u)[0]:
                continue
            p = SurfacePoint(s.parent_chart, (float(u[0]), float(u[1])), s.id)
            try:
                leaf = leaf_through(atlas, p)
            except FoliationIntegrityError as exc:
                wl.append(p); detail.append(str(exc)); continue
            if leaf.length < fol.delta - 1e-12:
                wl.append(p); detail.append(f"leaf length {leaf.length:.6g} < delta")
    out.append(AxiomResult(9, "leaves end on the boundary with length >= delta", not wl, wl[:max_witnesses], "; ".join(detail[:3])))
    return out


# --------------------------------------------------------------------------
# serialisation


def atlas_to_json(atlas: BranchedSurfaceAtlas) -> dict:
    fol = atlas.foliation or FoliationSpec()
    return {
        "charts": [{"id": c.id, "domain_cells": list(c.domain_cells), "ball": c.ball.to_json()} for c in atlas.charts],
        "subcharts": [
            {"id": s.id, "parent_chart": s.parent_chart, "image_polygon": [r.to_json() for r in s.image_polygon]}
            for s in atlas.subcharts
        ],
        "transitions": [
            {
                "from_chart": t.from_chart,
                "to_chart": t.to_chart,
                "from_subchart": t.from_subchart,
                "to_subchart": t.to_subchart,
                "domain": t.domain.to_json(),
                "map": t.map.to_json(),
            }
            for t in atlas.transitions
        ],
        "foliation": {
            "delta": repr(float(fol.delta)),
            "orientation": {str(k): int(v) for k, v in sorted(fol.orientation.items())},
            "label_axis": {str(k): int(v) for k, v in sorted(fol.label_axis.items())},
        },
    }


def atlas_from_json(data: dict) -> BranchedSurfaceAtlas:
    """Build an atlas from its JSON document.

    Raises
    ------
    AtlasStructureError
        When required keys are missing or malformed.
    """
    try:
        charts = [Chart(int(c["id"]), tuple(int(s) for s in c["domain_cells"]), Rect.from_json(c["ball"])) for c in data["charts"]]
        subs = [
            Subchart(int(s["id"]), int(s["parent_chart"]), tuple(Rect.from_json(r) for r in s["image_polygon"]))
            for s in data["subcharts"]
        ]
        trans = [
            TransitionMap(
                int(t["from_chart"]),
                int(t["to_chart"]),
                Rect.from_json(t["domain"]),
                TriangularMap.from_json(t["map"]),
                None if t.get("from_subchart") is None else int(t["from_subchart"]),
                None if t.get("to_subchart") is None else int(t["to_subchart"]),
            )
            for t in data.get("transitions", [])
        ]
        f = data.get("foliation")
        fol = None
        if f is not None:
            fol = FoliationSpec(
                delta=float(f.get("delta", "0.1")),
                orientation={int(k): int(v) for k, v in f.get("orientation", {}).items()},
                label_axis={int(k): int(v) for k, v in f.get("label_axis", {}).items()},
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise AtlasStructureError(f"malformed atlas document: {exc}") from exc
    return BranchedSurfaceAtlas(charts, subs, trans, fol)


def save_atlas(atlas: BranchedSurfaceAtlas, path) -> None:
    with open(path, "w") as fh:
        json.dump(atlas_to_json(atlas), fh, indent=2)


def load_atlas(path) -> BranchedSurfaceAtlas:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AtlasStructureError(f"invalid JSON: {exc}") from exc
    return atlas_from_json(data)
