"""Adaptive dyadic partitions of the bulk and the anchored grid covering of the tail."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .density import DensityModel, as_points, integrate_box, total_mass


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Cube:
    center: np.ndarray
    edge: float

    def __post_init__(self):
        if not self.edge > 0:
            raise ValueError("cube edge must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))

    @classmethod
    def from_bounds(cls, lower, upper) -> "Cube":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        return cls((lo + hi) / 2, float(np.max(hi - lo)))

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.edge / 2

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.edge / 2

    @property
    def volume(self) -> float:
        return self.edge ** self.d

    def contains(self, points) -> np.ndarray:
        pts = as_points(points, self.d)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)


def _probe_offsets(d: int, probes: int) -> np.ndarray:
    t = np.linspace(-0.5, 0.5, probes)
    return np.array(list(itertools.product(t, repeat=d)), dtype=float)


@dataclass(eq=False)
class BulkPartition:
    cells: list
    bandwidth_at_center: np.ndarray
    beta: float
    u: float
    c_beta: float
    omega_tilde: Cube
    depths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def centers(self) -> np.ndarray:
        if not self.cells:
            return np.zeros((0, self.omega_tilde.d))
        return np.stack([c.center for c in self.cells])

    @property
    def edges(self) -> np.ndarray:
        return np.array([c.edge for c in self.cells])


def adaptive_partition(model: DensityModel, omega_tilde: Cube, beta: float, u: float, c_beta: float,
                       max_depth: int = 40, probes: int = 5,
                       bandwidth: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> BulkPartition:
    """Recursive halving of ``omega_tilde`` with h = (p0/c_beta)^{1/beta}.

    A cube is dropped when its probe grid misses D(u) = {p0 >= u}, kept when
    its edge is at most h at its centre, and split into 2^d children
    otherwise. Cells are returned in depth-first, child-index order.
    ``bandwidth`` replaces the h function (values at centres) when given.
    """
    if not u > 0 or not c_beta > 0 or not beta > 0:
        raise ValueError("adaptive_partition needs u > 0, beta > 0, c_beta > 0")
    d = omega_tilde.d
    offsets = _probe_offsets(d, probes)
    children = np.array(list(itertools.product((-0.25, 0.25), repeat=d)), dtype=float)
    peak = model.argmax()
    h_of = bandwidth or (lambda x: (np.maximum(model(x), 0.0) / c_beta) ** (1.0 / beta))

    centers = omega_tilde.center.reshape(1, d)
    paths = np.zeros((1, 0), dtype=np.int64)
    edge = omega_tilde.edge
    kept_c, kept_e, kept_p, kept_h, kept_depth = [], [], [], [], []
    depth = 0
    while len(centers):
        m = len(centers)
        pts = (centers[:, None, :] + edge * offsets[None, :, :]).reshape(-1, d)
        vals = model(pts).reshape(m, len(offsets)).max(axis=1)
        inside_peak = np.all(np.abs(peak[None, :] - centers) <= edge / 2, axis=1)
        if inside_peak.any():
            pv = float(model(peak.reshape(1, d))[0])
            vals = np.where(inside_peak, np.maximum(vals, pv), vals)
        hits = vals >= u
        centers, paths = centers[hits], paths[hits]
        if not len(centers):
            break
        h = np.asarray(h_of(centers), dtype=float)
        keep = edge <= h
        if keep.any():
            kept_c.append(centers[keep])
            kept_e.append(np.full(int(keep.sum()), edge))
            kept_p.append(paths[keep])
            kept_h.append(h[keep])
            kept_depth.append(np.full(int(keep.sum()), depth))
        split = ~keep
        if not split.any():
            break
        if depth >= max_depth:
            bad = centers[split][:5]
            raise PartitionError(f"recursion depth {max_depth} exceeded; edge {edge:.3e}, "
                                 f"{int(split.sum())} unresolved cubes, e.g. centres {bad.tolist()}, "
                                 f"h there {h[split][:5].tolist()}")
        centers = (centers[split][:, None, :] + edge * children[None, :, :]).reshape(-1, d)
        parent = np.repeat(paths[split], len(children), axis=0)
        paths = np.concatenate([parent, np.tile(np.arange(len(children)), int(split.sum()))[:, None]], axis=1)
        edge = edge / 2
        depth += 1

    if not kept_c:
        return BulkPartition([], np.zeros(0), beta, u, c_beta, omega_tilde, np.zeros(0, dtype=int))
    width = max(p.shape[1] for p in kept_p)
    padded = np.concatenate([np.pad(p, ((0, 0), (0, width - p.shape[1])), constant_values=-1) for p in kept_p])
    order = np.lexsort(tuple(padded[:, k] for k in reversed(range(width)))) if width else np.arange(len(padded))
    C = np.concatenate(kept_c)[order]
    E = np.concatenate(kept_e)[order]
    H = np.concatenate(kept_h)[order]
    D = np.concatenate(kept_depth)[order]
    cells = [Cube(c, float(e)) for c, e in zip(C, E)]
    return BulkPartition(cells, H, beta, u, c_beta, omega_tilde, D)


@dataclass(frozen=True)
class PartitionReport:
    coverage_ok: bool
    edge_ok: bool
    ratio_ok: bool
    disjoint_ok: bool
    uncovered_points: int
    worst_edge_margin: float
    worst_ratio: float
    n_cells: int

    @property
    def ok(self) -> bool:
        return self.coverage_ok and self.edge_ok and self.ratio_ok and self.disjoint_ok


def _dyadic_key_arrays(partition: BulkPartition) -> dict:
    """Cells grouped by depth as integer index arrays relative to omega_tilde."""
    om = partition.omega_tilde
    out = {}
    if not partition.cells:
        return out
    E = partition.edges
    depth = np.rint(np.log2(om.edge / E)).astype(int)
    idx = np.floor((partition.centers - E[:, None] / 2 - om.lower) / E[:, None] + 0.5).astype(np.int64)
    for k in np.unique(depth):
        out[int(k)] = idx[depth == k]
    return out


def _encode(rows: np.ndarray, depth: int):
    if depth * rows.shape[1] <= 62:
        return rows @ (np.int64(1) << (depth * np.arange(rows.shape[1], dtype=np.int64)))
    return rows


def _rows_in(rows: np.ndarray, table: np.ndarray, depth: int) -> np.ndarray:
    a, b = _encode(rows, depth), _encode(table, depth)
    if a.ndim == 1:
        return np.isin(a, b)
    keys = {tuple(r) for r in b.tolist()}
    return np.array([tuple(r) in keys for r in a.tolist()], dtype=bool)


def verify_partition(partition: BulkPartition, model: DensityModel, probes: int = 9,
                     coverage_resolution: Optional[int] = None) -> PartitionReport:
    """Check coverage of D(u), the edge bracket and min >= max/2 on every cell."""
    d = partition.omega_tilde.d
    beta = partition.beta
    offsets = _probe_offsets(d, probes)
    worst_edge = math.inf
    edge_ok = True
    worst_ratio = math.inf
    ratio_ok = True
    if partition.cells:
        C = partition.centers
        E = partition.edges
        H = np.asarray(partition.bandwidth_at_center, dtype=float)
        upper = H - E
        lower = E - H / 2 ** (beta + 1)
        tol = 1e-12 * np.maximum(H, E)
        edge_ok = bool(np.all(upper >= -tol) and np.all(lower >= -tol))
        worst_edge = float(min(np.min(upper / np.maximum(H, 1e-300)), np.min(lower / np.maximum(H, 1e-300))))
        pts = (C[:, None, :] + E[:, None, None] * offsets[None, :, :]).reshape(-1, d)
        vals = model(pts).reshape(len(C), len(offsets))
        mx = vals.max(axis=1)
        mn = vals.min(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(mx > 0, mn / mx, 1.0)
        worst_ratio = float(ratios.min())
        ratio_ok = bool(np.all(ratios >= 0.5 - 1e-12))

    # coverage on a generic (non-dyadic) grid over omega_tilde
    om = partition.omega_tilde
    res = coverage_resolution or {1: 4001, 2: 201, 3: 41}.get(d, 11)
    t = (np.arange(res) + 0.5) / res - 0.5 + 0.123 / res
    grid = np.array(list(itertools.product(t, repeat=d))) * om.edge + om.center
    in_D = model(grid) >= partition.u
    uncovered = 0
    keys = _dyadic_key_arrays(partition)
    if in_D.any():
        pts = grid[in_D]
        covered = np.zeros(len(pts), dtype=bool)
        for depth, idx in keys.items():
            e = om.edge / 2 ** depth
            probe = np.clip(np.floor((pts - om.lower) / e).astype(np.int64), 0, 2 ** depth - 1)
            covered |= _rows_in(probe, idx, depth)
        uncovered = int((~covered).sum())

    disjoint = True
    if partition.cells:
        disjoint = sum(len(v) for v in keys.values()) == len(partition.cells) and all(
            len(np.unique(_encode(v, depth), axis=0)) == len(v) for depth, v in keys.items())
        # no kept cell may be an ancestor of another
        for depth, idx in keys.items():
            for anc_depth, anc in keys.items():
                if anc_depth < depth and _rows_in(idx >> (depth - anc_depth), anc, anc_depth).any():
                    disjoint = False
    return PartitionReport(coverage_ok=uncovered == 0, edge_ok=edge_ok, ratio_ok=ratio_ok, disjoint_ok=disjoint,
                           uncovered_points=uncovered, worst_edge_margin=worst_edge, worst_ratio=worst_ratio,
                           n_cells=len(partition.cells))


# ---------------------------------------------------------------------------
# tail covering

@dataclass(eq=False)
class TailCovering:
    """Anchored grid of edge ``edge``; cell j covers (o + i*edge, o + (i+1)*edge] per axis.

    Cubes in ``removed`` (index boxes, inclusive) miss T(u). ``masses`` and
    ``indices`` list the materialized cubes sorted by decreasing mass; when the
    grid is too large only part of it is materialized and the rest of the
    covering mass is carried in ``far_mass``.
    """

    origin: np.ndarray
    edge: float
    counts: Optional[np.ndarray]
    u: float
    removed: list
    removed_mass: float
    covering_mass: float
    tail_mass: float
    indices: np.ndarray
    masses: np.ndarray
    far_mass: float
    complete: bool
    U: Optional[int] = None
    d: int = 1

    def __len__(self) -> int:
        return len(self.masses)

    def index_of(self, points) -> tuple:
        """(indices, inside_grid) with the (lo, hi] face convention."""
        pts = as_points(points, self.d)
        z = (pts - self.origin) / self.edge
        # far-away points only need to land outside any grid
        idx = np.ceil(np.clip(z, -2.0 ** 62, 2.0 ** 62)).astype(np.int64) - 1
        inside = np.ones(len(pts), dtype=bool)
        if self.counts is not None:
            # the domain's lower face belongs to the first cell
            idx = np.where(z == 0, 0, idx)
            inside = np.all((idx >= 0) & (idx < self.counts), axis=1)
        return idx, inside

    def is_removed(self, idx: np.ndarray) -> np.ndarray:
        out = np.zeros(len(idx), dtype=bool)
        for lo, hi in self.removed:
            out |= np.all((idx >= lo) & (idx <= hi), axis=1)
        return out

    def cube(self, idx) -> Cube:
        idx = np.asarray(idx, dtype=float)
        return Cube(self.origin + (idx + 0.5) * self.edge, self.edge)

    def centers(self) -> np.ndarray:
        return self.origin + (self.indices + 0.5) * self.edge

    def compute_U(self, n: int, c_u: float) -> Optional[int]:
        if not self.complete or not len(self.masses):
            return None
        suffix = np.cumsum(self.masses[::-1])[::-1]
        ok = np.nonzero(n * n * self.masses * suffix <= c_u)[0]
        return int(ok[0]) + 1 if len(ok) else None


def compute_U(masses, n: int, c_u: float) -> Optional[int]:
    """1-based U = min{j : n^2 p_j sum_{l>=j} p_l <= c_u} for sorted masses."""
    m = np.asarray(masses, dtype=float)
    if not len(m):
        return None
    suffix = np.cumsum(m[::-1])[::-1]
    ok = np.nonzero(n * n * m * suffix <= c_u)[0]
    return int(ok[0]) + 1 if len(ok) else None


def sort_masses(indices: np.ndarray, masses: np.ndarray):
    """Decreasing mass, ties broken by lexicographic grid index."""
    keys = tuple(indices[:, k] for k in reversed(range(indices.shape[1]))) + (-masses,)
    order = np.lexsort(keys)
    return indices[order], masses[order]


def _cube_masses(model: DensityModel, origin, edge, idx: np.ndarray, order: int = 4) -> np.ndarray:
    from .density import _gl_unit

    t, w = _gl_unit(order)
    d = idx.shape[1]
    off = np.array(list(itertools.product(t, repeat=d)))
    wt = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
    out = np.empty(len(idx))
    step = max(1, 200_000 // len(off))
    for s in range(0, len(idx), step):
        lo = origin + idx[s:s + step] * edge
        pts = (lo[:, None, :] + edge * off[None, :, :]).reshape(-1, d)
        out[s:s + step] = model(pts).reshape(-1, len(off)) @ wt * edge ** d
    # cubes straddling a knot of the evaluator get a panel split there
    lo = origin + idx * edge
    straddle = np.zeros(len(idx), dtype=bool)
    for k in range(d):
        for b in model.breakpoints[k]:
            straddle |= (lo[:, k] < b) & (b < lo[:, k] + edge)
    for i in np.nonzero(straddle)[0]:
        out[i] = integrate_box(model, (lo[i], lo[i] + edge), resolution=16 if d > 1 else 64)
    return out


def tail_splitting(model: DensityModel, u: float, h: float, bulk_bbox: Optional[Cube] = None, n: Optional[int] = None,
                   c_u: float = 0.05, max_cubes: int = 200_000, probes: int = 5,
                   resolution: Optional[int] = None) -> TailCovering:
    """Grid covering of T(u) with removal of cubes that miss it.

    For box domains the edge is shrunk to h_Omega / ceil(h_Omega / h) so the
    grid tiles the box exactly, anchored at the lower corner.
    """
    if not (h > 0 and math.isfinite(h)):
        raise ValueError("tail_splitting needs a finite positive edge")
    d = model.d
    if model.domain.is_box:
        h_om = model.domain.edge
        K = int(math.ceil(h_om / h - 1e-12))
        edge = h_om / K
        origin = model.domain.lo.copy()
        counts = np.full(d, K, dtype=np.int64)
    else:
        edge = float(h)
        origin = np.zeros(d)
        counts = None

    nodes, weights, values = model.grid(resolution)
    mass_all = float(np.dot(weights, values))
    from .levelsets import tail_mass as _tail_mass

    tmass = _tail_mass(model, u, resolution)

    # region where removable cubes can live
    if bulk_bbox is not None:
        blo, bhi = bulk_bbox.lower, bulk_bbox.upper
    else:
        bulk = nodes[values >= u]
        if len(bulk):
            blo, bhi = bulk.min(axis=0), bulk.max(axis=0)
        else:
            blo = bhi = None

    removed = []
    removed_mass = 0.0
    offsets = _probe_offsets(d, probes)
    if blo is not None:
        ilo = np.floor((blo - origin) / edge).astype(np.int64) - 1
        ihi = np.ceil((bhi - origin) / edge).astype(np.int64)
        if counts is not None:
            ilo = np.clip(ilo, 0, counts - 1)
            ihi = np.clip(ihi, 0, counts - 1)
        stack = [(ilo, ihi)]
        mesh = (probes,) * d
        while stack:
            lo, hi = stack.pop()
            blo_x = origin + lo * edge
            bhi_x = origin + (hi + 1) * edge
            span = bhi_x - blo_x
            pv = model(blo_x + (offsets + 0.5) * span)
            inner = np.all((nodes >= blo_x) & (nodes <= bhi_x), axis=1)
            vmin = min(float(pv.min()), float(values[inner].min()) if inner.any() else math.inf)
            vmax = max(float(pv.max()), float(values[inner].max()) if inner.any() else -math.inf)
            single = bool(np.all(hi == lo))
            if vmin >= u:
                # dips between probes are bounded by the variation seen between neighbours
                grid = pv.reshape(mesh)
                slack = max((float(np.max(np.abs(np.diff(grid, axis=k)))) for k in range(d)), default=0.0)
                if single or vmin - slack >= u:
                    removed.append((lo.copy(), hi.copy()))
                    continue
            elif vmax < u or single:
                continue
            ax = int(np.argmax(hi - lo))
            mid = (lo[ax] + hi[ax]) // 2
            hi1 = hi.copy()
            hi1[ax] = mid
            lo2 = lo.copy()
            lo2[ax] = mid + 1
            stack.append((lo2, hi))
            stack.append((lo, hi1))
        for lo, hi in removed:
            removed_mass += integrate_box(model, (origin + lo * edge, origin + (hi + 1) * edge),
                                          resolution=max(8, 4 * int(np.max(hi - lo + 1))) if d == 1 else 16)
    covering_mass = max(mass_all - removed_mass, 0.0)
    if tmass <= 0 and covering_mass < 1e-12:
        covering_mass = 0.0

    indices = np.zeros((0, d), dtype=np.int64)
    masses = np.zeros(0)
    complete = False
    total_cubes = None if counts is None else int(np.prod(counts.astype(float)))
    if total_cubes is not None and total_cubes <= max_cubes:
        grids = np.meshgrid(*[np.arange(K) for K in counts], indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=1)
        idx = idx[~_removed_mask(idx, removed)]
        if len(idx):
            # keep only cubes whose probes see T(u)
            lo = origin + idx * edge
            pts = (lo[:, None, :] + edge * (offsets[None, :, :] + 0.5)).reshape(-1, d)
            mins = model(pts).reshape(len(idx), len(offsets)).min(axis=1)
            idx = idx[mins < u]
        m = _cube_masses(model, origin, edge, idx) if len(idx) else np.zeros(0)
        indices, masses = sort_masses(idx, m) if len(idx) else (idx, m)
        complete = True
        covering_mass = float(masses.sum())
    far_mass = max(covering_mass - float(masses.sum()), 0.0)
    cov = TailCovering(origin=origin, edge=edge, counts=counts, u=u, removed=removed, removed_mass=removed_mass,
                       covering_mass=covering_mass, tail_mass=tmass, indices=indices, masses=masses,
                       far_mass=far_mass, complete=complete, d=d)
    if n is not None:
        cov.U = cov.compute_U(n, c_u)
    return cov


def _removed_mask(idx: np.ndarray, removed: list) -> np.ndarray:
    out = np.zeros(len(idx), dtype=bool)
    for lo, hi in removed:
        out |= np.all((idx >= lo) & (idx <= hi), axis=1)
    return out


def export_cells(path, centers: np.ndarray, edges, masses=None) -> None:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    edges = np.broadcast_to(np.asarray(edges, dtype=float), (len(centers),))
    d = centers.shape[1] if centers.size else 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k + 1}" for k in range(d)] + ["edge", "mass"])
        for i, c in enumerate(centers):
            m = "" if masses is None else repr(float(masses[i]))
            w.writerow([repr(float(v)) for v in c] + [repr(float(edges[i])), m])


def export_partition(path, partition: BulkPartition, model: Optional[DensityModel] = None) -> None:
    masses = None
    if model is not None and partition.cells:
        masses = [integrate_box(model, (c.lower, c.upper), 16) for c in partition.cells]
    export_cells(path, partition.centers, partition.edges, masses)


def export_covering(path, covering: TailCovering) -> None:
    export_cells(path, covering.centers(), covering.edge, covering.masses)
