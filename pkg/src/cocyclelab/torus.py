"""Base dynamics on the circle and 2-torus: translations, regions, return times, towers.

Coordinates live in [0, 1) per axis with floor-based mod-1 reduction.  All
orbit scans here are pure functions of immutable inputs; grid sweeps are
vectorized over numpy arrays of points.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import BudgetError, TowerError

DEFAULT_BOUNDARY_TOL = 1e-9
COVERING_CAP = 10**6


def wrap(x):
    """Reduce coordinates mod 1 into [0, 1)."""
    x = np.asarray(x, dtype=float)
    return x - np.floor(x)


def circle_dist(a, b):
    """Shortest distance on the unit circle, in [0, 1/2]."""
    d = np.abs(wrap(a) - wrap(b))
    return np.minimum(d, 1.0 - d)


def torus_dist(p, q):
    """Euclidean distance on the torus (per-axis wrapped)."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    d = np.abs(wrap(p) - wrap(q))
    d = np.minimum(d, 1.0 - d)
    out = np.sqrt((d * d).sum(axis=-1))
    return out if out.size > 1 else float(out[0])


@dataclass(frozen=True)
class GridSpec:
    """Uniform sampling grid: n points per axis, d in {1, 2}."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("only d in {1, 2} supported")
        if self.n < 2:
            raise ValueError("grid needs at least 2 points per axis")

    @property
    def cell(self) -> float:
        return 1.0 / self.n

    def points(self) -> np.ndarray:
        """All grid points as an (n^d, d) array."""
        g = np.arange(self.n, dtype=float) / self.n
        if self.d == 1:
            return g[:, None]
        gx, gy = np.meshgrid(g, g, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def shape(self) -> tuple:
        return (self.n,) if self.d == 1 else (self.n, self.n)


@dataclass(frozen=True)
class TorusTranslation:
    """Translation x -> x + alpha mod 1 on the d-torus.

    ``irrational_witness`` asserts that (1, alpha_1, ..., alpha_d) are
    rationally independent; the package never proves minimality, it only
    measures epsilon-density of finite orbits (see ``minimality_witness``).
    """

    alpha: tuple
    irrational_witness: bool = True

    def __post_init__(self):
        a = tuple(float(v) for v in np.atleast_1d(self.alpha))
        object.__setattr__(self, "alpha", a)

    @property
    def d(self) -> int:
        return len(self.alpha)

    def apply(self, x, j: int = 1) -> np.ndarray:
        """f^j(x), vectorized over leading axes of x."""
        return wrap(np.asarray(x, dtype=float) + j * np.asarray(self.alpha))


def iterate(f: TorusTranslation, x, j: int) -> np.ndarray:
    """j-th iterate of the translation; a group action in j."""
    return f.apply(x, j)


class RegionK:
    """Geometric region with interior/boundary tests at a tolerance band."""

    d: int

    def interior_mask(self, pts, tol: float) -> np.ndarray:
        raise NotImplementedError

    def boundary_dist(self, pts) -> np.ndarray:
        """Distance from each point to the topological boundary of K."""
        raise NotImplementedError

    def boundary_mask(self, pts, tol: float) -> np.ndarray:
        return self.boundary_dist(pts) <= tol

    def closed_mask(self, pts, tol: float) -> np.ndarray:
        """Membership in K fattened outward by tol (closed at the boundary band)."""
        return self.interior_mask(pts, -tol)

    def shrunk(self) -> "RegionK":
        """Half-size copy about the same center."""
        raise NotImplementedError


@dataclass(frozen=True)
class Arc(RegionK):
    """Circle arc [start, start + length) mod 1."""

    start: float
    length: float
    d = 1

    def __post_init__(self):
        if not 0 < self.length <= 1:
            raise ValueError("arc length must lie in (0, 1]")
        object.__setattr__(self, "start", float(wrap(self.start)))

    @property
    def center(self) -> float:
        return float(wrap(self.start + self.length / 2))

    def offset(self, pts) -> np.ndarray:
        return wrap(np.asarray(pts, dtype=float).reshape(-1) - self.start)

    def interior_mask(self, pts, tol: float = DEFAULT_BOUNDARY_TOL) -> np.ndarray:
        o = self.offset(pts)
        return (o > tol) & (o < self.length - tol)

    def boundary_dist(self, pts) -> np.ndarray:
        o = np.asarray(pts, dtype=float).reshape(-1)
        d0 = circle_dist(o, self.start)
        d1 = circle_dist(o, self.start + self.length)
        return np.minimum(d0, d1)

    def contains_mask(self, pts, tol: float = DEFAULT_BOUNDARY_TOL) -> np.ndarray:
        o = self.offset(pts)
        return (o <= self.length + tol) | (o >= 1.0 - tol)

    def closed_mask(self, pts, tol: float) -> np.ndarray:
        return self.contains_mask(pts, tol)

    def shrunk(self) -> "Arc":
        return Arc(wrap(self.start + self.length / 4), self.length / 2)


@dataclass(frozen=True)
class Disk(RegionK):
    """Round disk on the 2-torus (center, radius), radius < 1/2."""

    center: tuple
    radius: float
    d = 2

    def __post_init__(self):
        c = tuple(float(v) for v in wrap(np.asarray(self.center, dtype=float)))
        object.__setattr__(self, "center", c)
        if not 0 < self.radius < 0.5:
            raise ValueError("disk radius must lie in (0, 1/2)")

    def _dist_to_center(self, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        d = np.abs(wrap(p) - np.asarray(self.center))
        d = np.minimum(d, 1.0 - d)
        return np.sqrt((d * d).sum(axis=-1))

    def interior_mask(self, pts, tol: float = DEFAULT_BOUNDARY_TOL) -> np.ndarray:
        return self._dist_to_center(pts) < self.radius - tol

    def boundary_dist(self, pts) -> np.ndarray:
        return np.abs(self._dist_to_center(pts) - self.radius)

    def shrunk(self) -> "Disk":
        return Disk(self.center, self.radius / 2)


@dataclass(frozen=True)
class ReturnData:
    """Per-point return data for a region K.

    ``entry_time`` is the least j >= 0 with f^j(x) in int K, ``backward_entry``
    the least j > 0 with f^-j(x) in int K.  ``window_hits`` lists boundary-hit
    times over the window [-m(K), m(K)-1]; ``inner_hits`` restricts them to
    the open interval (-backward_entry, entry_time).
    """

    entry_time: int
    backward_entry: int
    inner_hits: tuple
    window_hits: tuple

    def __post_init__(self):
        expected = tuple(
            j for j in self.window_hits if -self.backward_entry < j < self.entry_time
        )
        if tuple(self.inner_hits) != expected:
            raise ValueError("inner_hits must equal window_hits restricted to the return window")


def window(m_of_k: int) -> range:
    """Integer hit window [-m(K), m(K)-1]."""
    return range(-m_of_k, m_of_k)


def covering_number(f: TorusTranslation, K: RegionK, grid: GridSpec,
                    cap: int = COVERING_CAP, tol: float | None = None) -> int:
    """Least m such that the first m preimages of int K cover every grid point.

    Monotone nonincreasing in K.  Raises BudgetError beyond ``cap`` scans,
    which signals a region too small for the grid (or a broken setup).
    """
    if tol is None:
        tol = grid.cell / 2
    pts = grid.points()
    uncovered = np.ones(len(pts), dtype=bool)
    for j in range(cap):
        inside = K.interior_mask(f.apply(pts[uncovered], j), tol)
        rem = np.flatnonzero(uncovered)
        uncovered[rem[inside]] = False
        if not uncovered.any():
            return j + 1
    raise BudgetError(f"covering scan exceeded cap={cap}; region interior may miss the grid")


def return_data(f: TorusTranslation, K: RegionK, x, m_of_k: int,
                tol: float = DEFAULT_BOUNDARY_TOL) -> ReturnData:
    """Entry times and boundary hits of a single point over the window of K."""
    x = np.asarray(x, dtype=float).reshape(-1)
    entry = None
    for j in range(m_of_k + 1):
        if K.interior_mask(f.apply(x, j), tol)[0]:
            entry = j
            break
    if entry is None:
        raise BudgetError(f"forward scan found no interior entry within m(K)={m_of_k} steps")
    back = None
    for j in range(1, m_of_k + 1):
        if K.interior_mask(f.apply(x, -j), tol)[0]:
            back = j
            break
    if back is None:
        raise BudgetError(f"backward scan found no interior entry within m(K)={m_of_k} steps")
    hits = tuple(j for j in window(m_of_k) if K.boundary_dist(f.apply(x, j))[0] <= tol)
    inner = tuple(j for j in hits if -back < j < entry)
    return ReturnData(entry_time=entry, backward_entry=back,
                      inner_hits=inner, window_hits=hits)


def _translate_region(K: RegionK, shift) -> RegionK:
    if isinstance(K, Arc):
        return Arc(wrap(K.start + shift), K.length)
    return Disk(tuple(wrap(np.asarray(K.center) + shift)), K.radius)


def region_gap(Ka: RegionK, Kb: RegionK) -> float:
    """Distance between two congruent translated regions (negative if overlapping)."""
    if isinstance(Ka, Arc):
        return float(circle_dist(Ka.center, Kb.center) - Ka.length)
    return float(torus_dist(Ka.center, Kb.center) - 2 * Ka.radius)


@dataclass(frozen=True)
class TowerPlan:
    """A region together with a certified-disjoint run of n iterates.

    ``certificate`` is the minimal pairwise gap among K, f(K), ..., f^n(K);
    the plan is valid iff it is positive.
    """

    region: RegionK
    height: int
    certificate: float


def tower_certificate(f: TorusTranslation, K: RegionK, n: int) -> float:
    if n == 0:
        return float("inf")
    shifts = [np.asarray(f.alpha) * j for j in range(n + 1)]
    best = float("inf")
    for i in range(n + 1):
        for j in range(i + 1, n + 1):
            gap = region_gap(_translate_region(K, shifts[i]), _translate_region(K, shifts[j]))
            best = min(best, gap)
    return best


def build_tower(f: TorusTranslation, K: RegionK, n: int,
                min_size: float = 1e-8) -> TowerPlan:
    """Shrink K about its center until K, f(K), ..., f^n(K) are pairwise disjoint.

    Raises TowerError when shrinking below ``min_size`` still fails, which
    signals near-periodicity of the translation at height n.
    """
    current = K
    while True:
        cert = tower_certificate(f, current, n)
        if cert > 0:
            return TowerPlan(region=current, height=n, certificate=cert)
        size = current.length if isinstance(current, Arc) else current.radius
        if size / 2 < min_size:
            raise TowerError(
                f"no disjoint tower of height {n} above size {min_size}; "
                "translation is nearly periodic at this height")
        current = current.shrunk()


def minimality_witness(f: TorusTranslation, x, n: int,
                       probe_grid: int = 256) -> float:
    """Covering radius of the length-n orbit of x; small iff the orbit is dense.

    For d=2 the radius is measured against a probe grid (a lower bound of the
    true covering radius, like every grid sup in this package).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    orbit = wrap(x[None, :] + np.arange(n)[:, None] * np.asarray(f.alpha))
    if f.d == 1:
        pts = np.sort(orbit[:, 0])
        gaps = np.diff(np.concatenate([pts, [pts[0] + 1.0]]))
        return float(gaps.max() / 2)
    # 3x3 tiling makes the KD-tree see wrapped neighbors
    offs = np.array([[i, j] for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=float)
    tiled = (orbit[None, :, :] + offs[:, None, :]).reshape(-1, 2)
    tree = cKDTree(tiled)
    g = (np.arange(probe_grid) + 0.5) / probe_grid
    gx, gy = np.meshgrid(g, g, indexing="ij")
    probes = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dist, _ = tree.query(probes)
    return float(dist.max())
