"""Dynamical stratifications of the base associated to a region K.

Per grid point we record the forward/backward interior entry times, the
boundary-hit times over the window [-m(K), m(K)-1], and the nested depth
counts: ``depth_inner`` counts hits inside the open return window (the
skeleton filtration X_i = {depth_inner >= i}), ``depth_window`` counts all
window hits (the finer filtration W_i = {depth_window >= i}).

Grid points hit the boundary when they sit within half a grid cell of it, so
strata are fattened by one cell; every comparison here uses that matched
tolerance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError
from .torus import (Arc, Disk, GridSpec, RegionK, TorusTranslation,
                    covering_number, wrap, window)

INDEPENDENCE_TOL = 1e-8


@dataclass
class Stratification:
    grid: GridSpec
    region: RegionK
    m_of_k: int
    boundary_tol: float
    ell_plus: np.ndarray
    ell_minus: np.ndarray
    depth_inner: np.ndarray
    depth_window: np.ndarray

    def stratum_mask(self, i: int) -> np.ndarray:
        """X_i = {depth_inner >= i} as a grid-shaped boolean mask."""
        return self.depth_inner >= i

    def fine_mask(self, i: int) -> np.ndarray:
        """W_i = {depth_window >= i}."""
        return self.depth_window >= i

    def max_depth(self) -> int:
        return int(self.depth_inner.max())


def stratify(f: TorusTranslation, K: RegionK, grid: GridSpec,
             boundary_tol: float | None = None,
             m_of_k: int | None = None) -> Stratification:
    """Return data and nested strata at every grid point."""
    if boundary_tol is None:
        boundary_tol = grid.cell / 2
    if m_of_k is None:
        m_of_k = covering_number(f, K, grid)
    pts = grid.points()
    B = len(pts)
    shape = grid.shape()

    ell_plus = np.full(B, -1, dtype=np.int32)
    for j in range(m_of_k):
        open_mask = ell_plus < 0
        if not open_mask.any():
            break
        inside = K.interior_mask(f.apply(pts[open_mask], j), boundary_tol)
        idx = np.flatnonzero(open_mask)
        ell_plus[idx[inside]] = j
    if (ell_plus < 0).any():
        raise BudgetError("some grid point fails to enter int K within m(K) steps")

    ell_minus = np.full(B, -1, dtype=np.int32)
    for j in range(1, m_of_k + 1):
        open_mask = ell_minus < 0
        if not open_mask.any():
            break
        inside = K.interior_mask(f.apply(pts[open_mask], -j), boundary_tol)
        idx = np.flatnonzero(open_mask)
        ell_minus[idx[inside]] = j
    if (ell_minus < 0).any():
        raise BudgetError("some grid point fails to enter int K within m(K) backward steps")

    depth_window = np.zeros(B, dtype=np.int32)
    depth_inner = np.zeros(B, dtype=np.int32)
    for j in window(m_of_k):
        hit = K.boundary_dist(f.apply(pts, j)) <= boundary_tol
        depth_window += hit
        depth_inner += hit & (j > -ell_minus) & (j < ell_plus)

    assert int(depth_window.max()) <= 2 * m_of_k, "window depth exceeds window size"
    return Stratification(grid=grid, region=K, m_of_k=m_of_k,
                          boundary_tol=boundary_tol,
                          ell_plus=ell_plus.reshape(shape),
                          ell_minus=ell_minus.reshape(shape),
                          depth_inner=depth_inner.reshape(shape),
                          depth_window=depth_window.reshape(shape))


# ---------------------------------------------------------------------------
# transversality of boundary hits

@dataclass(frozen=True)
class HyperplaneFamily:
    """Unit normals of the pulled-back boundary tangents at the hit times.

    The base translation has identity derivative, so each hyperplane is the
    boundary tangent at the hit point carried back verbatim; we store its
    unit normal as the defining functional.
    """

    normals: np.ndarray  # (k, d)
    times: tuple


def hyperplanes_at(f: TorusTranslation, K: RegionK, x, N,
                   tol: float) -> HyperplaneFamily:
    x = np.asarray(x, dtype=float).reshape(-1)
    normals = []
    times = []
    for j in N:
        y = f.apply(x, j)
        if K.boundary_dist(y)[0] <= tol:
            times.append(j)
            if K.d == 1:
                normals.append([1.0])
            else:
                c = np.asarray(K.center)
                v = wrap(np.atleast_2d(y))[0] - c
                v = np.where(v > 0.5, v - 1.0, v)
                v = np.where(v < -0.5, v + 1.0, v)
                n = np.linalg.norm(v)
                normals.append(list(v / n) if n > 1e-15 else [1.0, 0.0])
    arr = np.asarray(normals, dtype=float).reshape(len(times), K.d)
    return HyperplaneFamily(normals=arr, times=tuple(times))


def independence_check(F: HyperplaneFamily) -> bool:
    """True iff the normal functionals have full row rank.

    An empty family counts as independent; more functionals than the base
    dimension can never be independent.
    """
    k, d = F.normals.shape
    if k == 0:
        return True
    if k > d:
        return False
    sv = np.linalg.svd(F.normals, compute_uv=False)
    return bool(sv.min() > INDEPENDENCE_TOL)


@dataclass
class TransversalityReport:
    passed: bool
    witnesses: list
    n_flagged: int


def transverse_hits_check(f: TorusTranslation, K: RegionK, N, grid: GridSpec,
                          boundary_tol: float | None = None,
                          max_witnesses: int = 50) -> TransversalityReport:
    """Check hyperplane independence at every grid point with window hits."""
    if boundary_tol is None:
        boundary_tol = grid.cell / 2
    pts = grid.points()
    N = list(N)
    hits = np.zeros(len(pts), dtype=np.int32)
    for j in N:
        hits += K.boundary_dist(f.apply(pts, j)) <= boundary_tol
    flagged = np.flatnonzero(hits >= 2)
    witnesses = []
    for i in flagged:
        fam = hyperplanes_at(f, K, pts[i], N, boundary_tol)
        if not independence_check(fam):
            sv = (np.linalg.svd(fam.normals, compute_uv=False).min()
                  if len(fam.times) <= K.d and len(fam.times) > 0 else 0.0)
            witnesses.append((tuple(pts[i]), fam.times, float(sv)))
            if len(witnesses) >= max_witnesses:
                break
    return TransversalityReport(passed=not witnesses, witnesses=witnesses,
                                n_flagged=int(len(flagged)))


@dataclass(frozen=True)
class NudgeResult:
    region: RegionK
    attempts: int
    report: TransversalityReport


def nudge_until_transverse(f: TorusTranslation, K: RegionK, N, rng,
                           grid: GridSpec, budget: int = 50,
                           jitter: float = 1e-3,
                           boundary_tol: float | None = None) -> NudgeResult:
    """Jitter the region until the transverse-hits check passes.

    The failure set for torus translations is a finite union of bad sizes
    and offsets, so a seeded jitter escapes it with probability one; budget
    exhaustion signals a pathological configuration or too-coarse tolerance.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    current = K
    for attempt in range(budget + 1):
        report = transverse_hits_check(f, current, N, grid, boundary_tol)
        if report.passed:
            return NudgeResult(region=current, attempts=attempt, report=report)
        if isinstance(current, Arc):
            new_len = current.length + float(rng.uniform(-jitter, jitter))
            if new_len <= 4 * grid.cell:
                raise BudgetError("arc too small to jitter at this grid resolution")
            current = Arc(wrap(current.start + rng.uniform(-jitter, jitter)), new_len)
        else:
            new_r = current.radius + float(rng.uniform(-jitter, jitter))
            if new_r <= 4 * grid.cell:
                raise BudgetError("disk too small to jitter at this grid resolution")
            center = wrap(np.asarray(current.center) + rng.uniform(-jitter, jitter, size=2))
            current = Disk(tuple(center), new_r)
    raise BudgetError(f"no transverse region found within {budget} jitter attempts")


# ---------------------------------------------------------------------------
# regularity report

_REPORT_HEADER = (
    "Testable consequences of stratification regularity at matched grid "
    "tolerance; the homotopy extension property itself is not machine-checkable, "
    "and these proxies may in principle disagree with it on pathological regions."
)


@dataclass
class RegularityReport:
    header: str
    depth_bound_ok: bool
    max_depth: int
    local_constancy_violations: int
    frontier_violations: int
    entry_bounds_ok: bool
    passed: bool


def _neighbor_shifts(d: int):
    if d == 1:
        return [(1,)]
    return [(1, 0), (0, 1)]


def _shifted(a: np.ndarray, shift):
    return np.roll(a, shift=[-s for s in shift],
                   axis=tuple(range(a.ndim)))


def local_constancy_violations(strat: Stratification) -> int:
    """Grid-adjacent pairs in the same skeleton stratum with different entry time."""
    depth = strat.depth_inner
    ell = strat.ell_plus
    bad = 0
    for shift in _neighbor_shifts(strat.grid.d):
        same = depth == _shifted(depth, shift)
        diff = ell != _shifted(ell, shift)
        bad += int(np.count_nonzero(same & diff))
    return bad


def frontier_violations(strat: Stratification) -> int:
    """Discrete frontier containment between the fine and skeleton filtrations.

    For each pair (i, j): a K-skeleton point of depth >= j adjacent to a
    point of W_i outside that skeleton set must itself lie in W_{i+1}.
    """
    K = strat.region
    pts = strat.grid.points()
    inK = K.closed_mask(pts, strat.boundary_tol).reshape(strat.grid.shape())
    bad = 0
    d = strat.grid.d
    for i in range(0, d + 2):
        Wi = strat.fine_mask(i)
        Wi1 = strat.fine_mask(i + 1)
        for j in range(0, d + 2):
            Kj = inK & strat.stratum_mask(j)
            outside = Wi & ~Kj
            target = Kj & ~Wi1
            for shift in _neighbor_shifts(d):
                bad += int(np.count_nonzero(outside & _shifted(target, shift)))
                bad += int(np.count_nonzero(_shifted(outside, shift) & target))
    return bad


def regularity_report(f: TorusTranslation, K: RegionK, grid: GridSpec,
                      strat: Stratification | None = None) -> RegularityReport:
    """The four machine-checkable regularity consequences on the grid."""
    if strat is None:
        strat = stratify(f, K, grid)
    d = grid.d
    max_depth = strat.max_depth()
    depth_ok = max_depth <= d
    lc = local_constancy_violations(strat)
    fr = frontier_violations(strat)
    bounds_ok = bool((strat.ell_plus <= strat.m_of_k - 1).all()
                     and (strat.ell_minus <= strat.m_of_k).all())
    return RegularityReport(header=_REPORT_HEADER,
                            depth_bound_ok=depth_ok,
                            max_depth=max_depth,
                            local_constancy_violations=lc,
                            frontier_violations=fr,
                            entry_bounds_ok=bounds_ok,
                            passed=depth_ok and lc == 0 and fr == 0 and bounds_ok)


# ---------------------------------------------------------------------------
# raster serialization

_MAGIC = b"STRA"


def save_raster(strat: Stratification, path, channel: str = "depth_inner") -> None:
    """Dense int32 raster, row-major, 16-byte header (magic, d, nx, ny)."""
    arr = getattr(strat, channel).astype("<i4")
    nx = strat.grid.n
    ny = strat.grid.n if strat.grid.d == 2 else 1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _MAGIC, strat.grid.d, nx, ny))
        fh.write(arr.tobytes(order="C"))


def load_raster(path) -> tuple:
    """Returns (d, array) from a raster file written by ``save_raster``."""
    with open(path, "rb") as fh:
        magic, d, nx, ny = struct.unpack("<4sIII", fh.read(16))
        if magic != _MAGIC:
            raise ValueError("bad raster magic")
        data = np.frombuffer(fh.read(), dtype="<i4")
    shape = (nx,) if d == 1 else (nx, ny)
    return int(d), data.reshape(shape)
