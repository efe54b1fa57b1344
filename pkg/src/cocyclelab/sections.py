"""Sections of fiber bundles over circle rotations and the constructive core:
push-forwards and defects, concentration of non-invariance into a small arc,
tower dissipation with the b/n defect bound, the domination-creating
perturbation, and almost-coboundary construction.

The constructive pipeline runs on grid-commensurate circle rotations (the
translation maps grid points to grid points), which removes all base-lookup
error from measured defects; ``snap_translation`` produces the nearest such
rotation.  Everything else (push_section, defects) works for any translation
with nearest-grid lookups and records the resolution error it adds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cocycles import Cocycle, grass_distance, orthonormal_frame, principal_angles
from .errors import (HomotopyClassError, InvariancePreconditionError,
                     TowerError)
from .fibers import (FiberPath, FiberSpace, Grassmann, Homotopy, SO3, S3,
                     SPHERE2, lipschitz_homotopy, loop_class)
from .rotation3 import quat_conj, quat_mul
from .strata import regularity_report
from .torus import Arc, GridSpec, TorusTranslation, circle_dist, wrap

INVARIANCE_TOL = 1e-8
CONTINUITY_BOUND = 0.5


# ---------------------------------------------------------------------------
# fiber isometries acting on stored values

def act_values(space: FiberSpace, iso, vals) -> np.ndarray:
    """Apply isometries to fiber values, batched along the first axis."""
    iso = np.asarray(iso, dtype=float)
    vals = np.asarray(vals, dtype=float)
    if space.tag == "s3":
        return quat_mul(iso, vals)
    if space.tag == "sphere2":
        return np.einsum("...ij,...j->...i", iso, vals)
    return iso @ vals  # rotation matrices and plane frames alike


def inv_isometries(space: FiberSpace, iso) -> np.ndarray:
    iso = np.asarray(iso, dtype=float)
    if space.tag == "s3":
        return quat_conj(iso)
    return np.swapaxes(iso, -1, -2)


# ---------------------------------------------------------------------------
# sections

@dataclass
class FiberSection:
    """Grid-sampled section of a trivial bundle over the circle or torus."""

    space: FiberSpace
    grid: GridSpec
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def copy(self) -> "FiberSection":
        return FiberSection(self.space, self.grid, self.values.copy(), dict(self.meta))

    def continuity_modulus(self) -> float:
        """Max fiber distance between circularly adjacent grid values."""
        rolled = np.roll(self.values, -1, axis=0)
        return float(np.max(self.space.batch_distance(self.values, rolled)))

    def check_continuity(self, bound: float = CONTINUITY_BOUND) -> None:
        m = self.continuity_modulus()
        if m > bound:
            raise ValueError(f"section continuity proxy violated: {m:.3f} > {bound}")


def constant_section(space: FiberSpace, grid: GridSpec, value) -> FiberSection:
    value = np.asarray(value, dtype=float)
    vals = np.broadcast_to(value, (grid.n ** grid.d,) + value.shape).copy()
    return FiberSection(space=space, grid=grid, values=vals)


def section_from_map(space: FiberSpace, grid: GridSpec, fn) -> FiberSection:
    pts = grid.points()
    vals = np.stack([np.asarray(fn(p), dtype=float) for p in pts])
    return FiberSection(space=space, grid=grid, values=vals)


@dataclass(frozen=True)
class SkewProduct:
    """Bundle automorphism g(x, y) = (f(x), iso(x) . y) over a torus translation.

    ``iso_at`` maps base points (B, d) to fiber isometries in the encoding the
    space expects: orthogonal matrices, or unit quaternions for the S3 fiber.
    """

    f: TorusTranslation
    space: FiberSpace
    iso_at: Callable[[np.ndarray], np.ndarray]
    label: str = "skew"

    @classmethod
    def from_cocycle(cls, f: TorusTranslation, A: Cocycle, space: FiberSpace,
                     label: str | None = None) -> "SkewProduct":
        if space.tag == "s3":
            raise ValueError("matrix cocycles do not act on the quaternion fiber")
        return cls(f=f, space=space, iso_at=A.__call__, label=label or A.label)


def _nearest_indices(grid: GridSpec, pts) -> tuple:
    """Nearest grid indices of points plus the worst snap distance."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = grid.n
    idx = np.mod(np.round(pts * n).astype(int), n)
    snapped = idx / n
    err = float(np.max(circle_dist(pts.ravel(), snapped.ravel())))
    if grid.d == 1:
        return idx[:, 0], err
    return idx[:, 0] * n + idx[:, 1], err


def push_section(g: SkewProduct, sigma: FiberSection) -> FiberSection:
    """(g_* sigma)(x) = g(sigma(f^-1 x)), f^-1 x resolved to the nearest grid point.

    The isometry itself is evaluated at the exact preimage; only the section
    lookup snaps, and the snap distance is recorded in ``meta``.
    """
    grid = sigma.grid
    pts = grid.points()
    prev = g.f.apply(pts, -1)
    idx, err = _nearest_indices(grid, prev)
    iso = g.iso_at(prev)
    vals = act_values(g.space, iso, sigma.values[idx])
    out = FiberSection(space=g.space, grid=grid, values=vals)
    out.meta["lookup_snap"] = err
    return out


def section_distance(sigma: FiberSection, tau: FiberSection) -> float:
    """Sup over the grid of the fiber distance between two sections."""
    if sigma.space.tag != tau.space.tag:
        raise ValueError("sections live in different fiber spaces")
    return float(np.max(sigma.space.batch_distance(sigma.values, tau.values)))


def defect(g: SkewProduct, sigma: FiberSection) -> float:
    """d(g_* sigma, sigma): zero exactly for invariant sections (up to lookups)."""
    return section_distance(push_section(g, sigma), sigma)


def section_value_at(sigma: FiberSection, position: float):
    """Section value at an arbitrary circle position by geodesic interpolation."""
    n = sigma.grid.n
    p = float(wrap(position)) * n
    i0 = int(math.floor(p)) % n
    frac = p - math.floor(p)
    if frac < 1e-12:
        return sigma.values[i0]
    return sigma.space.geodesic(sigma.values[i0], sigma.values[(i0 + 1) % n], frac)


# ---------------------------------------------------------------------------
# isotopies

@dataclass(frozen=True)
class IsotopyFamily:
    """Continuous family of fiberwise isometries over the base, identity at t=0.

    ``iso_at(t, pts)`` returns the isometries at time t over base points.
    """

    iso_at: Callable[[float, np.ndarray], np.ndarray]
    label: str = "isotopy"

    def validate(self, space: FiberSpace, pts, tol: float = 1e-10) -> None:
        iso0 = np.asarray(self.iso_at(0.0, np.atleast_2d(pts)), dtype=float)
        if space.tag == "s3":
            ident = np.zeros(iso0.shape)
            ident[..., 0] = 1.0
            err = np.abs(iso0 - ident).max()
        else:
            err = np.abs(iso0 - np.eye(iso0.shape[-1])).max()
        if err > tol:
            raise ValueError(f"isotopy is not the identity at t=0 (error {err:.2e})")


def identity_isotopy(space: FiberSpace) -> IsotopyFamily:
    def iso(t, pts):
        B = len(np.atleast_2d(pts))
        if space.tag == "s3":
            q = np.zeros((B, 4))
            q[:, 0] = 1.0
            return q
        return np.broadcast_to(np.eye(3), (B, 3, 3)).copy()

    return IsotopyFamily(iso_at=iso, label="identity")


# ---------------------------------------------------------------------------
# commensurate circle grids

def grid_shift(f: TorusTranslation, grid: GridSpec, tol: float = 1e-9) -> Optional[int]:
    """Integer cell shift of the translation on this grid, or None."""
    if f.d != 1:
        return None
    k = f.alpha[0] * grid.n
    return int(round(k)) % grid.n if abs(k - round(k)) <= tol else None


def snap_translation(alpha: float, n: int) -> TorusTranslation:
    """Nearest grid-commensurate circle rotation whose grid orbit is one cycle."""
    k0 = int(round(float(alpha) * n)) % n
    for dk in range(n):
        for k in ((k0 + dk) % n, (k0 - dk) % n):
            if k != 0 and math.gcd(k, n) == 1:
                return TorusTranslation((k / n,))
    raise ValueError("no coprime shift found")


def _entry_steps(N: int, k: int, interior_cells: np.ndarray) -> np.ndarray:
    """steps[c] = min j >= 0 with (c + j*k) mod N in the interior cell set."""
    kinv = pow(k, -1, N)
    seq_pos = (np.arange(N) * kinv) % N  # position of each cell along the orbit of 0
    interior_pos = np.sort(seq_pos[interior_cells])
    pos = seq_pos
    nxt = np.searchsorted(interior_pos, pos, side="left")
    wrapped = nxt == len(interior_pos)
    target = interior_pos[np.where(wrapped, 0, nxt)]
    steps = (target - pos) % N
    return steps


@dataclass(frozen=True)
class TowerArcChoice:
    arc: Arc
    width_cells: int
    entry_a: int
    entry_b: int
    m_of_k: int


def choose_tower_arc(N: int, k: int, n: int, min_width: int = 6,
                     entry_bias: int = 0) -> TowerArcChoice:
    """Pick a grid-aligned arc disjoint from its first n iterates.

    The start cell is chosen so both boundary orbits enter the interior
    quickly (short pull-back chains), and the width so that no point collects
    two boundary hits inside its window (the skeleton above depth one is
    empty, which the degree-one retraction construction requires).
    """
    gaps = (np.arange(1, n + 1) * k) % N
    min_gap = int(np.minimum(gaps, N - gaps).min())
    if min_gap - 1 < min_width:
        raise TowerError(f"height {n} leaves room for only {min_gap - 1} cells")
    kinv = pow(k, -1, N)
    w = min_gap - 1
    while w >= min_width:
        jstar = (w * kinv) % N
        interior = (np.arange(1, w),)  # offsets from the start cell
        # m(K) from the entry-step array of a trial start at 0
        cells = np.arange(1, w)
        steps = _entry_steps(N, k, cells)
        m_of_k = int(steps.max()) + 1
        if min(jstar, N - jstar) > 2 * m_of_k + 2:
            ia = np.arange(N)
            ib = (ia + w) % N
            score = np.maximum(steps[ia], steps[ib])
            # entries at marked cells must be distinct interior cells
            la = steps[ia]
            lb = steps[ib]
            ma = (ia + la * k) % N
            mb = (ib + lb * k) % N
            ok = (ma != mb) & (la >= 1) & (lb >= 1)
            score = np.where(ok, score, N)
            best = int(np.argmin(np.roll(score, -entry_bias)))
            best = (best + entry_bias) % N
            if score[best] < N:
                return TowerArcChoice(arc=Arc(best / N, w / N), width_cells=w,
                                      entry_a=int(la[best]), entry_b=int(lb[best]),
                                      m_of_k=m_of_k)
        w -= 1
    raise TowerError("no admissible arc width found")


# ---------------------------------------------------------------------------
# concentration of non-invariance (circle base)

def _retract_square(s: float, t: float) -> tuple:
    """Radial retraction of the unit square onto bottom and both sides.

    Projects (s, t) from the point (1/2, 2) to the first hit of
    {t'=0} or {s'=0} or {s'=1}; returns ("bottom", s') or ("side", 0/1, t').
    """
    if t <= 0:
        return ("bottom", s)
    lam_b = 2.0 / (2.0 - t)
    s_b = 0.5 + lam_b * (s - 0.5)
    if 0.0 <= s_b <= 1.0:
        return ("bottom", s_b)
    if s < 0.5:
        lam = 0.5 / (0.5 - s)
        return ("side", 0.0, 2.0 + lam * (t - 2.0))
    lam = 0.5 / (s - 0.5)
    return ("side", 1.0, 2.0 + lam * (t - 2.0))


@dataclass
class SectionFamily:
    """Family of sections over a time grid; slice 0 is the input section."""

    space: FiberSpace
    grid: GridSpec
    t_grid: np.ndarray
    values: np.ndarray  # (n_t, n_grid, ...)
    meta: dict = field(default_factory=dict)

    def slice(self, i: int) -> FiberSection:
        return FiberSection(space=self.space, grid=self.grid,
                            values=self.values[i].copy(),
                            meta={"t": float(self.t_grid[i])})

    @property
    def final(self) -> FiberSection:
        return self.slice(len(self.t_grid) - 1)


class Concentrator:
    """Constructive engine: sections invariant off a small arc, circle base.

    Implements the degree-one case of the inductive extension: values on the
    skeleton inside the arc are frozen at the input section, boundary columns
    are pulled back along their entry orbits, the interior is filled by the
    square retraction over each sub-segment, and everything off the arc is
    propagated backward along orbits so the conjugated-family invariance
    identity holds exactly away from the interior.
    """

    def __init__(self, g: SkewProduct, isotopy: IsotopyFamily,
                 sigma: FiberSection, K: Arc,
                 invariance_tol: float = INVARIANCE_TOL):
        self.g = g
        self.space = g.space
        self.sigma = sigma
        self.K = K
        grid = sigma.grid
        if grid.d != 1:
            raise ValueError("the concentration construction runs on circle grids")
        self.grid = grid
        N = grid.n
        k = grid_shift(g.f, grid)
        if k is None:
            raise ValueError("translation is not grid-commensurate; use snap_translation")
        if math.gcd(k, N) != 1:
            raise ValueError("grid orbit splits into several cycles; choose a coprime shift")
        self.N, self.k = N, k
        ia = K.start * N
        w = K.length * N
        if abs(ia - round(ia)) > 1e-9 or abs(w - round(w)) > 1e-9:
            raise ValueError("arc endpoints must sit on the grid")
        self.ia, self.w = int(round(ia)) % N, int(round(w))
        if not 4 <= self.w:
            raise ValueError("arc too narrow: need at least 4 cells")
        self.ib = (self.ia + self.w) % N

        interior_offsets = np.arange(1, self.w)
        self.interior_cells = (self.ia + interior_offsets) % N
        # strict-interior entries for grid cells, half-open entries for
        # fractional positions (whose offset never sits exactly on a cell edge)
        self.entry_strict = _entry_steps(N, k, self.interior_cells)
        self.entry_halfopen = _entry_steps(N, k, (self.ia + np.arange(self.w)) % N)

        self.ell_a = int(self.entry_strict[self.ia])
        self.ell_b = int(self.entry_strict[self.ib])
        self.mark_a = int((self.ia + self.ell_a * k) % N)
        self.mark_b = int((self.ib + self.ell_b * k) % N)
        if self.mark_a == self.mark_b:
            raise ValueError("boundary orbits share their first entry cell; jitter the arc")

        self.m_of_k = int(self.entry_strict.max()) + 1
        pts = grid.points()
        self.pts = pts
        self.A_vals = np.asarray(g.iso_at(pts), dtype=float)
        self.isotopy = isotopy
        isotopy.validate(g.space, pts[:4])
        self._iso_cache: dict = {}
        self._G_cache: dict = {}

        g0 = SkewProduct(f=g.f, space=g.space,
                         iso_at=lambda p: self._G_field_at_points(0.0, p),
                         label="conjugated-start")
        d0 = defect(g0, sigma)
        if d0 > invariance_tol:
            raise InvariancePreconditionError(
                f"input section is not invariant under the t=0 conjugate "
                f"(defect {d0:.2e} > {invariance_tol:.0e})")
        self.start_defect = d0

        # offsets (in cells) of the marked points along the arc, with columns
        off_a = (self.mark_a - self.ia) % N
        off_b = (self.mark_b - self.ia) % N
        marks = sorted({0, off_a, off_b, self.w})
        self.mark_offsets = marks
        self._column_cells = {0: self.ia, self.w: self.ib,
                              off_a: self.mark_a, off_b: self.mark_b}
        self._column_chain = {0: (self.ia, self.ell_a, self.mark_a),
                              self.w: (self.ib, self.ell_b, self.mark_b)}

    # -- conjugated family ---------------------------------------------------

    def _iso_grid(self, s: float) -> np.ndarray:
        key = round(float(s), 12)
        if key not in self._iso_cache:
            self._iso_cache[key] = np.asarray(
                self.isotopy.iso_at(float(s), self.pts), dtype=float)
        return self._iso_cache[key]

    def G_field(self, t: float) -> np.ndarray:
        """Fiber maps of the conjugate automorphism at time t, per grid cell."""
        key = round(float(t), 12)
        if key not in self._G_cache:
            H = self._iso_grid(1.0 - float(t))
            fwd = (np.arange(self.N) + self.k) % self.N
            if self.space.tag == "s3":
                G = quat_mul(H[fwd], self.A_vals)
            else:
                G = H[fwd] @ self.A_vals
            self._G_cache[key] = G
        return self._G_cache[key]

    def _G_field_at_points(self, t: float, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx, err = _nearest_indices(self.grid, pts)
        if err > 1e-9:
            raise ValueError("conjugate family is tabulated on the grid only")
        return self.G_field(t)[idx]

    # -- column values --------------------------------------------------------

    def column_value(self, offset: int, t: float):
        """Value of the time-t section on a marked column of the arc."""
        cell = self._column_cells[offset]
        if offset not in self._column_chain:
            return self.sigma.values[cell]
        start, ell, mark = self._column_chain[offset]
        G = self.G_field(t)
        val = self.sigma.values[mark]
        chain = (start + np.arange(ell) * self.k) % self.N
        for c in chain[::-1]:
            val = act_values(self.space, inv_isometries(self.space, G[c]), val)
        return val

    # -- interior evaluation ---------------------------------------------------

    def eval_interior(self, offset: float, t: float):
        """Time-t value at arc offset (in cells, 0 < offset < w), any position."""
        marks = self.mark_offsets
        for i in range(len(marks) - 1):
            u, v = marks[i], marks[i + 1]
            if u <= offset <= v:
                break
        if v == u:
            return self.column_value(u, t)
        s = (offset - u) / (v - u)
        hit = _retract_square(float(s), float(t))
        if hit[0] == "bottom":
            pos = (self.ia + u + hit[1] * (v - u)) / self.N
            return section_value_at(self.sigma, pos)
        side, tprime = hit[1], np.clip(hit[2], 0.0, 1.0)
        return self.column_value(u if side == 0.0 else v, float(tprime))

    # -- full slices ------------------------------------------------------------

    def grid_slice(self, t: float) -> np.ndarray:
        """Section values at every grid cell at family time t."""
        N, k = self.N, self.k
        G = self.G_field(t)
        Ginv = inv_isometries(self.space, G)
        vals = np.empty_like(self.sigma.values)
        inside = np.zeros(N, dtype=bool)
        inside[self.interior_cells] = True
        for off in range(1, self.w):
            vals[(self.ia + off) % N] = self.eval_interior(float(off), t)
        # backward propagation along the single orbit cycle, ending inside K
        kinv = pow(k, -1, N)
        seq = (self.mark_a + np.arange(1, N + 1) * k) % N  # ends at mark_a
        for c in seq[::-1]:
            if inside[c]:
                continue
            vals[c] = act_values(self.space, Ginv[c], vals[(c + k) % N])
        return vals

    def check_identity(self, vals: np.ndarray, t: float) -> float:
        """Sup distance of the invariance identity off the interior cells."""
        G = self.G_field(t)
        pushed = act_values(self.space, G, vals)
        fwd = (np.arange(self.N) + self.k) % self.N
        dist = self.space.batch_distance(pushed, vals[fwd])
        outside = np.ones(self.N, dtype=bool)
        outside[self.interior_cells] = False
        return float(dist[outside].max())

    # -- evaluation of the final section anywhere -------------------------------

    def phi1_value(self, position: float):
        """Final-slice value at an arbitrary circle position.

        Off the arc interior this pulls back along the orbit to the first
        interior entry using the base isometries (the t=1 conjugate equals the
        input automorphism, which is closed-form off the grid).
        """
        pos = float(wrap(position))
        off = (pos - self.K.start) % 1.0
        off_cells = off * self.N
        if 0 < off_cells < self.w and abs(off_cells - round(off_cells)) > 1e-12:
            return self.eval_interior(off_cells, 1.0)
        if 0 < off_cells < self.w:
            return self.eval_interior(float(round(off_cells)), 1.0)
        cell = math.floor(off_cells) % self.N
        frac = off_cells - math.floor(off_cells)
        base_cell = (self.ia + cell) % self.N
        steps = int(self.entry_halfopen[base_cell] if frac > 1e-12
                    else self.entry_strict[base_cell])
        p = wrap(pos + steps * self.g.f.alpha[0])
        val = self.phi1_interior_at(p)
        for j in range(steps - 1, -1, -1):
            q = np.atleast_2d(wrap(pos + j * self.g.f.alpha[0]))
            iso = np.asarray(self.g.iso_at(q), dtype=float)[0]
            val = act_values(self.space, inv_isometries(self.space, iso), val)
        return val

    def phi1_interior_at(self, position: float):
        off_cells = float((float(position) - self.K.start) % 1.0) * self.N
        if not 0 < off_cells < self.w:
            raise ValueError("position is not inside the arc")
        return self.eval_interior(off_cells, 1.0)


def concentrate_noninvariance(g: SkewProduct, isotopy: IsotopyFamily,
                              sigma: FiberSection, K: Arc,
                              t_samples: int = 9,
                              identity_tol: float = 1e-6) -> SectionFamily:
    """Family of sections, starting at sigma, whose non-invariance under the
    conjugated automorphisms is confined to the interior of the arc.

    Postconditions (checked): the slice at t=0 satisfies the invariance
    identity everywhere; every slice satisfies it off the arc interior.
    """
    conc = Concentrator(g, isotopy, sigma, K)
    t_grid = np.linspace(0.0, 1.0, t_samples)
    slices = np.stack([conc.grid_slice(t) for t in t_grid])
    worst = 0.0
    for i, t in enumerate(t_grid):
        worst = max(worst, conc.check_identity(slices[i], float(t)))
    if worst > identity_tol:
        raise InvariancePreconditionError(
            f"off-arc invariance identity failed at {worst:.2e} > {identity_tol:.0e}")
    d0 = float(np.max(sigma.space.batch_distance(slices[0], sigma.values)))
    fam = SectionFamily(space=g.space, grid=sigma.grid, t_grid=t_grid,
                        values=slices)
    fam.meta.update(builder=conc, off_arc_identity_sup=worst,
                    start_slice_distance=d0, start_defect=conc.start_defect)
    return fam


# ---------------------------------------------------------------------------
# paths over the arc and the tower homotopy

def _arc_positions(conc: Concentrator, oversample: int) -> np.ndarray:
    M = conc.w * oversample
    return wrap(conc.K.start + (np.arange(M + 1) / M) * conc.K.length)


def batch_pull(g: SkewProduct, positions, steps, end_values) -> np.ndarray:
    """Pull fiber values backward along orbits: value at x from value at f^steps(x).

    ``steps`` may be a scalar or a per-sample array; application is batched
    over the samples still active at each orbit index.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1)
    steps = np.broadcast_to(np.asarray(steps, dtype=int), positions.shape).copy()
    vals = np.asarray(end_values, dtype=float).copy()
    alpha = g.f.alpha[0]
    for j in range(int(steps.max()) - 1, -1, -1):
        active = steps > j
        if not active.any():
            continue
        q = wrap(positions[active] + j * alpha)[:, None]
        iso = np.asarray(g.iso_at(q), dtype=float)
        vals[active] = act_values(g.space, inv_isometries(g.space, iso), vals[active])
    return vals


def phi1_values_at(conc: Concentrator, positions) -> np.ndarray:
    """Final-slice values at arbitrary circle positions, batched.

    Interior positions evaluate through the retraction; others pull back
    along their orbits to the first interior entry.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1)
    N, w = conc.N, conc.w
    off_cells = ((positions - conc.K.start) % 1.0) * N
    frac = off_cells - np.floor(off_cells)
    on_grid = np.minimum(frac, 1.0 - frac) < 1e-9
    off_round = np.where(on_grid, np.round(off_cells), off_cells)
    interior = (off_round > 1e-12) & (off_round < w - 1e-12)

    sample_shape = conc.sigma.values.shape[1:]
    out = np.empty((len(positions),) + sample_shape)
    for i in np.flatnonzero(interior):
        out[i] = conc.eval_interior(float(off_round[i]), 1.0)
    ext = np.flatnonzero(~interior)
    if len(ext):
        cells = (conc.ia + np.floor(off_cells[ext]).astype(int)) % N
        steps = np.where(on_grid[ext],
                         conc.entry_strict[(conc.ia + np.round(off_cells[ext]).astype(int)) % N],
                         conc.entry_halfopen[cells])
        entry_pos = wrap(positions[ext] + steps * conc.g.f.alpha[0])
        entry_vals = np.empty((len(ext),) + sample_shape)
        eo = ((entry_pos - conc.K.start) % 1.0) * N
        for r, pos_off in enumerate(eo):
            entry_vals[r] = conc.eval_interior(float(pos_off), 1.0)
        out[ext] = batch_pull(conc.g, positions[ext], steps, entry_vals)
    return out


def make_tower_paths(conc: Concentrator, n: int, oversample: int = 8,
                     target_step: float = 0.35, max_oversample: int = 512) -> tuple:
    """The final slice over the arc and its n-step pull-back, as paths.

    Oversampling doubles until adjacent samples are closer than
    ``target_step`` so the cover lifts are branch-unambiguous.
    """
    g = conc.g
    space = conc.space
    alpha = g.f.alpha[0]
    while True:
        positions = _arc_positions(conc, oversample)
        p0 = phi1_values_at(conc, positions)
        far_vals = phi1_values_at(conc, wrap(positions + n * alpha))
        p1 = batch_pull(g, positions, n, far_vals)
        step0 = float(np.max(space.batch_distance(p0[:-1], p0[1:])))
        step1 = float(np.max(space.batch_distance(p1[:-1], p1[1:])))
        if max(step0, step1) <= target_step or oversample >= max_oversample:
            break
        oversample *= 2
    path0 = FiberPath.from_samples(space, p0)
    path1 = FiberPath.from_samples(space, p1)
    return path0, path1, positions, oversample


def tower_homotopy(conc: Concentrator, n: int, oversample: int = 8) -> Homotopy:
    """Rel-endpoint bounded-speed homotopy between the arc slice and its pull-back."""
    path0, path1, positions, os_used = make_tower_paths(conc, n, oversample)
    t_grid = np.arange(n + 1) / n
    H = lipschitz_homotopy(conc.space, path0, path1, rel_endpoints=True,
                           t_grid=t_grid)
    H.x_params = positions
    H.meta = {"oversample": os_used}
    return H


def tower_dissipate(g: SkewProduct, phi1: FiberSection, K: Arc, n: int,
                    homotopy: Homotopy) -> FiberSection:
    """Spread the arc's non-invariance over n disjoint tower levels.

    Level j of the tower carries the pushed homotopy slice at time j/n, so
    consecutive levels differ by one homotopy step and the defect obeys
    c*b/n with c = 1 for the product bundle and b the measured homotopy speed.
    """
    grid = phi1.grid
    N = grid.n
    k = grid_shift(g.f, grid)
    if k is None:
        raise ValueError("translation is not grid-commensurate")
    from .torus import tower_certificate
    cert = tower_certificate(g.f, K, n)
    if cert <= 0:
        raise TowerError(f"arc is not disjoint from its first {n} iterates")
    ia = int(round(K.start * N)) % N
    w = int(round(K.length * N))
    positions = np.asarray(homotopy.x_params)
    M = len(positions) - 1
    os_factor = M // w
    vals = phi1.values.copy()
    cells = (ia + np.arange(1, w)) % N
    sample_idx = np.arange(1, w) * os_factor
    # accumulated isometries A^{(j)} at the base cells, advanced level by level
    if g.space.tag == "s3":
        acc = np.zeros((w - 1, 4))
        acc[:, 0] = 1.0
    else:
        acc = np.broadcast_to(np.eye(3), (w - 1, 3, 3)).copy()
    level_pts = grid.points()[cells]
    for j in range(0, n + 1):
        slice_vals = np.stack([homotopy.value(int(s), j / n) for s in sample_idx])
        target = (cells + j * k) % N
        vals[target] = act_values(g.space, acc, slice_vals)
        if j < n:
            iso = np.asarray(g.iso_at(wrap(level_pts + j * g.f.alpha[0])), dtype=float)
            acc = quat_mul(iso, acc) if g.space.tag == "s3" else iso @ acc
    out = FiberSection(space=g.space, grid=grid, values=vals)
    b = homotopy.measured_lipschitz
    out.meta.update(tower_height=n, trivialization_lipschitz=1.0,
                    homotopy_lipschitz=b, defect_bound=b / n,
                    tower_certificate=cert)
    return out


# ---------------------------------------------------------------------------
# the end-to-end almost-invariant-section construction

@dataclass
class SectionHomotopyCertificate:
    """Sampled chain of sections from the input to the output section.

    Three legs: the concentration family, the per-level unwinding of the
    tower, and the reparametrization of the tower homotopy.  ``verify``
    streams slices at increasing resolution until adjacent slices are closer
    than the continuity bound, returning (achieved bound, slices used).
    """

    conc: "Concentrator"
    homotopy: Homotopy
    arc: Arc
    n: int
    trivial: bool = False

    def _leg_eval(self, leg: int):
        conc, n = self.conc, self.n
        g = conc.g
        grid = conc.grid
        N, k, w, ia = conc.N, conc.k, conc.w, conc.ia
        cells = (ia + np.arange(1, w)) % N
        positions = np.asarray(self.homotopy.x_params)
        os_factor = (len(positions) - 1) // w
        sample_idx = np.arange(1, w) * os_factor

        if leg == 0:
            return lambda t: conc.grid_slice(t)

        phi1 = conc.grid_slice(1.0)

        def acc_isos():
            if g.space.tag == "s3":
                acc = np.zeros((w - 1, 4))
                acc[:, 0] = 1.0
            else:
                acc = np.broadcast_to(np.eye(3), (w - 1, 3, 3)).copy()
            out = [acc.copy()]
            pts = grid.points()[cells]
            for j in range(n):
                iso = np.asarray(g.iso_at(wrap(pts + j * g.f.alpha[0])), dtype=float)
                acc = quat_mul(iso, acc) if g.space.tag == "s3" else iso @ acc
                out.append(acc.copy())
            return out

        accs = acc_isos()

        if leg == 2:
            def eval2(v):
                vals = phi1.copy()
                for j in range(n + 1):
                    t_par = (1.0 - v) + v * (j / n)
                    sl = np.stack([self.homotopy.value(int(s), t_par) for s in sample_idx])
                    vals[(cells + j * k) % N] = act_values(g.space, accs[j], sl)
                return vals
            return eval2

        # leg 1: unwind each level from the final slice to its pulled value
        level_homotopies: dict = {}

        def level_h(j: int) -> Homotopy:
            if j not in level_homotopies:
                src = np.stack([
                    np.asarray(batch_pull(
                        g, positions, j, phi1_values_at(conc, wrap(positions + j * g.f.alpha[0]))),
                        dtype=float)])[0]
                dst = np.stack([self.homotopy.value(i, 1.0) for i in range(len(positions))])
                level_homotopies[j] = lipschitz_homotopy(
                    g.space, FiberPath.from_samples(g.space, src),
                    FiberPath.from_samples(g.space, dst), rel_endpoints=True,
                    t_grid=np.linspace(0.0, 1.0, 9))
            return level_homotopies[j]

        def eval1(u):
            vals = phi1.copy()
            for j in range(n + 1):
                H = level_h(j)
                sl = np.stack([H.value(int(s), u) for s in sample_idx])
                vals[(cells + j * k) % N] = act_values(g.space, accs[j], sl)
            return vals
        return eval1

    def verify(self, bound: float = CONTINUITY_BOUND, start_steps: int = 8,
               cap: int = 512) -> dict:
        if self.trivial:
            return {"max_adjacent": 0.0, "slices": 1, "passed": True}
        space = self.conc.space
        worst_overall = 0.0
        total = 0
        for leg in range(3):
            ev = self._leg_eval(leg)
            steps = start_steps
            while True:
                ts = np.linspace(0.0, 1.0, steps + 1)
                worst = 0.0
                prev = ev(ts[0])
                for t in ts[1:]:
                    cur = ev(t)
                    worst = max(worst, float(np.max(space.batch_distance(prev, cur))))
                    prev = cur
                if worst <= bound or steps >= cap:
                    break
                steps *= 2
            worst_overall = max(worst_overall, worst)
            total += steps + 1
        return {"max_adjacent": worst_overall, "slices": total,
                "passed": worst_overall <= bound}

    def sample(self, per_leg: int = 5) -> list:
        if self.trivial:
            return [self.conc.sigma.values.copy()]
        out = []
        for leg in range(3):
            ev = self._leg_eval(leg)
            for t in np.linspace(0.0, 1.0, per_leg):
                out.append(ev(float(t)))
        return out


@dataclass
class AlmostInvariantResult:
    section: FiberSection
    measured_defect: float
    tower_height: int
    arc: Arc
    homotopy_lipschitz: float
    certificate: SectionHomotopyCertificate
    start_defect: float


def _pipeline_once(g: SkewProduct, sigma: FiberSection, isotopy: IsotopyFamily,
                   n: int, t_samples: int, entry_bias: int = 0) -> tuple:
    grid = sigma.grid
    k = grid_shift(g.f, grid)
    if k is None:
        raise ValueError("pipeline needs a grid-commensurate rotation; see snap_translation")
    choice = choose_tower_arc(grid.n, k, n, entry_bias=entry_bias)
    arc = choice.arc
    rep = regularity_report(g.f, arc, grid, strat=None)
    if not rep.passed:
        raise InvariancePreconditionError(
            f"chosen arc fails the regularity proxies: {rep}")
    fam = concentrate_noninvariance(g, isotopy, sigma, arc, t_samples=t_samples)
    conc: Concentrator = fam.meta["builder"]
    H = tower_homotopy(conc, n)
    phi1 = fam.final
    omega = tower_dissipate(g, phi1, arc, n, H)
    return omega, conc, H, arc, fam


def almost_invariant_section(g: SkewProduct, sigma: FiberSection,
                             isotopy: IsotopyFamily, epsilon: float,
                             t_samples: int = 9,
                             exact_tol: float = 1e-9) -> AlmostInvariantResult:
    """Section with defect below epsilon, fibered homotopic to the input.

    Orchestrates: tower height above (pi + 0.1)/epsilon, arc choice,
    concentration, the bounded-speed tower homotopy, dissipation; retries
    once with the measured homotopy speed if the first height was too small.
    Exactly invariant inputs return unchanged.
    """
    grid = sigma.grid
    if epsilon < 4.0 / grid.n:
        raise ValueError("epsilon below grid resolution; refine the grid")
    d0 = defect(g, sigma)
    if d0 <= exact_tol:
        conc_stub = Concentrator.__new__(Concentrator)
        conc_stub.sigma = sigma
        cert = SectionHomotopyCertificate(conc=conc_stub, homotopy=None,
                                          arc=None, n=1, trivial=True)
        return AlmostInvariantResult(section=sigma.copy(), measured_defect=d0,
                                     tower_height=1, arc=None,
                                     homotopy_lipschitz=0.0, certificate=cert,
                                     start_defect=d0)
    if g.space.tag == "so3":
        cls = is_homotopic_to_coboundary_field(g)
        if not cls.trivial:
            raise HomotopyClassError(
                "group-fiber cocycle is not homotopic to a coboundary; "
                "no section is invariant up to isotopy")
    n = max(int(math.ceil((np.pi + 0.1) / epsilon)), 2)
    omega, conc, H, arc, fam = _pipeline_once(g, sigma, isotopy, n, t_samples)
    d = defect(g, omega)
    if d >= epsilon:
        n2 = max(int(math.ceil(H.measured_lipschitz / epsilon)) + 1, n + 1)
        omega, conc, H, arc, fam = _pipeline_once(g, sigma, isotopy, n2, t_samples)
        d = defect(g, omega)
        n = n2
    cert = SectionHomotopyCertificate(conc=conc, homotopy=H, arc=arc, n=n)
    omega.meta["measured_defect"] = d
    return AlmostInvariantResult(section=omega, measured_defect=d,
                                 tower_height=n, arc=arc,
                                 homotopy_lipschitz=H.measured_lipschitz,
                                 certificate=cert,
                                 start_defect=fam.meta["start_defect"])


# ---------------------------------------------------------------------------
# the domination-creating perturbation

def aligning_rotation(P, Q) -> np.ndarray:
    """Orthogonal map sending span(P) onto span(Q), close to the identity.

    Built from principal vector pairs: one planar rotation per principal
    angle, acting on mutually orthogonal 2-planes; the operator distance to
    the identity is at most twice the plane distance.
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    m = P.shape[0]
    U, sv, Vt = np.linalg.svd(P.T @ Q)
    thetas = np.arccos(np.clip(sv, -1.0, 1.0))
    Pp = P @ U
    Qq = Q @ Vt.T
    R = np.eye(m)
    for i, th in enumerate(thetas):
        if th < 1e-12:
            continue
        p = Pp[:, i]
        wv = Qq[:, i] - np.cos(th) * p
        wv = wv / np.linalg.norm(wv)
        c, s = np.cos(th), np.sin(th)
        R = R @ (np.eye(m) + (c - 1.0) * (np.outer(p, p) + np.outer(wv, wv))
                 + s * (np.outer(wv, p) - np.outer(p, wv)))
    return R


def stretch_along(P, lam: float) -> np.ndarray:
    """Symmetric map: lam on span(P), 1/lam on its orthogonal complement."""
    if lam <= 0:
        raise ValueError("stretch factor must be positive")
    P = np.asarray(P, dtype=float)
    m = P.shape[0]
    proj = P @ P.T
    return lam * proj + (1.0 / lam) * (np.eye(m) - proj)


def dominating_perturbation(A: Cocycle, f: TorusTranslation,
                            omega: FiberSection, t: float) -> Cocycle:
    """Perturb an isometry cocycle so the plane section becomes dominated.

    B(x) = stretch(omega(fx), e^t) . align(A(x) omega(x) -> omega(fx)) . A(x);
    the plane field is exactly B-invariant on the grid by construction, and
    the perturbation size is at most (e^t - 1) + 2 * defect.
    """
    if not isinstance(omega.space, Grassmann):
        raise ValueError("the perturbation needs a plane-field section")
    grid = omega.grid
    N = grid.n
    pts = grid.points()
    A_vals = A(pts)
    k = grid_shift(f, grid)
    if k is None:
        raise ValueError("needs a grid-commensurate rotation")
    fwd = (np.arange(N) + k) % N
    lam = float(np.exp(t))
    B_vals = np.empty_like(A_vals)
    for i in range(N):
        Pimg = orthonormal_frame(A_vals[i] @ omega.values[i])
        Q = omega.values[fwd[i]]
        Q = orthonormal_frame(Q)
        R = aligning_rotation(Pimg, Q)
        B_vals[i] = stretch_along(Q, lam) @ R @ A_vals[i]

    def field(qpts):
        qpts = np.atleast_2d(np.asarray(qpts, dtype=float))
        idx, err = _nearest_indices(grid, qpts)
        if err > 1e-9:
            raise ValueError("perturbed cocycle is tabulated on the grid only")
        return B_vals[idx]

    return Cocycle(dim=A.dim, matrix_at=field, isometry=False,
                   label=f"dominating-perturbation(t={t})")


# ---------------------------------------------------------------------------
# coboundaries on the rotation group

def is_homotopic_to_coboundary(A: Cocycle, f: TorusTranslation,
                               n_samples: int = 4096):
    """Z/2 class of a rotation-group cocycle over a circle rotation.

    The cocycle is read as a loop in the rotation group; the trivial class
    is equivalent to being homotopic to a coboundary over this base.
    """
    if f.d != 1:
        raise ValueError("classification runs over circle rotations")
    xs = np.arange(n_samples + 1) / n_samples
    xs[-1] = 0.0
    mats = A(xs[:, None])
    path = FiberPath.from_samples(SO3, mats)
    return loop_class(SO3, path)


def is_homotopic_to_coboundary_field(g: SkewProduct, n_samples: int = 4096):
    xs = np.arange(n_samples + 1) / n_samples
    xs[-1] = 0.0
    mats = np.asarray(g.iso_at(xs[:, None]), dtype=float)
    path = FiberPath.from_samples(SO3, mats)
    return loop_class(SO3, path)


def _contraction_isotopy(A: Cocycle, f: TorusTranslation,
                         grid: GridSpec) -> IsotopyFamily:
    """Isotopy of left translations moving the pushed identity section back.

    Lifts the loop x -> A(f^-1 x)^-1 to the quaternion sphere (possible in
    the trivial class), contracts it to a waypoint chosen away from every
    antipode, and plays the contraction backward from the identity.
    """
    from .fibers import lift_rotation_path
    from .rotation3 import quaternion_to_rotation as q2r, slerp as qslerp

    pts = grid.points()
    prev = f.apply(pts, -1)
    mats = np.swapaxes(A(prev), 1, 2)  # inverses of rotations
    closed = np.concatenate([mats, mats[:1]])
    lift = lift_rotation_path(FiberPath.from_samples(SO3, closed)).samples[:-1]
    if float(lift[0] @ lift[-1]) < 0:
        raise HomotopyClassError("cocycle loop is not contractible")
    # waypoint far from every antipode of the lift and from -identity
    obstacles = np.concatenate([-lift, [[-1.0, 0.0, 0.0, 0.0]]])
    rng_free = None
    best, best_gap = None, -1.0
    for cand in _waypoint_candidates():
        gap = float(np.min(np.arccos(np.clip(obstacles @ cand, -1, 1))))
        if gap > best_gap:
            best, best_gap = cand, gap
    if best_gap < 0.05:
        raise CutLocusErrorForWaypoint()
    waypoint = best

    ident = np.array([1.0, 0.0, 0.0, 0.0])

    def iso_at(s: float, qpts):
        qpts = np.atleast_2d(np.asarray(qpts, dtype=float))
        idx, err = _nearest_indices(grid, qpts)
        if err > 1e-9:
            raise ValueError("contraction isotopy is tabulated on the grid only")
        s = float(s)
        if s <= 0.5:
            q = qslerp(ident, waypoint, 2.0 * s)
            return np.broadcast_to(q2r(q), (len(idx), 3, 3)).copy()
        out = np.empty((len(idx), 3, 3))
        for r, i in enumerate(idx):
            q = qslerp(waypoint, lift[i], 2.0 * s - 1.0)
            out[r] = q2r(q)
        return out

    return IsotopyFamily(iso_at=iso_at, label="loop-contraction")


def _waypoint_candidates():
    base = [np.array([1.0, 0, 0, 0]), np.array([0.6, 0.8, 0, 0]),
            np.array([0.5, 0.5, 0.5, 0.5]), np.array([0.2, 0.4, 0.6, 0.664])]
    rng = np.random.default_rng(20240817)
    for b in base:
        yield b / np.linalg.norm(b)
    for _ in range(64):
        v = rng.standard_normal(4)
        yield v / np.linalg.norm(v)


class CutLocusErrorForWaypoint(HomotopyClassError):
    pass


@dataclass
class CoboundaryApproximation:
    transfer: FiberSection
    measured_defect: float
    tower_height: int
    homotopy_lipschitz: float


def coboundary_approximation(A: Cocycle, f: TorusTranslation, n: int,
                             grid: GridSpec,
                             t_samples: int = 9,
                             entry_bias: int = 0) -> CoboundaryApproximation:
    """Group-valued transfer map B with A(x) close to B(fx) B(x)^-1.

    Runs the tower construction on the left-translation skew product, where a
    coboundary is the same thing as an invariant section; the defect obeys
    the (pi + 0.1)/n style bound through the measured homotopy speed.
    Requires the trivial class (class obstruction error otherwise).
    """
    cls = is_homotopic_to_coboundary(A, f)
    if not cls.trivial:
        raise HomotopyClassError(
            "cocycle is not homotopic to a coboundary (nontrivial loop class)")
    g = SkewProduct.from_cocycle(f, A, SO3, label="left-translation")
    sigma = constant_section(SO3, grid, np.eye(3))
    isotopy = _contraction_isotopy(A, f, grid)
    omega, conc, H, arc, fam = _pipeline_once(g, sigma, isotopy, n, t_samples,
                                              entry_bias=entry_bias)
    d = defect(g, omega)
    return CoboundaryApproximation(transfer=omega, measured_defect=d,
                                   tower_height=n,
                                   homotopy_lipschitz=H.measured_lipschitz)
