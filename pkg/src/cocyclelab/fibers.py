"""Compact fiber spaces and quantitative homotopy between paths in them.

Supported fibers: the 2-sphere, the rotation group of R^3, unit quaternions,
and Grassmannians of k-planes.  Homotopies between paths are built by lifting
to the simply connected cover, connecting pointwise with minimal geodesics
there, and projecting back; each time-track is then a projected cover
geodesic, which is what bounds its speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cocycles import grass_distance, orthonormal_frame, principal_angles
from .errors import AliasingError, CutLocusError, HomotopyClassError
from .rotation3 import (quaternion_to_rotation, rotation_angle,
                        rotation_to_quaternion, slerp, sphere_angle)

PATH_CONTINUITY_BOUND = 0.5
CLOSURE_TOL = 1e-6


class FiberSpace:
    """Base class: a compact connected manifold with a fixed metric."""

    tag: str
    diameter: float
    simply_connected: bool

    def distance(self, p, q) -> float:
        raise NotImplementedError

    def normalize(self, p) -> np.ndarray:
        raise NotImplementedError

    def act(self, iso, p) -> np.ndarray:
        """Apply an ambient isometry (orthogonal matrix or unit quaternion)."""
        raise NotImplementedError

    def geodesic(self, p, q, t):
        raise NotImplementedError

    def random_point(self, rng) -> np.ndarray:
        raise NotImplementedError


class Sphere2(FiberSpace):
    tag = "sphere2"
    diameter = np.pi
    simply_connected = True

    def distance(self, p, q) -> float:
        return float(sphere_angle(p, q))

    def batch_distance(self, P, Q) -> np.ndarray:
        return sphere_angle(P, Q)

    def normalize(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p / np.linalg.norm(p, axis=-1, keepdims=True)

    def act(self, iso, p) -> np.ndarray:
        return (np.asarray(iso) @ np.asarray(p)[..., None])[..., 0]

    def geodesic(self, p, q, t):
        return _checked_slerp(self, p, q, t)

    def random_point(self, rng) -> np.ndarray:
        return self.normalize(rng.standard_normal(3))


class UnitQuaternions(FiberSpace):
    tag = "s3"
    diameter = np.pi
    simply_connected = True

    def distance(self, p, q) -> float:
        return float(sphere_angle(p, q))

    def batch_distance(self, P, Q) -> np.ndarray:
        return sphere_angle(P, Q)

    def normalize(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p / np.linalg.norm(p, axis=-1, keepdims=True)

    def act(self, iso, p) -> np.ndarray:
        from .rotation3 import quat_mul
        return quat_mul(iso, p)

    def geodesic(self, p, q, t):
        return _checked_slerp(self, p, q, t)

    def random_point(self, rng) -> np.ndarray:
        return self.normalize(rng.standard_normal(4))


class RotationGroup3(FiberSpace):
    """Rotations of R^3 with the bi-invariant angle metric, diameter pi."""

    tag = "so3"
    diameter = np.pi
    simply_connected = False

    def distance(self, p, q) -> float:
        return float(rotation_angle(np.asarray(p) @ np.asarray(q).T))

    def batch_distance(self, P, Q) -> np.ndarray:
        return rotation_angle(np.asarray(P) @ np.swapaxes(np.asarray(Q), -1, -2))

    def normalize(self, p) -> np.ndarray:
        U, _, Vt = np.linalg.svd(np.asarray(p, dtype=float))
        R = U @ Vt
        if np.linalg.det(R) < 0:
            U = U.copy()
            U[:, -1] *= -1
            R = U @ Vt
        return R

    def act(self, iso, p) -> np.ndarray:
        return np.asarray(iso) @ np.asarray(p)

    def geodesic(self, p, q, t):
        qp = rotation_to_quaternion(np.asarray(p))
        qq = rotation_to_quaternion(np.asarray(q))
        if float(qp @ qq) < 0:
            qq = -qq
        # bi-invariant distance pi corresponds to quaternion angle pi/2
        if self.distance(p, q) > self.diameter - 1e-6:
            raise CutLocusError("rotations at angle pi apart: geodesic not unique")
        out = slerp(qp, qq, t)
        return quaternion_to_rotation(out)

    def random_point(self, rng) -> np.ndarray:
        q = rng.standard_normal(4)
        return quaternion_to_rotation(q / np.linalg.norm(q))


class Grassmann(FiberSpace):
    """k-planes in R^m as orthonormal frames; principal-angle l2 metric."""

    simply_connected = False

    def __init__(self, k: int, m: int):
        if not 1 <= k < m:
            raise ValueError("need 1 <= k < m")
        self.k, self.m = k, m
        self.tag = f"gr{k}{m}"
        self.diameter = (np.pi / 2) * np.sqrt(min(k, m - k))

    def distance(self, p, q) -> float:
        return grass_distance(p, q)

    def batch_distance(self, P, Q) -> np.ndarray:
        sv = np.linalg.svd(np.swapaxes(np.asarray(P), -1, -2) @ np.asarray(Q),
                           compute_uv=False)
        ang = np.arccos(np.clip(sv, -1.0, 1.0))
        return np.linalg.norm(ang, axis=-1)

    def normalize(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        return orthonormal_frame(p)

    def act(self, iso, p) -> np.ndarray:
        W = np.asarray(iso) @ np.asarray(p)
        if W.ndim == 2:
            return orthonormal_frame(W)
        return np.stack([orthonormal_frame(w) for w in W])

    def geodesic(self, p, q, t):
        P = np.asarray(p, dtype=float)
        Q = np.asarray(q, dtype=float)
        U, sv, Vt = np.linalg.svd(P.T @ Q)
        theta = np.arccos(np.clip(sv, -1.0, 1.0))
        if theta.max() > np.pi / 2 - 1e-6:
            raise CutLocusError("planes contain perpendicular directions: geodesic not unique")
        Pp = P @ U
        Qq = Q @ Vt.T
        W = np.zeros_like(Pp)
        for i in range(self.k):
            s = np.sin(theta[i])
            if s < 1e-12:
                W[:, i] = 0.0
            else:
                W[:, i] = (Qq[:, i] - np.cos(theta[i]) * Pp[:, i]) / s
        t = np.asarray(t, dtype=float)

        def at(tv):
            cols = Pp * np.cos(theta * tv) + W * np.sin(theta * tv)
            return orthonormal_frame(cols)

        if t.ndim == 0:
            return at(float(t))
        return np.stack([at(float(tv)) for tv in t])

    def random_point(self, rng) -> np.ndarray:
        return orthonormal_frame(rng.standard_normal((self.m, self.k)))


SPHERE2 = Sphere2()
SO3 = RotationGroup3()
S3 = UnitQuaternions()
GR13 = Grassmann(1, 3)


def fiber_distance(space: FiberSpace, p, q) -> float:
    """Geodesic distance between two fiber points."""
    return space.distance(p, q)


def geodesic_point(space: FiberSpace, p, q, t: float):
    """Constant-speed minimal geodesic; errors at the cut locus."""
    return space.geodesic(p, q, t)


def _checked_slerp(space, p, q, t):
    ang = space.distance(p, q)
    if ang > space.diameter - 1e-6:
        raise CutLocusError(
            f"{space.tag}: endpoints at distance {ang:.6f} near the cut locus")
    return slerp(np.asarray(p, dtype=float), np.asarray(q, dtype=float), t)


# ---------------------------------------------------------------------------
# paths, lifts, loop classes

@dataclass(frozen=True)
class HomotopyClass:
    """Element of the fundamental group, reduced here to a Z/2 bit."""

    bit: int

    def __post_init__(self):
        object.__setattr__(self, "bit", int(self.bit) & 1)

    @property
    def trivial(self) -> bool:
        return self.bit == 0

    def __mul__(self, other: "HomotopyClass") -> "HomotopyClass":
        return HomotopyClass(self.bit ^ other.bit)


@dataclass(frozen=True)
class FiberPath:
    """Uniformly sampled path [0, 1] -> fiber."""

    space: FiberSpace
    samples: np.ndarray

    @classmethod
    def from_samples(cls, space: FiberSpace, samples) -> "FiberPath":
        samples = np.asarray(samples, dtype=float)
        steps = space.batch_distance(samples[:-1], samples[1:])
        worst = float(np.max(steps)) if len(steps) else 0.0
        if worst > PATH_CONTINUITY_BOUND:
            raise AliasingError(
                f"adjacent path samples {worst:.3f} apart exceed {PATH_CONTINUITY_BOUND}")
        return cls(space=space, samples=samples)

    def __len__(self) -> int:
        return len(self.samples)

    def reversed(self) -> "FiberPath":
        return FiberPath(self.space, self.samples[::-1].copy())

    def is_closed(self, tol: float = CLOSURE_TOL) -> bool:
        return self.space.distance(self.samples[0], self.samples[-1]) < tol


def _continued_signs(raw: np.ndarray) -> np.ndarray:
    """Sign-continue rows of unit vectors so consecutive dots are >= 0."""
    out = raw.copy()
    for i in range(1, len(out)):
        if float(out[i] @ out[i - 1]) < 0:
            out[i] = -out[i]
    return out


def _canonical_start_sign(v: np.ndarray) -> float:
    for c in v:
        if abs(c) > 1e-12:
            return 1.0 if c > 0 else -1.0
    return 1.0


def lift_rotation_path(path: FiberPath) -> FiberPath:
    """Continuous unit-quaternion lift of a rotation-valued path.

    The starting lift has nonnegative first coordinate (lexicographic
    tie-break); consecutive samples must be within angle pi - 1e-3 so the
    local lift is unique.
    """
    if path.space.tag != "so3":
        raise ValueError("expected a rotation-valued path")
    R = path.samples
    steps = rotation_angle(R[:-1] @ np.swapaxes(R[1:], -1, -2))
    if len(steps) and steps.max() > np.pi - 1e-3:
        raise AliasingError("rotation samples too far apart for a unique local lift")
    raw = np.stack([rotation_to_quaternion(r) for r in R])
    raw[0] *= _canonical_start_sign(raw[0])
    lifted = _continued_signs(raw)
    return FiberPath(space=S3, samples=lifted)


def lift_line_path(path: FiberPath) -> FiberPath:
    """Continuous unit-vector lift of a line-field path in the projective plane."""
    if not isinstance(path.space, Grassmann) or path.space.k != 1 or path.space.m != 3:
        raise ValueError("line lifting supports 1-planes in R^3")
    V = path.samples[:, :, 0].copy()
    V[0] *= _canonical_start_sign(V[0])
    lifted = _continued_signs(V)
    return FiberPath(space=SPHERE2, samples=lifted)


def loop_class(space: FiberSpace, loop: FiberPath) -> HomotopyClass:
    """Z/2 class of a closed loop: nontrivial iff the cover lift is open."""
    if not loop.is_closed():
        raise ValueError("loop endpoints do not match within 1e-6")
    if space.simply_connected:
        return HomotopyClass(0)
    if space.tag == "so3":
        lifted = lift_rotation_path(loop).samples
    elif isinstance(space, Grassmann) and (space.k, space.m) == (1, 3):
        lifted = lift_line_path(loop).samples
    else:
        raise ValueError(f"loop classification not supported on {space.tag}")
    open_lift = float(lifted[0] @ lifted[-1]) < 0
    return HomotopyClass(1 if open_lift else 0)


# ---------------------------------------------------------------------------
# Lipschitz homotopies through the cover

COVER_TRACK_BOUND = np.pi + 0.1  # cover diameter plus grid slack


@dataclass
class Homotopy:
    """Sampled homotopy F(x, t) with its measured time-Lipschitz constant.

    ``lift0``/``lift1`` are the cover endpoints of each x-track; tracks are
    constant-speed cover geodesics, so ``value(ix, t)`` is exact in t while
    ``samples`` materializes the stored t-grid.
    """

    space: FiberSpace
    samples: np.ndarray
    t_grid: np.ndarray
    rel_endpoints: bool
    measured_lipschitz: float
    lift0: Optional[np.ndarray] = None
    lift1: Optional[np.ndarray] = None
    nudges: tuple = ()
    x_params: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_x(self) -> int:
        return self.samples.shape[0]

    def value(self, ix: int, t: float):
        if self.lift0 is None:
            raise ValueError("this homotopy has no exact track evaluator")
        p, q = self.lift0[ix], self.lift1[ix]
        if float(sphere_angle(p, q)) < 1e-15:
            pt = p
        else:
            pt = slerp(p, q, float(t))
        return _project_cover_point(self.space, pt)

    def slice_at(self, t: float) -> np.ndarray:
        return np.stack([self.value(i, t) for i in range(self.n_x)])


def _project_cover_point(space: FiberSpace, p):
    if space.tag == "so3":
        return quaternion_to_rotation(p)
    if isinstance(space, Grassmann):
        return np.asarray(p, dtype=float)[:, None]
    return p


def _cover_lift_pair(space, path0: FiberPath, path1: FiberPath):
    """Compatible cover lifts of two paths; class mismatch raises."""
    if space.tag in ("sphere2", "s3"):
        return path0.samples.copy(), path1.samples.copy()
    if space.tag == "so3":
        l0 = lift_rotation_path(path0).samples
        l1 = lift_rotation_path(path1).samples
    elif isinstance(space, Grassmann) and (space.k, space.m) == (1, 3):
        l0 = lift_line_path(path0).samples
        l1 = lift_line_path(path1).samples
    else:
        raise ValueError(f"homotopy lifting not supported on {space.tag}")
    # align the start branches, then the ends must agree for a rel homotopy
    if float(l0[0] @ l1[0]) < 0:
        l1 = -l1
    if float(l0[-1] @ l1[-1]) < 0:
        raise HomotopyClassError(
            "paths are not homotopic relative to endpoints (open cover lift)")
    return l0, l1


def _nudge_toward(space, lifts1, lifts0, ix: int, eps: float):
    """Move one lifted sample a geodesic epsilon toward a reference direction."""
    p, q = lifts0[ix], lifts1[ix]
    # pick a deterministic auxiliary direction transverse to p
    aux = None
    for j in (ix - 1, ix + 1):
        if 0 <= j < len(lifts1):
            cand = lifts1[j]
            if float(sphere_angle(cand, q)) > 1e-9 and float(sphere_angle(cand, p)) < np.pi - 1e-6:
                aux = cand
                break
    if aux is None:
        aux = np.zeros_like(q)
        aux[(int(np.argmax(np.abs(q))) + 1) % len(q)] = 1.0
        aux = aux / np.linalg.norm(aux)
    w = aux - float(aux @ q) * q
    n = np.linalg.norm(w)
    if n < 1e-12:
        raise CutLocusError("could not resolve an antipodal pair by nudging")
    w = w / n
    return np.cos(eps) * q + np.sin(eps) * w


def lipschitz_homotopy(space: FiberSpace, path0: FiberPath, path1: FiberPath,
                       rel_endpoints: bool = True, t_grid=None,
                       nudge_eps: float = 1e-6) -> Homotopy:
    """Homotopy from path0 to path1 with speed bounded by the cover geometry.

    Lifts both paths to the simply connected cover on compatible branches,
    joins them pointwise by constant-speed minimal geodesics there, and
    projects back.  Raises HomotopyClassError when the paths are not
    homotopic rel endpoints; cut-locus pairs are resolved by a recorded
    epsilon-nudge of the second path.
    """
    if len(path0) != len(path1):
        raise ValueError("paths must share the sample grid")
    if rel_endpoints:
        for i in (0, -1):
            d = space.distance(path0.samples[i], path1.samples[i])
            if d > CLOSURE_TOL:
                raise ValueError(f"rel-endpoint homotopy needs matching endpoints, got {d:.2e}")
    l0, l1 = _cover_lift_pair(space, path0, path1)
    if rel_endpoints:
        # snap matching endpoints so the boundary rows are exactly constant
        l1[0] = l0[0]
        l1[-1] = l0[-1]
    nudges = []
    gaps = sphere_angle(l0, l1)
    for ix in np.flatnonzero(gaps > np.pi - 1e-6):
        eps = nudge_eps
        for _ in range(8):
            cand = _nudge_toward(space, l1, l0, int(ix), eps)
            if float(sphere_angle(l0[ix], cand)) <= np.pi - 1e-6:
                l1[ix] = cand
                nudges.append((int(ix), eps))
                break
            eps *= 10
        else:
            raise CutLocusError("persistent antipodal pair in homotopy construction")

    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 33)
    t_grid = np.asarray(t_grid, dtype=float)

    n_x = len(l0)
    cover_tracks = np.empty((n_x, len(t_grid)) + l0.shape[1:])
    for i in range(n_x):
        if float(sphere_angle(l0[i], l1[i])) < 1e-15:
            cover_tracks[i] = l0[i]
        else:
            cover_tracks[i] = slerp(l0[i], l1[i], t_grid)

    if space.tag == "so3":
        samples = quaternion_to_rotation(cover_tracks)
    elif isinstance(space, Grassmann):
        samples = cover_tracks[..., None]
    else:
        samples = cover_tracks

    H = Homotopy(space=space, samples=samples, t_grid=t_grid,
                 rel_endpoints=rel_endpoints, measured_lipschitz=0.0,
                 lift0=l0, lift1=l1, nudges=tuple(nudges))
    H.measured_lipschitz = measured_lipschitz(H)
    return H


def measured_lipschitz(F: Homotopy) -> float:
    """Grid lower bound of the time-Lipschitz constant of a homotopy."""
    samples, t = F.samples, F.t_grid
    worst = 0.0
    for j in range(len(t) - 1):
        dt = t[j + 1] - t[j]
        if dt <= 0:
            continue
        d = F.space.batch_distance(samples[:, j], samples[:, j + 1])
        worst = max(worst, float(np.max(d)) / dt)
    return worst
