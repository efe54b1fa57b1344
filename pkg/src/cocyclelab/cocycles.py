"""Linear cocycles over torus translations: orbit products, Lyapunov spectra,
singular-value domination tests with an invariant-cone oracle, and the induced
action on Grassmannians.

A cocycle is a matrix field A: T^d -> GL(m, R) given in closed form; all
evaluators are vectorized over arrays of base points.  Matrices are plain
numpy arrays, m in {2, 3, 4}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import OverflowGuardError, RankLossError
from .rotation3 import so3_exp, quaternion_to_rotation
from .torus import GridSpec, TorusTranslation, wrap

ENTRY_CAP = 1e300
RESCALE_TRIGGER = 1e150
SV_TIE_TOL = 1e-13


@dataclass(frozen=True)
class Cocycle:
    """Matrix field over the base torus.

    ``matrix_at`` maps an array of base points (B, d) to matrices (B, m, m)
    and must return invertible values everywhere; ``isometry`` asserts all
    values orthogonal (checked spot-wise by ``check_isometry``).
    """

    dim: int
    matrix_at: Callable[[np.ndarray], np.ndarray]
    isometry: bool = False
    label: str = "cocycle"

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = self.matrix_at(pts)
        return out

    def at(self, x) -> np.ndarray:
        """Single-point evaluation, returns (m, m)."""
        return self(np.atleast_2d(np.asarray(x, dtype=float)))[0]

    def check_isometry(self, pts, tol: float = 1e-10) -> bool:
        M = self(pts)
        eye = np.eye(self.dim)
        err = np.abs(M @ np.swapaxes(M, -1, -2) - eye).max()
        return bool(err <= tol)


def constant_cocycle(M, label: str = "constant") -> Cocycle:
    M = np.asarray(M, dtype=float)
    m = M.shape[0]
    if abs(np.linalg.det(M)) <= 1e-12:
        raise ValueError("constant cocycle matrix is not invertible")
    iso = bool(np.abs(M @ M.T - np.eye(m)).max() <= 1e-10)

    def field(pts):
        return np.broadcast_to(M, (len(pts), m, m)).copy()

    return Cocycle(dim=m, matrix_at=field, isometry=iso, label=label)


def rotation2d_cocycle(angle_field: Callable[[np.ndarray], np.ndarray],
                       label: str = "rotation2d") -> Cocycle:
    """2x2 rotation by a pointwise angle; angle_field maps (B, d) -> (B,)."""

    def field(pts):
        th = np.asarray(angle_field(pts), dtype=float)
        c, s = np.cos(th), np.sin(th)
        return np.stack([np.stack([c, -s], axis=-1),
                         np.stack([s, c], axis=-1)], axis=-2)

    return Cocycle(dim=2, matrix_at=field, isometry=True, label=label)


def diagonal_cocycle(entry_fields, label: str = "diagonal") -> Cocycle:
    """Diagonal matrices; each entry is a constant or a callable (B, d) -> (B,)."""
    m = len(entry_fields)

    def field(pts):
        B = len(pts)
        out = np.zeros((B, m, m))
        for i, e in enumerate(entry_fields):
            out[:, i, i] = e(pts) if callable(e) else float(e)
        return out

    iso = all(not callable(e) and abs(abs(float(e)) - 1.0) <= 1e-10 for e in entry_fields)
    return Cocycle(dim=m, matrix_at=field, isometry=iso, label=label)


def so3_exp_cocycle(vec_field: Callable[[np.ndarray], np.ndarray],
                    label: str = "so3-exp") -> Cocycle:
    """Rotation field exp(v(x)) from a rotation-vector field (B, d) -> (B, 3).

    Any such loop over the circle is contractible (shrink v to zero), which
    makes this the stock trivial-class generator.
    """

    def field(pts):
        return so3_exp(np.asarray(vec_field(pts), dtype=float))

    return Cocycle(dim=3, matrix_at=field, isometry=True, label=label)


def quaternion_power_cocycle(n: int, axis=(0.0, 0.0, 1.0),
                             label: str | None = None) -> Cocycle:
    """Circle-base loop x -> rho(q(x)^n) with q(x) the half-turn lift about ``axis``.

    Equals the rotation by 2*pi*n*x about the axis; its loop class is the
    parity of n, so odd n gives the nontrivial class.
    """
    ax = np.asarray(axis, dtype=float)
    ax = ax / np.linalg.norm(ax)

    def field(pts):
        x = np.asarray(pts, dtype=float)[:, 0]
        q = np.concatenate([np.cos(np.pi * n * x)[:, None],
                            np.sin(np.pi * n * x)[:, None] * ax], axis=1)
        return quaternion_to_rotation(q)

    return Cocycle(dim=3, matrix_at=field, isometry=True,
                   label=label or f"quaternion-power-{n}")


def product_cocycle(*factors: Cocycle, label: str = "product") -> Cocycle:
    """Pointwise matrix product, leftmost factor applied last."""
    m = factors[0].dim
    if any(f.dim != m for f in factors):
        raise ValueError("all factors must share the fiber dimension")

    def field(pts):
        out = factors[-1](pts)
        for f in reversed(factors[:-1]):
            out = f(pts) @ out
        return out

    return Cocycle(dim=m, matrix_at=field,
                   isometry=all(f.isometry for f in factors), label=label)


def perturbed_cocycle(base: Cocycle, bump: Callable[[np.ndarray], np.ndarray],
                      isometry: bool = False, label: str = "perturbed") -> Cocycle:
    """Pointwise left perturbation x -> bump(x) @ base(x)."""

    def field(pts):
        return np.asarray(bump(pts), dtype=float) @ base(pts)

    return Cocycle(dim=base.dim, matrix_at=field, isometry=isometry, label=label)


# ---------------------------------------------------------------------------
# orbit products

def cocycle_product(A: Cocycle, f: TorusTranslation, x, n: int) -> np.ndarray:
    """Orbit product A(f^{n-1}x) ... A(x); identity at n = 0; inverses for n < 0.

    Raises OverflowGuardError when an entry would exceed 1e300; callers that
    can tolerate rescaling should use ``cocycle_product_scaled``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    M = np.eye(A.dim)
    if n >= 0:
        for j in range(n):
            M = A.at(f.apply(x, j)) @ M
            if np.abs(M).max() > ENTRY_CAP:
                raise OverflowGuardError("orbit product entry exceeded 1e300")
    else:
        for j in range(1, -n + 1):
            M = np.linalg.inv(A.at(f.apply(x, -j))) @ M
            if np.abs(M).max() > ENTRY_CAP:
                raise OverflowGuardError("orbit product entry exceeded 1e300")
    return M


def cocycle_product_scaled(A: Cocycle, f: TorusTranslation, x, n: int) -> tuple:
    """Orbit product as (matrix, log_scale) with matrix kept at O(1) norm."""
    x = np.asarray(x, dtype=float).reshape(-1)
    M = np.eye(A.dim)
    log_scale = 0.0
    step = 1 if n >= 0 else -1
    for idx in range(abs(n)):
        j = idx if n >= 0 else -(idx + 1)
        F = A.at(f.apply(x, j)) if n >= 0 else np.linalg.inv(A.at(f.apply(x, j)))
        M = F @ M
        peak = np.abs(M).max()
        if peak > RESCALE_TRIGGER:
            M /= peak
            log_scale += np.log(peak)
    return M, log_scale


def _batch_step(A: Cocycle, f: TorusTranslation, pts, j: int, M, logs):
    """One in-place product step for a batch of base points."""
    M = A(f.apply(pts, j)) @ M
    peak = np.abs(M).max(axis=(1, 2))
    high = peak > RESCALE_TRIGGER
    if high.any():
        M[high] /= peak[high, None, None]
        logs[high] += np.log(peak[high])
    return M, logs


def batch_products_scaled(A: Cocycle, f: TorusTranslation, pts, n: int) -> tuple:
    """Scaled orbit products over a batch of points, (B,m,m) plus (B,) logs."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    B = len(pts)
    M = np.broadcast_to(np.eye(A.dim), (B, A.dim, A.dim)).copy()
    logs = np.zeros(B)
    for j in range(n):
        M, logs = _batch_step(A, f, pts, j, M, logs)
    return M, logs


# ---------------------------------------------------------------------------
# spectra and singular values

def lyapunov_spectrum(A: Cocycle, f: TorusTranslation, x0, n: int) -> np.ndarray:
    """Finite-time exponents by per-step QR re-orthonormalization, sorted descending.

    The sum of the returned exponents equals the Birkhoff average of
    log|det A| along the orbit up to roundoff.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x0, dtype=float).reshape(-1)
    m = A.dim
    Q = np.eye(m)
    sums = np.zeros(m)
    for j in range(n):
        W = A.at(f.apply(x, j)) @ Q
        Q, R = np.linalg.qr(W)
        diag = np.diag(R)
        signs = np.where(diag < 0, -1.0, 1.0)
        Q = Q * signs
        sums += np.log(np.abs(diag))
    return np.sort(sums / n)[::-1]


def singular_values(M) -> np.ndarray:
    """Descending singular values, batched; closed form for 2x2."""
    M = np.asarray(M, dtype=float)
    if M.shape[-1] == 2:
        a, b = M[..., 0, 0], M[..., 0, 1]
        c, d = M[..., 1, 0], M[..., 1, 1]
        e, fq = (a + d) / 2, (a - d) / 2
        g, h = (c + b) / 2, (c - b) / 2
        qv = np.hypot(e, h)
        rv = np.hypot(fq, g)
        return np.stack([qv + rv, np.abs(qv - rv)], axis=-1)
    return np.linalg.svd(M, compute_uv=False)


def singular_gap_ratios(M, k: int) -> np.ndarray:
    """sigma_k / sigma_{k+1} (1-indexed), with near-ties reported as exactly 1."""
    sv = singular_values(M)
    hi, lo = sv[..., k - 1], sv[..., k]
    ratio = np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf)
    ties = np.abs(hi - lo) <= SV_TIE_TOL * np.maximum(hi, 1e-300)
    return np.where(ties, 1.0, ratio)


@dataclass(frozen=True)
class DominationCertificate:
    """Grid evidence for a singular-value gap at one window length.

    Valid iff ``evidence >= gap_c``; on failure ``witness`` is the grid point
    attaining the minimal ratio.
    """

    index_k: int
    window_ell: int
    gap_c: float
    evidence: float
    witness: tuple
    passed: bool


def domination_test(A: Cocycle, f: TorusTranslation, k: int, ell: int,
                    c: float, grid: GridSpec) -> DominationCertificate:
    """Test min over the grid of sigma_k/sigma_{k+1} of the ell-step product >= c."""
    if not 1 <= k < A.dim:
        raise ValueError("need 1 <= k < m")
    if ell < 1 or c <= 1.0:
        raise ValueError("need ell >= 1 and c > 1")
    pts = grid.points()
    M, _ = batch_products_scaled(A, f, pts, ell)
    ratios = singular_gap_ratios(M, k)
    i = int(np.argmin(ratios))
    evidence = float(ratios[i])
    return DominationCertificate(index_k=k, window_ell=ell, gap_c=c,
                                 evidence=evidence, witness=tuple(pts[i]),
                                 passed=evidence >= c)


def find_domination(A: Cocycle, f: TorusTranslation, k: int, ell_max: int,
                    c: float, grid: GridSpec) -> Optional[DominationCertificate]:
    """First window ell <= ell_max whose gap test passes, scanning exhaustively.

    Passing at ell does not imply passing at ell + 1, so no bisection.
    """
    pts = grid.points()
    B = len(pts)
    M = np.broadcast_to(np.eye(A.dim), (B, A.dim, A.dim)).copy()
    logs = np.zeros(B)
    for ell in range(1, ell_max + 1):
        M, logs = _batch_step(A, f, pts, ell - 1, M, logs)
        ratios = singular_gap_ratios(M, k)
        i = int(np.argmin(ratios))
        if ratios[i] >= c:
            return DominationCertificate(index_k=k, window_ell=ell, gap_c=c,
                                         evidence=float(ratios[i]),
                                         witness=tuple(pts[i]), passed=True)
    return None


# ---------------------------------------------------------------------------
# invariant-cone oracle (2x2, circle base)

def _direction_angle(v) -> np.ndarray:
    """Projective angle of 2-vectors in [0, pi)."""
    a = np.arctan2(v[..., 1], v[..., 0])
    return np.mod(a, np.pi)


def _apply_to_angle(M, theta) -> np.ndarray:
    v = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    w = (M @ v[..., None])[..., 0]
    return _direction_angle(w)


def invariant_cone_oracle(A: Cocycle, f: TorusTranslation, grid: GridSpec,
                          warmup: int = 64,
                          widths=(np.pi / 16, np.pi / 8, np.pi / 4, 3 * np.pi / 8),
                          powers=(1, 2, 4, 8)) -> bool:
    """Brute-force one-dimensional domination check for 2x2 cocycles.

    Propagates a candidate cone field centered on finite-time expanding
    directions and certifies strict contraction of some fixed-width cone
    under some power of the cocycle, with a margin covering the grid
    resolution of the center field.  Independent of the singular-value path.
    """
    if A.dim != 2 or f.d != 1:
        raise ValueError("cone oracle is for 2x2 cocycles over the circle")
    pts = grid.points()
    B = len(pts)
    # expanding directions arriving at each grid point after `warmup` steps
    start = f.apply(pts, -warmup)
    M, _ = batch_products_scaled(A, f, start, warmup)
    U, _, _ = np.linalg.svd(M)
    centers = _direction_angle(U[:, :, 0])

    def circ_diff(a, b):
        d = np.mod(a - b, np.pi)
        return np.minimum(d, np.pi - d)

    spread = circ_diff(centers, np.roll(centers, 1))
    margin = float(spread.max())
    if margin > np.pi / 8:
        return False  # center field too rough to carry any uniform cone

    shift = int(np.round(f.alpha[0] * grid.n))
    image_idx = (np.arange(B) + shift) % B

    for L in powers:
        ML, _ = batch_products_scaled(A, f, pts, L)
        tgt_idx = (np.arange(B) + L * shift) % B
        for w in widths:
            lo = _apply_to_angle(ML, centers - w)
            hi = _apply_to_angle(ML, centers + w)
            ctr = centers[tgt_idx]
            dlo = circ_diff(lo, ctr)
            dhi = circ_diff(hi, ctr)
            inside = (dlo < w - margin) & (dhi < w - margin)
            if inside.all():
                return True
    return False


# ---------------------------------------------------------------------------
# Grassmannian action and distance

def orthonormal_frame(B) -> np.ndarray:
    """Orthonormal basis of the column span, deterministic signs."""
    Q, R = np.linalg.qr(np.asarray(B, dtype=float))
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs


def grass_action(A_x, P) -> np.ndarray:
    """Image plane of an orthonormal frame under a matrix, re-orthonormalized."""
    A_x = np.asarray(A_x, dtype=float)
    P = np.asarray(P, dtype=float)
    W = A_x @ P
    sv = np.linalg.svd(W, compute_uv=False)
    if sv.min() < 1e-12:
        raise RankLossError("matrix is numerically rank-deficient on the plane")
    return orthonormal_frame(W)


def principal_angles(P, Q) -> np.ndarray:
    """Principal angles between equal-rank orthonormal frames, ascending."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    sv = np.linalg.svd(P.T @ Q, compute_uv=False)
    return np.arccos(np.clip(sv, -1.0, 1.0))


def grass_distance(P, Q) -> float:
    """l2-norm of principal angles; invariant under the orthogonal group."""
    return float(np.linalg.norm(principal_angles(P, Q)))


# ---------------------------------------------------------------------------
# fibered rotation number (SO(2)-valued cocycles over circle rotations)

@dataclass(frozen=True)
class RotationNumberReport:
    turns: float
    total_angle: float

    @property
    def turns_mod1(self) -> float:
        return float(wrap(self.turns))


def fibered_rotation_number(A: Cocycle, f: TorusTranslation, n: int,
                            x0: float = 0.0) -> RotationNumberReport:
    """Mean lifted angle per step of an SO(2) cocycle along the orbit of x0.

    Tracks a moving unit vector and accumulates signed angle increments in
    (-pi, pi]; a constant rotation by theta reports theta / 2pi turns.
    """
    if A.dim != 2 or f.d != 1:
        raise ValueError("need a 2x2 cocycle over the circle")
    pts = wrap(x0 + np.arange(n) * f.alpha[0])[:, None]
    mats = A(pts)
    dets = np.linalg.det(mats)
    if np.abs(mats @ np.swapaxes(mats, 1, 2) - np.eye(2)).max() > 1e-9 or dets.min() <= 0:
        raise ValueError("cocycle must be SO(2)-valued")
    v = np.array([1.0, 0.0])
    total = 0.0
    for M in mats:
        w = M @ v
        inc = np.arctan2(v[0] * w[1] - v[1] * w[0], v @ w)
        total += inc
        v = w / np.linalg.norm(w)
    turns = total / (2 * np.pi * n)
    return RotationNumberReport(turns=float(turns), total_angle=float(total))
