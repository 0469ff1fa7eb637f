"""Shape-invariant one-parameter transformers built from affine flows.

A transformer is the flow of dz/dλ = A z + b on normalized image
coordinates. Because the field is affine, the time-λ flow is itself affine
and equals the exponential of the augmented matrix λ·[[A, b], [0, 0]].
Images are moved by inverse sampling: output pixel p reads the input at
map⁻¹(p) with bilinear interpolation and zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg

OVERFLOW_GUARD = 1e3
SINGULAR_TOL = 1e-12


class FlowOverflowError(OverflowError):
    pass


class SingularMapError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64).reshape(2, 2)
        b = np.array(self.b, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("flow parameters must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def zero(cls):
        return cls(np.zeros((2, 2)), np.zeros(2))

    def augmented(self):
        aug = np.zeros((3, 3))
        aug[:2, :2] = self.A
        aug[:2, 2] = self.b
        return aug

    def magnitude(self):
        return float(np.linalg.norm(self.A) + np.linalg.norm(self.b))


@dataclass(frozen=True)
class AffineMap:
    """p ↦ M p + t on normalized coordinates."""

    M: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M", np.array(self.M, dtype=np.float64).reshape(2, 2))
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(2))

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def translation(cls, t):
        return cls(np.eye(2), t)

    @classmethod
    def from_matrix(cls, mat):
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:2, :2], mat[:2, 2])

    def matrix(self):
        out = np.eye(3)
        out[:2, :2] = self.M
        out[:2, 2] = self.t
        return out

    def apply(self, points):
        """Map points given as (..., 2) arrays of (x, y)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.M.T + self.t

    def det(self):
        return float(np.linalg.det(self.M))


def _check_guard(magnitude, lam):
    load = abs(lam) * magnitude
    if not np.isfinite(load) or load > OVERFLOW_GUARD:
        raise FlowOverflowError(
            f"|lambda|*(|A|+|b|) = {load:.4g} exceeds overflow guard {OVERFLOW_GUARD:g}"
        )


def integrate_flow(params: FlowParams, lam: float) -> AffineMap:
    """Time-``lam`` flow map of dz/dλ = A z + b."""
    _check_guard(params.magnitude(), lam)
    return AffineMap.from_matrix(linalg.expm(lam * params.augmented()))


def integrate_flow_rk4(params: FlowParams, lam: float, steps: int = 10_000) -> AffineMap:
    """Fixed-step RK4 reference for :func:`integrate_flow` (test oracle)."""
    M, t = rk4_batch(params.A[None], params.b[None], np.array([lam]), steps)
    return AffineMap(M[0], t[0])


def rk4_batch(A, b, lam, steps: int = 10_000):
    """RK4 flow maps for many (A, b, λ) at once; returns (M, t) stacks.

    Tracks the images of the origin and the two unit points, which fixes
    the affine map exactly.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)[:, None, :]
    AT = np.swapaxes(A, -1, -2)
    z = np.broadcast_to(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), (len(A), 3, 2)).copy()
    h = (np.asarray(lam, dtype=np.float64) / steps)[:, None, None]

    def f(p):
        return p @ AT + b

    for _ in range(steps):
        k1 = f(z)
        k2 = f(z + 0.5 * h * k1)
        k3 = f(z + 0.5 * h * k2)
        k4 = f(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    t = z[:, 0]
    M = np.stack([z[:, 1] - t, z[:, 2] - t], axis=2)
    return M, t


def compose(outer: AffineMap, inner: AffineMap) -> AffineMap:
    """Apply ``inner`` first, then ``outer``."""
    return AffineMap(outer.M @ inner.M, outer.M @ inner.t + outer.t)


def invert(amap: AffineMap) -> AffineMap:
    det = amap.det()
    if abs(det) < SINGULAR_TOL:
        raise SingularMapError(f"cannot invert affine map with det(M) = {det:.3g}")
    Minv = np.linalg.inv(amap.M)
    return AffineMap(Minv, -Minv @ amap.t)


@dataclass(frozen=True)
class CoordinateFrame:
    H: int
    W: int

    def __post_init__(self):
        if self.H < 2 or self.W < 2:
            raise ValueError(f"frame must be at least 2x2, got {self.H}x{self.W}")

    @property
    def pitch(self):
        """Normalized distance between neighbouring pixel centres (x, y)."""
        return 2.0 / (self.W - 1), 2.0 / (self.H - 1)

    def grid(self):
        """Normalized (x, y) of every pixel, each shaped (H, W)."""
        xs = np.arange(self.W) * (2.0 / (self.W - 1)) - 1.0
        ys = np.arange(self.H) * (2.0 / (self.H - 1)) - 1.0
        return np.meshgrid(xs, ys)

    def homogeneous_grid(self):
        x, y = self.grid()
        return np.stack([x.ravel(), y.ravel(), np.ones(self.H * self.W)])


def pixel_to_normalized(row: int, col: int, frame: CoordinateFrame):
    if not (0 <= row < frame.H and 0 <= col < frame.W):
        raise IndexError(f"pixel ({row}, {col}) outside {frame.H}x{frame.W} frame")
    return 2.0 * col / (frame.W - 1) - 1.0, 2.0 * row / (frame.H - 1) - 1.0


def source_coordinates(amap: AffineMap, frame: CoordinateFrame):
    """Normalized points each output pixel samples from under ``amap``."""
    inv = invert(amap)
    pts = inv.matrix() @ frame.homogeneous_grid()
    return pts[0].reshape(frame.H, frame.W), pts[1].reshape(frame.H, frame.W)


def warp(image, amap: AffineMap) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    frame = CoordinateFrame(*image.shape)
    x, y = source_coordinates(amap, frame)
    tape = ad.Tape()
    out = ad.bilinear_sample(tape.constant(image[None]), x.reshape(1, -1), y.reshape(1, -1))
    return out.value.reshape(image.shape)


# -- differentiable counterparts ----------------------------------------------


def augmented_node(A: ad.Node, b: ad.Node) -> ad.Node:
    """(K, 2, 2) and (K, 2) parameters to (K, 3, 3) augmented matrices."""
    k = A.shape[0]
    top = ad.concat([A, ad.reshape(b, (k, 2, 1))], axis=2)
    return ad.concat([top, np.zeros((k, 1, 3))], axis=1)


def guard_flows(A, b, lam):
    """Raise FlowOverflowError if any |λ|·(‖A_k‖+‖b_k‖) exceeds the guard.

    ``lam`` is (K, ...) with the transformer index first.
    """
    A, b, lam = (np.asarray(v.value if isinstance(v, ad.Node) else v) for v in (A, b, lam))
    mags = np.linalg.norm(A.reshape(len(A), -1), axis=1) + np.linalg.norm(b, axis=1)
    worst = np.abs(lam).reshape(len(lam), -1).max(axis=1, initial=0.0) * mags
    k = int(np.argmax(worst))
    if not np.all(np.isfinite(worst)) or worst[k] > OVERFLOW_GUARD:
        raise FlowOverflowError(
            f"transformer {k}: |lambda|*(|A|+|b|) = {worst[k]:.4g} exceeds overflow guard {OVERFLOW_GUARD:g}"
        )


def flow_matrices(aug: ad.Node, lam: ad.Node) -> ad.Node:
    """exp(λ·aug_k) for λ shaped (K, ...) -> (K, ..., 3, 3)."""
    extra = lam.value.ndim - 1
    aug_b = ad.reshape(aug, (aug.shape[0],) + (1,) * extra + (3, 3))
    lam_b = ad.reshape(lam, lam.shape + (1, 1))
    return ad.expm(ad.mul(lam_b, aug_b))


def warp_node(images: ad.Node, sample_maps: ad.Node, frame: CoordinateFrame, preserve_mass=False) -> ad.Node:
    """Resample (B, H, W) images by (B, S, 3, 3) homogeneous sampling maps.

    ``sample_maps`` send output coordinates to input coordinates (already
    inverted). With ``preserve_mass`` the samples are scaled by the Jacobian
    determinant of the sampling map, so total intensity is transported
    rather than stretched. Returns (B, S, H, W).
    """
    bsz, s = sample_maps.shape[:2]
    pts = ad.matmul(sample_maps, frame.homogeneous_grid())  # (B, S, 3, HW)
    x = ad.reshape(pts[:, :, 0, :], (bsz, -1))
    y = ad.reshape(pts[:, :, 1, :], (bsz, -1))
    out = ad.reshape(ad.bilinear_sample(images, x, y), (bsz, s, frame.H, frame.W))
    if preserve_mass:
        det = ad.sub(
            ad.mul(sample_maps[:, :, 0, 0], sample_maps[:, :, 1, 1]),
            ad.mul(sample_maps[:, :, 0, 1], sample_maps[:, :, 1, 0]),
        )
        out = ad.mul(out, ad.reshape(det, (bsz, s, 1, 1)))
    return out
