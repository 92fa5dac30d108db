"""Poses, cameras, Gaussian containers, and image metrics.

Conventions used throughout the package:
  - World and camera frames are right-handed.
  - Camera frame: +z forward (optical axis), +x right, +y down.
  - Poses are camera-to-world rigid transforms.
  - Quaternions are (w, x, y, z), unit norm.
  - Pixel coordinates are continuous; the center of integer pixel (i, j)
    sits at (i + 0.5, j + 0.5). Geometric ops take continuous coordinates.
  - Depth is the camera-frame z coordinate in meters.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

NEAR_PLANE = 0.01


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / |q|. Raises on (near-)zero norm."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize zero-norm quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, both (w, x, y, z)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[..., 0, 1] = 2.0 * (x * y - w * z)
    m[..., 0, 2] = 2.0 * (x * z + w * y)
    m[..., 1, 0] = 2.0 * (x * y + w * z)
    m[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[..., 1, 2] = 2.0 * (y * z - w * x)
    m[..., 2, 0] = 2.0 * (x * z - w * y)
    m[..., 2, 1] = 2.0 * (y * z + w * x)
    m[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Inverse of quat_to_matrix for a single 3x3 rotation (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector (radians) to unit quaternion."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # first-order expansion, exact enough below the norm threshold
        return quat_normalize(np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]))
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


# ---------------------------------------------------------------------------
# SE(3) poses
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Se3Pose:
    """Camera-to-world rigid transform: p_world = R(q) @ p_cam + t."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        q = quat_normalize(np.asarray(self.q, dtype=np.float64).reshape(4))
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Se3Pose":
        return Se3Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Se3Pose":
        m = np.asarray(m, dtype=np.float64)
        return Se3Pose(m[:3, 3], matrix_to_quat(m[:3, :3]))

    def compose(self, other: "Se3Pose") -> "Se3Pose":
        """self o other: applies other first, then self."""
        r = self.rotation_matrix()
        return Se3Pose(r @ other.t + self.t, quat_multiply(self.q, other.q))

    def inverse(self) -> "Se3Pose":
        qc = quat_conjugate(self.q)
        r_inv = quat_to_matrix(qc)
        return Se3Pose(-(r_inv @ self.t), qc)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points, shape (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.t


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def scaled(self, factor: float) -> "PinholeCamera":
        """Camera for an image resized by `factor` per side.

        Continuous pixel coordinates scale linearly, so intrinsics do too.
        """
        return PinholeCamera(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )


def deproject_cam(cam: PinholeCamera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Pixels (continuous) + depth -> camera-frame points. uv shape (..., 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - cam.cx) / cam.fx * z
    y = (uv[..., 1] - cam.cy) / cam.fy * z
    return np.stack([x, y, z], axis=-1)


def project_cam(cam: PinholeCamera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points -> (continuous pixels, depth). No culling here."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    u = p[..., 0] / z * cam.fx + cam.cx
    v = p[..., 1] / z * cam.fy + cam.cy
    return np.stack([u, v], axis=-1), z


def deproject(cam: PinholeCamera, pose: Se3Pose, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Pixels + depth -> world points through a camera-to-world pose."""
    return pose.apply(deproject_cam(cam, uv, depth))


def project(cam: PinholeCamera, pose: Se3Pose, points_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (continuous pixels, camera depth)."""
    return project_cam(cam, pose.inverse().apply(points_w))


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Gaussian:
    """A single Gaussian primitive. Training code uses GaussianCloud instead."""

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    anchor_keyframe: int = -1
    feature: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)


class GaussianCloud:
    """Struct-of-arrays store for N Gaussians.

    Arrays share one float dtype (f32 for training, f64 for gradient checks).
    `rotations` may drift off unit norm between optimizer steps; covariance_of
    normalizes on use.
    """

    def __init__(
        self,
        means: np.ndarray,
        log_scales: np.ndarray,
        rotations: np.ndarray,
        opacity_logits: np.ndarray,
        colors: np.ndarray,
        anchors: np.ndarray | None = None,
        features: np.ndarray | None = None,
    ):
        dtype = np.asarray(means).dtype
        self.means = np.ascontiguousarray(means, dtype=dtype).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.ascontiguousarray(log_scales, dtype=dtype).reshape(n, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=dtype).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=dtype).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=dtype).reshape(n, 3)
        if anchors is None:
            anchors = np.full(n, -1, dtype=np.int64)
        self.anchors = np.ascontiguousarray(anchors, dtype=np.int64).reshape(n)
        self.features = None if features is None else np.ascontiguousarray(features, dtype=dtype).reshape(n, -1)

    @staticmethod
    def empty(dtype=np.float32, feature_dim: int | None = None) -> "GaussianCloud":
        f = None if feature_dim is None else np.zeros((0, feature_dim), dtype=dtype)
        return GaussianCloud(
            np.zeros((0, 3), dtype=dtype),
            np.zeros((0, 3), dtype=dtype),
            np.zeros((0, 4), dtype=dtype),
            np.zeros(0, dtype=dtype),
            np.zeros((0, 3), dtype=dtype),
            np.zeros(0, dtype=np.int64),
            f,
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def dtype(self):
        return self.means.dtype

    def keep(self, mask: np.ndarray) -> "GaussianCloud":
        f = None if self.features is None else self.features[mask]
        return GaussianCloud(
            self.means[mask],
            self.log_scales[mask],
            self.rotations[mask],
            self.opacity_logits[mask],
            self.colors[mask],
            self.anchors[mask],
            f,
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if (self.features is None) != (other.features is None):
            raise ValueError("cannot concat clouds with mismatched feature presence")
        f = None
        if self.features is not None:
            f = np.concatenate([self.features, other.features], axis=0)
        return GaussianCloud(
            np.concatenate([self.means, other.means], axis=0),
            np.concatenate([self.log_scales, other.log_scales], axis=0),
            np.concatenate([self.rotations, other.rotations], axis=0),
            np.concatenate([self.opacity_logits, other.opacity_logits], axis=0),
            np.concatenate([self.colors, other.colors], axis=0),
            np.concatenate([self.anchors, other.anchors], axis=0),
            f,
        )

    def copy(self) -> "GaussianCloud":
        return self.keep(np.ones(len(self), dtype=bool))

    def astype(self, dtype) -> "GaussianCloud":
        f = None if self.features is None else self.features.astype(dtype)
        return GaussianCloud(
            self.means.astype(dtype),
            self.log_scales.astype(dtype),
            self.rotations.astype(dtype),
            self.opacity_logits.astype(dtype),
            self.colors.astype(dtype),
            self.anchors.copy(),
            f,
        )


def covariance_of(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Covariances Sigma = R diag(exp(2 ls)) R^T, shape (N, 3, 3).

    Quaternions are normalized here, so the result is symmetric positive
    definite for any unconstrained parameter values.
    """
    ls = np.asarray(log_scales)
    q = np.asarray(rotations, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    r = quat_to_matrix(q)
    s2 = np.exp(2.0 * ls.astype(np.float64))
    sigma = np.einsum("nij,nj,nkj->nik", r, s2, r)
    return sigma.astype(ls.dtype)


# ---------------------------------------------------------------------------
# images and metrics
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Image:
    """Row-major image wrapper; data shape (height, width, channels), f32."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3:
            raise ValueError(f"image data must be HxWxC, got shape {d.shape}")
        self.data = np.ascontiguousarray(d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; capped at 100 dB for MSE below 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)
