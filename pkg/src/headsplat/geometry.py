"""Cameras, quaternions, and rigid transforms shared by every pipeline stage.

Conventions used throughout the engine:

* right-handed coordinates, camera space has +z in front of the camera;
* a camera-space point q projects to NDC ``s = focal * (q.x/q.z, q.y/q.z)``
  and to continuous pixel coordinates ``u = (s+1)/2 * (width, height)``;
* image arrays are indexed ``[row, col]`` with the center of cell
  ``[r, c]`` at continuous coordinates ``(c + 0.5, r + 0.5)``;
* depth is camera-space z, not ray length.

``Camera.look_at`` rolls the view 180 degrees about the optical axis (a
proper rotation), so that world-up lands at row 0 and arrays read in the
usual top-to-bottom raster order.  Shoulders of an upright head therefore
occupy the large-row half of the frame.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

UNIT_QUAT_TOL = 1e-6


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit length. Works on (4,) or (n, 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for quaternion(s) ``(w, x, y, z)``.

    Accepts (4,) or (n, 4). A non-unit input beyond tolerance is normalized
    first and a warning is recorded.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    norms = np.linalg.norm(q2, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_QUAT_TOL):
        warnings.warn("quat_to_matrix: non-unit quaternion, normalizing", stacklevel=2)
        q2 = quat_normalize(q2)
    w, x, y, z = q2[:, 0], q2[:, 1], q2[:, 2], q2[:, 3]
    m = np.empty(q2.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) for a single proper rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_normalize(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def rotvec_to_matrix(rv: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for axis-angle vector(s); (3,) -> (3,3), (n,3) -> (n,3,3)."""
    rv = np.asarray(rv, dtype=np.float64)
    single = rv.ndim == 1
    v = np.atleast_2d(rv)
    theta = np.linalg.norm(v, axis=1)
    out = np.tile(np.eye(3), (v.shape[0], 1, 1))
    nz = theta > 1e-12
    if np.any(nz):
        axis = v[nz] / theta[nz, None]
        kx, ky, kz = axis[:, 0], axis[:, 1], axis[:, 2]
        zero = np.zeros_like(kx)
        k = np.stack([
            np.stack([zero, -kz, ky], axis=-1),
            np.stack([kz, zero, -kx], axis=-1),
            np.stack([-ky, kx, zero], axis=-1),
        ], axis=-2)
        s = np.sin(theta[nz])[:, None, None]
        c = np.cos(theta[nz])[:, None, None]
        out[nz] = np.eye(3) + s * k + (1 - c) * (k @ k)
    return out[0] if single else out


@dataclass(frozen=True)
class RigidTransform:
    """World -> target rigid transform stored as unit quaternion + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix().T + self.translation

    def inverse(self) -> "RigidTransform":
        r = self.matrix()
        rot = np.array([self.rotation[0], *(-self.rotation[1:])])
        return RigidTransform(rot, -(r.T @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then self."""
        return RigidTransform(
            quat_multiply(self.rotation, other.rotation),
            self.matrix() @ other.translation + self.translation)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()


class FrustumError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``pose`` maps world to camera space.

    Parameters
    ----------
    width, height : int
        Image dimensions in pixels.
    focal : float
        NDC-scale focal multiplier: ``s = focal * (x/z, y/z)``.
    pose : RigidTransform
        World -> camera rigid transform.
    near, far : float
        Depth range; points outside are flagged out of frustum.
    """

    width: int
    height: int
    focal: float = 12.0
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera dims must be positive")
        if not (self.focal > 0):
            raise ValueError("focal must be positive")
        if not (0 < self.near < self.far):
            raise FrustumError(f"invalid frustum: near={self.near} far={self.far}")

    def project(self, points: np.ndarray):
        """Project world points.

        Parameters
        ----------
        points : (n, 3) or (3,) array

        Returns
        -------
        pixels : (n, 2) continuous pixel coordinates (u, v)
        depth : (n,) camera-space z
        in_frustum : (n,) bool, true when near <= z <= far and the pixel
            lies inside [0, width] x [0, height]
        """
        p = np.asarray(points, dtype=np.float64)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        q = p @ self.pose.matrix().T + self.pose.translation
        z = q[:, 2]
        safe_z = np.where(np.abs(z) < 1e-12, np.inf, z)
        ndc = self.focal * q[:, :2] / safe_z[:, None]
        pix = (ndc + 1.0) * 0.5 * np.array([self.width, self.height])
        ok = (z >= self.near) & (z <= self.far)
        ok &= (pix[:, 0] >= 0) & (pix[:, 0] <= self.width)
        ok &= (pix[:, 1] >= 0) & (pix[:, 1] <= self.height)
        if single:
            return pix[0], z[0], bool(ok[0])
        return pix, z, ok

    def unproject(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """Inverse of project for in-frustum points: pixel + depth -> world."""
        pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        z = np.atleast_1d(np.asarray(depths, dtype=np.float64))
        ndc = pix / np.array([self.width, self.height]) * 2.0 - 1.0
        q = np.empty((pix.shape[0], 3))
        q[:, 0] = ndc[:, 0] * z / self.focal
        q[:, 1] = ndc[:, 1] * z / self.focal
        q[:, 2] = z
        out = self.pose.inverse().apply(q)
        if np.asarray(pixels).ndim == 1:
            return out[0]
        return out

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return self.pose.inverse().translation

    def camera_rotation(self) -> np.ndarray:
        return self.pose.matrix()

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), **kwargs) -> "Camera":
        """Camera at ``eye`` looking at ``target``, rolled so ``up`` maps to row 0."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("look_at: eye and target coincide")
        zc = fwd / n
        yc = -(up - np.dot(up, zc) * zc)
        ny = np.linalg.norm(yc)
        if ny < 1e-12:
            raise ValueError("look_at: up is parallel to the view direction")
        yc /= ny
        xc = np.cross(yc, zc)
        rot = np.stack([xc, yc, zc])  # rows: camera axes in world coords
        pose = RigidTransform(matrix_to_quat(rot), -(rot @ eye))
        return cls(pose=pose, **kwargs)

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return replace(self, pose=pose)
