"""Closed-form geometry: poses, pinhole and dual-quadric projection,
vector-pair rotations, and point-set similarity alignment.

Conventions: camera frame is x right, y down, z forward. ``SE3Pose`` maps
points from its source frame into its target frame, ``x_t = R @ x_s + t``.
Keyframes store world-from-camera poses (``T_wc``); projection takes the
inverse (``T_cw``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation

EPS_DEPTH = 1e-6
EPS_LEN = 1e-9
EPS_ANGLE = 1e-6


class GeometryError(ValueError):
    """Raised when inputs do not define the requested geometric quantity."""


class InvalidVectorError(GeometryError):
    pass


class InvalidAxisError(GeometryError):
    pass


class InsufficientGeometryError(GeometryError):
    pass


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min <= self.u_max and self.v_min <= self.v_max):
            raise GeometryError(f"invalid box {self.as_list()}")

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.u_min + self.u_max) / 2, (self.v_min + self.v_max) / 2])

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= self.u_min)
            & (uv[:, 0] <= self.u_max)
            & (uv[:, 1] >= self.v_min)
            & (uv[:, 1] <= self.v_max)
        )

    def as_list(self) -> list[float]:
        return [self.u_min, self.v_min, self.u_max, self.v_max]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Box2D":
        u1, v1, u2, v2 = (float(x) for x in values)
        return cls(u1, v1, u2, v2)


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def intersection_over_area(a: Box2D, of: Box2D) -> float:
    """Fraction of ``of`` covered by ``a``."""
    iw = min(a.u_max, of.u_max) - max(a.u_min, of.u_min)
    ih = min(a.v_max, of.v_max) - max(a.v_min, of.v_min)
    if iw <= 0.0 or ih <= 0.0 or of.area <= 0.0:
        return 0.0
    return iw * ih / of.area


@dataclass(frozen=True, eq=False)
class SE3Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, q_wxyz: Sequence[float], t: Sequence[float]) -> "SE3Pose":
        w, x, y, z = q_wxyz
        return cls(Rotation.from_quat([x, y, z, w]).as_matrix(), t)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with w >= 0."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        return -q if q[0] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def allclose(self, other: "SE3Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def look_at(position: Sequence[float], target: Sequence[float],
            up: Sequence[float] = (0.0, 0.0, 1.0)) -> SE3Pose:
    """World-from-camera pose of a camera at ``position`` looking at ``target``."""
    p = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - p
    f /= np.linalg.norm(f)
    x = np.cross(f, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(f, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return SE3Pose(np.column_stack([x, y, f]), p)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise GeometryError("focal lengths and image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def image_box(self) -> Box2D:
        return Box2D(0.0, 0.0, float(self.width), float(self.height))

    def unproject(self, uv: Sequence[float], depth: float) -> np.ndarray:
        u, v = uv
        return np.array([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class DualQuadric:
    """Ellipsoid kept in decomposed form; the 4x4 dual matrix is derived."""

    center: np.ndarray
    half_axes: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "half_axes", np.asarray(self.half_axes, dtype=float).reshape(3))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float).reshape(3, 3))
        if np.any(self.half_axes <= 0):
            raise GeometryError("half-axes must be positive")

    @classmethod
    def sphere(cls, center: Sequence[float], radius: float) -> "DualQuadric":
        return cls(center, [radius] * 3, np.eye(3))

    @cached_property
    def _matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.orientation
        T[:3, 3] = self.center
        Q = T @ np.diag(np.append(self.half_axes**2, -1.0)) @ T.T
        Q.flags.writeable = False
        return Q

    def matrix(self) -> np.ndarray:
        return self._matrix

    @classmethod
    def from_matrix(cls, Q: np.ndarray) -> "DualQuadric":
        Q = np.asarray(Q, dtype=float)
        Q = 0.5 * (Q + Q.T)
        if abs(Q[3, 3]) < 1e-15:
            raise GeometryError("dual quadric at infinity")
        Q = Q / -Q[3, 3]
        center = -Q[:3, 3]
        shape = Q[:3, :3] + np.outer(center, center)
        evals, evecs = np.linalg.eigh(shape)
        if np.any(evals <= 0):
            raise GeometryError("matrix is not a dual ellipsoid")
        if np.linalg.det(evecs) < 0:
            evecs[:, 0] = -evecs[:, 0]
        return cls(center, np.sqrt(evals), evecs)

    def transformed(self, T: SE3Pose) -> "DualQuadric":
        return DualQuadric(T.apply(self.center), self.half_axes, T.rotation @ self.orientation)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "half_axes": self.half_axes.tolist(),
                "orientation": self.orientation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DualQuadric":
        return cls(d["center"], d["half_axes"], d["orientation"])


def project_point(K: CameraIntrinsics, T_cw: SE3Pose, X: Sequence[float]) -> Optional[np.ndarray]:
    """Pixel coordinates of world point ``X``, or ``None`` when behind the camera."""
    Xc = T_cw.apply(np.asarray(X, dtype=float))
    if Xc[2] <= EPS_DEPTH:
        return None
    return np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])


def project_points(K: CameraIntrinsics, T_cw: SE3Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project_point`: returns (uv, in_front mask)."""
    Xc = T_cw.apply(np.asarray(X, dtype=float).reshape(-1, 3))
    front = Xc[:, 2] > EPS_DEPTH
    z = np.where(front, Xc[:, 2], 1.0)
    uv = np.column_stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy])
    return uv, front


def project_quadric_bbox(K: CameraIntrinsics, T_cw: SE3Pose, Q: DualQuadric,
                         clip: bool = True) -> Optional[Box2D]:
    """Axis-aligned box enclosing the image conic of a dual quadric.

    The conic ``C = P Q P^T`` is an ellipse only if the camera's principal
    plane misses the ellipsoid, i.e. ``C[2, 2] < 0`` with ``Q[3, 3] = -1``.
    Box edges are the vertical/horizontal tangent lines of the dual conic.
    """
    if T_cw.apply(Q.center)[2] <= EPS_DEPTH:
        return None
    P = K.K @ np.hstack([T_cw.rotation, T_cw.translation[:, None]])
    C = P @ Q.matrix() @ P.T
    c22 = C[2, 2]
    if c22 >= 0.0:
        return None
    du = C[0, 2] ** 2 - C[0, 0] * c22
    dv = C[1, 2] ** 2 - C[1, 1] * c22
    if du < 0.0 or dv < 0.0:
        return None
    su, sv = np.sqrt(du), np.sqrt(dv)
    u_a, u_b = (C[0, 2] + su) / c22, (C[0, 2] - su) / c22
    v_a, v_b = (C[1, 2] + sv) / c22, (C[1, 2] - sv) / c22
    u_min, u_max = min(u_a, u_b), max(u_a, u_b)
    v_min, v_max = min(v_a, v_b), max(v_a, v_b)
    box = Box2D(float(u_min), float(v_min), float(u_max), float(v_max))
    return clip_to_image(box, K) if clip else box


def clip_to_image(box: Box2D, K: CameraIntrinsics) -> Optional[Box2D]:
    """``box`` cut to the image, or ``None`` when nothing is left."""
    u_min, u_max = max(box.u_min, 0.0), min(box.u_max, float(K.width))
    v_min, v_max = max(box.v_min, 0.0), min(box.v_max, float(K.height))
    if u_max <= u_min or v_max <= v_min:
        return None
    return Box2D(u_min, v_min, u_max, v_max)


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rodrigues(axis: Sequence[float], angle: float) -> np.ndarray:
    w = np.asarray(axis, dtype=float).reshape(3)
    if abs(np.linalg.norm(w) - 1.0) > 1e-9:
        raise InvalidAxisError(f"axis must be unit length, got norm {np.linalg.norm(w)!r}")
    c, s = np.cos(angle), np.sin(angle)
    return c * np.eye(3) + (1.0 - c) * np.outer(w, w) + s * skew(w)


def _any_perpendicular(v: np.ndarray) -> np.ndarray:
    helper = np.eye(3)[int(np.argmin(np.abs(v)))]
    p = np.cross(v, helper)
    return p / np.linalg.norm(p)


@dataclass(frozen=True, eq=False)
class PairTransform:
    rotation: np.ndarray
    scale: float
    angle: float
    axis: np.ndarray
    translation: np.ndarray
    degenerate: bool = False


def vector_pair_transform(v_i: Sequence[float], v_j: Sequence[float]) -> PairTransform:
    """Rotation and scale taking ``v_i`` onto ``v_j`` (``v_j = R (s v_i)``).

    Anti-parallel inputs get a half-turn about an arbitrary perpendicular
    axis and are flagged degenerate.
    """
    a = np.asarray(v_i, dtype=float).reshape(3)
    b = np.asarray(v_j, dtype=float).reshape(3)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= EPS_LEN or nb <= EPS_LEN:
        raise InvalidVectorError("semantic vector shorter than the length tolerance")
    s = nb / na
    theta = float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))
    cross = np.cross(a, b)
    cn = np.linalg.norm(cross)
    zero = np.zeros(3)
    if np.pi - theta <= EPS_ANGLE:
        w = _any_perpendicular(a)
        return PairTransform(rodrigues(w, np.pi), s, np.pi, w, zero, True)
    if cn <= 1e-12 * na * nb:
        return PairTransform(np.eye(3), s, 0.0, _any_perpendicular(a), zero, False)
    w = cross / cn
    return PairTransform(rodrigues(w, theta), s, theta, w, zero, False)


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> tuple[SE3Pose, float]:
    """Least-squares ``dst ~ s R src + t`` with ``det(R) = +1``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise GeometryError("point sets differ in size")
    n = len(src)
    if n < 3:
        raise InsufficientGeometryError(f"need at least 3 correspondences, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if sv_src[0] <= EPS_LEN or sv_src[1] <= 1e-9 * sv_src[0]:
        raise InsufficientGeometryError("correspondences are collinear")
    cov = xd.T @ xs / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(d) @ S) / (xs**2).sum() * n) if with_scale else 1.0
    t = mu_d - scale * R @ mu_s
    return SE3Pose(R, t), scale


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity ``x -> s R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_se3(cls, T: SE3Pose, scale: float = 1.0) -> "Sim3":
        return cls(T.rotation, T.translation, scale)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Sim3":
        A = M[:3, :3]
        s = float(np.cbrt(np.linalg.det(A)))
        return cls(A / s, M[:3, 3], s)

    def inverse(self) -> "Sim3":
        Rt = self.rotation.T
        return Sim3(Rt, -Rt @ self.translation / self.scale, 1.0 / self.scale)

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return Sim3(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_pose(self, T_wc: SE3Pose) -> SE3Pose:
        """Re-anchor a world-from-camera pose under a world similarity."""
        return SE3Pose(self.rotation @ T_wc.rotation, self.apply(T_wc.translation))

    def log(self) -> np.ndarray:
        """Lie-algebra element (4x4) of the similarity."""
        return np.real(logm(self.matrix()))

    @classmethod
    def exp(cls, L: np.ndarray) -> "Sim3":
        return cls.from_matrix(np.real(expm(L)))

    def interpolate(self, fraction: float) -> "Sim3":
        """``exp(fraction * log(self))`` in the similarity group."""
        if fraction == 0.0:
            return Sim3.identity()
        if fraction == 1.0:
            return self
        return Sim3.exp(fraction * self.log())

    def to_dict(self) -> dict:
        q = SE3Pose(self.rotation, self.translation).quaternion()
        return {"t": self.translation.tolist(), "q": q.tolist(), "scale": self.scale}
