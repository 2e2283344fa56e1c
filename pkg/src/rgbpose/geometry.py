"""Non-learned 3D math: poses, NOCS mapping, projection, alignment, box IoU.

Convention: column vectors, ``x_cam = s * R @ x_nocs + t``.  Points are stored as
``[N x 3]`` row arrays, so in code that reads ``s * P @ R.T + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DegenerateError

CATEGORIES = ("bottle", "bowl", "camera", "can", "laptop", "mug")
# continuous symmetry about the NOCS y axis
SYMMETRIC = frozenset({"bottle", "bowl", "can"})

IOU_GRID = 40


def category_name(category) -> str:
    if isinstance(category, (int, np.integer)):
        return CATEGORIES[int(category)]
    if category not in CATEGORIES:
        raise KeyError(f"unknown category {category!r}")
    return category


def is_symmetric(category) -> bool:
    return category_name(category) in SYMMETRIC


@dataclass
class Pose:
    R: np.ndarray
    t: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.s = float(self.s)

    def is_valid(self, tol: float = 1e-9) -> bool:
        ortho = np.abs(self.R.T @ self.R - np.eye(3)).max() <= tol
        return bool(ortho and abs(np.linalg.det(self.R) - 1.0) <= tol and self.s > 0)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3), 1.0)


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass
class OrientedBox:
    center: np.ndarray
    R: np.ndarray
    extents: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if np.any(self.extents <= 0):
            raise ValueError(f"box extents must be positive, got {self.extents}")

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def corners(self) -> np.ndarray:
        signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
        return self.center + (signs * self.extents / 2.0) @ self.R.T


# -- rotations ---------------------------------------------------------------

def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def axis_angle_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor keeps the map accurate for tiny increments
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    sin_t = np.linalg.norm(v)
    cos_t = (np.trace(R) - 1.0) / 2.0
    theta = np.arctan2(sin_t, cos_t)
    if sin_t < 1e-12 and cos_t > 0:
        return v
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        S = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(S), 0.0, None))
        k = int(np.argmax(axis))
        axis = S[:, k] / np.sqrt(S[k, k])
        return axis * theta
    return v / sin_t * theta


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return axis_angle_to_matrix(axis / np.linalg.norm(axis) * angle)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation in radians (atan2 form, accurate near 0)."""
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(np.linalg.norm(v), (np.trace(R) - 1.0) / 2.0))


# -- NOCS / camera -----------------------------------------------------------

def to_nocs(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Camera-frame points into NOCS: ``p_N = R^T (p_o - t) / s``."""
    P = np.asarray(points, dtype=np.float64)
    return ((P - pose.t) / pose.s) @ pose.R


def from_nocs(points: np.ndarray, pose: Pose) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64)
    return pose.s * P @ pose.R.T + pose.t


def project(points: np.ndarray, K: Intrinsics) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bad = np.nonzero(P[:, 2] <= 0)[0]
    if bad.size:
        raise BehindCameraError(bad)
    z = P[:, 2]
    return np.stack([K.fx * P[:, 0] / z + K.cx, K.fy * P[:, 1] / z + K.cy], axis=1)


def backproject(pixels: np.ndarray, depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (uv[:, 0] - K.cx) / K.fx * z
    y = (uv[:, 1] - K.cy) / K.fy * z
    return np.stack([x, y, z], axis=1)


# -- similarity alignment ------------------------------------------------------

def umeyama_align(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares similarity (R, t, s) with ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or src.shape[0] < 3:
        raise DegenerateError(f"need matching [N x 3] sets with N >= 3, got {src.shape} and {dst.shape}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs * xs).sum() / len(src)
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    if var_s <= 0 or S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateError("rank-deficient covariance (collinear or coincident points)")
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    s = float((S * d).sum() / var_s)
    t = mu_d - s * R @ mu_s
    return Pose(R, t, s)


# -- oriented box IoU ----------------------------------------------------------

def _box_key(b: OrientedBox) -> tuple:
    return tuple(np.concatenate([b.center, b.extents, b.R.reshape(-1)]).tolist())


def box_iou(a: OrientedBox, b: OrientedBox, grid: int = IOU_GRID) -> float:
    """IoU by sampling cell centers of the smaller box on a ``grid``^3 lattice."""
    va, vb = a.volume, b.volume
    small, big = (a, b) if (va, _box_key(a)) <= (vb, _box_key(b)) else (b, a)
    g = (np.arange(grid) + 0.5) / grid - 0.5
    local = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3) * small.extents
    world = local @ small.R.T + small.center
    in_big = (world - big.center) @ big.R
    inside = np.all(np.abs(in_big) <= big.extents / 2.0, axis=1)
    inter = inside.mean() * small.volume
    union = va + vb - inter
    return float(inter / union) if union > 0 else 0.0


# -- pose errors ---------------------------------------------------------------

def align_symmetric(R_pred: np.ndarray, R_gt: np.ndarray) -> np.ndarray:
    """Rotate the prediction about its own y axis to best match the ground truth."""
    M = R_gt.T @ R_pred
    theta = np.arctan2(M[2, 0] - M[0, 2], M[0, 0] + M[2, 2])
    c, s = np.cos(theta), np.sin(theta)
    Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return R_pred @ Ry


def rotation_error_deg(R_pred: np.ndarray, R_gt: np.ndarray, symmetric: bool = False) -> float:
    if symmetric:
        a, b = R_pred[:, 1], R_gt[:, 1]
        return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), float(a @ b))))
    return float(np.degrees(rotation_angle(R_pred @ R_gt.T)))


def pose_box(pose: Pose, extents: np.ndarray) -> OrientedBox:
    """Metric box of an object whose NOCS bounding box has ``extents``."""
    return OrientedBox(pose.t, pose.R, np.asarray(extents, dtype=np.float64) * pose.s)


def pose_errors(pred: Pose, pred_extents, gt: Pose, gt_extents, category) -> tuple[float, float, float]:
    """(rotation error in degrees, translation error in meters, 3D IoU)."""
    sym = is_symmetric(category)
    rot = rotation_error_deg(pred.R, gt.R, sym)
    trans = float(np.linalg.norm(pred.t - gt.t))
    R_box = align_symmetric(pred.R, gt.R) if sym else pred.R
    iou = box_iou(pose_box(Pose(R_box, pred.t, pred.s), pred_extents), pose_box(gt, gt_extents))
    return rot, trans, iou
