# Module containing the pinhole camera geometry of the library

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from mvsadapt import autodiff as ad

logger = logging.getLogger(__name__)

HOMOGENEOUS_EPS = 1e-12
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Intrinsics:
    """
    Pinhole intrinsics.

    Parameters
    ----------
    K : array-like
        3x3 upper-triangular calibration matrix in pixel units with
        positive focal lengths and K[2, 2] == 1.
    """
    K: np.ndarray

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"'K' must be 3x3, got shape {K.shape}.")
        if np.any(K[np.tril_indices(3, -1)] != 0.0):
            raise ValueError("'K' must be upper-triangular.")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("'K' must have positive focal lengths.")
        if K[2, 2] != 1.0:
            raise ValueError("'K[2, 2]' must equal 1.")
        K.flags.writeable = False
        object.__setattr__(self, 'K', K)

    @classmethod
    def from_focal(cls, fx, fy, cx, cy):
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))

    @property
    def inverse(self):
        return np.linalg.inv(self.K)


@dataclass(frozen=True, eq=False)
class Pose:
    """
    World-to-camera rigid transform, x_cam = R @ x_world + t.

    Parameters
    ----------
    R : array-like
        3x3 rotation.
    t : array-like
        Translation 3-vector in scene units.
    """
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"Pose needs a 3x3 'R' and a 3-vector 't', got {R.shape} and {t.shape}.")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("'R' must be orthonormal.")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("'R' must have determinant 1.")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 't', t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, center, target, up=(0.0, -1.0, 0.0)):
        """
        Pose of a camera at ``center`` whose optical axis points at ``target``.

        The camera y axis points along -``up`` (image rows grow downwards).
        """
        center = np.asarray(center, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - center
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise ValueError("'center' and 'target' must differ.")
        forward = forward / norm
        right = np.cross(-np.asarray(up, dtype=np.float64), forward)
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("'up' is parallel to the viewing direction.")
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ center)

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_matrix(self):
        """
        Returns the 4x4 extrinsic matrix [R t; 0 1].
        """
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.t
        return out


class Camera(NamedTuple):
    intrinsics: Intrinsics
    pose: Pose


@dataclass(frozen=True, eq=False)
class PosedImage:
    """
    One calibrated view.

    Parameters
    ----------
    image : np.ndarray
        (H, W, 3) intensities in [0, 1], H and W at least 8.
    intrinsics : Intrinsics
    pose : Pose
    """
    image: np.ndarray
    intrinsics: Intrinsics
    pose: Pose

    def __post_init__(self):
        image = np.array(self.image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"'image' must be (H, W, 3), got shape {image.shape}.")
        if image.shape[0] < 8 or image.shape[1] < 8:
            raise ValueError(f"'image' must be at least 8x8, got {image.shape[:2]}.")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError("'image' intensities must lie in [0, 1].")
        if not isinstance(self.intrinsics, Intrinsics) or not isinstance(self.pose, Pose):
            raise TypeError("'intrinsics' and 'pose' must be Intrinsics and Pose instances.")
        image.flags.writeable = False
        object.__setattr__(self, 'image', image)

    @property
    def camera(self):
        return Camera(self.intrinsics, self.pose)

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass(frozen=True)
class DepthHypotheses:
    """
    ``count`` uniformly spaced depth planes over [d_min, d_max].
    """
    d_min: float
    d_max: float
    count: int

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"Depth range must satisfy 0 < d_min < d_max, got {self.d_min}, {self.d_max}.")
        if int(self.count) != self.count or self.count < 1:
            raise ValueError(f"'count' must be a positive integer, got {self.count}.")
        object.__setattr__(self, 'd_min', float(self.d_min))
        object.__setattr__(self, 'd_max', float(self.d_max))
        object.__setattr__(self, 'count', int(self.count))

    @property
    def values(self):
        return np.linspace(self.d_min, self.d_max, self.count)

    @property
    def interval(self):
        return (self.d_max - self.d_min) / max(self.count - 1, 1)


def as_camera(camera):
    if isinstance(camera, PosedImage):
        return camera.camera
    intrinsics, pose = camera
    if not isinstance(intrinsics, Intrinsics) or not isinstance(pose, Pose):
        raise TypeError('A camera must be an (Intrinsics, Pose) pair.')
    return Camera(intrinsics, pose)


def principal_axis(pose):
    """
    Viewing direction of the camera in world coordinates, R.T @ (0, 0, 1).
    """
    return pose.R[2].copy()


def _plane_terms(ref, src):
    ref, src = as_camera(ref), as_camera(src)
    try:
        k_ref_inv = np.linalg.inv(ref.intrinsics.K)
    except np.linalg.LinAlgError:
        raise ValueError('Reference intrinsics are singular.') from None
    rotation = src.intrinsics.K @ src.pose.R
    A = rotation @ ref.pose.R.T @ k_ref_inv
    b = rotation @ (src.pose.center - ref.pose.center)
    return A, b, k_ref_inv[2]


def homography(ref, src, d):
    """
    Plane-induced homography H(d) from reference to source pixels.

    H(d) = K_s R_s (I - (C_s - C_r) n_r^T / d) R_r^T K_r^-1, with C the
    camera centres and n_r the reference principal axis.

    Parameters
    ----------
    ref, src : Camera or (Intrinsics, Pose)
    d : float or Var
        Plane depth along the reference principal axis, > 0.

    Returns
    -------
    np.ndarray or Var
        3x3 matrix, a Var when ``d`` is one.
    """
    if isinstance(d, ad.Var):
        if np.any(d.value <= 0):
            raise ValueError("'d' must be positive.")
        A, b, e = _plane_terms(ref, src)
        return ad.sub(A, ad.mul(np.outer(b, e), ad.div(1.0, ad.reshape(d, (1, 1)))))
    if not d > 0:
        raise ValueError(f"'d' must be positive, got {d}.")
    A, b, e = _plane_terms(ref, src)
    return A - np.outer(b, e) / d


def apply_homography(H, u):
    """
    Maps pixel coordinates through ``H``.

    Parameters
    ----------
    H : np.ndarray or Var
        3x3 homography.
    u : array-like
        (..., 2) pixel coordinates (x, y).

    Returns
    -------
    coords : np.ndarray or Var
        Mapped coordinates, (..., 2) for arrays and (P, 2) for a Var ``H``.
    valid : np.ndarray of bool
        False where the homogeneous component is within 1e-12 of zero.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2:
        raise ValueError(f"'u' must have a trailing axis of length 2, got shape {u.shape}.")
    points = u.reshape(-1, 2)
    homog = np.column_stack([points, np.ones(len(points))])
    if isinstance(H, ad.Var):
        mapped = ad.matmul(homog, ad.transpose(H))
        w = mapped.value[:, 2]
        valid = np.abs(w) > HOMOGENEOUS_EPS
        w_safe = ad.reshape(ad.where(valid, mapped[:, 2], 1.0), (-1, 1))
        return ad.div(mapped[:, :2], w_safe), valid
    mapped = homog @ np.asarray(H, dtype=np.float64).T
    w = mapped[:, 2]
    valid = np.abs(w) > HOMOGENEOUS_EPS
    w_safe = np.where(valid, w, 1.0)
    coords = mapped[:, :2] / w_safe[:, None]
    return coords.reshape(u.shape), valid.reshape(u.shape[:-1])


def bilinear_sample(grid, coords):
    """
    Samples ``grid`` at (x, y) coordinates; see ``autodiff.bilinear_sample``.

    Parameters
    ----------
    grid : np.ndarray or Var
        (H, W, C) values.
    coords : array-like or Var
        (P, 2) coordinates.

    Returns
    -------
    values : Var
        (P, C) samples, zero out of bounds.
    inside : np.ndarray of bool
        (P,) in-bounds flags.
    """
    if isinstance(coords, ad.Var):
        return ad.bilinear_sample(grid, coords[:, 0], coords[:, 1])
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return ad.bilinear_sample(grid, coords[:, 0], coords[:, 1])


def pixel_grid(height, width):
    """
    Homogeneous pixel coordinates (3, H*W) in row-major pixel order.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel(), np.ones(height * width)]).astype(np.float64)


def sample_at_depth(grid, ref, src, depth, height, width):
    """
    Samples a source-view ``grid`` where reference pixels land when lifted to
    ``depth``.

    Parameters
    ----------
    grid : np.ndarray or Var
        (H_s, W_s, C) source values.
    ref, src : Camera
    depth : np.ndarray or Var
        Depths of shape (..., height, width); leading axes repeat the
        reference pixel lattice (one per hypothesis, for instance).
    height, width : int
        Reference image size.

    Returns
    -------
    values : Var
        (depth.size, C) samples, zero where invalid.
    valid : np.ndarray of bool
        (depth.size,) True where the point is in front of the source camera
        and all four bilinear neighbours are in bounds.
    """
    A, b, _ = _plane_terms(ref, src)
    base = A @ pixel_grid(height, width)
    repeats = int(np.prod(depth.shape)) // (height * width)
    base = np.tile(base, (1, repeats))
    inv_depth = ad.div(1.0, ad.reshape(depth, (-1,)))
    px = ad.sub(base[0], ad.mul(b[0], inv_depth))
    py = ad.sub(base[1], ad.mul(b[1], inv_depth))
    pw = ad.sub(base[2], ad.mul(b[2], inv_depth))
    front = pw.value > HOMOGENEOUS_EPS
    w_safe = ad.where(front, pw, 1.0)
    values, inside = ad.bilinear_sample(grid, ad.div(px, w_safe), ad.div(py, w_safe))
    valid = front & inside
    if not valid.all():
        values = ad.mul(values, valid[:, None].astype(np.float64))
    return values, valid


def inverse_warp(src, ref_cam, depth):
    """
    Warps a source view into the reference view using a reference depth map.

    Parameters
    ----------
    src : PosedImage
        Source view.
    ref_cam : Camera or (Intrinsics, Pose)
        Reference camera.
    depth : np.ndarray or Var
        (H, W) positive reference depths.

    Returns
    -------
    warped : Var
        (H, W, 3) warped source image, zero outside the mask; differentiable
        with respect to ``depth``.
    mask : np.ndarray
        (H, W) float visibility mask in {0, 1}.
    """
    value = depth.value if isinstance(depth, ad.Var) else np.asarray(depth)
    if value.ndim != 2:
        raise ValueError(f"'depth' must be (H, W), got shape {value.shape}.")
    if np.any(value <= 0):
        raise ValueError("'depth' entries must be positive.")
    height, width = value.shape
    values, valid = sample_at_depth(src.image, as_camera(ref_cam), src.camera, depth, height, width)
    warped = ad.reshape(values, (height, width, src.image.shape[2]))
    return warped, valid.reshape(height, width).astype(np.float64)


def project(points, camera):
    """
    Projects (P, 3) world points to pixel coordinates and camera depths.
    """
    camera = as_camera(camera)
    cam = np.asarray(points, dtype=np.float64) @ camera.pose.R.T + camera.pose.t
    pix = cam @ camera.intrinsics.K.T
    return pix[:, :2] / pix[:, 2:3], cam[:, 2]


def backproject(u, depth, camera):
    """
    Lifts pixels ``u`` (P, 2) with camera-frame depths (P,) to world points.
    """
    camera = as_camera(camera)
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    rays = np.column_stack([u, np.ones(len(u))]) @ camera.intrinsics.inverse.T
    cam = rays * np.asarray(depth, dtype=np.float64).reshape(-1, 1)
    return (cam - camera.pose.t) @ camera.pose.R


def pixel_rays(camera, height, width):
    """
    World-frame ray directions through every pixel, scaled to unit camera
    depth, in row-major order (H*W, 3).
    """
    camera = as_camera(camera)
    rays = (camera.intrinsics.inverse @ pixel_grid(height, width)).T
    return rays @ camera.pose.R
