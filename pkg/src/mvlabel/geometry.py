"""Pinhole camera model, rigid poses and point-set registration.

Conventions used throughout the package:

* Pixel ``(u, v)``: ``u`` is the column, ``v`` the row, integer values at
  pixel centres.
* Camera frame: x right, y down, z forward (optical axis).
* A :class:`Pose` maps reference-frame coordinates into a camera frame.
  Unprojection therefore applies the inverse pose.
* Coloured points are ``(N, 6)`` float arrays ``[x, y, z, r, g, b]`` with
  colour in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised on malformed geometric input."""


class DegenerateConfigurationError(GeometryError):
    """Point configuration does not determine a rigid transform."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None, check: bool = True):
        R = np.eye(3) if rotation is None else np.array(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.array(translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise GeometryError(f"bad pose shapes {R.shape}, {t.shape}")
        if check:
            if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
                raise GeometryError("pose contains non-finite values")
            if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
                raise GeometryError("rotation is not orthonormal")
            if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
                raise GeometryError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        if T.shape == (16,):
            T = T.reshape(4, 4)
        if T.shape != (4, 4):
            raise GeometryError(f"expected 4x4 matrix, got {T.shape}")
        if np.abs(T[3] - [0, 0, 0, 1]).max() > _ORTHO_TOL:
            raise GeometryError("last row of a rigid transform must be [0, 0, 0, 1]")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_euler_z(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """World-to-camera pose for a camera at ``eye`` looking at ``target``.

        ``up`` is the world up direction; the camera's y axis points down.
        """
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        n = np.linalg.norm(fwd)
        if n == 0:
            raise GeometryError("eye and target coincide")
        fwd = fwd / n
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise GeometryError("viewing direction parallel to up vector")
        right = right / rn
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, check=False)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (``other`` is applied first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation, check=False)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Position of the frame origin this pose maps to, in source coordinates."""
        return -self.rotation.T @ self.translation

    def to_list(self) -> list[float]:
        return [float(x) for x in self.matrix().ravel()]

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
                and np.allclose(self.translation, other.translation, atol=atol, rtol=0))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def valid_depth_mask(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


def unproject_frame(rgb, depth, intr: Intrinsics, pose: Pose, valid_mask=None, view_index: int = 0):
    """Lift every valid-depth pixel of a frame into the reference frame.

    Returns:
        points: ``(M, 6)`` array of ``[x, y, z, r, g, b]``.
        provenance: ``(M, 3)`` int array of ``(view_index, u, v)``.

    Pixels are emitted in row-major order. Zero or non-finite depth is
    invalid; ``valid_mask`` further restricts the pixel set.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != intr.shape:
        raise GeometryError(f"depth shape {depth.shape} does not match intrinsics {intr.shape}")
    rgb = np.asarray(rgb)
    if rgb.shape[:2] != intr.shape:
        raise GeometryError(f"rgb shape {rgb.shape[:2]} does not match intrinsics {intr.shape}")
    if rgb.dtype == np.uint8:
        rgb = rgb.astype(np.float64) / 255.0
    else:
        rgb = rgb.astype(np.float64)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)

    ok = valid_depth_mask(depth)
    if valid_mask is not None:
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != intr.shape:
            raise GeometryError("valid_mask shape mismatch")
        ok &= valid_mask
    v, u = np.nonzero(ok)
    z = depth[v, u]
    cam = np.stack([z * (u - intr.cx) / intr.fx, z * (v - intr.cy) / intr.fy, z], axis=1)
    xyz = pose.inverse().apply(cam)
    points = np.concatenate([xyz, rgb[v, u]], axis=1)
    prov = np.stack([np.full(u.shape, view_index, dtype=np.int64), u, v], axis=1).astype(np.int64)
    return points, prov


def project_points(points, intr: Intrinsics, pose: Pose):
    """Transform reference-frame points into a camera and project them.

    Returns:
        uv: ``(N, 2)`` float pixel coordinates (``nan`` behind the camera).
        depth: ``(N,)`` camera-frame depth.
        in_frame: ``(N,)`` bool; False for depth <= 0 or outside the image.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise GeometryError(f"expected (N, >=3) points, got {pts.shape}")
    cam = pose.apply(pts[:, :3])
    z = cam[:, 2]
    front = z > 0
    uv = np.full((len(pts), 2), np.nan)
    uv[front, 0] = intr.fx * cam[front, 0] / z[front] + intr.cx
    uv[front, 1] = intr.fy * cam[front, 1] / z[front] + intr.cy
    eps = 1e-9  # pixels on the image border may round-trip to -1e-15
    with np.errstate(invalid="ignore"):
        in_frame = (front & (uv[:, 0] >= -eps) & (uv[:, 0] < intr.width)
                    & (uv[:, 1] >= -eps) & (uv[:, 1] < intr.height))
    return uv, z, in_frame


def estimate_rigid_transform(src, dst) -> tuple[Pose, float]:
    """Least-squares rigid fit ``dst ≈ R @ src + t`` (Kabsch, no scale).

    Returns the pose and the mean squared residual.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise GeometryError(f"correspondence shapes differ or are not (N, 3): {src.shape}, {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise DegenerateConfigurationError("source points are coincident or collinear")
    H = a.T @ b
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    resid = float(np.mean(np.sum((src @ R.T + t - dst) ** 2, axis=1)))
    return Pose(R, t, check=False), resid
