"""
SE(3) poses, pinhole cameras and projection of the tactile sensor box into
per-view bounding boxes and patch-token masks.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

Z_NEAR = 1e-3  # metres
ORTHO_TOL = 1e-6

# Camera looking straight down the world -Z axis: x_cam = x_world, y_cam = -y_world.
LOOK_DOWN = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class Pose:
    """Rigid transform x' = R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHO_TOL):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHO_TOL:
            raise ValueError("pose rotation has determinant != +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation: Sequence[float]) -> "Pose":
        return cls(np.eye(3), translation)

    @classmethod
    def from_euler(cls, rpy: Sequence[float], translation: Sequence[float]) -> "Pose":
        """Build from extrinsic xyz (roll, pitch, yaw) angles in radians."""
        return cls(Rotation.from_euler("xyz", rpy).as_matrix(), translation)

    def euler(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_euler("xyz")

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Return a ∘ b (apply b first, then a)."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


@dataclass(frozen=True)
class CameraModel:
    """
    Pinhole camera.

    Args:
        fx, fy, cx, cy: intrinsics in pixels
        extrinsic: world -> camera transform
        width, height: image size in pixels
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: Pose
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def look_down(cls, focal: float, position: Sequence[float], size: Tuple[int, int] = (64, 64),
                  yaw: float = 0.0) -> "CameraModel":
        """Camera at `position` looking straight down, image x axis rotated by `yaw`."""
        width, height = size
        cam_to_world_rot = Rotation.from_euler("z", yaw).as_matrix() @ LOOK_DOWN
        cam_to_world = Pose(cam_to_world_rot, position)
        return cls(focal, focal, width / 2.0, height / 2.0, invert(cam_to_world), width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.extrinsic.rotation.reshape(-1).tolist(),
            "translation": self.extrinsic.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        return cls(
            float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
            Pose(np.asarray(data["rotation"]).reshape(3, 3), data["translation"]),
            int(data["width"]), int(data["height"]),
        )

    def as_vector(self) -> np.ndarray:
        """Flat 18-vector (fx, fy, cx, cy, w, h, R row-major, t) for tensor storage."""
        head = [self.fx, self.fy, self.cx, self.cy, self.width, self.height]
        return np.concatenate([head, self.extrinsic.rotation.reshape(-1), self.extrinsic.translation])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "CameraModel":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0], vec[1], vec[2], vec[3], Pose(vec[6:15].reshape(3, 3), vec[15:18]),
                   int(round(vec[4])), int(round(vec[5])))


def save_calibration(cam: CameraModel, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2))


def load_calibration(path: Union[str, Path]) -> CameraModel:
    return CameraModel.from_dict(json.loads(Path(path).read_text()))


def project_point(cam: CameraModel, world_pt: Sequence[float]) -> Optional[np.ndarray]:
    """
    Project a world point to pixel coordinates.

    Returns:
        (u, v) pixel 2-vector, or None when the point is at or behind z_near
    """
    x, y, z = cam.extrinsic.apply(np.asarray(world_pt, dtype=np.float64))
    if z <= Z_NEAR:
        return None
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def project_points(cam: CameraModel, world_pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; returns (pixels [N,2], in_front [N])."""
    cam_pts = cam.extrinsic.apply(np.asarray(world_pts, dtype=np.float64).reshape(-1, 3))
    in_front = cam_pts[:, 2] > Z_NEAR
    z = np.where(in_front, cam_pts[:, 2], 1.0)
    pixels = np.stack([cam.fx * cam_pts[:, 0] / z + cam.cx, cam.fy * cam_pts[:, 1] / z + cam.cy], axis=1)
    return pixels, in_front


@dataclass(frozen=True)
class BBox2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    valid: bool

    @classmethod
    def invalid(cls) -> "BBox2D":
        return cls(0.0, 0.0, 0.0, 0.0, False)

    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min) if self.valid else 0.0

    def contains(self, u: float, v: float) -> bool:
        return self.valid and self.u_min <= u <= self.u_max and self.v_min <= v <= self.v_max

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max, float(self.valid)])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BBox2D":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]), bool(arr[4] > 0.5))


def box_corners(sensor: Pose, half_extents: Sequence[float]) -> np.ndarray:
    hx, hy, hz = half_extents
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    return sensor.apply(signs * np.array([hx, hy, hz]))


def sensor_bbox(cam: CameraModel, sensor: Pose, half_extents: Sequence[float]) -> BBox2D:
    """
    Pixel AABB of the sensor's oriented box, clamped to the image.

    The box is invalid when no corner lies in front of the camera or when the
    clamped box is empty (entirely outside the image).
    """
    if min(half_extents) <= 0:
        raise ValueError("half_extents must be positive")
    pixels, in_front = project_points(cam, box_corners(sensor, half_extents))
    if not in_front.any():
        return BBox2D.invalid()
    visible = pixels[in_front]
    u_min, v_min = visible.min(axis=0)
    u_max, v_max = visible.max(axis=0)
    if u_max < 0 or v_max < 0 or u_min > cam.width or v_min > cam.height:
        return BBox2D.invalid()
    return BBox2D(
        float(np.clip(u_min, 0, cam.width)), float(np.clip(v_min, 0, cam.height)),
        float(np.clip(u_max, 0, cam.width)), float(np.clip(v_max, 0, cam.height)),
        True,
    )


def patch_centers(grid: Tuple[int, int], patch_px: int) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = grid
    v = (np.arange(rows) + 0.5) * patch_px
    u = (np.arange(cols) + 0.5) * patch_px
    return np.meshgrid(u, v)


def bbox_token_mask(bbox: BBox2D, grid: Tuple[int, int], patch_px: int) -> np.ndarray:
    """Boolean [rows, cols] mask of patches whose centre lies inside `bbox`."""
    if not bbox.valid:
        return np.zeros(grid, dtype=bool)
    u, v = patch_centers(grid, patch_px)
    return (u >= bbox.u_min) & (u <= bbox.u_max) & (v >= bbox.v_min) & (v <= bbox.v_max)


if __name__ == "__main__":
    cam = CameraModel.look_down(100.0, (0.0, 0.0, 1.0))
    print(f"✅ origin projects to {project_point(cam, (0.0, 0.0, 0.0))}")
    box = sensor_bbox(cam, Pose.identity(), (0.008, 0.008, 0.004))
    print(f"✅ sensor bbox {box}")
    print(bbox_token_mask(box, (8, 8), 8).astype(int))
