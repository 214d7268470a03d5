"""Pinhole camera geometry: projection, back-projection, rays, AABB clipping.

Pose convention is world-to-camera throughout: x_cam = R x_world + t. Pixel
coordinates are used exactly as integer indices (no half-pixel offset), with
u along image columns and v along rows. Depth value 0 marks an invalid
pixel.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "Ray",
    "RgbdFrame",
    "ColoredPointCloud",
    "back_project",
    "project",
    "generate_ray",
    "pixel_directions",
    "ray_aabb",
    "ray_aabb_batch",
    "build_cloud",
    "read_intrinsics",
    "write_intrinsics",
    "read_pose",
    "write_pose",
]


class CameraIntrinsics:
    """Focal lengths and principal point in pixels, plus image size."""

    def __init__(self, fx, fy, cx, cy, width, height):
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 <= cx < width and 0 <= cy < height):
            raise ValueError(
                f"principal point ({cx}, {cy}) outside image {width}x{height}"
            )
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.width = int(width)
        self.height = int(height)

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def __repr__(self):
        return (
            f"CameraIntrinsics(fx={self.fx}, fy={self.fy}, cx={self.cx}, "
            f"cy={self.cy}, width={self.width}, height={self.height})"
        )


class Pose:
    """World-to-camera rigid transform: x_cam = R x_world + t."""

    def __init__(self, rotation, translation):
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant differs from 1 beyond 1e-9")
        self.rotation = r
        self.translation = t

    def camera_center(self):
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("pose matrix last row must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])

    def __repr__(self):
        return f"Pose(center={self.camera_center()})"


class Ray:
    """Origin and unit direction in world space, with optional length bounds."""

    def __init__(self, origin, direction, z_near=None, z_far=None):
        o = np.asarray(origin, dtype=np.float64).reshape(3)
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length within 1e-12")
        if z_near is not None and z_far is not None:
            if not (0 <= z_near < z_far):
                raise ValueError(f"require 0 <= z_near < z_far, got ({z_near}, {z_far})")
        self.origin = o
        self.direction = d
        self.z_near = None if z_near is None else float(z_near)
        self.z_far = None if z_far is None else float(z_far)

    def at(self, z):
        return self.origin + z * self.direction

    def with_bounds(self, z_near, z_far):
        return Ray(self.origin, self.direction, z_near, z_far)

    def __repr__(self):
        return f"Ray(o={self.origin}, d={self.direction}, bounds=({self.z_near}, {self.z_far}))"


class RgbdFrame:
    """One posed RGB-D view: color in [0,1], depth in world units (0 = invalid)."""

    def __init__(self, color, depth, intrinsics, pose):
        color = np.asarray(color, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        h, w = intrinsics.height, intrinsics.width
        if color.shape != (h, w, 3):
            raise ValueError(f"color shape {color.shape} does not match {h}x{w}x3")
        if depth.shape != (h, w):
            raise ValueError(f"depth shape {depth.shape} does not match {h}x{w}")
        if not np.isfinite(depth).all() or (depth < 0).any():
            raise ValueError("depth values must be finite and >= 0")
        if color.min() < 0 or color.max() > 1:
            raise ValueError("color values must lie in [0, 1]")
        self.color = color
        self.depth = depth
        self.intrinsics = intrinsics
        self.pose = pose


class ColoredPointCloud:
    """World-space positions with per-point RGB attributes."""

    def __init__(self, positions, colors):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if positions.shape[0] != colors.shape[0]:
            raise ValueError(
                f"positions ({positions.shape[0]}) and colors ({colors.shape[0]}) differ"
            )
        if not np.isfinite(positions).all():
            raise ValueError("positions must be finite")
        if colors.size and (colors.min() < 0 or colors.max() > 1):
            raise ValueError("colors must lie in [0, 1]")
        self.positions = positions
        self.colors = colors

    def __len__(self):
        return self.positions.shape[0]

    def bounding_box(self):
        if len(self) == 0:
            raise ValueError("empty cloud has no bounding box")
        return self.positions.min(axis=0), self.positions.max(axis=0)


def back_project(frame):
    """Lift every valid-depth pixel to a colored world-space point.

    Point for pixel (u, v) with depth s: R^T (K^{-1} s [u, v, 1]^T - t).
    """
    intr, pose = frame.intrinsics, frame.pose
    v, u = np.nonzero(frame.depth > 0)
    if v.size == 0:
        return ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    s = frame.depth[v, u]
    x_cam = np.stack(
        [(u - intr.cx) / intr.fx * s, (v - intr.cy) / intr.fy * s, s], axis=1
    )
    pos = (x_cam - pose.translation) @ pose.rotation
    return ColoredPointCloud(pos, frame.color[v, u])


def project(points, intrinsics, pose):
    """Map world points to (u, v, depth); the inverse of back_project."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x_cam = points @ pose.rotation.T + pose.translation
    z = x_cam[:, 2]
    u = x_cam[:, 0] / z * intrinsics.fx + intrinsics.cx
    v = x_cam[:, 1] / z * intrinsics.fy + intrinsics.cy
    return np.stack([u, v, z], axis=1)


def pixel_directions(pixels, intrinsics, pose):
    """Unit world-space ray directions through the given (u, v) pixels."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d_cam = np.stack(
        [
            (pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
            (pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    d_world = d_cam @ pose.rotation
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def generate_ray(pixel, intrinsics, pose):
    """Ray through one pixel center; bounds left unset."""
    u, v = pixel
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ValueError(f"pixel ({u}, {v}) outside image")
    d = pixel_directions([(u, v)], intrinsics, pose)[0]
    return Ray(pose.camera_center(), d)


def ray_aabb(ray, box_min, box_max):
    """Slab test of a ray against an axis-aligned box.

    Returns (z_near, z_far) ray lengths with z_near clamped to 0 when the
    origin is inside, or None when the ray misses.
    """
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    if not (box_min < box_max).all():
        raise ValueError("box min must be strictly below box max per axis")
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box_min - ray.origin) / ray.direction
        t2 = (box_max - ray.origin) / ray.direction
    # a zero direction component parallel to a slab: inside -> (-inf, inf)
    parallel = ray.direction == 0.0
    inside = (ray.origin >= box_min) & (ray.origin <= box_max)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    z_near = lo.max()
    z_far = hi.min()
    if z_far < max(z_near, 0.0):
        return None
    return max(z_near, 0.0), z_far


def ray_aabb_batch(origins, directions, box_min, box_max):
    """Vectorized slab test; returns (z_near, z_far, hit) arrays.

    Same arithmetic as :func:`ray_aabb`, applied to (Q, 3) batches. Entries
    where ``hit`` is False carry unspecified bounds.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box_min - origins) / directions
        t2 = (box_max - origins) / directions
    parallel = directions == 0.0
    inside = (origins >= box_min) & (origins <= box_max)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    z_near = lo.max(axis=1)
    z_far = hi.min(axis=1)
    hit = z_far >= np.maximum(z_near, 0.0)
    return np.maximum(z_near, 0.0), z_far, hit


def build_cloud(frames, target_count, seed=0):
    """Union of the back-projected frames, randomly downsampled.

    The kept subset is ``rng.permutation(m)[:target_count]`` (sorted), with
    ``rng = numpy.random.default_rng(seed)``; clouds at or below the target
    are returned whole.
    """
    if not frames:
        raise ValueError("build_cloud requires at least one frame")
    clouds = [back_project(f) for f in frames]
    pos = np.concatenate([c.positions for c in clouds], axis=0)
    col = np.concatenate([c.colors for c in clouds], axis=0)
    if pos.shape[0] == 0:
        raise ValueError("no valid depth pixels in any frame")
    m = pos.shape[0]
    if m > target_count:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.permutation(m)[:target_count])
        pos, col = pos[keep], col[keep]
    return ColoredPointCloud(pos, col)


# ---------------------------------------------------------------------------
# text interchange formats


def write_intrinsics(intr, path):
    with open(path, "w") as f:
        f.write(
            f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n"
        )


def read_intrinsics(path):
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 6:
        raise ValueError(f"{path}: expected 'fx fy cx cy width height', got {len(parts)} fields")
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return CameraIntrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


def write_pose(pose, path):
    m = pose.to_matrix()
    with open(path, "w") as f:
        for row in m:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_pose(path):
    vals = np.loadtxt(path, dtype=np.float64)
    if vals.shape != (4, 4):
        raise ValueError(f"{path}: pose file must hold a 4x4 matrix, got {vals.shape}")
    return Pose.from_matrix(vals)
