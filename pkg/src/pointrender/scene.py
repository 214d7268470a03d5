"""Analytic SDF scenes: the RGB-D data source and ground-truth oracle.

Scenes are unions of spheres, axis-aligned boxes and half-spaces with flat
albedos. The exact union SDF gives depth via sphere tracing, so every
rendered frame carries ground truth that the neural pipeline can be checked
against. Files: a versioned ``scene.txt`` plus per-view PPM color, PFM
depth and pose text files.
"""

from __future__ import annotations

import os

import numpy as np

from . import imageio
from .camera import CameraIntrinsics, Pose, RgbdFrame, pixel_directions, read_intrinsics, read_pose, write_intrinsics, write_pose

__all__ = [
    "Sphere",
    "Box",
    "HalfSpace",
    "AnalyticScene",
    "sphere_trace",
    "trace_rays",
    "render_frame",
    "make_ring_poses",
    "write_scene_file",
    "read_scene_file",
    "write_dataset",
    "load_dataset",
    "sample_surface",
]

_CONVERGED = 1e-6
_MIN_STEP = 1e-7
_MAX_STEPS = 512


class Sphere:
    kind = "sphere"

    def __init__(self, center, radius, albedo):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.radius = float(radius)
        self.albedo = _check_albedo(albedo)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def params(self):
        return [*self.center, self.radius]


class Box:
    kind = "box"

    def __init__(self, center, half_extents, albedo):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(half_extents, dtype=np.float64).reshape(3)
        self.albedo = _check_albedo(albedo)
        if (self.half_extents <= 0).any():
            raise ValueError("box half extents must be positive")

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def params(self):
        return [*self.center, *self.half_extents]


class HalfSpace:
    kind = "halfspace"

    def __init__(self, normal, offset, albedo):
        n = np.asarray(normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("halfspace normal must be nonzero")
        self.normal = n / norm
        self.offset = float(offset)
        self.albedo = _check_albedo(albedo)

    def sdf(self, p):
        return p @ self.normal - self.offset

    def params(self):
        return [*self.normal, self.offset]


def _check_albedo(albedo):
    a = np.asarray(albedo, dtype=np.float64).reshape(3)
    if a.min() < 0 or a.max() > 1:
        raise ValueError("albedo must lie in [0, 1]^3")
    return a


class AnalyticScene:
    """Union of primitives with a world-space bounding box."""

    def __init__(self, primitives, box_min, box_max):
        if not primitives:
            raise ValueError("scene needs at least one primitive")
        self.primitives = list(primitives)
        self.box_min = np.asarray(box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(box_max, dtype=np.float64).reshape(3)
        if not (self.box_min < self.box_max).all():
            raise ValueError("scene box min must be strictly below max")

    def sdf(self, p):
        """Exact union SDF (min over primitives); negative inside."""
        p = np.asarray(p, dtype=np.float64)
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)
        return values.min(axis=-1)

    def nearest_primitive(self, p):
        p = np.asarray(p, dtype=np.float64)
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)
        return values.argmin(axis=-1)

    def albedo_at(self, p):
        idx = self.nearest_primitive(p)
        table = np.stack([prim.albedo for prim in self.primitives])
        return table[idx]

    def diagonal(self):
        return float(np.linalg.norm(self.box_max - self.box_min))


def trace_rays(scene, origins, directions, z_far):
    """Vectorized sphere tracing; returns hit depths, 0 where the ray misses.

    Marches with step max(sdf, 1e-7) until sdf < 1e-6, then refines by
    bracketing the sign change and bisecting. Rays are assumed to start
    outside the geometry.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    z_far = np.asarray(z_far, dtype=np.float64).reshape(-1)
    q = origins.shape[0]
    t = np.zeros(q)
    depth = np.zeros(q)
    active = z_far > 0
    hit = np.zeros(q, dtype=bool)
    for _ in range(_MAX_STEPS):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * directions[idx]
        d = scene.sdf(p)
        conv = d < _CONVERGED
        hit_idx = idx[conv]
        hit[hit_idx] = True
        active[hit_idx] = False
        move = idx[~conv]
        t[move] += np.maximum(d[~conv], _MIN_STEP)
        escaped = move[t[move] > z_far[move]]
        active[escaped] = False
    hidx = np.nonzero(hit)[0]
    if hidx.size:
        depth[hidx] = _refine(scene, origins[hidx], directions[hidx], t[hidx])
    return depth


def _refine(scene, origins, directions, t0):
    """Bracket the surface crossing past t0 and bisect; fall back to t0."""
    n = t0.shape[0]
    lo = t0.copy()
    hi = np.full(n, np.nan)
    step = np.full(n, _CONVERGED)
    open_mask = np.ones(n, dtype=bool)
    probe = t0.copy()
    for _ in range(11):
        if not open_mask.any():
            break
        probe[open_mask] += step[open_mask]
        idx = np.nonzero(open_mask)[0]
        d = scene.sdf(origins[idx] + probe[idx, None] * directions[idx])
        crossed = d < 0.0
        hi[idx[crossed]] = probe[idx[crossed]]
        lo[idx[~crossed]] = probe[idx[~crossed]]
        open_mask[idx[crossed]] = False
        step[open_mask] *= 2.0
    # rays without a bracket (grazing): keep the converged march point
    out = t0.copy()
    br = np.nonzero(~np.isnan(hi))[0]
    if br.size == 0:
        return out
    blo, bhi = lo[br], hi[br]
    o, d = origins[br], directions[br]
    for _ in range(60):
        mid = 0.5 * (blo + bhi)
        val = scene.sdf(o + mid[:, None] * d)
        neg = val < 0.0
        bhi[neg] = mid[neg]
        blo[~neg] = mid[~neg]
    out[br] = 0.5 * (blo + bhi)
    return out


def sphere_trace(scene, ray):
    """First surface crossing along a ray within (0, z_far]; None if no hit.

    Uses the ray's z_far bound; when unset, the exit of the scene box is
    used (a ray missing the box cannot hit the scene).
    """
    z_far = ray.z_far
    if z_far is None:
        from .camera import ray_aabb

        bounds = ray_aabb(ray, scene.box_min, scene.box_max)
        if bounds is None:
            return None
        z_far = bounds[1]
    depth = trace_rays(scene, ray.origin[None], ray.direction[None], np.array([z_far]))[0]
    return float(depth) if depth > 0 else None


def render_frame(scene, intrinsics, pose):
    """Flat-shaded RGB-D render: exact depth, albedo color, black background."""
    from .camera import ray_aabb_batch

    h, w = intrinsics.height, intrinsics.width
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    dirs = pixel_directions(pixels, intrinsics, pose)
    origin = pose.camera_center()
    origins = np.broadcast_to(origin, dirs.shape)
    z_near, z_far, hit_box = ray_aabb_batch(origins, dirs, scene.box_min, scene.box_max)
    z_limit = np.where(hit_box, z_far, 0.0)
    depth = trace_rays(scene, origins, dirs, z_limit)
    color = np.zeros((h * w, 3))
    hidx = np.nonzero(depth > 0)[0]
    if hidx.size:
        pts = origins[hidx] + depth[hidx, None] * dirs[hidx]
        color[hidx] = scene.albedo_at(pts)
    return RgbdFrame(color.reshape(h, w, 3), depth.reshape(h, w), intrinsics, pose)


def make_ring_poses(center, radius, height, count, start_angle=0.0):
    """World-to-camera poses on a ring, all looking at ``center``."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    poses = []
    for k in range(count):
        ang = start_angle + 2.0 * np.pi * k / count
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        fwd = center - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / norm
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        poses.append(Pose(r, -r @ eye))
    return poses


# ---------------------------------------------------------------------------
# scene description file and dataset directory

_SCENE_VERSION = 1


def write_scene_file(scene, path):
    lines = [f"scene-version {_SCENE_VERSION}"]
    lines.append(
        "bounds " + " ".join(repr(float(v)) for v in (*scene.box_min, *scene.box_max))
    )
    for prim in scene.primitives:
        fields = [repr(float(v)) for v in (*prim.params(), *prim.albedo)]
        lines.append(f"{prim.kind} " + " ".join(fields))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_scene_file(path):
    bounds = None
    prims = []
    version_seen = False
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag, args = parts[0], parts[1:]
            try:
                if tag == "scene-version":
                    if int(args[0]) != _SCENE_VERSION:
                        raise ValueError(f"unsupported scene version {args[0]}")
                    version_seen = True
                elif tag == "bounds":
                    vals = [float(a) for a in args]
                    if len(vals) != 6:
                        raise ValueError("bounds needs 6 numbers")
                    bounds = (vals[:3], vals[3:])
                elif tag == "sphere":
                    v = [float(a) for a in args]
                    if len(v) != 7:
                        raise ValueError("sphere needs cx cy cz r + albedo")
                    prims.append(Sphere(v[:3], v[3], v[4:]))
                elif tag == "box":
                    v = [float(a) for a in args]
                    if len(v) != 9:
                        raise ValueError("box needs center + half extents + albedo")
                    prims.append(Box(v[:3], v[3:6], v[6:]))
                elif tag == "halfspace":
                    v = [float(a) for a in args]
                    if len(v) != 7:
                        raise ValueError("halfspace needs normal + offset + albedo")
                    prims.append(HalfSpace(v[:3], v[3], v[4:]))
                else:
                    raise ValueError(f"unknown record type {tag!r}")
            except (ValueError, IndexError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    if not version_seen:
        raise ValueError(f"{path}: missing scene-version record")
    if bounds is None:
        raise ValueError(f"{path}: missing bounds record")
    return AnalyticScene(prims, bounds[0], bounds[1])


def write_dataset(scene, intrinsics, poses, out_dir):
    """Render all views and write the dataset directory layout."""
    os.makedirs(out_dir, exist_ok=True)
    write_scene_file(scene, os.path.join(out_dir, "scene.txt"))
    write_intrinsics(intrinsics, os.path.join(out_dir, "intrinsics.txt"))
    for i, pose in enumerate(poses):
        frame = render_frame(scene, intrinsics, pose)
        imageio.write_ppm(frame.color, os.path.join(out_dir, f"frame_{i:03d}.ppm"))
        imageio.write_pfm(frame.depth, os.path.join(out_dir, f"frame_{i:03d}.pfm"))
        write_pose(pose, os.path.join(out_dir, f"frame_{i:03d}.pose.txt"))


def load_dataset(path):
    """Read a dataset directory back into (scene, frames)."""
    scene_path = os.path.join(path, "scene.txt")
    intr_path = os.path.join(path, "intrinsics.txt")
    if not os.path.isfile(scene_path):
        raise ValueError(f"{path}: missing scene.txt")
    if not os.path.isfile(intr_path):
        raise ValueError(f"{path}: missing intrinsics.txt")
    scene = read_scene_file(scene_path)
    intr = read_intrinsics(intr_path)
    frames = []
    i = 0
    while True:
        ppm = os.path.join(path, f"frame_{i:03d}.ppm")
        if not os.path.isfile(ppm):
            break
        pfm = os.path.join(path, f"frame_{i:03d}.pfm")
        pose_file = os.path.join(path, f"frame_{i:03d}.pose.txt")
        for required in (pfm, pose_file):
            if not os.path.isfile(required):
                raise ValueError(f"{path}: frame {i} incomplete, missing {required}")
        color = imageio.read_ppm(ppm)
        depth = imageio.read_pfm(pfm).astype(np.float64)
        pose = read_pose(pose_file)
        frames.append(RgbdFrame(color, depth, intr, pose))
        i += 1
    if not frames:
        raise ValueError(f"{path}: no frames found")
    return scene, frames


def sample_surface(scene, count, seed=0):
    """Rejection-project random points onto the zero level set.

    Draws box points, walks them along the SDF gradient (central
    differences) until |sdf| < 1e-7; used as the analytic reference set for
    mesh error metrics.
    """
    rng = np.random.default_rng(seed)
    pts = np.empty((0, 3))
    eps = 1e-5
    while pts.shape[0] < count:
        cand = rng.uniform(scene.box_min, scene.box_max, size=(count * 2, 3))
        for _ in range(30):
            d = scene.sdf(cand)
            live = np.abs(d) > 1e-7
            if not live.any():
                break
            g = np.stack(
                [
                    scene.sdf(cand + off) - scene.sdf(cand - off)
                    for off in np.eye(3) * eps
                ],
                axis=1,
            ) / (2 * eps)
            norm = np.linalg.norm(g, axis=1, keepdims=True)
            norm[norm < 1e-9] = 1.0
            cand = cand - (d[:, None] * g / norm**2) * live[:, None]
        d = scene.sdf(cand)
        keep = cand[np.abs(d) < 1e-6]
        inside = ((keep >= scene.box_min) & (keep <= scene.box_max)).all(axis=1)
        pts = np.concatenate([pts, keep[inside]], axis=0)
    return pts[:count]
