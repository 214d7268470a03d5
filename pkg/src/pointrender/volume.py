"""Point encoder and hierarchical feature volume.

The pipeline: group-mask the cloud, run the shared per-point MLP, average
pool the embeddings into dense grids at every pyramid level, densify each
level with one residual 3x3x3 convolution, and answer differentiable
trilinear queries V(p) whose per-level results are concatenated.

Cell (i, j, k) of an n-cell level is centered at box_min + (i + 0.5) * cell;
queries between the outermost cell centers and the box wall clamp to the
boundary cell layer.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .camera import ColoredPointCloud

__all__ = [
    "VolumeLevel",
    "FeatureVolumePyramid",
    "EncoderParams",
    "DenseFillParams",
    "group_points",
    "mask_points",
    "encode_points",
    "pool_to_pyramid",
    "dense_fill",
    "query_features",
    "gather_trilinear",
    "conv3d",
    "scatter_mean",
]


class VolumeLevel:
    """One pyramid level: an (n, n, n, C) feature grid plus occupancy."""

    def __init__(self, resolution, grid, occupancy):
        self.resolution = int(resolution)
        self.grid = grid
        self.occupancy = occupancy


class FeatureVolumePyramid:
    """Ascending-resolution levels sharing one world bounding box."""

    def __init__(self, levels, box_min, box_max, dense=False):
        self.levels = levels
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        self.dense = dense

    @property
    def feature_dim(self):
        return sum(lv.grid.shape[3] for lv in self.levels)


# ---------------------------------------------------------------------------
# masking augmentation


def group_points(cloud, group_count, group_size, seed):
    """Partition the cloud into groups around farthest-point-sampled centers.

    Returns (center_indices, membership): membership[m] is the group of
    point m, assigned by nearest center. The start point of the FPS sweep is
    drawn from the seeded generator.
    """
    m = len(cloud)
    if group_count * group_size < m:
        raise ValueError(
            f"group_count*group_size = {group_count * group_size} cannot cover {m} points"
        )
    rng = np.random.default_rng(seed)
    start = int(rng.integers(m))
    n_centers = min(group_count, m)
    centers = kernels.fps_indices(cloud.positions, n_centers, start)
    membership = kernels.nearest_center(cloud.positions, cloud.positions[centers])
    return centers, membership


def mask_points(cloud, group_count, group_size, ratio, seed):
    """Drop floor(ratio * group_count) point groups, keeping survivors intact.

    Surviving points are returned bit-identical and in their original order.
    A cloud smaller than one group is returned unchanged with a warning.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if len(cloud) < group_size:
        warnings.warn("cloud smaller than one group; masking skipped")
        return cloud
    if ratio == 0:
        return cloud
    rng = np.random.default_rng(seed)
    start = int(rng.integers(len(cloud)))
    n_centers = min(group_count, len(cloud))
    centers = kernels.fps_indices(cloud.positions, n_centers, start)
    membership = kernels.nearest_center(cloud.positions, cloud.positions[centers])
    drop = rng.permutation(n_centers)[: int(np.floor(ratio * n_centers))]
    keep = ~np.isin(membership, drop)
    return ColoredPointCloud(cloud.positions[keep], cloud.colors[keep])


def drop_groups(cloud, membership, n_groups, ratio, rng):
    """Per-step group drop against a cached grouping (trainer fast path)."""
    drop = rng.permutation(n_groups)[: int(np.floor(ratio * n_groups))]
    keep = ~np.isin(membership, drop)
    return ColoredPointCloud(cloud.positions[keep], cloud.colors[keep]), keep


# ---------------------------------------------------------------------------
# per-point encoder


class EncoderParams:
    """Shared MLP over (normalized position, rgb) -> C-dim embedding."""

    def __init__(self, out_dim=16, hidden=64, seed=0):
        rng = np.random.default_rng(seed)
        dims = [6, hidden, hidden, out_dim]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(ad.parameter(w))
            self.biases.append(ad.parameter(np.zeros(fan_out)))
        self.out_dim = out_dim

    def named_parameters(self, prefix="encoder"):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def encode_points(cloud, params, box_min, box_max):
    """Per-point embeddings; positions are normalized to the scene box."""
    if len(cloud) == 0:
        raise ValueError("cannot encode an empty cloud")
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    center = 0.5 * (box_min + box_max)
    half = 0.5 * (box_max - box_min)
    norm_pos = (cloud.positions - center) / half
    x = ad.constant(np.concatenate([norm_pos, cloud.colors], axis=1))
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = ad.matmul(x, w) + b
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


# ---------------------------------------------------------------------------
# pooling and dense fill


def scatter_mean(values, cell_idx, n_cells):
    """Differentiable per-cell mean of rows sharing a cell index.

    Returns (means, counts): means is an (n_cells, C) tensor with zeros for
    empty cells; counts is a plain int array.
    """
    counts = np.bincount(cell_idx, minlength=n_cells)
    denom = np.maximum(counts, 1).astype(np.float64)

    sums = kernels.scatter_add_rows(values.values, cell_idx, n_cells)
    out = sums / denom[:, None]

    def bwd(g):
        ad.accumulate(values, g[cell_idx] / denom[cell_idx, None])

    return ad.from_op(out, (values,), bwd), counts


def _cell_indices(positions, box_min, box_max, n):
    span = box_max - box_min
    u = (positions - box_min) / span * n
    idx = np.clip(np.floor(u).astype(np.int64), 0, n - 1)
    return (idx[:, 0] * n + idx[:, 1]) * n + idx[:, 2]


def pool_to_pyramid(cloud, embeddings, resolutions, box_min, box_max):
    """Average-pool point embeddings into grids at every level."""
    if list(resolutions) != sorted(resolutions):
        raise ValueError("resolutions must be ascending")
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    pos = cloud.positions
    if (pos < box_min).any() or (pos > box_max).any():
        raise ValueError("points outside the pyramid box")
    c = embeddings.values.shape[1]
    levels = []
    for n in resolutions:
        cell_idx = _cell_indices(pos, box_min, box_max, n)
        means, counts = scatter_mean(embeddings, cell_idx, n**3)
        grid = ad.reshape(means, (n, n, n, c))
        occupancy = (counts > 0).reshape(n, n, n)
        levels.append(VolumeLevel(n, grid, occupancy))
    return FeatureVolumePyramid(levels, box_min, box_max)


def conv3d(grid, kernel, bias):
    """Differentiable dense 3x3x3 convolution (zero padding)."""
    out = kernels.conv3x3(grid.values, kernel.values, bias.values)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if grid.requires_grad:
            ad.accumulate(grid, kernels.conv3x3_grad_input(g, kernel.values))
        if kernel.requires_grad or bias.requires_grad:
            dk, db = kernels.conv3x3_grad_kernel(grid.values, g)
            ad.accumulate(kernel, dk)
            ad.accumulate(bias, db)

    return ad.from_op(out, (grid, kernel, bias), bwd)


class DenseFillParams:
    """One trainable residual convolution per pyramid level."""

    def __init__(self, channels, n_levels, seed=0):
        rng = np.random.default_rng(seed)
        self.kernels = []
        self.biases = []
        for _ in range(n_levels):
            k = rng.standard_normal((27, channels, channels)) * np.sqrt(
                2.0 / (27 * channels)
            )
            self.kernels.append(ad.parameter(k))
            self.biases.append(ad.parameter(np.zeros(channels)))

    def named_parameters(self, prefix="fill"):
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}.k{i}"] = k
            out[f"{prefix}.b{i}"] = b
        return out


def dense_fill(pyramid, params):
    """Densify each level: relu(conv(grid)) plus the pooled grid itself.

    The residual passes occupied-cell features through unchanged paths
    (empty cells hold exactly zero before the fill, so adding the input
    grid touches occupied cells only).
    """
    if len(params.kernels) != len(pyramid.levels):
        raise ValueError("dense fill parameter count does not match pyramid levels")
    levels = []
    for lv, k, b in zip(pyramid.levels, params.kernels, params.biases):
        filled = ad.relu(conv3d(lv.grid, k, b)) + lv.grid
        levels.append(VolumeLevel(lv.resolution, filled, lv.occupancy))
    return FeatureVolumePyramid(levels, pyramid.box_min, pyramid.box_max, dense=True)


# ---------------------------------------------------------------------------
# trilinear query


def gather_trilinear(grid, points, box_min, box_max):
    """Differentiable trilinear interpolation of a grid tensor at world points.

    Differentiable w.r.t. the grid values and, when ``points`` is a Tensor,
    w.r.t. the points as well (zero slope in clamped border directions).
    """
    pts_t = points if isinstance(points, Tensor) else None
    pos = points.values if pts_t is not None else np.asarray(points, dtype=np.float64)
    n = np.array(grid.values.shape[:3], dtype=np.float64)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    span = box_max - box_min
    slack = 1e-9 * np.linalg.norm(span)
    if (pos < box_min - slack).any() or (pos > box_max + slack).any():
        raise ValueError("query point outside the volume box")
    cell = span / n
    u_raw = (pos - box_min) / cell - 0.5
    u = np.clip(u_raw, 0.0, n - 1.0)
    clamped = (u_raw < 0.0) | (u_raw > n - 1.0)
    u = np.ascontiguousarray(u)
    out = kernels.trilinear_gather(grid.values, u)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if grid.requires_grad:
            ad.accumulate(grid, kernels.trilinear_scatter(u, g, grid.values.shape[:3]))
        if pts_t is not None and pts_t.requires_grad:
            du = kernels.trilinear_point_grad(grid.values, u, g)
            du[clamped] = 0.0
            ad.accumulate(pts_t, du / cell)

    parents = (grid,) if pts_t is None else (grid, pts_t)
    return ad.from_op(out, parents, bwd)


def query_features(pyramid, points):
    """V(p): per-level trilinear features concatenated along channels."""
    parts = [
        gather_trilinear(lv.grid, points, pyramid.box_min, pyramid.box_max)
        for lv in pyramid.levels
    ]
    if len(parts) == 1:
        return parts[0]
    return ad.concat(parts, axis=1)
