"""The five-part rendering objective.

Color and depth terms compare rendered rays against ground truth; the
Eikonal term drives the SDF toward unit gradient norm via in-graph central
finite differences; the near-surface and free-space terms supervise raw SDF
samples with the depth-derived proxy b(z) = D - z. Only depth-derived terms
(depth, near-surface, free-space) are restricted to rays with valid depth.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LossWeights",
    "LossReport",
    "color_loss",
    "color_sq_sum",
    "depth_loss",
    "depth_sq_sum",
    "eikonal_loss",
    "eikonal_resid_sum",
    "eikonal_margin_mask",
    "default_fd_step",
    "sdf_partition",
    "sdf_supervision",
    "sdf_supervision_sums",
    "total_loss",
]

TERMS = ("color", "depth", "eikonal", "near_surface", "free_space")


class LossWeights:
    """Term weights plus the near-surface threshold t and free-space alpha."""

    def __init__(
        self,
        color=10.0,
        depth=1.0,
        eikonal=0.01,
        near_surface=10.0,
        free_space=1.0,
        threshold=0.05,
        alpha=5.0,
    ):
        for name, v in (
            ("color", color),
            ("depth", depth),
            ("eikonal", eikonal),
            ("near_surface", near_surface),
            ("free_space", free_space),
        ):
            if v < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {v}")
        if threshold <= 0:
            raise ValueError("near-surface threshold must be positive")
        if alpha <= 0:
            raise ValueError("free-space alpha must be positive")
        self.color = float(color)
        self.depth = float(depth)
        self.eikonal = float(eikonal)
        self.near_surface = float(near_surface)
        self.free_space = float(free_space)
        self.threshold = float(threshold)
        self.alpha = float(alpha)

    def as_tuple(self):
        return (self.color, self.depth, self.eikonal, self.near_surface, self.free_space)


class LossReport:
    """Per-term values, ray/sample counts, and the weighted total."""

    def __init__(self, terms, counts, total):
        self.terms = dict(terms)
        self.counts = dict(counts)
        self.total = float(total)

    def __repr__(self):
        inner = ", ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        return f"LossReport(total={self.total:.6g}, {inner})"


def color_sq_sum(pred, target):
    """Sum over rays of squared color error (the numerator of color_loss)."""
    diff = pred - ad.constant(np.asarray(target, dtype=np.float64))
    return ad.tsum(diff * diff)


def color_loss(pred, target):
    """(1/N_r) sum over rays of squared color error."""
    n = pred.values.shape[0] if isinstance(pred, Tensor) else np.shape(pred)[0]
    if n == 0:
        raise ValueError("color loss needs a nonempty ray batch")
    return color_sq_sum(pred, target) / n


def depth_sq_sum(pred, target, valid):
    """Sum of squared depth error over valid rays."""
    mask = ad.constant(np.asarray(valid, dtype=np.float64))
    diff = pred - ad.constant(np.asarray(target, dtype=np.float64))
    return ad.tsum(diff * diff * mask)


def depth_loss(pred, target, valid):
    """Mean squared depth error over rays with valid ground-truth depth.

    Returns (loss, valid_count); zero valid rays give a zero loss.
    """
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return ad.constant(0.0), 0
    return depth_sq_sum(pred, target, valid) / count, count


def default_fd_step(box_min, box_max):
    """Stencil step for the finite-difference SDF gradient."""
    return 1e-3 * float(np.linalg.norm(np.asarray(box_max) - np.asarray(box_min))) / np.sqrt(3.0)


def eikonal_margin_mask(points, box_min, box_max, eps):
    """Which points keep their full stencil inside the box."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return ((points - eps >= np.asarray(box_min)) & (points + eps <= np.asarray(box_max))).all(
        axis=1
    )


def eikonal_resid_sum(field, pyramid, points, eps):
    """Sum over points of (|grad s| - 1)^2; points must satisfy the margin."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = points.shape[0]
    offsets = np.concatenate([np.eye(3) * eps, -np.eye(3) * eps])  # +x +y +z -x -y -z
    stencil = (points[:, None, :] + offsets[None]).reshape(-1, 3)
    s = field.sdf(stencil, pyramid)
    s = ad.reshape(s, (q, 6))
    grad = (s[:, 0:3] - s[:, 3:6]) / (2.0 * eps)
    norm = ad.sqrt(ad.tsum(grad * grad, axis=1))
    resid = norm - 1.0
    return ad.tsum(resid * resid)


def eikonal_loss(field, pyramid, points, eps=None):
    """Mean (|grad s| - 1)^2 with the gradient from central differences.

    The six-point stencil runs through the SDF decoder inside the graph, so
    the penalty trains the field. Points whose stencil would leave the box
    are skipped and counted. Returns (loss, used, skipped).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if eps is None:
        eps = default_fd_step(field.box_min, field.box_max)
    ok = eikonal_margin_mask(points, field.box_min, field.box_max, eps)
    used = points[ok]
    skipped = int((~ok).sum())
    if used.shape[0] == 0:
        return ad.constant(0.0), 0, skipped
    return eikonal_resid_sum(field, pyramid, used, eps) / used.shape[0], used.shape[0], skipped


def sdf_partition(z, depth, valid, threshold):
    """Split samples into near-surface (b <= t) and free-space masks."""
    z = np.asarray(z, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1, 1)
    valid = np.asarray(valid, dtype=bool).reshape(-1, 1)
    b = depth - z
    near = valid & (b <= threshold)
    free = valid & ~near
    return b, near, free


def sdf_supervision_sums(sdf, b, near, free, weights):
    """Partition sums of the near-surface and free-space penalties."""
    b_c = ad.constant(b)
    near_sum = ad.tsum(ad.absolute(sdf - b_c) * ad.constant(near.astype(np.float64)))
    exp_term = ad.exp(sdf * (-weights.alpha)) - 1.0
    overshoot = sdf - b_c
    penalty = ad.max_const(ad.maximum(exp_term, overshoot), 0.0)
    free_sum = ad.tsum(penalty * ad.constant(free.astype(np.float64)))
    return near_sum, free_sum


def sdf_supervision(sdf, z, depth, valid, weights):
    """Near-surface and free-space SDF terms from depth-derived targets.

    ``sdf`` is the (R, K) per-sample SDF tensor, ``z`` the matching ray
    lengths, ``depth`` the per-ray ground truth, ``valid`` its mask. With
    b = D - z: samples with b <= t get mean |s - b|; the rest get
    mean max(0, exp(-alpha s) - 1, s - b). Each mean runs over its own
    partition; empty partitions contribute zero. Returns
    (near_loss, free_loss, near_count, free_count).
    """
    b, near, free = sdf_partition(z, depth, valid, weights.threshold)
    n_near = int(near.sum())
    n_free = int(free.sum())
    near_sum, free_sum = sdf_supervision_sums(sdf, b, near, free, weights)
    near_loss = near_sum / n_near if n_near else ad.constant(0.0)
    free_loss = free_sum / n_free if n_free else ad.constant(0.0)
    return near_loss, free_loss, n_near, n_free


def total_loss(parts, weights, counts=None):
    """Weighted sum of the five terms; also returns the graph tensor.

    ``parts`` maps term name -> scalar tensor (missing terms count as 0).
    Returns (total_tensor, LossReport).
    """
    lam = dict(zip(TERMS, weights.as_tuple()))
    total = None
    values = {}
    for name in TERMS:
        part = parts.get(name)
        if part is None:
            values[name] = 0.0
            continue
        values[name] = float(part.values)
        if values[name] < 0:
            raise ValueError(f"loss term {name} is negative: {values[name]}")
        term = part * lam[name]
        total = term if total is None else total + term
    if total is None:
        total = ad.constant(0.0)
    report = LossReport(values, counts or {}, float(total.values))
    return total, report
