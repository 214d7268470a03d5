"""Neural scene representation and the differentiable SDF volume renderer.

The field couples two small MLP decoders to the feature pyramid: the SDF
decoder sees [frequency-encoded position, V(p)], the color decoder
additionally sees the encoded view direction and squashes through a
sigmoid. The sharpness of the sigmoid density, h, is trained as log h.

Rendering follows the unbiased occlusion-aware weighting: with
Phi(x) = sigmoid(h x) evaluated on per-sample SDFs,

    alpha_i = max((Phi(s_i) - Phi(s_{i+1})) / Phi(s_i), 0)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i alpha_i

and the ray color / depth are the weighted sums sum(w_i c_i), sum(w_i z_i)
(depth deliberately unnormalized). Sampling is stratified-uniform followed
by inverse-CDF importance sampling driven by a gradient-free coarse pass.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .camera import ray_aabb
from .volume import query_features

__all__ = [
    "NeuralField",
    "AnalyticField",
    "RaySamples",
    "RenderResult",
    "positional_encode",
    "sample_coarse",
    "sample_importance",
    "neus_weights",
    "render_ray",
    "render_rays",
    "plan_samples",
    "render_planned",
]


def positional_encode(x, n_freqs):
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < n_freqs, blocked per octave.

    Accepts a plain array or a Tensor; n_freqs=0 returns the input as is.
    """
    if isinstance(x, Tensor):
        if n_freqs == 0:
            return x
        parts = [x]
        for k in range(n_freqs):
            arg = x * (np.pi * 2.0**k)
            parts.append(ad.sin(arg))
            parts.append(ad.cos(arg))
        return ad.concat(parts, axis=-1)
    x = np.asarray(x, dtype=np.float64)
    if n_freqs == 0:
        return x
    parts = [x]
    for k in range(n_freqs):
        arg = x * (np.pi * 2.0**k)
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def _init_mlp(rng, dims):
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        scale = np.sqrt(2.0 / fan_in) if i < len(dims) - 2 else np.sqrt(1.0 / fan_in)
        weights.append(ad.parameter(rng.standard_normal((fan_in, fan_out)) * scale))
        biases.append(ad.parameter(np.zeros(fan_out)))
    return weights, biases


class NeuralField:
    """SDF decoder (softplus hidden units), color decoder (relu hidden units),
    and the trainable sharpness stored as log h."""

    def __init__(
        self,
        feature_dim,
        box_min,
        box_max,
        sdf_hidden=64,
        sdf_layers=5,
        color_hidden=64,
        color_layers=3,
        n_freq_pos=6,
        n_freq_dir=4,
        h_inverse_init=0.3,
        seed=0,
    ):
        if h_inverse_init <= 0:
            raise ValueError("h inverse must start positive")
        rng = np.random.default_rng(seed)
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        self.n_freq_pos = n_freq_pos
        self.n_freq_dir = n_freq_dir
        pos_dim = 3 * (1 + 2 * n_freq_pos)
        dir_dim = 3 * (1 + 2 * n_freq_dir)
        sdf_dims = [pos_dim + feature_dim] + [sdf_hidden] * sdf_layers + [1]
        col_dims = [pos_dim + dir_dim + feature_dim] + [color_hidden] * color_layers + [3]
        self.sdf_weights, self.sdf_biases = _init_mlp(rng, sdf_dims)
        self.color_weights, self.color_biases = _init_mlp(rng, col_dims)
        self.log_h = ad.parameter(np.log(1.0 / h_inverse_init))

    def h(self):
        return ad.exp(self.log_h)

    def h_value(self):
        return float(np.exp(self.log_h.values))

    def named_parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.sdf_weights, self.sdf_biases)):
            out[f"sdf.w{i}"] = w
            out[f"sdf.b{i}"] = b
        for i, (w, b) in enumerate(zip(self.color_weights, self.color_biases)):
            out[f"color.w{i}"] = w
            out[f"color.b{i}"] = b
        out["log_h"] = self.log_h
        return out

    def _normalize(self, points):
        center = 0.5 * (self.box_min + self.box_max)
        half = 0.5 * (self.box_max - self.box_min)
        if isinstance(points, Tensor):
            return (points - ad.constant(center)) / ad.constant(half)
        return (np.asarray(points, dtype=np.float64) - center) / half

    def sdf(self, points, pyramid):
        """s(p) as a (Q,) tensor; differentiable w.r.t. every input."""
        feats = query_features(pyramid, points)
        enc = positional_encode(self._normalize(points), self.n_freq_pos)
        if not isinstance(enc, Tensor):
            enc = ad.constant(enc)
        x = ad.concat([enc, feats], axis=1)
        last = len(self.sdf_weights) - 1
        for i, (w, b) in enumerate(zip(self.sdf_weights, self.sdf_biases)):
            x = ad.matmul(x, w) + b
            if i < last:
                x = ad.softplus(x)
        return ad.reshape(x, (-1,))

    def color(self, points, dirs, pyramid):
        """c(p, d) in (0,1)^3 as a (Q, 3) tensor."""
        feats = query_features(pyramid, points)
        enc_p = positional_encode(self._normalize(points), self.n_freq_pos)
        enc_d = positional_encode(dirs, self.n_freq_dir)
        if not isinstance(enc_p, Tensor):
            enc_p = ad.constant(enc_p)
        if not isinstance(enc_d, Tensor):
            enc_d = ad.constant(enc_d)
        x = ad.concat([enc_p, enc_d, feats], axis=1)
        last = len(self.color_weights) - 1
        for i, (w, b) in enumerate(zip(self.color_weights, self.color_biases)):
            x = ad.matmul(x, w) + b
            if i < last:
                x = ad.relu(x)
        return ad.sigmoid(x)


class AnalyticField:
    """Oracle field over an analytic scene; lets the renderer be verified
    independently of any training (SDF and albedo are exact)."""

    def __init__(self, scene, h_inverse=1e-3):
        self.scene = scene
        self.box_min = scene.box_min
        self.box_max = scene.box_max
        self._log_h = np.log(1.0 / h_inverse)

    def h(self):
        return ad.constant(np.exp(self._log_h))

    def h_value(self):
        return float(np.exp(self._log_h))

    def sdf(self, points, pyramid=None):
        pos = points.values if isinstance(points, Tensor) else points
        return ad.constant(self.scene.sdf(pos))

    def color(self, points, dirs, pyramid=None):
        pos = points.values if isinstance(points, Tensor) else points
        return ad.constant(self.scene.albedo_at(pos))


# ---------------------------------------------------------------------------
# ray sampling


def sample_coarse(z_near, z_far, n, seed):
    """Stratified samples: one uniform draw per equal sub-interval, sorted."""
    if n < 2:
        raise ValueError("need at least 2 coarse samples")
    rng = np.random.default_rng(seed)
    return _coarse_from_rng(z_near, z_far, n, rng)


def _coarse_from_rng(z_near, z_far, n, rng, rays=1):
    u = rng.random((rays, n))
    edges = np.linspace(z_near, z_far, n + 1)
    if np.ndim(z_near) == 0:
        lo, hi = edges[:-1], edges[1:]
    else:
        lo, hi = edges[:-1].T, edges[1:].T
    z = lo + u * (hi - lo)
    return z[0] if rays == 1 and np.ndim(z_near) == 0 else z


def sample_importance(z_coarse, weights, m, seed):
    """Inverse-CDF draws from the piecewise-constant density over coarse bins.

    Bin i spans [z_i, z_{i+1}) with mass weights[i] + 1e-5 (the trailing
    coarse weight is always zero and carries no bin). New samples are merged
    with the coarse ones, sorted, and deduplicated within 1e-12.
    """
    rng = np.random.default_rng(seed)
    fine = _importance_from_rng(
        np.asarray(z_coarse, dtype=np.float64)[None],
        np.asarray(weights, dtype=np.float64)[None],
        m,
        rng,
    )[0]
    merged = np.sort(np.concatenate([np.asarray(z_coarse, dtype=np.float64), fine]))
    keep = np.ones(len(merged), dtype=bool)
    keep[1:] = np.diff(merged) > 1e-12
    return merged[keep]


def _importance_from_rng(z_coarse, weights, m, rng):
    """(R, n) coarse batch -> (R, m) fine samples."""
    mass = weights[:, :-1] + 1e-5
    cdf = np.cumsum(mass, axis=1)
    total = cdf[:, -1:]
    cdf = np.concatenate([np.zeros_like(total), cdf / total], axis=1)
    u = rng.random((z_coarse.shape[0], m))
    idx = np.empty_like(u, dtype=np.int64)
    for r in range(z_coarse.shape[0]):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    idx = np.clip(idx, 0, mass.shape[1] - 1)
    c_lo = np.take_along_axis(cdf, idx, axis=1)
    c_hi = np.take_along_axis(cdf, idx + 1, axis=1)
    frac = (u - c_lo) / np.maximum(c_hi - c_lo, 1e-300)
    z_lo = np.take_along_axis(z_coarse, idx, axis=1)
    z_hi = np.take_along_axis(z_coarse, idx + 1, axis=1)
    return z_lo + frac * (z_hi - z_lo)


# ---------------------------------------------------------------------------
# occlusion-aware weights


def neus_weights(s, h):
    """Per-sample weights w = T * alpha from SDF samples along each ray.

    ``s`` is a (K,) or (R, K) tensor/array of SDFs at increasing z; ``h`` a
    positive scalar (tensor for a trainable sharpness). The last alpha of
    each ray is zero; a 1e-12 floor on Phi guards underflow.
    """
    s_t = s if isinstance(s, Tensor) else ad.constant(s)
    h_t = h if isinstance(h, Tensor) else ad.constant(h)
    squeeze = s_t.values.ndim == 1
    sv = s_t.values[None] if squeeze else s_t.values
    hv = float(h_t.values)
    alpha, trans, w, phi = kernels.neus_weights_fwd(sv, hv)

    def bwd(g):
        g2 = g[None] if squeeze else g
        ds, dh = kernels.neus_weights_bwd(sv, hv, alpha, trans, phi, g2)
        ad.accumulate(s_t, ds[0] if squeeze else ds)
        ad.accumulate(h_t, np.asarray(dh))

    return ad.from_op(w[0] if squeeze else w, (s_t, h_t), bwd)


class RaySamples:
    """Per-ray bookkeeping: z, segment widths, positions, SDF, color, weights."""

    def __init__(self, z, positions, sdf, color, weights):
        self.z = z
        self.delta = np.concatenate([np.diff(z), [0.0]])
        self.positions = positions
        self.sdf = sdf
        self.color = color
        self.weights = weights


class RenderResult:
    def __init__(self, color, depth, samples, hit=True):
        self.color = color
        self.depth = depth
        self.samples = samples
        self.hit = hit


def render_ray(field, pyramid, ray, n_coarse=64, n_fine=64, seed=0):
    """Render one ray to (color, depth, samples).

    The ray must carry AABB bounds; without bounds they are computed against
    the field box, and a ray missing the box returns a no-intersection
    result that callers exclude from losses.
    """
    if ray.z_near is None or ray.z_far is None:
        bounds = ray_aabb(ray, field.box_min, field.box_max)
        if bounds is None or bounds[0] >= bounds[1]:
            return RenderResult(None, None, None, hit=False)
        ray = ray.with_bounds(*bounds)
    rng = np.random.default_rng(seed)
    color, depth, aux = render_rays(
        field,
        pyramid,
        ray.origin[None],
        ray.direction[None],
        np.array([ray.z_near]),
        np.array([ray.z_far]),
        n_coarse,
        n_fine,
        rng,
    )
    z, pos, s, c, w = aux
    sample0 = RaySamples(z[0], pos.reshape(z.shape + (3,))[0], s[0], c[0], w[0])
    return RenderResult(ad.reshape(color, (3,)), ad.reshape(depth, ()), sample0)


def render_rays(field, pyramid, origins, directions, z_near, z_far, n_coarse, n_fine, rng):
    """Batched rendering; all rays share the sample count n_coarse + n_fine.

    Returns (color (R,3), depth (R,), aux) where aux carries the z grid,
    flattened positions, and the per-sample SDF/color/weight tensors.
    """
    return _render_batch(
        field, pyramid, origins, directions, z_near, z_far, n_coarse, n_fine, rng
    )


def plan_samples(field, pyramid, origins, directions, z_near, z_far, n_coarse, n_fine, rng):
    """Sampling phase only: (R, K) sorted ray lengths, no gradients recorded.

    Coarse stratified draws, then importance draws guided by the coarse
    occlusion weights of the current field.
    """
    r = origins.shape[0]
    z = _coarse_from_rng(z_near, z_far, n_coarse, rng, rays=r).reshape(r, n_coarse)
    if n_fine > 0:
        with ad.no_grad():
            pos_c = origins[:, None, :] + z[..., None] * directions[:, None, :]
            s_c = field.sdf(pos_c.reshape(-1, 3), pyramid).values.reshape(r, n_coarse)
            _, _, w_c, _ = kernels.neus_weights_fwd(s_c, field.h_value())
        fine = _importance_from_rng(z, w_c, n_fine, rng)
        z = np.sort(np.concatenate([z, fine], axis=1), axis=1)
    return z


def render_planned(field, pyramid, origins, directions, z):
    """Graph phase: decode, weight and integrate rays at fixed sample depths.

    Returns (color (R,3), depth (R,), positions (R*K,3), s (R,K), c (R,K,3),
    w (R,K)).
    """
    r, k = z.shape
    positions = (origins[:, None, :] + z[..., None] * directions[:, None, :]).reshape(-1, 3)
    dirs_flat = np.repeat(directions, k, axis=0)
    s = field.sdf(positions, pyramid)
    c = field.color(positions, dirs_flat, pyramid)
    s_mat = ad.reshape(s, (r, k))
    c_mat = ad.reshape(c, (r, k, 3))
    w = neus_weights(s_mat, field.h())
    w3 = ad.reshape(w, (r, k, 1))
    color = ad.tsum(w3 * c_mat, axis=1)
    depth = ad.tsum(w * ad.constant(z), axis=1)
    return color, depth, positions, s_mat, c_mat, w


def _render_batch(field, pyramid, origins, directions, z_near, z_far, n_coarse, n_fine, rng):
    z = plan_samples(
        field, pyramid, origins, directions, z_near, z_far, n_coarse, n_fine, rng
    )
    color, depth, positions, s_mat, c_mat, w = render_planned(
        field, pyramid, origins, directions, z
    )
    return color, depth, (z, positions, s_mat, c_mat, w)
