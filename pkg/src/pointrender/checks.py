"""Finite-difference verification gate.

Primitive autodiff operations are checked coordinate-by-coordinate against
central differences (tolerance 1e-6); composite pipelines (SDF decode,
color decode, full render loss, dense fill, trilinear query) are checked
along random parameter directions (tolerance 1e-4). Kinked inputs (relu,
abs, max) are nudged away from their kinks before differencing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import volume
from .autodiff import Tensor, gradcheck
from .camera import ColoredPointCloud
from .field import NeuralField, neus_weights, render_ray
from .camera import Ray

__all__ = ["run_gradcheck_suite", "directional_gradcheck", "CheckResult"]

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
N_INSTANCES = 10


class CheckResult:
    def __init__(self, name, error, tol):
        self.name = name
        self.error = error
        self.tol = tol
        self.passed = error < tol

    def __repr__(self):
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.error:.3e} (tol {self.tol:g})"


def _nudge(x, margin=0.05):
    """Push values away from zero so kinks are not sampled."""
    return x + np.sign(x + 1e-12) * margin


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _primitive_cases():
    """name -> builder(rng) returning (fn, point). fn maps Tensor -> scalar."""

    def proj(rng, shape):
        r = rng.standard_normal(shape)
        return lambda t: ad.tsum(t * ad.constant(r))

    def unary(op, transform=None, post=None):
        def build(rng):
            x = _rand(rng, 4, 5)
            if transform is not None:
                x = transform(x)
            p = proj(rng, (4, 5) if post is None else post(x).shape)
            return (lambda t: p(op(t))), x

        return build

    def binary(op, transform_b=None):
        def build(rng):
            a = _rand(rng, 4, 5)
            b = _rand(rng, 4, 5)
            if transform_b is not None:
                b = transform_b(b)
            p = proj(rng, (4, 5))

            def fn(t):
                ta = t[0:4, :]
                tb = t[4:8, :]
                return p(op(ta, tb))

            return fn, np.concatenate([a, b], axis=0)

        return build

    cases = {
        "add": binary(ad.add),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul),
        "div": binary(ad.div, transform_b=lambda b: _nudge(b, 0.5)),
        "neg": unary(ad.neg),
        "scalar_ops": unary(lambda t: (t * 2.5 - 1.25) / 0.5 + 3.0),
        "relu": unary(ad.relu, transform=_nudge),
        "softplus": unary(ad.softplus),
        "sigmoid": unary(ad.sigmoid),
        "exp": unary(ad.exp),
        "log": unary(ad.log, transform=lambda x: np.abs(x) + 0.5),
        "sqrt": unary(ad.sqrt, transform=lambda x: np.abs(x) + 0.5),
        "sin": unary(ad.sin),
        "cos": unary(ad.cos),
        "abs": unary(ad.absolute, transform=_nudge),
        "max_const": unary(lambda t: ad.max_const(t, 0.25), transform=_nudge),
        "sum": unary(lambda t: ad.tsum(t, axis=1), post=lambda x: x[:, 0]),
        "mean": unary(lambda t: ad.tmean(t, axis=0), post=lambda x: x[0]),
        "slice": unary(lambda t: t[1:3, 2:5], post=lambda x: x[1:3, 2:5]),
        "reshape": unary(lambda t: ad.reshape(t, (2, 10)), post=lambda x: x.reshape(2, 10)),
    }

    def matmul_case(rng):
        a = _rand(rng, 3, 4)
        b = _rand(rng, 4, 2)
        p = rng.standard_normal((3, 2))

        def fn(t):
            ta = ad.reshape(t[0:12], (3, 4))
            tb = ad.reshape(t[12:20], (4, 2))
            return ad.tsum(ad.matmul(ta, tb) * ad.constant(p))

        return fn, np.concatenate([a.reshape(-1), b.reshape(-1)])

    cases["matmul"] = matmul_case

    def maximum_case(rng):
        a = _rand(rng, 4, 5)
        b = a + np.where(rng.random((4, 5)) > 0.5, 0.6, -0.6)
        p = rng.standard_normal((4, 5))

        def fn(t):
            return ad.tsum(ad.maximum(t[0:4, :], t[4:8, :]) * ad.constant(p))

        return fn, np.concatenate([a, b], axis=0)

    cases["maximum"] = maximum_case

    def concat_case(rng):
        a = _rand(rng, 3, 4)
        p = rng.standard_normal((6, 4))

        def fn(t):
            return ad.tsum(ad.concat([t, t * 2.0], axis=0) * ad.constant(p))

        return fn, a

    cases["concat"] = concat_case

    def broadcast_case(rng):
        a = _rand(rng, 1, 5)
        p = rng.standard_normal((4, 5))

        def fn(t):
            return ad.tsum(ad.broadcast_to(t, (4, 5)) * ad.constant(p))

        return fn, a

    cases["broadcast"] = broadcast_case

    def gather_case(rng):
        grid = _rand(rng, 4, 4, 4, 3)
        pts = rng.uniform(-0.7, 0.7, (6, 3))
        p = rng.standard_normal((6, 3))

        def fn(t):
            g = ad.reshape(t, (4, 4, 4, 3))
            out = volume.gather_trilinear(g, pts, [-1.0] * 3, [1.0] * 3)
            return ad.tsum(out * ad.constant(p))

        return fn, grid.reshape(-1)

    cases["gather_trilinear_grid"] = gather_case

    def gather_points_case(rng):
        grid = ad.constant(_rand(rng, 4, 4, 4, 3))
        # keep points off cell faces so the interpolation stays smooth
        pts = (rng.integers(0, 3, (6, 3)) + rng.uniform(0.2, 0.8, (6, 3)) + 0.5) / 2.0 - 1.0
        p = rng.standard_normal((6, 3))

        def fn(t):
            out = volume.gather_trilinear(grid, t, [-1.0] * 3, [1.0] * 3)
            return ad.tsum(out * ad.constant(p))

        return fn, pts

    cases["gather_trilinear_points"] = gather_points_case

    def neus_case(rng):
        s = np.sort(rng.uniform(-1.0, 1.0, 12))[::-1].copy() + 0.05 * rng.standard_normal(12)
        p = rng.standard_normal(12)

        def fn(t):
            return ad.tsum(neus_weights(t[0:12], ad.exp(t[12])) * ad.constant(p))

        return fn, np.concatenate([s, [np.log(2.0)]])

    cases["neus_weights"] = neus_case

    def scatter_mean_case(rng):
        vals = _rand(rng, 10, 3)
        idx = rng.integers(0, 4, 10)
        p = rng.standard_normal((4, 3))

        def fn(t):
            out, _ = volume.scatter_mean(t, idx, 4)
            return ad.tsum(out * ad.constant(p))

        return fn, vals

    cases["scatter_mean"] = scatter_mean_case

    def conv_case(rng):
        grid = _rand(rng, 3, 3, 3, 2)
        kern = _rand(rng, 27, 2, 2) * 0.2
        bias = _rand(rng, 2) * 0.1
        p = rng.standard_normal((3, 3, 3, 2))

        def fn(t):
            g = ad.reshape(t[0:54], (3, 3, 3, 2))
            k = ad.reshape(t[54:162], (27, 2, 2))
            b = t[162:164]
            return ad.tsum(volume.conv3d(g, k, b) * ad.constant(p))

        return fn, np.concatenate([grid.reshape(-1), kern.reshape(-1), bias])

    cases["conv3d"] = conv_case
    return cases


def directional_gradcheck(loss_fn, params, n_dirs=8, seed=0, eps=1e-5):
    """Compare directional derivatives of a parameterized loss with central FD.

    ``params`` is a name -> Tensor dict; the loss is re-evaluated with the
    parameters displaced along random unit directions.
    """
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    ad.backward(out)
    grads = {k: (np.zeros(p.values.shape) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    originals = {k: p.values.copy() for k, p in params.items()}
    worst = 0.0
    with ad.no_grad():
        for _ in range(n_dirs):
            dirs = {k: rng.standard_normal(p.values.shape) for k, p in params.items()}
            norm = np.sqrt(sum((d**2).sum() for d in dirs.values()))
            dirs = {k: d / norm for k, d in dirs.items()}
            analytic = sum((grads[k] * dirs[k]).sum() for k in params)
            for sign in (+1.0, -1.0):
                for k, p in params.items():
                    p.values = originals[k] + sign * eps * dirs[k]
                if sign > 0:
                    f_plus = float(loss_fn().values)
                else:
                    f_minus = float(loss_fn().values)
            for k, p in params.items():
                p.values = originals[k]
            fd = (f_plus - f_minus) / (2 * eps)
            err = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
            worst = max(worst, err)
    return worst


def _small_setup(seed):
    """Tiny full pipeline: cloud -> pyramid -> field, cheap enough to FD."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.8, 0.8, (24, 3))
    cols = rng.uniform(0.1, 0.9, (24, 3))
    cloud = ColoredPointCloud(pts, cols)
    box_min, box_max = np.array([-1.0] * 3), np.array([1.0] * 3)
    encoder = volume.EncoderParams(out_dim=4, hidden=8, seed=seed)
    fill = volume.DenseFillParams(4, 1, seed=seed + 1)
    for b in fill.biases:
        # keep conv pre-activations off the relu kink at empty cells
        b.values += rng.uniform(0.05, 0.15, b.values.shape) * np.where(
            rng.random(b.values.shape) > 0.5, 1.0, -1.0
        )
    field = NeuralField(
        feature_dim=4,
        box_min=box_min,
        box_max=box_max,
        sdf_hidden=8,
        sdf_layers=2,
        color_hidden=8,
        color_layers=2,
        n_freq_pos=2,
        n_freq_dir=1,
        seed=seed + 2,
    )

    def build_pyramid():
        emb = volume.encode_points(cloud, encoder, box_min, box_max)
        pooled = volume.pool_to_pyramid(cloud, emb, (4,), box_min, box_max)
        return volume.dense_fill(pooled, fill)

    params = {}
    params.update(encoder.named_parameters())
    params.update(fill.named_parameters())
    params.update(field.named_parameters())
    return cloud, build_pyramid, field, params


def _composite_cases():
    def sdf_case(seed):
        rng = np.random.default_rng(seed)
        _, build, field, params = _small_setup(seed)
        q = rng.uniform(-0.8, 0.8, (5, 3))
        proj = rng.standard_normal(5)

        def loss():
            return ad.tsum(field.sdf(q, build()) * ad.constant(proj))

        return loss, params

    def color_case(seed):
        rng = np.random.default_rng(seed)
        _, build, field, params = _small_setup(seed)
        q = rng.uniform(-0.8, 0.8, (5, 3))
        d = rng.standard_normal((5, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        proj = rng.standard_normal((5, 3))

        def loss():
            return ad.tsum(field.color(q, d, build()) * ad.constant(proj))

        return loss, params

    def render_case(seed):
        rng = np.random.default_rng(seed)
        _, build, field, params = _small_setup(seed)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        ray = Ray(-1.2 * d, d).with_bounds(0.3, 2.1)
        target = rng.uniform(0.2, 0.8, 3)

        def loss():
            res = render_ray(field, build(), ray, n_coarse=8, n_fine=0, seed=seed)
            diff = res.color - ad.constant(target)
            return ad.tsum(diff * diff)

        return loss, params

    def dense_fill_case(seed):
        rng = np.random.default_rng(seed)
        cloud, build, field, params = _small_setup(seed)
        proj = rng.standard_normal((4, 4, 4, 4))
        sub = {k: v for k, v in params.items() if k.startswith(("encoder", "fill"))}

        def loss():
            return ad.tsum(build().levels[0].grid * ad.constant(proj))

        return loss, sub

    def query_case(seed):
        rng = np.random.default_rng(seed)
        _, build, field, params = _small_setup(seed)
        q = rng.uniform(-0.8, 0.8, (6, 3))
        proj = rng.standard_normal((6, 4))
        sub = {k: v for k, v in params.items() if k.startswith(("encoder", "fill"))}

        def loss():
            return ad.tsum(volume.query_features(build(), q) * ad.constant(proj))

        return loss, sub

    return {
        "sdf": sdf_case,
        "color": color_case,
        "render_ray_loss": render_case,
        "dense_fill": dense_fill_case,
        "query_features": query_case,
    }


def run_gradcheck_suite(n_instances=N_INSTANCES, verbose=False):
    """Run the whole gate; returns a list of CheckResult."""
    results = []
    for name, build in _primitive_cases().items():
        worst = 0.0
        for i in range(n_instances):
            rng = np.random.default_rng(1000 + 17 * i)
            fn, point = build(rng)
            worst = max(worst, gradcheck(fn, Tensor(point), eps=1e-5))
        results.append(CheckResult(name, worst, PRIMITIVE_TOL))
        if verbose:
            print(results[-1])
    for name, case in _composite_cases().items():
        worst = 0.0
        for i in range(n_instances):
            loss, params = case(2000 + 29 * i)
            worst = max(worst, directional_gradcheck(loss, params, n_dirs=4, seed=i, eps=1e-6))
        results.append(CheckResult(name, worst, COMPOSITE_TOL))
        if verbose:
            print(results[-1])
    return results
