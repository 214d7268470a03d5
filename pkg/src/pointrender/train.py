"""Optimization loop: ray batching, AdamW, exponential LR decay, checkpoints.

One step = mask the cloud, encode, pool, dense-fill, render a ray batch
from every supervising view, combine the five loss terms, backpropagate,
and apply one AdamW update. Ray shards render and backpropagate one at a
time (gradients merge by fixed-order summation into the pyramid grids), so
peak memory stays bounded while the result equals one monolithic backward
pass.

Every random draw comes from a generator keyed by (seed, purpose tag,
step, ...), so runs are bit-reproducible and resumable from a checkpoint.
"""

from __future__ import annotations

import dataclasses
import io
import os
import struct

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import volume
from .camera import build_cloud, pixel_directions, ray_aabb_batch
from .field import NeuralField, plan_samples, render_planned
from .scene import load_dataset

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainError",
    "CheckpointError",
    "adamw_step",
    "lr_at",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "render_view",
]

# rng purpose tags
_T_CLOUD, _T_INIT, _T_GROUPS, _T_MASK, _T_RAYS, _T_SAMPLES, _T_EIK, _T_EVAL = range(8)


class TrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass
class TrainConfig:
    """Run settings; defaults follow the pre-training recipe at desk scale."""

    n_views: int = 5
    rays_per_image: int = 128
    n_coarse: int = 64
    n_fine: int = 64
    mask_ratio: float = 0.75
    mask_groups: int = 2048
    mask_group_size: int = 64
    target_points: int = 20000
    lr: float = 1e-4
    weight_decay: float = 0.05
    lr_gamma: float = 0.9995
    steps: int = 1000
    seed: int = 0
    resolutions: tuple = (16, 32, 64)
    channels: int = 16
    supervision: str = "both"  # both | color | depth
    lambda_color: float = 10.0
    lambda_depth: float = 1.0
    lambda_eikonal: float = 0.01
    lambda_near: float = 10.0
    lambda_free: float = 1.0
    near_threshold: float = 0.05
    free_alpha: float = 5.0
    eikonal_fraction: float = 1.0
    shard_rays: int = 64
    sdf_hidden: int = 64
    sdf_layers: int = 5
    color_hidden: int = 64
    color_layers: int = 3
    n_freq_pos: int = 6
    n_freq_dir: int = 4
    h_inverse_init: float = 0.3
    h_lr_scale: float = 10.0
    encoder_hidden: int = 64

    def __post_init__(self):
        if self.n_views < 1 or self.rays_per_image < 1 or self.steps < 0:
            raise ValueError("counts must be positive")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr decay factor must lie in (0, 1]")
        if self.supervision not in ("both", "color", "depth"):
            raise ValueError(f"unknown supervision mode {self.supervision!r}")
        self.resolutions = tuple(int(r) for r in self.resolutions)

    def loss_weights(self):
        lw = L.LossWeights(
            color=self.lambda_color if self.supervision in ("both", "color") else 0.0,
            depth=self.lambda_depth if self.supervision in ("both", "depth") else 0.0,
            eikonal=self.lambda_eikonal,
            near_surface=self.lambda_near if self.supervision in ("both", "depth") else 0.0,
            free_space=self.lambda_free if self.supervision in ("both", "depth") else 0.0,
            threshold=self.near_threshold,
            alpha=self.free_alpha,
        )
        return lw


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence((seed,) + key))


def lr_at(step, lr0, gamma):
    """Exponential schedule: lr0 * gamma^step."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    return lr0 * gamma**step


def adamw_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, lr_scales=None):
    """One decoupled-weight-decay Adam update over a named parameter dict.

    Decay shrinks the parameter directly (p *= 1 - lr*wd), then the
    bias-corrected moment update is applied. Parameters without a gradient
    use a zero gradient. Non-finite gradients reject the step, naming the
    parameter.
    """
    state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.values.shape)
        if not np.isfinite(g).all():
            state["t"] -= 1
            raise TrainError(f"non-finite gradient for parameter {name!r}; step rejected")
        scale = 1.0 if lr_scales is None else lr_scales.get(name, 1.0)
        step_lr = lr * scale
        if name not in state:
            state[name] = {
                "m": np.zeros(p.values.shape),
                "v": np.zeros(p.values.shape),
            }
        st = state[name]
        if weight_decay:
            p.values *= 1.0 - step_lr * weight_decay
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1**t)
        v_hat = st["v"] / (1.0 - beta2**t)
        p.values -= step_lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class TrainState:
    """Everything one run carries: model parts, optimizer state, step count."""

    def __init__(self, config, box_min, box_max):
        self.config = config
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        seed_rng = _rng(config.seed, _T_INIT)
        enc_seed, fill_seed, field_seed = (int(s) for s in seed_rng.integers(2**31, size=3))
        self.encoder = volume.EncoderParams(
            out_dim=config.channels, hidden=config.encoder_hidden, seed=enc_seed
        )
        self.fill = volume.DenseFillParams(
            config.channels, len(config.resolutions), seed=fill_seed
        )
        self.field = NeuralField(
            feature_dim=config.channels * len(config.resolutions),
            box_min=box_min,
            box_max=box_max,
            sdf_hidden=config.sdf_hidden,
            sdf_layers=config.sdf_layers,
            color_hidden=config.color_hidden,
            color_layers=config.color_layers,
            n_freq_pos=config.n_freq_pos,
            n_freq_dir=config.n_freq_dir,
            h_inverse_init=config.h_inverse_init,
            seed=field_seed,
        )
        self.opt_state = {}
        self.step = 0

    def named_parameters(self):
        out = {}
        out.update(self.encoder.named_parameters())
        out.update(self.fill.named_parameters())
        out.update(self.field.named_parameters())
        return out

    def lr_scales(self):
        return {"log_h": self.config.h_lr_scale}

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def build_pyramid(self, cloud):
        """Masked-or-full cloud -> encoded, pooled, densified pyramid."""
        emb = volume.encode_points(cloud, self.encoder, self.box_min, self.box_max)
        pooled = volume.pool_to_pyramid(
            cloud, emb, self.config.resolutions, self.box_min, self.box_max
        )
        return volume.dense_fill(pooled, self.fill)


def _dataset_box(scene, cloud):
    lo, hi = cloud.bounding_box()
    return np.minimum(scene.box_min, lo), np.maximum(scene.box_max, hi)


def _format_line(step, report, lr):
    vals = [report.total] + [report.terms[t] for t in L.TERMS] + [lr]
    return str(step) + " " + " ".join(f"{v:.17g}" for v in vals)


def train(dataset_dir, config, out_dir=None, resume=None, progress=None):
    """Run the optimization; returns (state, log_lines).

    ``resume`` continues from a loaded TrainState (checkpoint), producing
    exactly the same trajectory as an uninterrupted run with the same seed.
    When ``out_dir`` is given, the loss log and final checkpoint are written
    there.
    """
    scene, frames = load_dataset(dataset_dir)
    if len(frames) < config.n_views:
        raise TrainError(
            f"dataset has {len(frames)} views, config requires {config.n_views}"
        )
    frames = frames[: config.n_views]
    cloud = build_cloud(frames, config.target_points, seed=_rng(config.seed, _T_CLOUD))
    box_min, box_max = _dataset_box(scene, cloud)

    if resume is not None:
        state = resume
        if state.config != config:
            raise TrainError("resume checkpoint was produced with a different config")
    else:
        state = TrainState(config, box_min, box_max)

    if config.mask_ratio > 0 and len(cloud) >= config.mask_group_size:
        centers, membership = volume.group_points(
            cloud, config.mask_groups, config.mask_group_size, seed=_rng(config.seed, _T_GROUPS)
        )
        n_groups = len(centers)
    else:
        membership = None
        n_groups = 0

    weights = config.loss_weights()
    log_lines = []
    for step in range(state.step, config.steps):
        report = _train_step(state, cloud, membership, n_groups, frames, weights, step)
        if not np.isfinite(report.total):
            raise TrainError(f"non-finite total loss at step {step}")
        lr = lr_at(step, config.lr, config.lr_gamma)
        line = _format_line(step, report, lr)
        log_lines.append(line)
        if progress is not None:
            progress(step, report)
    state.step = config.steps

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if resume is not None else "w"
        with open(os.path.join(out_dir, "loss_log.txt"), mode) as f:
            for line in log_lines:
                f.write(line + "\n")
        save_checkpoint(state, os.path.join(out_dir, "checkpoint.bin"))
    return state, log_lines


def _train_step(state, cloud, membership, n_groups, frames, weights, step):
    config = state.config
    state.zero_grad()

    if membership is not None and config.mask_ratio > 0:
        masked, _ = volume.drop_groups(
            cloud, membership, n_groups, config.mask_ratio, _rng(config.seed, _T_MASK, step)
        )
        if len(masked) == 0:
            masked = cloud
    else:
        masked = cloud
    pyramid = state.build_pyramid(masked)
    grid_tensors = [lv.grid for lv in pyramid.levels]

    origins, dirs, z_near, z_far, gt_color, gt_depth = _pick_rays(state, frames, step)
    n_rays = origins.shape[0]
    if n_rays == 0:
        raise TrainError(f"no rays intersect the volume at step {step}")

    # sampling phase: fixed z grids per shard, plus the global denominators
    rng_samples = _rng(config.seed, _T_SAMPLES, step)
    rng_eik = _rng(config.seed, _T_EIK, step)
    eps_fd = L.default_fd_step(state.box_min, state.box_max)
    shards = []
    n_near_total = 0
    n_free_total = 0
    n_eik_total = 0
    n_valid = 0
    use_eik = weights.eikonal > 0
    use_sdf_terms = weights.near_surface > 0 or weights.free_space > 0
    use_depth = weights.depth > 0
    for lo in range(0, n_rays, config.shard_rays):
        hi = min(lo + config.shard_rays, n_rays)
        sl = slice(lo, hi)
        z = plan_samples(
            state.field,
            pyramid,
            origins[sl],
            dirs[sl],
            z_near[sl],
            z_far[sl],
            config.n_coarse,
            config.n_fine,
            rng_samples,
        )
        valid = gt_depth[sl] > 0
        n_valid += int(valid.sum())
        b = near = free = None
        if use_sdf_terms:
            b, near, free = L.sdf_partition(z, gt_depth[sl], valid, weights.threshold)
            n_near_total += int(near.sum())
            n_free_total += int(free.sum())
        eik_pts = None
        if use_eik:
            pos = (origins[sl, None, :] + z[..., None] * dirs[sl, None, :]).reshape(-1, 3)
            ok = L.eikonal_margin_mask(pos, state.box_min, state.box_max, eps_fd)
            if config.eikonal_fraction < 1.0:
                sub = rng_eik.random(pos.shape[0]) < config.eikonal_fraction
                ok = ok & sub
            eik_pts = pos[ok]
            n_eik_total += eik_pts.shape[0]
        shards.append((sl, z, valid, b, near, free, eik_pts))

    sums = {name: 0.0 for name in L.TERMS}
    for sl, z, valid, b, near, free, eik_pts in shards:
        color, depth, _, s_mat, _, _ = render_planned(
            state.field, pyramid, origins[sl], dirs[sl], z
        )
        contrib = None

        def add(term):
            nonlocal contrib
            contrib = term if contrib is None else contrib + term

        if weights.color > 0:
            c_sum = L.color_sq_sum(color, gt_color[sl])
            sums["color"] += float(c_sum.values)
            add(c_sum * (weights.color / n_rays))
        if use_depth and n_valid > 0:
            d_sum = L.depth_sq_sum(depth, gt_depth[sl], valid)
            sums["depth"] += float(d_sum.values)
            add(d_sum * (weights.depth / n_valid))
        if use_sdf_terms:
            near_sum, free_sum = L.sdf_supervision_sums(s_mat, b, near, free, weights)
            if n_near_total > 0 and weights.near_surface > 0:
                sums["near_surface"] += float(near_sum.values)
                add(near_sum * (weights.near_surface / n_near_total))
            if n_free_total > 0 and weights.free_space > 0:
                sums["free_space"] += float(free_sum.values)
                add(free_sum * (weights.free_space / n_free_total))
        if use_eik and eik_pts is not None and eik_pts.shape[0] and n_eik_total > 0:
            e_sum = L.eikonal_resid_sum(state.field, pyramid, eik_pts, eps_fd)
            sums["eikonal"] += float(e_sum.values)
            add(e_sum * (weights.eikonal / n_eik_total))
        if contrib is not None:
            ad.backward(contrib, stop_at=grid_tensors)
    ad.backward_from(grid_tensors)

    terms = {
        "color": sums["color"] / n_rays if weights.color > 0 else 0.0,
        "depth": sums["depth"] / n_valid if use_depth and n_valid else 0.0,
        "eikonal": sums["eikonal"] / n_eik_total if use_eik and n_eik_total else 0.0,
        "near_surface": (
            sums["near_surface"] / n_near_total
            if weights.near_surface > 0 and n_near_total
            else 0.0
        ),
        "free_space": (
            sums["free_space"] / n_free_total
            if weights.free_space > 0 and n_free_total
            else 0.0
        ),
    }
    for name, v in terms.items():
        if v < 0:
            raise TrainError(f"negative loss term {name} at step {step}")
    total = sum(lam * terms[name] for lam, name in zip(weights.as_tuple(), L.TERMS))
    counts = {
        "rays": n_rays,
        "valid_depth": n_valid,
        "near": n_near_total,
        "free": n_free_total,
        "eikonal": n_eik_total,
    }

    adamw_step(
        state.named_parameters(),
        state.opt_state,
        lr=lr_at(step, config.lr, config.lr_gamma),
        weight_decay=config.weight_decay,
        lr_scales=state.lr_scales(),
    )
    return L.LossReport(terms, counts, total)


def _pick_rays(state, frames, step):
    """Per view: rays_per_image pixels without replacement, AABB-clipped."""
    config = state.config
    origins, dirs, colors, depths = [], [], [], []
    for v, frame in enumerate(frames):
        h, w = frame.intrinsics.height, frame.intrinsics.width
        rng = _rng(config.seed, _T_RAYS, step, v)
        count = min(config.rays_per_image, h * w)
        pix = rng.permutation(h * w)[:count]
        uu = pix % w
        vv = pix // w
        d = pixel_directions(np.stack([uu, vv], axis=1), frame.intrinsics, frame.pose)
        o = np.broadcast_to(frame.pose.camera_center(), d.shape)
        origins.append(o)
        dirs.append(d)
        colors.append(frame.color[vv, uu])
        depths.append(frame.depth[vv, uu])
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    colors = np.concatenate(colors)
    depths = np.concatenate(depths)
    z_near, z_far, hit = ray_aabb_batch(origins, dirs, state.box_min, state.box_max)
    keep = hit & (z_far > z_near)
    return (
        origins[keep],
        dirs[keep],
        z_near[keep],
        z_far[keep],
        colors[keep],
        depths[keep],
    )


# ---------------------------------------------------------------------------
# evaluation


def render_view(state, dataset_dir, view_id):
    """Render one dataset view with the trained field; returns (color, depth)."""
    _, images = evaluate(state, dataset_dir, [view_id])
    return images[view_id]


def _render_full(state, pyramid, frame, view_id, chunk=2048):
    config = state.config
    h, w = frame.intrinsics.height, frame.intrinsics.width
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    dirs = pixel_directions(pixels, frame.intrinsics, frame.pose)
    origins = np.broadcast_to(frame.pose.camera_center(), dirs.shape)
    z_near, z_far, hit = ray_aabb_batch(origins, dirs, state.box_min, state.box_max)
    color = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    rng = _rng(config.seed, _T_EVAL, view_id)
    idx = np.nonzero(hit & (z_far > z_near))[0]
    with ad.no_grad():
        for lo in range(0, idx.size, chunk):
            part = idx[lo : lo + chunk]
            z = plan_samples(
                state.field,
                pyramid,
                origins[part],
                dirs[part],
                z_near[part],
                z_far[part],
                config.n_coarse,
                config.n_fine,
                rng,
            )
            c, d, _, _, _, _ = render_planned(
                state.field, pyramid, origins[part], dirs[part], z
            )
            color[part] = c.values
            depth[part] = d.values
    return color.reshape(h, w, 3), depth.reshape(h, w)


def psnr(rendered, reference, cap=99.0):
    """10 log10(1/MSE) for [0,1] images, capped when MSE is zero."""
    mse = float(np.mean((np.asarray(rendered) - np.asarray(reference)) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)


def depth_rmse(rendered, reference):
    """Root-mean-square depth error over valid (positive) reference pixels."""
    ref = np.asarray(reference)
    valid = ref > 0
    if not valid.any():
        return 0.0
    return float(np.sqrt(np.mean((np.asarray(rendered)[valid] - ref[valid]) ** 2)))


def evaluate(state, dataset_dir, view_ids):
    """Render held-out views and report PSNR / valid-pixel depth RMSE."""
    scene, frames = load_dataset(dataset_dir)
    train_frames = frames[: state.config.n_views]
    cloud = build_cloud(
        train_frames, state.config.target_points, seed=_rng(state.config.seed, _T_CLOUD)
    )
    with ad.no_grad():
        pyramid = state.build_pyramid(cloud)
    metrics = {"psnr": {}, "depth_rmse": {}}
    images = {}
    for v in view_ids:
        if not 0 <= v < len(frames):
            raise ValueError(f"view {v} not in dataset (has {len(frames)})")
        frame = frames[v]
        color, depth = _render_full(state, pyramid, frame, v)
        metrics["psnr"][v] = psnr(color, frame.color)
        metrics["depth_rmse"][v] = depth_rmse(depth, frame.depth)
        images[v] = (color, depth)
    metrics["mean_psnr"] = float(np.mean(list(metrics["psnr"].values())))
    metrics["mean_depth_rmse"] = float(np.mean(list(metrics["depth_rmse"].values())))
    return metrics, images


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PRCK"
_VERSION = 1


def _config_text(config):
    fields = dataclasses.asdict(config)
    lines = []
    for key in sorted(fields):
        v = fields[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        values[key] = val
    return _coerce_config(values)


def _coerce_config(values):
    kwargs = {}
    hints = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    defaults = TrainConfig()
    for key, val in values.items():
        if key not in hints:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(defaults, key)
        if key == "resolutions":
            kwargs[key] = tuple(int(x) for x in str(val).replace(",", " ").split())
        elif isinstance(current, bool):
            kwargs[key] = str(val).lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            kwargs[key] = int(val)
        elif isinstance(current, float):
            kwargs[key] = float(val)
        else:
            kwargs[key] = str(val)
    return TrainConfig(**kwargs)


def _write_array(f, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(arr.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte {self.off}"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def array(self, what):
        (ndim,) = self.unpack("<B", what + " ndim")
        shape = tuple(self.unpack("<Q", what + " dim")[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * 8, what + " data")
        return np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()


def save_checkpoint(state, path):
    """Versioned binary dump: config, box, parameters, optimizer moments."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<Q", state.step))
    text = _config_text(state.config).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    _write_array(buf, state.box_min)
    _write_array(buf, state.box_max)
    params = state.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        _write_array(buf, p.values)
    has_opt = 1 if state.opt_state else 0
    buf.write(struct.pack("<B", has_opt))
    if has_opt:
        buf.write(struct.pack("<Q", state.opt_state.get("t", 0)))
        for name in params:
            st = state.opt_state.get(name)
            if st is None:
                st = {"m": np.zeros(params[name].values.shape), "v": np.zeros(params[name].values.shape)}
            _write_array(buf, st["m"])
            _write_array(buf, st["v"])
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild a TrainState from a checkpoint; bit-exact round trip."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != _MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte 0; not a checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {_VERSION})")
    (step,) = r.unpack("<Q", "step")
    (text_len,) = r.unpack("<I", "config length")
    config = config_from_text(r.take(text_len, "config").decode("utf-8"))
    box_min = r.array("box_min")
    box_max = r.array("box_max")
    state = TrainState(config, box_min, box_max)
    state.step = step
    params = state.named_parameters()
    (n_params,) = r.unpack("<I", "parameter count")
    if n_params != len(params):
        raise CheckpointError(
            f"checkpoint has {n_params} parameters, model expects {len(params)}"
        )
    order = []
    for _ in range(n_params):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        if name not in params:
            raise CheckpointError(f"unexpected parameter {name!r} at byte {r.off}")
        arr = r.array(name)
        if arr.shape != params[name].values.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, expected {params[name].values.shape}"
            )
        params[name].values = arr
        order.append(name)
    (has_opt,) = r.unpack("<B", "optimizer flag")
    if has_opt:
        (t,) = r.unpack("<Q", "optimizer step count")
        state.opt_state = {"t": int(t)}
        for name in order:
            m = r.array(name + ".m")
            v = r.array(name + ".v")
            state.opt_state[name] = {"m": m, "v": v}
    if r.off != len(data):
        raise CheckpointError(f"{len(data) - r.off} trailing bytes at byte {r.off}")
    return state
