"""Pure numpy implementations of the hot kernels.

This lane is always available and is the reference the compiled lane is
checked against. Functions take C-contiguous float64 arrays and never
mutate their inputs. Summation orders match the compiled lane so results
agree to the last few ulps.
"""

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

BACKEND = "ref"


def _corner_setup(u, shape):
    base = np.minimum(np.floor(u), np.asarray(shape, dtype=np.float64) - 2.0)
    base = np.maximum(base, 0.0).astype(np.int64)
    frac = u - base
    return base, frac


def trilinear_gather(grid, u):
    """Interpolate ``grid`` (n0,n1,n2,C) at continuous cell coords ``u`` (Q,3).

    ``u`` must already be clamped to [0, n_k - 1] per axis.
    """
    base, f = _corner_setup(u, grid.shape[:3])
    i0, j0, k0 = base[:, 0], base[:, 1], base[:, 2]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = gx * gy * gz * grid[i0, j0, k0]
    out += gx * gy * fz * grid[i0, j0, k0 + 1]
    out += gx * fy * gz * grid[i0, j0 + 1, k0]
    out += gx * fy * fz * grid[i0, j0 + 1, k0 + 1]
    out += fx * gy * gz * grid[i0 + 1, j0, k0]
    out += fx * gy * fz * grid[i0 + 1, j0, k0 + 1]
    out += fx * fy * gz * grid[i0 + 1, j0 + 1, k0]
    out += fx * fy * fz * grid[i0 + 1, j0 + 1, k0 + 1]
    return out


def trilinear_scatter(u, dout, shape):
    """Adjoint of ``trilinear_gather`` w.r.t. the grid values."""
    n0, n1, n2 = shape
    c = dout.shape[1]
    base, f = _corner_setup(u, shape)
    dgrid = np.zeros((n0 * n1 * n2, c))
    flat = (base[:, 0] * n1 + base[:, 1]) * n2 + base[:, 2]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    for di, dj, dk, w in (
        (0, 0, 0, gx * gy * gz),
        (0, 0, 1, gx * gy * fz),
        (0, 1, 0, gx * fy * gz),
        (0, 1, 1, gx * fy * fz),
        (1, 0, 0, fx * gy * gz),
        (1, 0, 1, fx * gy * fz),
        (1, 1, 0, fx * fy * gz),
        (1, 1, 1, fx * fy * fz),
    ):
        np.add.at(dgrid, flat + (di * n1 + dj) * n2 + dk, w * dout)
    return dgrid.reshape(n0, n1, n2, c)


def trilinear_point_grad(grid, u, dout):
    """Gradient of sum(dout * gather(grid, u)) w.r.t. ``u``."""
    base, f = _corner_setup(u, grid.shape[:3])
    i0, j0, k0 = base[:, 0], base[:, 1], base[:, 2]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c000 = (grid[i0, j0, k0] * dout).sum(axis=1, keepdims=True)
    c001 = (grid[i0, j0, k0 + 1] * dout).sum(axis=1, keepdims=True)
    c010 = (grid[i0, j0 + 1, k0] * dout).sum(axis=1, keepdims=True)
    c011 = (grid[i0, j0 + 1, k0 + 1] * dout).sum(axis=1, keepdims=True)
    c100 = (grid[i0 + 1, j0, k0] * dout).sum(axis=1, keepdims=True)
    c101 = (grid[i0 + 1, j0, k0 + 1] * dout).sum(axis=1, keepdims=True)
    c110 = (grid[i0 + 1, j0 + 1, k0] * dout).sum(axis=1, keepdims=True)
    c111 = (grid[i0 + 1, j0 + 1, k0 + 1] * dout).sum(axis=1, keepdims=True)
    du = np.empty_like(u)
    du[:, 0:1] = (
        gy * gz * (c100 - c000)
        + gy * fz * (c101 - c001)
        + fy * gz * (c110 - c010)
        + fy * fz * (c111 - c011)
    )
    du[:, 1:2] = (
        gx * gz * (c010 - c000)
        + gx * fz * (c011 - c001)
        + fx * gz * (c110 - c100)
        + fx * fz * (c111 - c101)
    )
    du[:, 2:3] = (
        gx * gy * (c001 - c000)
        + gx * fy * (c011 - c010)
        + fx * gy * (c101 - c100)
        + fx * fy * (c111 - c110)
    )
    return du


def scatter_add_rows(vals, idx, nrows):
    """Row-wise scatter-add: out[idx[m]] += vals[m]."""
    out = np.zeros((nrows, vals.shape[1]))
    np.add.at(out, idx, vals)
    return out


_OFFSETS = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]


def conv3x3(grid, kernel, bias):
    """Dense 3x3x3 convolution with zero padding.

    grid: (n0,n1,n2,Cin); kernel: (27,Cin,Cout) with offsets enumerated
    lexicographically over (-1,0,1)^3; bias: (Cout,).
    """
    n0, n1, n2, cin = grid.shape
    cout = kernel.shape[2]
    pad = np.zeros((n0 + 2, n1 + 2, n2 + 2, cin))
    pad[1:-1, 1:-1, 1:-1] = grid
    out = np.empty((n0 * n1 * n2, cout))
    out[:] = bias
    for o, (dx, dy, dz) in enumerate(_OFFSETS):
        view = pad[1 + dx : 1 + dx + n0, 1 + dy : 1 + dy + n1, 1 + dz : 1 + dz + n2]
        out += view.reshape(-1, cin) @ kernel[o]
    return out.reshape(n0, n1, n2, cout)


def conv3x3_grad_input(dout, kernel):
    """Gradient of conv3x3 w.r.t. its input grid."""
    flipped = kernel[::-1].transpose(0, 2, 1).copy()
    zero = np.zeros(kernel.shape[1])
    return conv3x3(dout, flipped, zero)


def conv3x3_grad_kernel(grid, dout):
    """Gradient of conv3x3 w.r.t. the kernel, plus the bias gradient."""
    n0, n1, n2, cin = grid.shape
    cout = dout.shape[3]
    pad = np.zeros((n0 + 2, n1 + 2, n2 + 2, cin))
    pad[1:-1, 1:-1, 1:-1] = grid
    dk = np.empty((27, cin, cout))
    dflat = dout.reshape(-1, cout)
    for o, (dx, dy, dz) in enumerate(_OFFSETS):
        view = pad[1 + dx : 1 + dx + n0, 1 + dy : 1 + dy + n1, 1 + dz : 1 + dz + n2]
        dk[o] = view.reshape(-1, cin).T @ dflat
    db = dflat.sum(axis=0)
    return dk, db


_PHI_FLOOR = 1e-12


def neus_weights_fwd(s, h):
    """Occlusion-aware per-sample weights from SDF samples.

    s: (R,K) per-ray SDF values at increasing ray lengths; h: sharpness.
    Returns (alpha, trans, w, phi). alpha[i] = max((phi[i]-phi[i+1])/phi[i], 0)
    with the last alpha zero and a floor guard on phi; trans is the
    accumulated transmittance; w = trans * alpha.
    """
    x = h * s
    phi = np.empty_like(x)
    posm = x >= 0
    phi[posm] = 1.0 / (1.0 + np.exp(-x[posm]))
    ex = np.exp(x[~posm])
    phi[~posm] = ex / (1.0 + ex)
    alpha = np.zeros_like(s)
    prev = phi[:, :-1]
    ok = prev >= _PHI_FLOOR
    denom = np.where(ok, prev, 1.0)
    ratio = (prev - phi[:, 1:]) / denom
    alpha[:, :-1] = np.where(ok, np.maximum(ratio, 0.0), 0.0)
    trans = np.ones_like(s)
    np.cumprod(1.0 - alpha[:, :-1], axis=1, out=trans[:, 1:])
    w = trans * alpha
    return alpha, trans, w, phi


def neus_weights_bwd(s, h, alpha, trans, phi, dw):
    """Adjoint of ``neus_weights_fwd``: gradients w.r.t. s and h."""
    r, k = s.shape
    dalpha = np.empty_like(s)
    carry = np.zeros(r)
    for i in range(k - 1, -1, -1):
        dalpha[:, i] = trans[:, i] * (dw[:, i] - carry)
        carry = dw[:, i] * alpha[:, i] + carry * (1.0 - alpha[:, i])
    prev = phi[:, :-1]
    active = (alpha[:, :-1] > 0.0) & (prev >= _PHI_FLOOR)
    denom = np.where(active, prev, 1.0)
    dratio = np.where(active, dalpha[:, :-1], 0.0)
    dphi = np.zeros_like(phi)
    dphi[:, :-1] += dratio * phi[:, 1:] / (denom * denom)
    dphi[:, 1:] += -dratio / denom
    sig = dphi * phi * (1.0 - phi)
    ds = sig * h
    dh = float((sig * s).sum())
    return ds, dh


def fps_indices(points, n, start):
    """Farthest-point sampling: n center indices, ties to the lowest index."""
    m = points.shape[0]
    sel = np.empty(n, dtype=np.int64)
    sel[0] = start
    d2 = ((points - points[start]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        sel[i] = nxt
        cand = ((points - points[nxt]) ** 2).sum(axis=1)
        np.minimum(d2, cand, out=d2)
    return sel


def nearest_center(points, centers, chunk=512):
    """Index of the nearest center per point (ties to the lowest index)."""
    m = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        d2 = ((points[lo:hi, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        out[lo:hi] = np.argmin(d2, axis=1)
    return out


def marching_cubes(grid, iso):
    """Table-driven isosurface triangulation of a scalar grid.

    Returns (verts, tris) with vertices in grid index coordinates as a
    triangle soup (three fresh vertices per triangle, degenerate triangles
    dropped). Cells are visited in lexicographic order.
    """
    n0, n1, n2 = grid.shape
    case = np.zeros((n0 - 1, n1 - 1, n2 - 1), dtype=np.int64)
    for b, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        inside = grid[dx : dx + n0 - 1, dy : dy + n1 - 1, dz : dz + n2 - 1] < iso
        case |= inside.astype(np.int64) << b
    active = np.argwhere(EDGE_TABLE[case] != 0)
    verts = []
    tris = []
    corner = np.asarray(CORNER_OFFSETS, dtype=np.float64)
    for i, j, k in active:
        cidx = case[i, j, k]
        edges = EDGE_TABLE[cidx]
        vals = [grid[i + o[0], j + o[1], k + o[2]] for o in CORNER_OFFSETS]
        cell = np.array([i, j, k], dtype=np.float64)
        ev = np.empty((12, 3))
        for e in range(12):
            if not edges >> e & 1:
                continue
            a, b = EDGE_CORNERS[e]
            va, vb = vals[a], vals[b]
            t = (iso - va) / (vb - va)
            ev[e] = cell + corner[a] + t * (corner[b] - corner[a])
        row = TRI_TABLE[cidx]
        for t0 in range(0, 16, 3):
            if row[t0] < 0:
                break
            p0, p1, p2 = ev[row[t0]], ev[row[t0 + 1]], ev[row[t0 + 2]]
            area = 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0))
            if area <= 1e-12:
                continue
            base = len(verts)
            verts.extend((p0, p1, p2))
            tris.append((base, base + 1, base + 2))
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.asarray(verts), np.asarray(tris, dtype=np.int64)
