# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: trilinear gather/scatter, 3x3x3 convolution, FPS,
nearest-center assignment and marching cubes. Same contracts as the pure
numpy lane in ``_ref``; summation orders may differ in the last ulps where
the reference uses BLAS."""

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport floor, sqrt
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy

cimport openmp

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

BACKEND = "c"

cnp.import_array()

_MC_CORNERS = np.ascontiguousarray(CORNER_OFFSETS)
_MC_EDGES = np.ascontiguousarray(EDGE_CORNERS)
_MC_EDGE_TABLE = np.ascontiguousarray(EDGE_TABLE)
_MC_TRI_TABLE = np.ascontiguousarray(TRI_TABLE)
_MC_TRI_COUNT = np.ascontiguousarray((TRI_TABLE >= 0).sum(axis=1) // 3)


def trilinear_gather(double[:, :, :, ::1] grid, double[:, ::1] u):
    cdef Py_ssize_t q = u.shape[0], c = grid.shape[3]
    cdef Py_ssize_t n0 = grid.shape[0], n1 = grid.shape[1], n2 = grid.shape[2]
    out_arr = np.empty((q, c))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, ch, i0, j0, k0
    cdef double fx, fy, fz, gx, gy, gz
    cdef double w000, w001, w010, w011, w100, w101, w110, w111
    for p in prange(q, nogil=True, schedule="static"):
        i0 = _cell(u[p, 0], n0)
        j0 = _cell(u[p, 1], n1)
        k0 = _cell(u[p, 2], n2)
        fx = u[p, 0] - i0
        fy = u[p, 1] - j0
        fz = u[p, 2] - k0
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz
        w001 = gx * gy * fz
        w010 = gx * fy * gz
        w011 = gx * fy * fz
        w100 = fx * gy * gz
        w101 = fx * gy * fz
        w110 = fx * fy * gz
        w111 = fx * fy * fz
        for ch in range(c):
            out[p, ch] = (
                w000 * grid[i0, j0, k0, ch]
                + w001 * grid[i0, j0, k0 + 1, ch]
                + w010 * grid[i0, j0 + 1, k0, ch]
                + w011 * grid[i0, j0 + 1, k0 + 1, ch]
                + w100 * grid[i0 + 1, j0, k0, ch]
                + w101 * grid[i0 + 1, j0, k0 + 1, ch]
                + w110 * grid[i0 + 1, j0 + 1, k0, ch]
                + w111 * grid[i0 + 1, j0 + 1, k0 + 1, ch]
            )
    return out_arr


cdef inline Py_ssize_t _cell(double u, Py_ssize_t n) nogil:
    cdef Py_ssize_t i = <Py_ssize_t>floor(u)
    if i > n - 2:
        i = n - 2
    if i < 0:
        i = 0
    return i


def trilinear_scatter(double[:, ::1] u, double[:, ::1] dout, shape):
    cdef Py_ssize_t n0 = shape[0], n1 = shape[1], n2 = shape[2]
    cdef Py_ssize_t q = u.shape[0], c = dout.shape[1]
    dgrid_arr = np.zeros((n0, n1, n2, c))
    cdef double[:, :, :, ::1] dgrid = dgrid_arr
    cdef Py_ssize_t p, ch, i0, j0, k0
    cdef double fx, fy, fz, gx, gy, gz, g
    for p in range(q):
        i0 = _cell(u[p, 0], n0)
        j0 = _cell(u[p, 1], n1)
        k0 = _cell(u[p, 2], n2)
        fx = u[p, 0] - i0
        fy = u[p, 1] - j0
        fz = u[p, 2] - k0
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for ch in range(c):
            g = dout[p, ch]
            dgrid[i0, j0, k0, ch] += gx * gy * gz * g
            dgrid[i0, j0, k0 + 1, ch] += gx * gy * fz * g
            dgrid[i0, j0 + 1, k0, ch] += gx * fy * gz * g
            dgrid[i0, j0 + 1, k0 + 1, ch] += gx * fy * fz * g
            dgrid[i0 + 1, j0, k0, ch] += fx * gy * gz * g
            dgrid[i0 + 1, j0, k0 + 1, ch] += fx * gy * fz * g
            dgrid[i0 + 1, j0 + 1, k0, ch] += fx * fy * gz * g
            dgrid[i0 + 1, j0 + 1, k0 + 1, ch] += fx * fy * fz * g
    return dgrid_arr


def scatter_add_rows(double[:, ::1] vals, cnp.int64_t[::1] idx, Py_ssize_t nrows):
    cdef Py_ssize_t m = vals.shape[0], c = vals.shape[1]
    out_arr = np.zeros((nrows, c))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, ch, row
    for p in range(m):
        row = idx[p]
        for ch in range(c):
            out[row, ch] += vals[p, ch]
    return out_arr


cdef extern from *:
    """
    /* One z-row of a 3x3x3 convolution for a single kernel offset.
       restrict qualifiers let the compiler vectorize the channel loops;
       all-zero input cells (empty pooled voxels) are skipped. */
    static void pr_conv_row_gen(double* restrict buf, const double* restrict inrow,
                                const double* restrict krow, long nk, long cin, long cout) {
        for (long k = 0; k < nk; k++) {
            const double* in = inrow + k * cin;
            double* out = buf + k * cout;
            long nz = 0;
            for (long ci = 0; ci < cin; ci++) if (in[ci] != 0.0) { nz = 1; break; }
            if (!nz) continue;
            for (long ci = 0; ci < cin; ci++) {
                double v = in[ci];
                const double* kr = krow + ci * cout;
                for (long co = 0; co < cout; co++) out[co] += v * kr[co];
            }
        }
    }
    /* fixed 16x16 channel block: fully unrolled and vectorized */
    static void pr_conv_row16(double* restrict buf, const double* restrict inrow,
                              const double* restrict krow, long nk) {
        for (long k = 0; k < nk; k++) {
            const double* in = inrow + k * 16;
            double* out = buf + k * 16;
            long nz = 0;
            for (long ci = 0; ci < 16; ci++) if (in[ci] != 0.0) { nz = 1; break; }
            if (!nz) continue;
            for (long ci = 0; ci < 16; ci++) {
                double v = in[ci];
                const double* kr = krow + ci * 16;
                for (long co = 0; co < 16; co++) out[co] += v * kr[co];
            }
        }
    }
    static void pr_conv_row(double* restrict buf, const double* restrict inrow,
                            const double* restrict krow, long nk, long cin, long cout) {
        if (cin == 16 && cout == 16) pr_conv_row16(buf, inrow, krow, nk);
        else pr_conv_row_gen(buf, inrow, krow, nk, cin, cout);
    }
    /* Outer-product accumulation dk[ci,co] += in[k,ci] * dr[k,co] over a z-row. */
    static void pr_outer_row_gen(double* restrict dk, const double* restrict inrow,
                                 const double* restrict drow, long nk, long cin, long cout) {
        for (long k = 0; k < nk; k++) {
            const double* in = inrow + k * cin;
            const double* dr = drow + k * cout;
            long nz = 0;
            for (long ci = 0; ci < cin; ci++) if (in[ci] != 0.0) { nz = 1; break; }
            if (!nz) continue;
            for (long ci = 0; ci < cin; ci++) {
                double v = in[ci];
                double* row = dk + ci * cout;
                for (long co = 0; co < cout; co++) row[co] += v * dr[co];
            }
        }
    }
    static void pr_outer_row16(double* restrict dk, const double* restrict inrow,
                               const double* restrict drow, long nk) {
        for (long k = 0; k < nk; k++) {
            const double* in = inrow + k * 16;
            const double* dr = drow + k * 16;
            long nz = 0;
            for (long ci = 0; ci < 16; ci++) if (in[ci] != 0.0) { nz = 1; break; }
            if (!nz) continue;
            for (long ci = 0; ci < 16; ci++) {
                double v = in[ci];
                double* row = dk + ci * 16;
                for (long co = 0; co < 16; co++) row[co] += v * dr[co];
            }
        }
    }
    static void pr_outer_row(double* restrict dk, const double* restrict inrow,
                             const double* restrict drow, long nk, long cin, long cout) {
        if (cin == 16 && cout == 16) pr_outer_row16(dk, inrow, drow, nk);
        else pr_outer_row_gen(dk, inrow, drow, nk, cin, cout);
    }
    """
    void pr_conv_row(double* buf, const double* inrow, const double* krow,
                     long nk, long cin, long cout) nogil
    void pr_outer_row(double* dk, const double* inrow, const double* drow,
                      long nk, long cin, long cout) nogil


def conv3x3(double[:, :, :, ::1] grid, double[:, :, ::1] kernel, double[::1] bias):
    cdef Py_ssize_t n0 = grid.shape[0], n1 = grid.shape[1], n2 = grid.shape[2]
    cdef Py_ssize_t cin = grid.shape[3], cout = kernel.shape[2]
    out_arr = np.empty((n0, n1, n2, cout))
    cdef double[:, :, :, ::1] outv = out_arr
    cdef double* out = &outv[0, 0, 0, 0]
    cdef const double* g = &grid[0, 0, 0, 0]
    cdef const double* kern = &kernel[0, 0, 0]
    cdef const double* bp = &bias[0]
    cdef double* buf
    cdef Py_ssize_t i, j, k, o, dx, dy, dz, ii, jj, co, k_lo, k_hi
    # cell-major: the output row is accumulated once in a private buffer,
    # so main-memory traffic stays near one read of the grid per offset
    for i in prange(n0, nogil=True, schedule="static"):
        buf = <double*> malloc(n2 * cout * sizeof(double))
        for j in range(n1):
            for k in range(n2):
                for co in range(cout):
                    buf[k * cout + co] = bp[co]
            for o in range(27):
                dx = o // 9 - 1
                dy = (o // 3) % 3 - 1
                dz = o % 3 - 1
                ii = i + dx
                jj = j + dy
                if ii < 0 or ii >= n0 or jj < 0 or jj >= n1:
                    continue
                k_lo = -dz if dz < 0 else 0
                k_hi = n2 - dz if dz > 0 else n2
                pr_conv_row(
                    buf + k_lo * cout,
                    g + (((ii * n1 + jj) * n2) + k_lo + dz) * cin,
                    kern + o * cin * cout,
                    k_hi - k_lo,
                    cin,
                    cout,
                )
            memcpy(out + ((i * n1 + j) * n2) * cout, buf, n2 * cout * sizeof(double))
        free(buf)
    return out_arr


def conv3x3_grad_input(dout, kernel):
    flipped = np.ascontiguousarray(kernel[::-1].transpose(0, 2, 1))
    zero = np.zeros(kernel.shape[1])
    return conv3x3(dout, flipped, zero)


def conv3x3_grad_kernel(double[:, :, :, ::1] grid, double[:, :, :, ::1] dout):
    cdef Py_ssize_t n0 = grid.shape[0], n1 = grid.shape[1], n2 = grid.shape[2]
    cdef Py_ssize_t cin = grid.shape[3], cout = dout.shape[3]
    cdef int nthreads = openmp.omp_get_max_threads()
    partial_arr = np.zeros((nthreads, 27, cin, cout))
    cdef double[:, :, :, ::1] pv = partial_arr
    cdef double* partial = &pv[0, 0, 0, 0]
    cdef const double* g = &grid[0, 0, 0, 0]
    cdef const double* d = &dout[0, 0, 0, 0]
    cdef double* base
    cdef Py_ssize_t i, j, o, dx, dy, dz, ii, jj, k_lo, k_hi
    for i in prange(n0, nogil=True, schedule="static"):
        base = partial + openmp.omp_get_thread_num() * 27 * cin * cout
        for j in range(n1):
            for o in range(27):
                dx = o // 9 - 1
                dy = (o // 3) % 3 - 1
                dz = o % 3 - 1
                ii = i + dx
                jj = j + dy
                if ii < 0 or ii >= n0 or jj < 0 or jj >= n1:
                    continue
                k_lo = -dz if dz < 0 else 0
                k_hi = n2 - dz if dz > 0 else n2
                pr_outer_row(
                    base + o * cin * cout,
                    g + (((ii * n1 + jj) * n2) + k_lo + dz) * cin,
                    d + (((i * n1 + j) * n2) + k_lo) * cout,
                    k_hi - k_lo,
                    cin,
                    cout,
                )
    dk = partial_arr.sum(axis=0)
    db = np.asarray(dout).reshape(-1, cout).sum(axis=0)
    return dk, db


def fps_indices(double[:, ::1] points, Py_ssize_t n, Py_ssize_t start):
    cdef Py_ssize_t m = points.shape[0]
    sel_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] sel = sel_arr
    d2_arr = np.empty(m)
    cdef double[::1] d2 = d2_arr
    cdef Py_ssize_t i, p, best
    cdef double bx, by, bz, dx, dy, dz, d, bestd
    sel[0] = start
    bx = points[start, 0]
    by = points[start, 1]
    bz = points[start, 2]
    for p in range(m):
        dx = points[p, 0] - bx
        dy = points[p, 1] - by
        dz = points[p, 2] - bz
        d2[p] = dx * dx + dy * dy + dz * dz
    for i in range(1, n):
        best = 0
        bestd = d2[0]
        for p in range(1, m):
            if d2[p] > bestd:
                bestd = d2[p]
                best = p
        sel[i] = best
        bx = points[best, 0]
        by = points[best, 1]
        bz = points[best, 2]
        for p in range(m):
            dx = points[p, 0] - bx
            dy = points[p, 1] - by
            dz = points[p, 2] - bz
            d = dx * dx + dy * dy + dz * dz
            if d < d2[p]:
                d2[p] = d
    return sel_arr


def nearest_center(double[:, ::1] points, double[:, ::1] centers, chunk=512):
    cdef Py_ssize_t m = points.shape[0], g = centers.shape[0]
    out_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t p, c, best
    cdef double dx, dy, dz, d, bestd
    for p in prange(m, nogil=True, schedule="static"):
        best = 0
        bestd = 1e300
        for c in range(g):
            dx = points[p, 0] - centers[c, 0]
            dy = points[p, 1] - centers[c, 1]
            dz = points[p, 2] - centers[c, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < bestd:
                bestd = d
                best = c
        out[p] = best
    return out_arr


def marching_cubes(double[:, :, ::1] grid, double iso):
    cdef Py_ssize_t n0 = grid.shape[0], n1 = grid.shape[1], n2 = grid.shape[2]
    cdef cnp.int64_t[:, ::1] corners = _MC_CORNERS
    cdef cnp.int64_t[:, ::1] edges = _MC_EDGES
    cdef cnp.int64_t[::1] edge_table = _MC_EDGE_TABLE
    cdef cnp.int64_t[:, ::1] tri_table = _MC_TRI_TABLE
    cdef cnp.int64_t[::1] tri_count = _MC_TRI_COUNT

    # first pass: upper bound on the number of triangles
    cdef Py_ssize_t i, j, k, b, cap = 0
    cdef int cidx
    for i in range(n0 - 1):
        for j in range(n1 - 1):
            for k in range(n2 - 1):
                cidx = 0
                for b in range(8):
                    if grid[i + corners[b, 0], j + corners[b, 1], k + corners[b, 2]] < iso:
                        cidx = cidx | (1 << b)
                cap += tri_count[cidx]
    verts_arr = np.empty((cap * 3, 3))
    tris_arr = np.empty((cap, 3), dtype=np.int64)
    cdef double[:, ::1] verts = verts_arr
    cdef cnp.int64_t[:, ::1] tris = tris_arr

    cdef double vals[8]
    cdef double ev[12][3]
    cdef Py_ssize_t e, a, bb, t0, nv = 0, nt = 0, ax
    cdef cnp.int64_t mask
    cdef double va, vb, t
    cdef double p0[3]
    cdef double p1[3]
    cdef double p2[3]
    cdef double ux, uy, uz, vx, vy, vz, cx, cy, cz, area2
    for i in range(n0 - 1):
        for j in range(n1 - 1):
            for k in range(n2 - 1):
                cidx = 0
                for b in range(8):
                    vals[b] = grid[i + corners[b, 0], j + corners[b, 1], k + corners[b, 2]]
                    if vals[b] < iso:
                        cidx = cidx | (1 << b)
                mask = edge_table[cidx]
                if mask == 0:
                    continue
                for e in range(12):
                    if not mask >> e & 1:
                        continue
                    a = edges[e, 0]
                    bb = edges[e, 1]
                    va = vals[a]
                    vb = vals[bb]
                    t = (iso - va) / (vb - va)
                    ev[e][0] = i + corners[a, 0] + t * (corners[bb, 0] - corners[a, 0])
                    ev[e][1] = j + corners[a, 1] + t * (corners[bb, 1] - corners[a, 1])
                    ev[e][2] = k + corners[a, 2] + t * (corners[bb, 2] - corners[a, 2])
                for t0 in range(0, 16, 3):
                    if tri_table[cidx, t0] < 0:
                        break
                    for ax in range(3):
                        p0[ax] = ev[tri_table[cidx, t0]][ax]
                        p1[ax] = ev[tri_table[cidx, t0 + 1]][ax]
                        p2[ax] = ev[tri_table[cidx, t0 + 2]][ax]
                    ux = p1[0] - p0[0]
                    uy = p1[1] - p0[1]
                    uz = p1[2] - p0[2]
                    vx = p2[0] - p0[0]
                    vy = p2[1] - p0[1]
                    vz = p2[2] - p0[2]
                    cx = uy * vz - uz * vy
                    cy = uz * vx - ux * vz
                    cz = ux * vy - uy * vx
                    area2 = 0.5 * sqrt(cx * cx + cy * cy + cz * cz)
                    if area2 <= 1e-12:
                        continue
                    for ax in range(3):
                        verts[nv, ax] = p0[ax]
                        verts[nv + 1, ax] = p1[ax]
                        verts[nv + 2, ax] = p2[ax]
                    tris[nt, 0] = nv
                    tris[nt, 1] = nv + 1
                    tris[nt, 2] = nv + 2
                    nv += 3
                    nt += 1
    return verts_arr[:nv].copy(), tris_arr[:nt].copy()
