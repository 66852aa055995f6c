"""Hot-path kernels for bilinear plane access.

Plane gathers and their backward scatters dominate training time; the JIT
versions here run ~20x faster than vectorized numpy at typical batch sizes.
Every kernel is a serial loop with a fixed accumulation order, so results
are deterministic and independent of thread count.  When numba is missing
the numpy fallbacks produce the same math (not necessarily the same last-bit
rounding, but each installation uses one path consistently).
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(f):
            return f
        return deco


@njit(cache=True, fastmath=False)
def _bil_gather_jit(plane, x0, x1, y0, y1, fx, fy, out, res):
    m_count, c_count = out.shape
    for m in range(m_count):
        i00 = y0[m] * res + x0[m]
        i01 = y0[m] * res + x1[m]
        i10 = y1[m] * res + x0[m]
        i11 = y1[m] * res + x1[m]
        w00 = (1.0 - fx[m]) * (1.0 - fy[m])
        w01 = fx[m] * (1.0 - fy[m])
        w10 = (1.0 - fx[m]) * fy[m]
        w11 = fx[m] * fy[m]
        for c in range(c_count):
            out[m, c] = (w00 * plane[i00, c] + w01 * plane[i01, c]
                         + w10 * plane[i10, c] + w11 * plane[i11, c])


@njit(cache=True, fastmath=False)
def _bil_scatter_jit(gplane, x0, x1, y0, y1, fx, fy, g, res):
    m_count, c_count = g.shape
    for m in range(m_count):
        i00 = y0[m] * res + x0[m]
        i01 = y0[m] * res + x1[m]
        i10 = y1[m] * res + x0[m]
        i11 = y1[m] * res + x1[m]
        w00 = (1.0 - fx[m]) * (1.0 - fy[m])
        w01 = fx[m] * (1.0 - fy[m])
        w10 = (1.0 - fx[m]) * fy[m]
        w11 = fx[m] * fy[m]
        for c in range(c_count):
            v = g[m, c]
            gplane[i00, c] += w00 * v
            gplane[i01, c] += w01 * v
            gplane[i10, c] += w10 * v
            gplane[i11, c] += w11 * v


@njit(cache=True, fastmath=False)
def _bil_coord_grad_jit(plane, x0, x1, y0, y1, fx, fy, g, gx, gy, res):
    m_count, c_count = g.shape
    for m in range(m_count):
        i00 = y0[m] * res + x0[m]
        i01 = y0[m] * res + x1[m]
        i10 = y1[m] * res + x0[m]
        i11 = y1[m] * res + x1[m]
        ax = 0.0
        ay = 0.0
        for c in range(c_count):
            v00 = plane[i00, c]
            v01 = plane[i01, c]
            v10 = plane[i10, c]
            v11 = plane[i11, c]
            ax += g[m, c] * ((1.0 - fy[m]) * (v01 - v00) + fy[m] * (v11 - v10))
            ay += g[m, c] * ((1.0 - fx[m]) * (v10 - v00) + fx[m] * (v11 - v01))
        gx[m] = ax
        gy[m] = ay


@njit(cache=True, fastmath=False)
def _row_scatter_jit(buf, idx, vals):
    m_count, c_count = vals.shape
    for m in range(m_count):
        r = idx[m]
        for c in range(c_count):
            buf[r, c] += vals[m, c]


@njit(cache=True, fastmath=False)
def _cube_mask_jit(pts, mat, off, center, half, out):
    n = pts.shape[0]
    for i in range(n):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        ok = True
        for a in range(3):
            c = mat[a, 0] * x + mat[a, 1] * y + mat[a, 2] * z + off[a] - center[a]
            if c < -half or c > half:
                ok = False
                break
        out[i] = ok


@njit(cache=True, fastmath=False)
def _sample_pdf_jit(cdf, edges, u, out):
    n, s = cdf.shape
    f = u.shape[1]
    for i in range(n):
        for j in range(f):
            uu = u[i, j]
            lo, hi = 0, s
            while lo < hi:
                mid = (lo + hi) // 2
                if uu >= cdf[i, mid]:
                    lo = mid + 1
                else:
                    hi = mid
            idx = min(lo, s - 1)
            c_lo = cdf[i, idx - 1] if idx > 0 else 0.0
            denom = cdf[i, idx] - c_lo
            if denom < 1e-12:
                denom = 1e-12
            frac = (uu - c_lo) / denom
            if frac < 0.0:
                frac = 0.0
            elif frac > 1.0:
                frac = 1.0
            out[i, j] = edges[i, idx] + frac * (edges[i, idx + 1] - edges[i, idx])


def bil_gather(plane, x0, x1, y0, y1, fx, fy, res: int):
    out = np.empty((x0.shape[0], plane.shape[1]), dtype=plane.dtype)
    if HAVE_NUMBA:
        _bil_gather_jit(plane, x0, x1, y0, y1, fx, fy, out, res)
        return out
    i00 = y0 * res + x0
    i01 = y0 * res + x1
    i10 = y1 * res + x0
    i11 = y1 * res + x1
    fxc = fx[:, None]
    fyc = fy[:, None]
    return ((1.0 - fxc) * (1.0 - fyc) * plane[i00] + fxc * (1.0 - fyc) * plane[i01]
            + (1.0 - fxc) * fyc * plane[i10] + fxc * fyc * plane[i11]).astype(plane.dtype)


def bil_scatter(gplane, x0, x1, y0, y1, fx, fy, g, res: int):
    """Accumulate bilinear corner contributions of g into gplane, in place."""
    if HAVE_NUMBA:
        _bil_scatter_jit(gplane, x0, x1, y0, y1, fx, fy, g, res)
        return
    idx = np.concatenate([y0 * res + x0, y0 * res + x1, y1 * res + x0, y1 * res + x1])
    fxc = fx[:, None]
    fyc = fy[:, None]
    vals = np.concatenate([(1.0 - fxc) * (1.0 - fyc) * g, fxc * (1.0 - fyc) * g,
                           (1.0 - fxc) * fyc * g, fxc * fyc * g], axis=0)
    c = vals.shape[1]
    flat = (idx[:, None] * c + np.arange(c, dtype=idx.dtype)).ravel()
    add = np.bincount(flat, weights=vals.ravel().astype(np.float64),
                      minlength=gplane.size).reshape(gplane.shape)
    gplane += add.astype(gplane.dtype)


def bil_coord_grad(plane, x0, x1, y0, y1, fx, fy, g, res: int):
    """d(output)/d(coords) summed over channels; returns (gx, gy) per sample."""
    gx = np.empty(x0.shape[0], dtype=np.float64)
    gy = np.empty(x0.shape[0], dtype=np.float64)
    if HAVE_NUMBA:
        _bil_coord_grad_jit(plane.astype(np.float64), x0, x1, y0, y1,
                            fx.astype(np.float64), fy.astype(np.float64),
                            g.astype(np.float64), gx, gy, res)
        return gx, gy
    i00 = y0 * res + x0
    i01 = y0 * res + x1
    i10 = y1 * res + x0
    i11 = y1 * res + x1
    v00, v01, v10, v11 = plane[i00], plane[i01], plane[i10], plane[i11]
    fxc = fx[:, None]
    fyc = fy[:, None]
    gx[:] = (g * ((1.0 - fyc) * (v01 - v00) + fyc * (v11 - v10))).sum(axis=1)
    gy[:] = (g * ((1.0 - fxc) * (v10 - v00) + fxc * (v11 - v01))).sum(axis=1)
    return gx, gy


def row_scatter(buf, idx, vals):
    """buf[idx] += vals with a fixed accumulation order, in place."""
    if vals.ndim == 1:
        vals = vals[:, None]
        buf2 = buf[:, None] if buf.ndim == 1 else buf
    else:
        buf2 = buf
    if HAVE_NUMBA:
        _row_scatter_jit(buf2, idx, vals)
        return
    c = vals.shape[1]
    flat = (idx[:, None] * c + np.arange(c, dtype=idx.dtype)).ravel()
    add = np.bincount(flat, weights=vals.ravel().astype(np.float64),
                      minlength=buf2.size).reshape(buf2.shape)
    buf2 += add.astype(buf2.dtype)


def affine_cube_mask(pts, mat, off, center, half: float):
    """In-cube test of pts under the affine map, fused into one pass."""
    if HAVE_NUMBA:
        out = np.empty(pts.shape[0], dtype=np.bool_)
        _cube_mask_jit(pts, np.ascontiguousarray(mat), off, center, float(half), out)
        return out
    xc = pts @ mat.T + off
    return np.abs(xc - center).max(axis=-1) <= half


def sample_pdf(cdf, edges, u):
    """Piecewise-linear inverse CDF lookup per row."""
    if HAVE_NUMBA:
        out = np.empty_like(u)
        _sample_pdf_jit(cdf, edges, u, out)
        return out
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    idx = np.minimum(idx, cdf.shape[1] - 1)
    cdf_hi = np.take_along_axis(cdf, idx, axis=1)
    cdf_lo = np.where(idx > 0, np.take_along_axis(cdf, np.maximum(idx - 1, 0), axis=1), 0.0)
    lo = np.take_along_axis(edges, idx, axis=1)
    hi = np.take_along_axis(edges, idx + 1, axis=1)
    denom = np.maximum(cdf_hi - cdf_lo, 1e-12)
    frac = np.clip((u - cdf_lo) / denom, 0.0, 1.0)
    return lo + frac * (hi - lo)
