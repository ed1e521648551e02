"""Pure numpy versions of the compiled kernels.

Same signatures and in-place conventions as ``_ckernels``; used when the
extension is not built or when ``TTOREG_PURE_PYTHON=1``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, stride, oshape):
    # (oz, oy, ox, kz, ky, kx, ci) view over the padded input
    v = sliding_window_view(xp, (3, 3, 3), axis=(0, 1, 2))
    v = v[::stride, ::stride, ::stride][: oshape[0], : oshape[1], : oshape[2]]
    return v.transpose(0, 1, 2, 4, 5, 6, 3)


def conv3d_forward(xp, wt, bias, out, stride):
    oz, oy, ox, co = out.shape
    cols = _windows(xp, stride, out.shape).reshape(oz * oy * ox, -1)
    out[...] = (cols @ wt.reshape(-1, co)).reshape(out.shape) + bias


def conv3d_backward_weight(xp, dy, dwt, stride):
    oz, oy, ox, co = dy.shape
    cols = _windows(xp, stride, dy.shape).reshape(oz * oy * ox, -1)
    dwt += (cols.T @ dy.reshape(-1, co)).reshape(dwt.shape)


def conv3d_backward_input(dy, wt, dxp, stride):
    oz, oy, ox, co = dy.shape
    flat = dy.reshape(-1, co)
    s = stride
    for kz in range(3):
        for ky in range(3):
            for kx in range(3):
                contrib = (flat @ wt[kz, ky, kx].T).reshape(oz, oy, ox, -1)
                dxp[kz:kz + s * oz:s, ky:ky + s * oy:s, kx:kx + s * ox:s] += contrib


def _corners(u, shape):
    nz, ny, nx = shape
    grids = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    out = []
    # component 0 of u moves along x, the fastest axis
    for axis, n, base in ((0, nx, grids[2]), (1, ny, grids[1]), (2, nz, grids[0])):
        p = base + u[..., axis].astype(np.float64)
        inside = ((p >= 0) & (p <= n - 1)).astype(u.dtype)
        p = np.clip(p, 0, n - 1)
        i0 = np.minimum(np.floor(p).astype(np.intp), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        f = (p - i0).astype(u.dtype)
        out.append((i0, i1, f, inside))
    return out


def sample_forward(vol, u, out):
    (x0, x1, gx, _), (y0, y1, gy, _), (z0, z1, gz, _) = _corners(u, vol.shape[:3])
    gx, gy, gz = gx[..., None], gy[..., None], gz[..., None]
    hx, hy, hz = 1 - gx, 1 - gy, 1 - gz
    c00 = vol[z0, y0, x0] * hx + vol[z0, y0, x1] * gx
    c01 = vol[z0, y1, x0] * hx + vol[z0, y1, x1] * gx
    c10 = vol[z1, y0, x0] * hx + vol[z1, y0, x1] * gx
    c11 = vol[z1, y1, x0] * hx + vol[z1, y1, x1] * gx
    out[...] = (c00 * hy + c01 * gy) * hz + (c10 * hy + c11 * gy) * gz


def sample_backward(vol, u, dout, dvol, du, want_dvol):
    (x0, x1, gx, ix), (y0, y1, gy, iy), (z0, z1, gz, iz) = _corners(u, vol.shape[:3])
    gx, gy, gz = gx[..., None], gy[..., None], gz[..., None]
    hx, hy, hz = 1 - gx, 1 - gy, 1 - gz
    v000, v001 = vol[z0, y0, x0], vol[z0, y0, x1]
    v010, v011 = vol[z0, y1, x0], vol[z0, y1, x1]
    v100, v101 = vol[z1, y0, x0], vol[z1, y0, x1]
    v110, v111 = vol[z1, y1, x0], vol[z1, y1, x1]
    g = dout
    sx = g * (((v001 - v000) * hy + (v011 - v010) * gy) * hz
              + ((v101 - v100) * hy + (v111 - v110) * gy) * gz)
    sy = g * (((v010 - v000) * hx + (v011 - v001) * gx) * hz
              + ((v110 - v100) * hx + (v111 - v101) * gx) * gz)
    sz = g * (((v100 - v000) * hx + (v101 - v001) * gx) * hy
              + ((v110 - v010) * hx + (v111 - v011) * gx) * gy)
    du[..., 0] = sx.sum(axis=-1) * ix
    du[..., 1] = sy.sum(axis=-1) * iy
    du[..., 2] = sz.sum(axis=-1) * iz
    if not want_dvol:
        return
    nz, ny, nx, nc = vol.shape
    size = nz * ny * nx
    corners = (
        (z0, y0, x0, hx * hy * hz), (z0, y0, x1, gx * hy * hz),
        (z0, y1, x0, hx * gy * hz), (z0, y1, x1, gx * gy * hz),
        (z1, y0, x0, hx * hy * gz), (z1, y0, x1, gx * hy * gz),
        (z1, y1, x0, hx * gy * gz), (z1, y1, x1, gx * gy * gz),
    )
    flat = dvol.reshape(size, nc)
    for zi, yi, xi, w in corners:
        idx = ((zi * ny + yi) * nx + xi).ravel()
        contrib = (g * w).reshape(-1, nc)
        for c in range(nc):
            flat[:, c] += np.bincount(idx, weights=contrib[:, c], minlength=size).astype(dvol.dtype)
