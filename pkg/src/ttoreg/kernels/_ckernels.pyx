# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled inner loops for 3x3x3 convolution and trilinear sampling.

All arrays are channels-last and C-contiguous: volumes are ``(nz, ny, nx, c)``,
kernels are ``(kz, ky, kx, c_in, c_out)``.  Inputs to the convolution kernels
are already zero-padded by one voxel on every side.
"""

import numpy as np

ctypedef fused real:
    float
    double

cdef enum:
    XB = 4
    MAXC = 64
    NARROW = 4


def conv3d_forward(const real[:, :, :, ::1] xp, const real[:, :, :, :, ::1] wt,
                   const real[::1] bias, real[:, :, :, ::1] out, int stride):
    cdef const real[:, :, :, :, ::1] wtt
    if out.shape[3] > MAXC or xp.shape[3] > MAXC:
        raise ValueError("at most 64 channels supported")
    if out.shape[3] <= NARROW:
        wtt = np.ascontiguousarray(np.swapaxes(wt, 3, 4))
        _forward_narrow(xp, wtt, bias, out, stride)
    else:
        _forward_wide(xp, wt, bias, out, stride)


cdef void _forward_wide(const real[:, :, :, ::1] xp, const real[:, :, :, :, ::1] wt,
                        const real[::1] bias, real[:, :, :, ::1] out, int stride):
    cdef Py_ssize_t oz = out.shape[0], oy = out.shape[1], ox = out.shape[2]
    cdef Py_ssize_t co_n = out.shape[3], ci_n = xp.shape[3]
    cdef Py_ssize_t k3 = 3 * ci_n, rs = stride * ci_n
    cdef Py_ssize_t z, y, x, j, nb, kz, ky, c, co
    cdef real acc[XB][MAXC]
    cdef real xv0, xv1, xv2, xv3, wv
    cdef const real* xrow
    cdef const real* wrow
    cdef const real* wp
    with nogil:
        for z in range(oz):
            for y in range(oy):
                x = 0
                while x < ox:
                    nb = ox - x
                    if nb > XB:
                        nb = XB
                    for j in range(XB):
                        for co in range(co_n):
                            acc[j][co] = bias[co]
                    for kz in range(3):
                        for ky in range(3):
                            xrow = &xp[z * stride + kz, y * stride + ky, x * stride, 0]
                            wrow = &wt[kz, ky, 0, 0, 0]
                            if nb == XB:
                                for c in range(k3):
                                    xv0 = xrow[c]
                                    xv1 = xrow[c + rs]
                                    xv2 = xrow[c + 2 * rs]
                                    xv3 = xrow[c + 3 * rs]
                                    wp = wrow + c * co_n
                                    for co in range(co_n):
                                        wv = wp[co]
                                        acc[0][co] += xv0 * wv
                                        acc[1][co] += xv1 * wv
                                        acc[2][co] += xv2 * wv
                                        acc[3][co] += xv3 * wv
                            else:
                                for j in range(nb):
                                    for c in range(k3):
                                        xv0 = xrow[c + j * rs]
                                        wp = wrow + c * co_n
                                        for co in range(co_n):
                                            acc[j][co] += xv0 * wp[co]
                    for j in range(nb):
                        for co in range(co_n):
                            out[z, y, x + j, co] = acc[j][co]
                    x += XB


cdef void _forward_narrow(const real[:, :, :, ::1] xp, const real[:, :, :, :, ::1] wtt,
                          const real[::1] bias, real[:, :, :, ::1] out, int stride):
    # wtt is (kz, ky, kx, co, ci): vectorise over input channels instead
    cdef Py_ssize_t oz = out.shape[0], oy = out.shape[1], ox = out.shape[2]
    cdef Py_ssize_t co_n = out.shape[3], ci_n = xp.shape[3]
    cdef Py_ssize_t z, y, x, kz, ky, kx, c, co
    cdef real acc[NARROW][MAXC]
    cdef real s
    cdef const real* xrow
    cdef const real* wp
    with nogil:
        for z in range(oz):
            for y in range(oy):
                for x in range(ox):
                    for co in range(co_n):
                        for c in range(ci_n):
                            acc[co][c] = 0
                    for kz in range(3):
                        for ky in range(3):
                            for kx in range(3):
                                xrow = &xp[z * stride + kz, y * stride + ky, x * stride + kx, 0]
                                for co in range(co_n):
                                    wp = &wtt[kz, ky, kx, co, 0]
                                    for c in range(ci_n):
                                        acc[co][c] += xrow[c] * wp[c]
                    for co in range(co_n):
                        s = bias[co]
                        for c in range(ci_n):
                            s = s + acc[co][c]
                        out[z, y, x, co] = s


def conv3d_backward_weight(const real[:, :, :, ::1] xp, const real[:, :, :, ::1] dy,
                           real[:, :, :, :, ::1] dwt, int stride):
    """Accumulate dL/dW into ``dwt`` (caller zeroes it)."""
    cdef real[:, :, :, :, ::1] dwtt
    if dy.shape[3] <= NARROW:
        if xp.shape[3] > MAXC:
            raise ValueError("at most 64 channels supported")
        dwtt = np.zeros_like(np.swapaxes(dwt, 3, 4), order="C")
        _backward_weight_narrow(xp, dy, dwtt, stride)
        dwt_arr = np.asarray(dwt)
        dwt_arr += np.swapaxes(np.asarray(dwtt), 3, 4)
    else:
        _backward_weight_wide(xp, dy, dwt, stride)


cdef void _backward_weight_narrow(const real[:, :, :, ::1] xp, const real[:, :, :, ::1] dy,
                                  real[:, :, :, :, ::1] dwtt, int stride):
    cdef Py_ssize_t oz = dy.shape[0], oy = dy.shape[1], ox = dy.shape[2]
    cdef Py_ssize_t co_n = dy.shape[3], ci_n = xp.shape[3]
    cdef Py_ssize_t z, y, x, kz, ky, kx, c, co
    cdef real g
    cdef const real* xrow
    cdef real* dp
    with nogil:
        for z in range(oz):
            for y in range(oy):
                for x in range(ox):
                    for kz in range(3):
                        for ky in range(3):
                            for kx in range(3):
                                xrow = &xp[z * stride + kz, y * stride + ky, x * stride + kx, 0]
                                for co in range(co_n):
                                    g = dy[z, y, x, co]
                                    dp = &dwtt[kz, ky, kx, co, 0]
                                    for c in range(ci_n):
                                        dp[c] += g * xrow[c]


cdef void _backward_weight_wide(const real[:, :, :, ::1] xp, const real[:, :, :, ::1] dy,
                                real[:, :, :, :, ::1] dwt, int stride):
    cdef Py_ssize_t oz = dy.shape[0], oy = dy.shape[1], ox = dy.shape[2]
    cdef Py_ssize_t co_n = dy.shape[3], ci_n = xp.shape[3]
    cdef Py_ssize_t k3 = 3 * ci_n, rs = stride * ci_n
    cdef Py_ssize_t z, y, x, j, nb, kz, ky, c, co
    cdef real xv0, xv1, xv2, xv3
    cdef const real* xrow
    cdef real* dwp
    cdef real* dp
    cdef const real* d0
    cdef const real* d1
    cdef const real* d2
    cdef const real* d3
    with nogil:
        for z in range(oz):
            for y in range(oy):
                x = 0
                while x < ox:
                    nb = ox - x
                    if nb > XB:
                        nb = XB
                    for kz in range(3):
                        for ky in range(3):
                            xrow = &xp[z * stride + kz, y * stride + ky, x * stride, 0]
                            dwp = &dwt[kz, ky, 0, 0, 0]
                            if nb == XB:
                                d0 = &dy[z, y, x, 0]
                                d1 = d0 + co_n
                                d2 = d1 + co_n
                                d3 = d2 + co_n
                                for c in range(k3):
                                    xv0 = xrow[c]
                                    xv1 = xrow[c + rs]
                                    xv2 = xrow[c + 2 * rs]
                                    xv3 = xrow[c + 3 * rs]
                                    dp = dwp + c * co_n
                                    for co in range(co_n):
                                        dp[co] += (xv0 * d0[co] + xv1 * d1[co]
                                                   + xv2 * d2[co] + xv3 * d3[co])
                            else:
                                for j in range(nb):
                                    d0 = &dy[z, y, x + j, 0]
                                    for c in range(k3):
                                        xv0 = xrow[c + j * rs]
                                        dp = dwp + c * co_n
                                        for co in range(co_n):
                                            dp[co] += xv0 * d0[co]
                    x += XB


def conv3d_backward_input(const real[:, :, :, ::1] dy, const real[:, :, :, :, ::1] wt,
                          real[:, :, :, ::1] dxp, int stride):
    """Scatter dL/dx into the padded buffer ``dxp`` (caller zeroes and crops).

    Stride 1 is evaluated as a forward pass of the flipped, transposed kernel
    over the padded output gradient; other strides use the scatter loop.
    """
    if stride == 1:
        dy_arr = np.asarray(dy)
        dyp = np.pad(dy_arr, ((1, 1), (1, 1), (1, 1), (0, 0)))
        wflip = np.ascontiguousarray(np.asarray(wt)[::-1, ::-1, ::-1].swapaxes(3, 4))
        nz, ny, nx = dxp.shape[0] - 2, dxp.shape[1] - 2, dxp.shape[2] - 2
        dx = np.empty((nz, ny, nx, dxp.shape[3]), dtype=dy_arr.dtype)
        conv3d_forward(dyp, wflip, np.zeros(dxp.shape[3], dtype=dy_arr.dtype), dx, 1)
        np.asarray(dxp)[1:-1, 1:-1, 1:-1] += dx
    else:
        _backward_input_scatter(dy, wt, dxp, stride)


cdef void _backward_input_scatter(const real[:, :, :, ::1] dy, const real[:, :, :, :, ::1] wt,
                                  real[:, :, :, ::1] dxp, int stride):
    cdef Py_ssize_t oz = dy.shape[0], oy = dy.shape[1], ox = dy.shape[2]
    cdef Py_ssize_t co_n = dy.shape[3], ci_n = dxp.shape[3]
    cdef Py_ssize_t k3 = 3 * ci_n, rs = stride * ci_n
    cdef Py_ssize_t z, y, x, kz, ky, c, co
    cdef real s
    cdef real* dxrow
    cdef const real* wrow
    cdef const real* wp
    cdef const real* dyp
    with nogil:
        for z in range(oz):
            for y in range(oy):
                for x in range(ox):
                    dyp = &dy[z, y, x, 0]
                    for kz in range(3):
                        for ky in range(3):
                            dxrow = &dxp[z * stride + kz, y * stride + ky, x * stride, 0]
                            wrow = &wt[kz, ky, 0, 0, 0]
                            for c in range(k3):
                                wp = wrow + c * co_n
                                s = 0
                                for co in range(co_n):
                                    s = s + wp[co] * dyp[co]
                                dxrow[c] += s


cdef inline void _corner_setup(double p, Py_ssize_t n, Py_ssize_t* i0,
                               Py_ssize_t* i1, double* f, double* inside) noexcept nogil:
    inside[0] = 1.0
    if not (p > 0.0):  # also catches NaN
        if p != 0.0:
            inside[0] = 0.0
        p = 0.0
    elif p >= n - 1:
        if p > n - 1:
            inside[0] = 0.0
        p = n - 1
    i0[0] = <Py_ssize_t>p
    if i0[0] >= n - 1:
        i0[0] = n - 1
        i1[0] = n - 1
    else:
        i1[0] = i0[0] + 1
    f[0] = p - i0[0]


def sample_forward(const real[:, :, :, ::1] vol, const real[:, :, :, ::1] u, real[:, :, :, ::1] out):
    """out[z, y, x] = trilinear sample of vol at (x + ux, y + uy, z + uz), clamped."""
    cdef Py_ssize_t nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2], nc = vol.shape[3]
    cdef Py_ssize_t z, y, x, c, x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz, ix, iy, iz
    cdef real gx, gy, gz, hx, hy, hz, c00, c01, c10, c11
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    _corner_setup(x + <double>u[z, y, x, 0], nx, &x0, &x1, &fx, &ix)
                    _corner_setup(y + <double>u[z, y, x, 1], ny, &y0, &y1, &fy, &iy)
                    _corner_setup(z + <double>u[z, y, x, 2], nz, &z0, &z1, &fz, &iz)
                    gx = <real>fx
                    gy = <real>fy
                    gz = <real>fz
                    hx = 1 - gx
                    hy = 1 - gy
                    hz = 1 - gz
                    for c in range(nc):
                        c00 = vol[z0, y0, x0, c] * hx + vol[z0, y0, x1, c] * gx
                        c01 = vol[z0, y1, x0, c] * hx + vol[z0, y1, x1, c] * gx
                        c10 = vol[z1, y0, x0, c] * hx + vol[z1, y0, x1, c] * gx
                        c11 = vol[z1, y1, x0, c] * hx + vol[z1, y1, x1, c] * gx
                        out[z, y, x, c] = (c00 * hy + c01 * gy) * hz + (c10 * hy + c11 * gy) * gz


def sample_backward(const real[:, :, :, ::1] vol, const real[:, :, :, ::1] u, const real[:, :, :, ::1] dout,
                    real[:, :, :, ::1] dvol, real[:, :, :, ::1] du, bint want_dvol):
    """Accumulate gradients of the trilinear sampler into ``dvol`` and ``du``.

    ``du`` is overwritten; ``dvol`` is accumulated into (caller zeroes it) and
    ignored unless ``want_dvol``.  Coordinates that were clamped carry no
    gradient along the clamped axis.
    """
    cdef Py_ssize_t nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2], nc = vol.shape[3]
    cdef Py_ssize_t z, y, x, c, x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz, ix, iy, iz
    cdef real gx, gy, gz, hx, hy, hz, g, sx, sy, sz
    cdef real v000, v001, v010, v011, v100, v101, v110, v111
    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    _corner_setup(x + <double>u[z, y, x, 0], nx, &x0, &x1, &fx, &ix)
                    _corner_setup(y + <double>u[z, y, x, 1], ny, &y0, &y1, &fy, &iy)
                    _corner_setup(z + <double>u[z, y, x, 2], nz, &z0, &z1, &fz, &iz)
                    gx = <real>fx
                    gy = <real>fy
                    gz = <real>fz
                    hx = 1 - gx
                    hy = 1 - gy
                    hz = 1 - gz
                    sx = 0
                    sy = 0
                    sz = 0
                    for c in range(nc):
                        g = dout[z, y, x, c]
                        v000 = vol[z0, y0, x0, c]
                        v001 = vol[z0, y0, x1, c]
                        v010 = vol[z0, y1, x0, c]
                        v011 = vol[z0, y1, x1, c]
                        v100 = vol[z1, y0, x0, c]
                        v101 = vol[z1, y0, x1, c]
                        v110 = vol[z1, y1, x0, c]
                        v111 = vol[z1, y1, x1, c]
                        sx = sx + g * (((v001 - v000) * hy + (v011 - v010) * gy) * hz
                                       + ((v101 - v100) * hy + (v111 - v110) * gy) * gz)
                        sy = sy + g * (((v010 - v000) * hx + (v011 - v001) * gx) * hz
                                       + ((v110 - v100) * hx + (v111 - v101) * gx) * gz)
                        sz = sz + g * (((v100 - v000) * hx + (v101 - v001) * gx) * hy
                                       + ((v110 - v010) * hx + (v111 - v011) * gx) * gy)
                        if want_dvol:
                            dvol[z0, y0, x0, c] += g * hx * hy * hz
                            dvol[z0, y0, x1, c] += g * gx * hy * hz
                            dvol[z0, y1, x0, c] += g * hx * gy * hz
                            dvol[z0, y1, x1, c] += g * gx * gy * hz
                            dvol[z1, y0, x0, c] += g * hx * hy * gz
                            dvol[z1, y0, x1, c] += g * gx * hy * gz
                            dvol[z1, y1, x0, c] += g * hx * gy * gz
                            dvol[z1, y1, x1, c] += g * gx * gy * gz
                    du[z, y, x, 0] = sx * <real>ix
                    du[z, y, x, 1] = sy * <real>iy
                    du[z, y, x, 2] = sz * <real>iz
