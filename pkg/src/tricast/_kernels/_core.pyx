# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of _fallback.py — identical semantics, C-speed inner loops."""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport atan2, exp, floor, rint

cnp.import_array()

BACKEND = "cython"

ctypedef fused floating:
    float
    double

DEF PI = 3.141592653589793


def bilinear_forward(floating[:, :, ::1] plane, floating[::1] x, floating[::1] y):
    cdef Py_ssize_t h = plane.shape[0], w = plane.shape[1], d = plane.shape[2]
    cdef Py_ssize_t n = x.shape[0]
    if floating is float:
        out_np = np.empty((n, d), dtype=np.float32)
    else:
        out_np = np.empty((n, d), dtype=np.float64)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, c, x0, y0
    cdef floating fx, fy, w00, w01, w10, w11
    for i in range(n):
        x0 = <Py_ssize_t>floor(x[i])
        y0 = <Py_ssize_t>floor(y[i])
        if x0 < 0: x0 = 0
        if x0 > w - 2: x0 = w - 2
        if y0 < 0: y0 = 0
        if y0 > h - 2: y0 = h - 2
        fx = x[i] - <floating>x0
        fy = y[i] - <floating>y0
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for c in range(d):
            out[i, c] = (w00 * plane[y0, x0, c] + w01 * plane[y0, x0 + 1, c]
                         + w10 * plane[y0 + 1, x0, c] + w11 * plane[y0 + 1, x0 + 1, c])
    return out_np


def bilinear_backward(floating[:, :, ::1] plane, floating[::1] x, floating[::1] y,
                      floating[:, ::1] gout):
    cdef Py_ssize_t h = plane.shape[0], w = plane.shape[1], d = plane.shape[2]
    cdef Py_ssize_t n = x.shape[0]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dplane_np = np.zeros((h, w, d), dtype=dtype)
    dx_np = np.empty(n, dtype=dtype)
    dy_np = np.empty(n, dtype=dtype)
    cdef floating[:, :, ::1] dplane = dplane_np
    cdef floating[::1] dx = dx_np, dy = dy_np
    cdef Py_ssize_t i, c, x0, y0
    cdef floating fx, fy, g, ax, ay
    for i in range(n):
        x0 = <Py_ssize_t>floor(x[i])
        y0 = <Py_ssize_t>floor(y[i])
        if x0 < 0: x0 = 0
        if x0 > w - 2: x0 = w - 2
        if y0 < 0: y0 = 0
        if y0 > h - 2: y0 = h - 2
        fx = x[i] - <floating>x0
        fy = y[i] - <floating>y0
        ax = 0
        ay = 0
        for c in range(d):
            g = gout[i, c]
            dplane[y0, x0, c] += (1 - fx) * (1 - fy) * g
            dplane[y0, x0 + 1, c] += fx * (1 - fy) * g
            dplane[y0 + 1, x0, c] += (1 - fx) * fy * g
            dplane[y0 + 1, x0 + 1, c] += fx * fy * g
            ax += ((plane[y0, x0 + 1, c] - plane[y0, x0, c]) * (1 - fy)
                   + (plane[y0 + 1, x0 + 1, c] - plane[y0 + 1, x0, c]) * fy) * g
            ay += ((plane[y0 + 1, x0, c] - plane[y0, x0, c]) * (1 - fx)
                   + (plane[y0 + 1, x0 + 1, c] - plane[y0, x0 + 1, c]) * fx) * g
        dx[i] = ax
        dy[i] = ay
    return dplane_np, dx_np, dy_np


def composite_forward(floating[:, ::1] sigma, floating[:, :, ::1] rgb,
                      floating[:, ::1] delta, floating[:, ::1] tmid,
                      floating[::1] bg):
    cdef Py_ssize_t r = sigma.shape[0], s = sigma.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_np = np.empty((r, 5), dtype=dtype)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, k
    cdef double t_cur, t_next, w, acc_r, acc_g, acc_b, acc_t, wsum
    for i in range(r):
        t_cur = 1.0
        acc_r = 0; acc_g = 0; acc_b = 0; acc_t = 0; wsum = 0
        for k in range(s):
            t_next = t_cur * exp(-<double>(sigma[i, k] * delta[i, k]))
            w = t_cur - t_next
            acc_r += w * rgb[i, k, 0]
            acc_g += w * rgb[i, k, 1]
            acc_b += w * rgb[i, k, 2]
            acc_t += w * tmid[i, k]
            wsum += w
            t_cur = t_next
        out[i, 0] = <floating>(acc_r + (1.0 - wsum) * bg[0])
        out[i, 1] = <floating>(acc_g + (1.0 - wsum) * bg[1])
        out[i, 2] = <floating>(acc_b + (1.0 - wsum) * bg[2])
        out[i, 3] = <floating>acc_t
        out[i, 4] = <floating>wsum
    return out_np


def composite_backward(floating[:, ::1] sigma, floating[:, :, ::1] rgb,
                       floating[:, ::1] delta, floating[:, ::1] tmid,
                       floating[::1] bg, floating[:, ::1] gout):
    cdef Py_ssize_t r = sigma.shape[0], s = sigma.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dsigma_np = np.empty((r, s), dtype=dtype)
    drgb_np = np.empty((r, s, 3), dtype=dtype)
    cdef floating[:, ::1] dsigma = dsigma_np
    cdef floating[:, :, ::1] drgb = drgb_np
    # scratch: T_{k+1} and q_k per ray
    t_np = np.empty(s, dtype=np.float64)
    q_np = np.empty(s, dtype=np.float64)
    cdef double[::1] t_next = t_np, q = q_np
    cdef Py_ssize_t i, k
    cdef double t_cur, w, tail, gr, gg, gb, gacc, gopa
    for i in range(r):
        gr = gout[i, 0]; gg = gout[i, 1]; gb = gout[i, 2]
        gacc = gout[i, 3]; gopa = gout[i, 4]
        t_cur = 1.0
        for k in range(s):
            t_next[k] = t_cur * exp(-<double>(sigma[i, k] * delta[i, k]))
            q[k] = (gr * (rgb[i, k, 0] - bg[0]) + gg * (rgb[i, k, 1] - bg[1])
                    + gb * (rgb[i, k, 2] - bg[2]) + gacc * tmid[i, k] + gopa)
            w = t_cur - t_next[k]
            drgb[i, k, 0] = <floating>(w * gr)
            drgb[i, k, 1] = <floating>(w * gg)
            drgb[i, k, 2] = <floating>(w * gb)
            t_cur = t_next[k]
        tail = 0.0
        for k in range(s - 1, -1, -1):
            dsigma[i, k] = <floating>((t_next[k] * q[k] - tail) * delta[i, k])
            if k == 0:
                w = 1.0 - t_next[0]
            else:
                w = t_next[k - 1] - t_next[k]
            tail += w * q[k]
    return dsigma_np, drgb_np


def canny_nms(double[:, ::1] mag, double[:, ::1] gx, double[:, ::1] gy):
    cdef Py_ssize_t h = mag.shape[0], w = mag.shape[1]
    out_np = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    if h < 3 or w < 3:
        return out_np
    cdef Py_ssize_t i, j, dy, dx
    cdef long sector
    cdef double m
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            m = mag[i, j]
            sector = (<long>rint(atan2(gy[i, j], gx[i, j]) / (PI / 4.0))) % 4
            if sector < 0:
                sector += 4
            if sector == 0:
                dy = 0; dx = 1
            elif sector == 1:
                dy = 1; dx = 1
            elif sector == 2:
                dy = 1; dx = 0
            else:
                dy = 1; dx = -1
            if m > mag[i + dy, j + dx] and m >= mag[i - dy, j - dx]:
                out[i, j] = m
    return out_np


def canny_hysteresis(cnp.uint8_t[:, ::1] strong, cnp.uint8_t[:, ::1] weak):
    cdef Py_ssize_t h = strong.shape[0], w = strong.shape[1]
    edges_np = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] edges = edges_np
    stack_np = np.empty(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_np
    cdef Py_ssize_t top = 0, i, j, ni, nj, di, dj, idx
    for i in range(h):
        for j in range(w):
            if strong[i, j]:
                edges[i, j] = 1
                stack[top] = i * w + j
                top += 1
    while top > 0:
        top -= 1
        idx = stack[top]
        i = idx // w
        j = idx % w
        for di in range(-1, 2):
            for dj in range(-1, 2):
                ni = i + di
                nj = j + dj
                if 0 <= ni < h and 0 <= nj < w and weak[ni, nj] and not edges[ni, nj]:
                    edges[ni, nj] = 1
                    stack[top] = ni * w + nj
                    top += 1
    return edges_np
