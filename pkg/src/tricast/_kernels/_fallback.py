"""Pure-numpy reference implementations of the hot kernels.

Semantics live here; the compiled extension (`_core.pyx`) must match these
bit-for-bit up to float round-off.  Coordinates for plane sampling are texel
coordinates (x in [0, W-1], y in [0, H-1]); normalization and clamping happen
in the calling op.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def bilinear_forward(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample plane (H,W,D) at texel coords -> (N,D)."""
    h, w, _ = plane.shape
    x0 = np.clip(np.floor(x), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(np.intp)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    p00 = plane[y0, x0]
    p01 = plane[y0, x0 + 1]
    p10 = plane[y0 + 1, x0]
    p11 = plane[y0 + 1, x0 + 1]
    top = p00 + fx * (p01 - p00)
    bot = p10 + fx * (p11 - p10)
    return top + fy * (bot - top)


def bilinear_backward(
    plane: np.ndarray, x: np.ndarray, y: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of bilinear_forward: (dplane, dx, dy) at texel coords."""
    h, w, d = plane.shape
    x0 = np.clip(np.floor(x), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(np.intp)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy

    dplane = np.zeros_like(plane)
    flat = dplane.reshape(h * w, d)
    np.add.at(flat, y0 * w + x0, w00 * gout)
    np.add.at(flat, y0 * w + x0 + 1, w01 * gout)
    np.add.at(flat, (y0 + 1) * w + x0, w10 * gout)
    np.add.at(flat, (y0 + 1) * w + x0 + 1, w11 * gout)

    p00 = plane[y0, x0]
    p01 = plane[y0, x0 + 1]
    p10 = plane[y0 + 1, x0]
    p11 = plane[y0 + 1, x0 + 1]
    ddx = (p01 - p00) * (1 - fy) + (p11 - p10) * fy
    ddy = (p10 - p00) * (1 - fx) + (p11 - p01) * fx
    dx = (ddx * gout).sum(axis=1)
    dy = (ddy * gout).sum(axis=1)
    return dplane, dx, dy


def composite_forward(
    sigma: np.ndarray,
    rgb: np.ndarray,
    delta: np.ndarray,
    tmid: np.ndarray,
    bg: np.ndarray,
) -> np.ndarray:
    """Emission-absorption quadrature along rays.

    sigma, delta, tmid: (R,S); rgb: (R,S,3); bg: (3,).  Returns packed (R,5)
    columns [r, g, b, sum(w*t), opacity] where w_k = T_k * alpha_k.
    """
    a = sigma * delta
    s_incl = np.cumsum(a, axis=1)
    t_next = np.exp(-s_incl)          # T_{k+1}
    t_cur = np.empty_like(t_next)     # T_k
    t_cur[:, 0] = 1.0
    t_cur[:, 1:] = t_next[:, :-1]
    w = t_cur - t_next
    out = np.empty((sigma.shape[0], 5), dtype=sigma.dtype)
    wsum = w.sum(axis=1)
    out[:, :3] = np.einsum("rs,rsc->rc", w, rgb) + (1.0 - wsum)[:, None] * bg
    out[:, 3] = (w * tmid).sum(axis=1)
    out[:, 4] = wsum
    return out


def composite_backward(
    sigma: np.ndarray,
    rgb: np.ndarray,
    delta: np.ndarray,
    tmid: np.ndarray,
    bg: np.ndarray,
    gout: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of composite_forward w.r.t. sigma and rgb.

    With a_k = sigma_k*delta_k and w_m = T_m - T_{m+1}:
      dw_m/da_k = -w_m (k < m),  T_{m+1} (k = m),  0 (k > m)
    so dL/da_k = T_{k+1}*q_k - sum_{m>k} w_m q_m with q_m the per-sample
    sensitivity of the packed outputs.
    """
    a = sigma * delta
    s_incl = np.cumsum(a, axis=1)
    t_next = np.exp(-s_incl)
    t_cur = np.empty_like(t_next)
    t_cur[:, 0] = 1.0
    t_cur[:, 1:] = t_next[:, :-1]
    w = t_cur - t_next

    grgb = gout[:, :3]
    gacc = gout[:, 3]
    gopa = gout[:, 4]
    q = (
        np.einsum("rc,rsc->rs", grgb, rgb - bg[None, None, :])
        + gacc[:, None] * tmid
        + gopa[:, None]
    )
    wq = w * q
    # suffix sum over samples strictly after k
    suffix = np.cumsum(wq[:, ::-1], axis=1)[:, ::-1]
    tail = suffix - wq
    da = t_next * q - tail
    dsigma = da * delta
    drgb = w[:, :, None] * grgb[:, None, :]
    return dsigma, drgb


def canny_nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Non-maximum suppression: keep pixels that dominate both neighbors
    along the quantized gradient direction.  The comparison is asymmetric
    (> forward, >= backward) so a two-pixel plateau keeps exactly one pixel."""
    h, w = mag.shape
    out = np.zeros_like(mag)
    if h < 3 or w < 3:
        return out
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    sector = (np.round(ang / (np.pi / 4.0)).astype(np.int64)) % 4
    # neighbor offsets (dy, dx) per sector: 0 -> E/W, 1 -> NE/SW, 2 -> N/S, 3 -> NW/SE
    offs = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    core = np.s_[1:-1, 1:-1]
    m = mag[core]
    for s, (dy, dx) in offs.items():
        sel = sector[core] == s
        fwd = mag[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        bwd = mag[1 - dy : h - 1 - dy, 1 - dx : w - 1 - dx]
        keep = sel & (m >= bwd) & (m > fwd)
        out[core] = np.where(keep, m, out[core])
    return out


def canny_hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Grow strong edges through 8-connected weak pixels until fixpoint."""
    edges = strong.astype(bool)
    weak = weak.astype(bool)
    while True:
        grown = edges.copy()
        grown[1:, :] |= edges[:-1, :]
        grown[:-1, :] |= edges[1:, :]
        grown[:, 1:] |= edges[:, :-1]
        grown[:, :-1] |= edges[:, 1:]
        grown[1:, 1:] |= edges[:-1, :-1]
        grown[1:, :-1] |= edges[:-1, 1:]
        grown[:-1, 1:] |= edges[1:, :-1]
        grown[:-1, :-1] |= edges[1:, 1:]
        nxt = edges | (grown & weak)
        if (nxt == edges).all():
            return nxt.astype(np.uint8)
        edges = nxt
