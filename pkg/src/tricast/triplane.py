"""The 3D latent: three axis-aligned feature planes, point feature lookup,
a small MLP decoding features to density/color, and differentiable
emission-absorption volume rendering.

Plane indexing convention (fixed here; the permutation test in the suite
guards it): plane "ab" is indexed [p_a, p_b] — the first named coordinate
selects the row, the second the column.  Point features are the
concatenation (xy, yz, xz), in that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .camera import CameraPose, RayBundle, generate_rays
from .tensor import NumericError, Tensor

__all__ = [
    "Triplane", "RenderOutput", "init_nerf_decoder", "sample_triplane",
    "decode_point", "volume_render", "render_image", "render_image_backprop",
]


@dataclass
class Triplane:
    """Three (R, R, D_t) feature planes: xy, yz, xz."""

    xy: Tensor
    yz: Tensor
    xz: Tensor

    def __post_init__(self):
        for name in ("xy", "yz", "xz"):
            p = getattr(self, name)
            if not isinstance(p, Tensor):
                setattr(self, name, Tensor(np.asarray(p)))
        shapes = {self.xy.shape, self.yz.shape, self.xz.shape}
        if len(shapes) != 1:
            raise ValueError(f"planes must share one shape, got {shapes}")
        if self.xy.ndim != 3:
            raise ValueError("each plane must be (resolution, resolution, features)")

    @property
    def planes(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.xy, self.yz, self.xz)

    @property
    def resolution(self) -> int:
        return self.xy.shape[0]

    @property
    def feature_width(self) -> int:
        return self.xy.shape[2]


@dataclass
class RenderOutput:
    """rgb in [0,1], expected termination distance, accumulated alpha.

    Fields are Tensors (flat (N,.) from volume_render, (H,W,.) from
    render_image); ``packed`` keeps the raw per-ray [r,g,b, sum(w*t), alpha]
    rows that the chunked-gradient path seeds from.
    """

    rgb: Tensor
    depth: Tensor
    opacity: Tensor
    packed: Tensor | None = None


# ---------------------------------------------------------------------------
# sampling and decoding
# ---------------------------------------------------------------------------

def sample_triplane(tp: Triplane, points) -> Tensor:
    """Features for N points in [-1,1]^3: concat of the three plane lookups.

    Differentiable w.r.t. the planes and (when given as a Tensor) the
    points.  Coordinates outside the box are clamped by the plane sampler.
    """
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N,3), got {pts.shape}")
    if not np.isfinite(pts.data).all():
        raise NumericError("sample_triplane: non-finite points")
    # plane "ab"[p_a, p_b]: rows follow a, columns follow b -> uv = (b, a)
    f_xy = T.bilinear_sample(tp.xy, pts[:, (1, 0)])
    f_yz = T.bilinear_sample(tp.yz, pts[:, (2, 1)])
    f_xz = T.bilinear_sample(tp.xz, pts[:, (2, 0)])
    return T.concat([f_xy, f_yz, f_xz], axis=1)


def init_nerf_decoder(rng: np.random.Generator, d_in: int,
                      hidden: int = 32) -> dict[str, Tensor]:
    """Three-hidden-layer GELU MLP with a 4-wide head (density + color)."""

    def lin(fan_in, fan_out):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        return Tensor((rng.standard_normal((fan_in, fan_out)) * scale).astype(np.float32),
                      requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    return {
        "w0": lin(d_in, hidden), "b0": zeros(hidden),
        "w1": lin(hidden, hidden), "b1": zeros(hidden),
        "w2": lin(hidden, hidden), "b2": zeros(hidden),
        "w3": lin(hidden, 4), "b3": zeros(4),
    }


def decode_point(feat, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Point features -> (density (N,), color (N,3)).

    Density goes through softplus (non-negative), color through sigmoid.
    """
    x = feat if isinstance(feat, Tensor) else Tensor(np.asarray(feat))
    if x.shape[-1] != params["w0"].shape[0]:
        raise ValueError(
            f"feature width {x.shape[-1]} != decoder input {params['w0'].shape[0]}")
    h = T.gelu(x @ params["w0"] + params["b0"])
    h = T.gelu(h @ params["w1"] + params["b1"])
    h = T.gelu(h @ params["w2"] + params["b2"])
    raw = h @ params["w3"] + params["b3"]
    sigma = T.softplus(raw[:, 0])
    rgb = T.sigmoid(raw[:, 1:4])
    return sigma, rgb


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def volume_render(tp: Triplane | None, rays: RayBundle, n_samples: int,
                  params: dict[str, Tensor] | None = None, *,
                  field_fn=None, background=(1.0, 1.0, 1.0),
                  jitter: np.ndarray | None = None,
                  rng: np.random.Generator | None = None) -> RenderOutput:
    """March every ray in ``rays`` and composite front to back.

    Each ray's [t_near, t_far] is split into n_samples equal bins; the
    sample sits mid-bin, or uniformly inside its bin when ``jitter``
    ((N, n_samples) in [0,1)) or ``rng`` provides stratified offsets.
    Rays missing the box come back as background with opacity 0.

    ``field_fn(points (M,3)) -> (sigma (M,), rgb (M,3))`` replaces the
    triplane + decoder (used by analytic-scene oracles); otherwise ``tp``
    and ``params`` supply the field.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    if field_fn is None and (tp is None or params is None):
        raise ValueError("need either (tp, params) or field_fn")
    n = len(rays)
    bgf = np.asarray(background, dtype=np.float64)

    hit_idx = np.nonzero(rays.hit)[0]
    nh = hit_idx.shape[0]
    if nh:
        o = rays.origins[hit_idx]
        d = rays.directions[hit_idx]
        tn = rays.t_near[hit_idx][:, None]
        tf = rays.t_far[hit_idx][:, None]
        if jitter is not None:
            u = np.asarray(jitter)[hit_idx]
        elif rng is not None:
            u = rng.uniform(0.0, 1.0, (nh, n_samples))
        else:
            u = 0.5
        frac = (np.arange(n_samples) + u) / n_samples       # (nh,S)
        tvals = tn + frac * (tf - tn)
        delta = np.broadcast_to((tf - tn) / n_samples, tvals.shape)
        pts = (o[:, None, :] + tvals[..., None] * d[:, None, :]).reshape(-1, 3)

        if field_fn is not None:
            sigma, rgb = field_fn(pts)
            sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma))
            rgb = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb))
        else:
            feats = sample_triplane(tp, pts)
            sigma, rgb = decode_point(feats, params)
        sigma = sigma.reshape(nh, n_samples)
        rgb = rgb.reshape(nh, n_samples, 3)
        bg = bgf.astype(sigma.dtype)
        hit_packed = T.composite(sigma, rgb, tvals.astype(sigma.dtype),
                                 delta.astype(sigma.dtype), bg)
    else:
        hit_packed = Tensor(np.zeros((0, 5), dtype=np.float32))

    if nh == n:
        packed = hit_packed
    else:
        miss_row = Tensor(np.concatenate([bgf, [0.0, 0.0]])[None, :]
                          .astype(hit_packed.dtype))
        table = T.concat([hit_packed, miss_row], axis=0)
        idx = np.full(n, nh, dtype=np.intp)
        idx[hit_idx] = np.arange(nh)
        packed = T.gather_rows(table, idx)

    rgb_out = packed[:, 0:3]
    opacity = packed[:, 4]
    depth = packed[:, 3] / T.clip_min(opacity, 1e-6)
    return RenderOutput(rgb=rgb_out, depth=depth, opacity=opacity, packed=packed)


def _assemble(outputs: list[RenderOutput], width: int, height: int) -> RenderOutput:
    packed = T.concat([o.packed for o in outputs], axis=0)
    rgb = packed[:, 0:3].reshape(height, width, 3)
    opacity = packed[:, 4].reshape(height, width)
    depth = (packed[:, 3] / T.clip_min(packed[:, 4], 1e-6)).reshape(height, width)
    return RenderOutput(rgb=rgb, depth=depth, opacity=opacity, packed=packed)


def render_image(tp: Triplane | None, pose: CameraPose, width: int, height: int,
                 chunk_size: int = 2048, n_samples: int = 128,
                 params: dict[str, Tensor] | None = None, *,
                 field_fn=None, background=(1.0, 1.0, 1.0),
                 rng: np.random.Generator | None = None) -> RenderOutput:
    """Render a full image, ``chunk_size`` rays at a time.

    Chunking partitions the ray set, so the output matches an unchunked
    render exactly; stratified jitter (when ``rng`` is given) is drawn for
    the whole image up front so the partition cannot change it.
    """
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    rays = generate_rays(pose, width, height)
    jitter = None
    if rng is not None:
        jitter = rng.uniform(0.0, 1.0, (len(rays), n_samples))
    outs = []
    for start in range(0, len(rays), chunk_size):
        stop = min(start + chunk_size, len(rays))
        chunk_jitter = None if jitter is None else jitter[start:stop]
        outs.append(volume_render(tp, rays.slice(start, stop), n_samples, params,
                                  field_fn=field_fn, background=background,
                                  jitter=chunk_jitter))
    return _assemble(outs, width, height)


def render_image_backprop(tp: Triplane, pose: CameraPose, width: int, height: int,
                          loss_fn, chunk_size: int = 2048, n_samples: int = 128,
                          params: dict[str, Tensor] | None = None, *,
                          background=(1.0, 1.0, 1.0),
                          rng: np.random.Generator | None = None):
    """Memory-bounded render + backward: trade compute for activations.

    Three passes: (1) render chunk by chunk with no tape, keeping only the
    packed pixel rows; (2) run ``loss_fn(RenderOutput)`` on a small tape
    whose leaf is the packed image, producing per-pixel gradients; (3)
    re-render each chunk on its own short-lived tape and backpropagate the
    matching pixel gradients into the plane and decoder leaves.  Gradients
    accumulate in ``.grad`` exactly as an unchunked backward would, but
    peak live activations stay proportional to one chunk plus the loss.

    Returns (loss value, RenderOutput of detached full-image tensors).
    """
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    rays = generate_rays(pose, width, height)
    jitter = None
    if rng is not None:
        jitter = rng.uniform(0.0, 1.0, (len(rays), n_samples))

    def chunk_bounds():
        for start in range(0, len(rays), chunk_size):
            yield start, min(start + chunk_size, len(rays))

    # pass 1: forward only
    rows = []
    with T.no_tape():
        for start, stop in chunk_bounds():
            cj = None if jitter is None else jitter[start:stop]
            out = volume_render(tp, rays.slice(start, stop), n_samples, params,
                                background=background, jitter=cj)
            rows.append(out.packed.data)
    packed_np = np.concatenate(rows, axis=0)

    # pass 2: loss on the packed image as a leaf
    leaf = Tensor(packed_np, requires_grad=True)
    with T.Tape() as loss_tape:
        rgb = leaf[:, 0:3].reshape(height, width, 3)
        opacity = leaf[:, 4].reshape(height, width)
        depth = (leaf[:, 3] / T.clip_min(leaf[:, 4], 1e-6)).reshape(height, width)
        loss = loss_fn(RenderOutput(rgb=rgb, depth=depth, opacity=opacity))
    loss_val = float(loss.data)
    loss_tape.backward(loss)
    pixel_grad = leaf.grad

    # pass 3: re-render each chunk and pull its pixel gradients through
    for start, stop in chunk_bounds():
        cj = None if jitter is None else jitter[start:stop]
        with T.Tape() as tape:
            out = volume_render(tp, rays.slice(start, stop), n_samples, params,
                                background=background, jitter=cj)
        tape.backward(out.packed, seed=pixel_grad[start:stop])

    full = RenderOutput(rgb=Tensor(packed_np[:, 0:3].reshape(height, width, 3)),
                        depth=Tensor((packed_np[:, 3]
                                      / np.maximum(packed_np[:, 4], 1e-6))
                                     .reshape(height, width)),
                        opacity=Tensor(packed_np[:, 4].reshape(height, width)))
    return loss_val, full
