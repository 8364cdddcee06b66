"""Camera-modulated transformer machinery for the triplane decoder.

The decoder holds a learned sequence of triplane tokens that attend to
context tokens (encoded reference image, or encoded condition latents),
with every layer norm modulated by a camera embedding: scale/shift
predicted from the camera, applied as LN(f)·(1+gamma)+beta.  The two
context routes share the self-attention/MLP trunk but own separate
cross-attention weights, so conditioning can be trained without touching
the image-driven path.

Parameters are plain dicts of leaf Tensors; init_* functions build them,
forward functions consume them.  One forward pass runs under at most one
tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .triplane import Triplane

__all__ = [
    "ModulationParams", "TokenSequence", "LatentStats",
    "mod_ln", "modulation_from_camera", "attention", "cross_layer",
    "image_encode", "condition_encode", "triplane_decode",
    "init_linear", "init_attention", "init_mlp", "init_encoder_layer",
    "init_image_encoder", "init_condition_encoder", "init_triplane_decoder",
]


@dataclass
class ModulationParams:
    gamma: Tensor   # (D,)
    beta: Tensor    # (D,)


@dataclass
class TokenSequence:
    tokens: Tensor  # (L, D)
    role: str       # image | condition | triplane


@dataclass
class LatentStats:
    mu: Tensor      # (N_p, D)
    sigma: Tensor   # (N_p, D), positive


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def _xavier(rng: np.random.Generator, d_in: int, d_out: int) -> Tensor:
    lim = np.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-lim, lim, (d_in, d_out)).astype(np.float32),
                  requires_grad=True)


def init_linear(rng, d_in: int, d_out: int) -> dict:
    return {"w": _xavier(rng, d_in, d_out),
            "b": Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)}


def init_attention(rng, d_q: int, d_kv: int, d: int, d_out: int | None = None,
                   zero_out: bool = False) -> dict:
    """Multi-head attention weights.  `zero_out` zeroes the output
    projection so a fresh residual block starts as the identity."""
    d_out = d if d_out is None else d_out
    p = {"wq": _xavier(rng, d_q, d), "wk": _xavier(rng, d_kv, d),
         "wv": _xavier(rng, d_kv, d), "wo": _xavier(rng, d, d_out),
         "bq": Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
         "bk": Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
         "bv": Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
         "bo": Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)}
    if zero_out:
        p["wo"] = Tensor(np.zeros((d, d_out), dtype=np.float32),
                         requires_grad=True)
    return p


def init_mlp(rng, d: int, hidden: int, zero_out: bool = False) -> dict:
    p = {"w1": _xavier(rng, d, hidden), "w2": _xavier(rng, hidden, d),
         "b1": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
         "b2": Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)}
    if zero_out:
        p["w2"] = Tensor(np.zeros((hidden, d), dtype=np.float32),
                         requires_grad=True)
    return p


def init_encoder_layer(rng, d: int, mlp_ratio: int = 4) -> dict:
    return {"self_attn": init_attention(rng, d, d, d),
            "mlp": init_mlp(rng, d, mlp_ratio * d)}


def init_image_encoder(rng, d_e: int = 64, patch: int = 8,
                       image_size: int = 64, n_layers: int = 2,
                       channels: int = 3) -> dict:
    n_p = (image_size // patch) ** 2
    return {
        "patch": init_linear(rng, patch * patch * channels, d_e),
        "cls": Tensor(rng.normal(0, 0.02, (1, d_e)).astype(np.float32),
                      requires_grad=True),
        "pos": Tensor(rng.normal(0, 0.02, (n_p + 1, d_e)).astype(np.float32),
                      requires_grad=True),
        "layers": [init_encoder_layer(rng, d_e) for _ in range(n_layers)],
    }


def init_condition_encoder(rng, d_e: int = 64, patch: int = 8,
                           res: int = 64, d_lat: int = 64,
                           n_layers: int = 2) -> dict:
    n_p = (res // patch) ** 2
    return {
        "patch": init_linear(rng, patch * patch * d_lat, d_e),
        "pos": Tensor(rng.normal(0, 0.02, (n_p, d_e)).astype(np.float32),
                      requires_grad=True),
        "layers": [init_encoder_layer(rng, d_e) for _ in range(n_layers)],
        "mu_head": init_linear(rng, d_e, d_e),
        "sigma_head": init_linear(rng, d_e, d_e),
    }


def init_decoder_block(rng, d_f: int, d_ctx: int, d_cam: int,
                       mlp_ratio: int = 4) -> dict:
    # zeroed output projections: an untrained block is the identity on f
    mod = init_linear(rng, d_cam, 2 * d_f)
    mod["w"] = Tensor(np.zeros((d_cam, 2 * d_f), dtype=np.float32),
                      requires_grad=True)
    return {
        "mod": mod,
        "cross_image": init_attention(rng, d_f, d_ctx, d_f, zero_out=True),
        "cross_cond": init_attention(rng, d_f, d_ctx, d_f, zero_out=True),
        "self_attn": init_attention(rng, d_f, d_f, d_f, zero_out=True),
        "mlp": init_mlp(rng, d_f, mlp_ratio * d_f, zero_out=True),
    }


def init_triplane_decoder(rng, d_f: int = 64, d_ctx: int = 64,
                          d_cam: int = 64, d_t: int = 8, r_lo: int = 8,
                          n_layers: int = 4) -> dict:
    return {
        "f_in": Tensor(rng.normal(0, 0.02, (3 * r_lo * r_lo, d_f))
                       .astype(np.float32), requires_grad=True),
        "blocks": [init_decoder_block(rng, d_f, d_ctx, d_cam)
                   for _ in range(n_layers)],
        # shared transposed conv: (C_in, C_out, 4, 4), stride 2, pad 1
        "deconv": {"w": Tensor((rng.normal(0, 0.02, (d_f, d_t, 4, 4)))
                               .astype(np.float32), requires_grad=True),
                   "b": Tensor(np.zeros(d_t, dtype=np.float32),
                               requires_grad=True)},
    }


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, p: dict) -> Tensor:
    return x @ p["w"] + p["b"]


def mod_ln(f: Tensor, m: ModulationParams) -> Tensor:
    """LN(f) · (1 + gamma) + beta, widths checked."""
    if f.shape[-1] != m.gamma.shape[-1] or f.shape[-1] != m.beta.shape[-1]:
        raise ValueError(
            f"modulation width {m.gamma.shape[-1]} does not match token "
            f"width {f.shape[-1]}")
    return T.layer_norm(f, m.gamma + 1.0, m.beta)


def modulation_from_camera(cam: Tensor, p: dict) -> ModulationParams:
    """Single linear layer producing the (gamma, beta) pair."""
    out = linear(cam, p)
    d2 = out.shape[-1]
    if d2 % 2:
        raise ValueError(f"modulation layer output width {d2} is odd")
    half = d2 // 2
    return ModulationParams(gamma=out[..., :half], beta=out[..., half:])


def attention(q: Tensor, k: Tensor, v: Tensor, p: dict,
              n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with projections."""
    d = p["wq"].shape[1]
    if d % n_heads:
        raise ValueError(f"attention width {d} not divisible by "
                         f"{n_heads} heads")
    dh = d // n_heads
    lq, lk = q.shape[0], k.shape[0]
    qp = (q @ p["wq"] + p["bq"]).reshape(lq, n_heads, dh).transpose(1, 0, 2)
    kp = (k @ p["wk"] + p["bk"]).reshape(lk, n_heads, dh).transpose(1, 0, 2)
    vp = (v @ p["wv"] + p["bv"]).reshape(lk, n_heads, dh).transpose(1, 0, 2)
    scores = (qp @ kp.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
    att = T.softmax(scores, axis=-1)
    mixed = (att @ vp).transpose(1, 0, 2).reshape(lq, d)
    return mixed @ p["wo"] + p["bo"]


def mlp_forward(x: Tensor, p: dict) -> Tensor:
    return T.gelu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def _plain_ln(x: Tensor) -> Tensor:
    return T.layer_norm(x, np.float32(1.0), np.float32(0.0))


def encoder_layer(x: Tensor, p: dict, n_heads: int) -> Tensor:
    """Plain pre-norm transformer layer (no camera modulation)."""
    h = _plain_ln(x)
    x = x + attention(h, h, h, p["self_attn"], n_heads)
    return x + mlp_forward(_plain_ln(x), p["mlp"])


def cross_layer(f: TokenSequence, ctx: TokenSequence, m: ModulationParams,
                p: dict, kind: str, n_heads: int = 4) -> TokenSequence:
    """One decoder block: modulated cross-attention into the context,
    modulated self-attention, modulated MLP — each residual.

    `kind` selects which cross-attention weights fire ("image" -> the
    image route, "condition" -> the condition route); the context's role
    tag must agree.
    """
    if kind not in ("image", "condition"):
        raise ValueError(f"unknown cross-layer kind {kind!r}")
    if ctx.role != kind:
        raise ValueError(
            f"context role {ctx.role!r} does not match cross-layer kind "
            f"{kind!r}")
    cross_p = p["cross_image"] if kind == "image" else p["cross_cond"]
    ft = f.tokens
    h = mod_ln(ft, m)
    f1 = ft + attention(h, ctx.tokens, ctx.tokens, cross_p, n_heads)
    h = mod_ln(f1, m)
    f2 = f1 + attention(h, h, h, p["self_attn"], n_heads)
    out = f2 + mlp_forward(mod_ln(f2, m), p["mlp"])
    return TokenSequence(out, role="triplane")


def _patchify(x: Tensor, patch: int) -> Tensor:
    """(H, W, C) -> (N_p, patch*patch*C), row-major patch order."""
    h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(
            f"image size {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = x.reshape(gh, patch, gw, patch, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch * patch * c)


def image_encode(img, p: dict, patch: int = 8, n_heads: int = 4
                 ) -> TokenSequence:
    """Reference image -> [CLS] + patch tokens through a small
    from-scratch patch transformer."""
    x = img if isinstance(img, Tensor) else Tensor(np.asarray(img,
                                                              np.float32))
    tokens = linear(_patchify(x, patch), p["patch"])
    tokens = T.concat([p["cls"], tokens], axis=0) + p["pos"]
    for layer in p["layers"]:
        tokens = encoder_layer(tokens, layer, n_heads)
    return TokenSequence(tokens, role="image")


def _resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[:2]
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    uv = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    sampled = T.bilinear_sample(x, Tensor(uv))
    return sampled.reshape(out_h, out_w, x.shape[2])


def condition_encode(latents: Tensor, p: dict, rng=None,
                     train_mode: bool = False, patch: int = 8,
                     n_heads: int = 4) -> tuple[TokenSequence, LatentStats]:
    """Generator latents -> condition tokens via reparameterized sampling.

    The latent map is resized (bilinear) to the encoder's expected
    resolution if needed, patch-split into tokens, refined by plain
    transformer layers, then regressed to per-token (mu, sigma).  In
    train mode tokens are mu + sigma*eps with eps drawn from `rng`; in
    eval mode tokens are mu.
    """
    if not isinstance(latents, Tensor):
        latents = Tensor(np.asarray(latents, np.float32))
    d_patch, d_e = p["patch"]["w"].shape
    n_p = p["pos"].shape[0]
    side = int(np.sqrt(n_p))
    d_lat = d_patch // (patch * patch)
    want = side * patch
    if latents.shape[2] != d_lat:
        raise ValueError(
            f"latent width {latents.shape[2]} does not match encoder "
            f"width {d_lat}")
    if latents.shape[0] != want or latents.shape[1] != want:
        latents = _resize_bilinear(latents, want, want)
    tokens = linear(_patchify(latents, patch), p["patch"]) + p["pos"]
    for layer in p["layers"]:
        tokens = encoder_layer(tokens, layer, n_heads)
    mu = linear(tokens, p["mu_head"])
    sigma = T.softplus(linear(tokens, p["sigma_head"])) + 1e-6
    if train_mode:
        if rng is None:
            raise ValueError("train_mode sampling needs an rng")
        eps = rng.standard_normal((n_p, d_e)).astype(np.float32)
        g = mu + sigma * Tensor(eps)
    else:
        g = mu
    return TokenSequence(g, role="condition"), LatentStats(mu, sigma)


def triplane_decode(ctx: TokenSequence, cam: Tensor, p: dict, kind: str,
                    n_heads: int = 4) -> Triplane:
    """Learned triplane tokens attend to the context under camera
    modulation, then deconv-upsample into the three feature planes."""
    f_in = p["f_in"]
    L = f_in.shape[0]
    if L % 3:
        raise ValueError(f"triplane token count {L} is not 3*R*R")
    r_lo = int(np.sqrt(L // 3))
    if 3 * r_lo * r_lo != L:
        raise ValueError(f"triplane token count {L} is not 3*R*R")
    f = TokenSequence(f_in, role="triplane")
    for block in p["blocks"]:
        m = modulation_from_camera(cam, block["mod"])
        f = cross_layer(f, ctx, m, block, kind, n_heads=n_heads)
    tokens = _plain_ln(f.tokens)
    d_f = tokens.shape[1]
    planes = tokens.reshape(3, r_lo, r_lo, d_f)
    up = []
    w, b = p["deconv"]["w"], p["deconv"]["b"]
    for i in range(3):
        x = planes[i].transpose(2, 0, 1)            # (D_f, R_lo, R_lo)
        y = T.conv2d_transpose(x, w, b, stride=2, pad=1)
        up.append(y.transpose(1, 2, 0))             # (R, R, D_t)
    return Triplane(xy=up[0], yz=up[1], xz=up[2])
