"""Conditional 2D generator: condition image + text + noise -> latent map.

A small U-Net (three resolution levels, transformer bottleneck) turns a
condition map into a latent feature image.  Text enters as a style
vector: prompt tokens are embedded from a learned table, pooled, mixed
with Gaussian noise, and pushed through a 3-layer MLP; the style vector
is added (after a per-block linear projection) to every convolution
output.  Per-condition-kind 1x1 input stems let one backbone serve
edge/sketch/depth/normal inputs.  A 3-conv auxiliary head decodes the
latents back to an RGB image used for extra supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .scenes import CONDITION_KINDS
from .tensor import Tensor

__all__ = [
    "Prompt", "default_vocab", "load_vocab", "tokenize",
    "text_embed", "make_style", "generate_latents", "aux_decode",
    "init_text_table", "init_style_mlp", "init_generator",
    "init_aux_decoder", "condition_channels",
]

_DEFAULT_TOKENS = (
    "a", "and", "red", "green", "blue", "yellow", "purple", "orange",
    "cyan", "sphere", "box", "torus",
)


@dataclass
class Prompt:
    ids: list[int]
    text: str = ""


def default_vocab() -> dict[str, int]:
    return {tok: i for i, tok in enumerate(_DEFAULT_TOKENS)}


def load_vocab(path: str) -> dict[str, int]:
    """Newline-separated token file; index = line number."""
    with open(path) as f:
        toks = [line.strip() for line in f if line.strip()]
    return {tok: i for i, tok in enumerate(toks)}


def tokenize(text: str, vocab: dict[str, int] | None = None) -> Prompt:
    vocab = default_vocab() if vocab is None else vocab
    ids = []
    for word in text.split():
        if word not in vocab:
            raise ValueError(f"unknown prompt token {word!r}")
        ids.append(vocab[word])
    return Prompt(ids=ids, text=text)


def condition_channels(kind: str) -> int:
    if kind not in CONDITION_KINDS:
        raise ValueError(f"unknown condition kind {kind!r}")
    return 3 if kind == "normal" else 1


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def _xavier(rng, d_in, d_out):
    lim = np.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-lim, lim, (d_in, d_out)).astype(np.float32),
                  requires_grad=True)


def _lin(rng, d_in, d_out):
    return {"w": _xavier(rng, d_in, d_out),
            "b": Tensor(np.zeros(d_out, np.float32), requires_grad=True)}


def _conv(rng, c_in, c_out, k):
    fan = c_in * k * k + c_out * k * k
    lim = np.sqrt(6.0 / fan)
    return {"w": Tensor(rng.uniform(-lim, lim, (c_out, c_in, k, k))
                        .astype(np.float32), requires_grad=True),
            "b": Tensor(np.zeros(c_out, np.float32), requires_grad=True)}


def _deconv(rng, c_in, c_out, k=4):
    fan = c_in * k * k + c_out * k * k
    lim = np.sqrt(6.0 / fan)
    return {"w": Tensor(rng.uniform(-lim, lim, (c_in, c_out, k, k))
                        .astype(np.float32), requires_grad=True),
            "b": Tensor(np.zeros(c_out, np.float32), requires_grad=True)}


def init_text_table(rng, vocab_size: int = len(_DEFAULT_TOKENS),
                    d_txt: int = 32) -> Tensor:
    return Tensor(rng.normal(0, 0.2, (vocab_size, d_txt)).astype(np.float32),
                  requires_grad=True)


def init_style_mlp(rng, d_txt: int = 32, d_noise: int = 32,
                   d_style: int = 64) -> dict:
    return {"l1": _lin(rng, d_txt + d_noise, d_style),
            "l2": _lin(rng, d_style, d_style),
            "l3": _lin(rng, d_style, d_style),
            "d_noise": d_noise}


def init_generator(rng, widths: tuple[int, int, int] = (32, 64, 96),
                   d_style: int = 64, d_lat: int = 64,
                   n_bottleneck: int = 2, bottleneck_heads: int = 4,
                   kinds: tuple[str, ...] = CONDITION_KINDS) -> dict:
    from .blocks import init_encoder_layer
    w0, w1, w2 = widths
    p = {
        "widths": widths,
        "stems": {k: _conv(rng, condition_channels(k), w0, 1)
                  for k in kinds},
        "enc0": _conv(rng, w0, w0, 3), "style0": _lin(rng, d_style, w0),
        "down0": _conv(rng, w0, w1, 3),
        "enc1": _conv(rng, w1, w1, 3), "style1": _lin(rng, d_style, w1),
        "down1": _conv(rng, w1, w2, 3),
        "enc2": _conv(rng, w2, w2, 3), "style2": _lin(rng, d_style, w2),
        "bottleneck": [init_encoder_layer(rng, w2)
                       for _ in range(n_bottleneck)],
        "bottleneck_heads": bottleneck_heads,
        "up1": _deconv(rng, w2, w1),
        "dec1": _conv(rng, 2 * w1, w1, 3), "style_d1": _lin(rng, d_style, w1),
        "up0": _deconv(rng, w1, w0),
        "dec0": _conv(rng, 2 * w0, w0, 3), "style_d0": _lin(rng, d_style, w0),
        "head": _conv(rng, w0, d_lat, 1),
    }
    return p


def init_aux_decoder(rng, d_lat: int = 64, hidden: tuple[int, int] = (32, 16)
                     ) -> dict:
    h1, h2 = hidden
    return {"c1": _conv(rng, d_lat, h1, 3),
            "c2": _conv(rng, h1, h2, 3),
            "c3": _conv(rng, h2, 3, 1)}


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def text_embed(prompt: Prompt, table: Tensor) -> Tensor:
    """Bag-of-words pooling: mean of token embeddings; empty prompt -> 0."""
    vocab_size, d = table.shape
    if not prompt.ids:
        return Tensor(np.zeros(d, dtype=table.dtype))
    for i in prompt.ids:
        if not 0 <= i < vocab_size:
            raise ValueError(f"token id {i} outside vocabulary of "
                             f"{vocab_size}")
    rows = T.gather_rows(table, np.asarray(prompt.ids, dtype=np.intp))
    return rows.mean(axis=0)


def make_style(text_vec: Tensor, rng, p: dict, noise: np.ndarray | None = None
               ) -> Tensor:
    """Style vector from [text || noise] through a 3-layer MLP.  Pass
    `noise` explicitly for deterministic evaluation; otherwise it is
    drawn from `rng`."""
    if noise is None:
        if rng is None:
            raise ValueError("make_style needs an rng or explicit noise")
        noise = rng.standard_normal(p["d_noise"]).astype(np.float32)
    else:
        noise = np.asarray(noise, dtype=np.float32)
        if noise.shape != (p["d_noise"],):
            raise ValueError(f"noise shape {noise.shape} != "
                             f"({p['d_noise']},)")
    x = T.concat([text_vec, Tensor(noise)], axis=0)
    x = T.gelu(x @ p["l1"]["w"] + p["l1"]["b"])
    x = T.gelu(x @ p["l2"]["w"] + p["l2"]["b"])
    return x @ p["l3"]["w"] + p["l3"]["b"]


def _conv_fwd(x, p, stride=1, pad=1):
    return T.conv2d(x, p["w"], p["b"], stride=stride, pad=pad)


def _style_block(x: Tensor, conv_p: dict, style_p: dict, s: Tensor) -> Tensor:
    """conv3x3 + style injection (per-channel additive) + GELU."""
    h = _conv_fwd(x, conv_p, pad=1)
    inj = s @ style_p["w"] + style_p["b"]          # (C,)
    c = inj.shape[0]
    return T.gelu(h + inj.reshape(c, 1, 1))


def generate_latents(cond, s: Tensor, p: dict, kind: str) -> Tensor:
    """Condition image (H,W,C) -> latent map (H,W,D_lat)."""
    if kind not in p["stems"]:
        raise ValueError(
            f"no stem for condition kind {kind!r}; have "
            f"{sorted(p['stems'])}")
    x = cond if isinstance(cond, Tensor) else Tensor(
        np.asarray(cond, np.float32))
    if x.ndim == 2:
        x = x.reshape(x.shape[0], x.shape[1], 1)
    h, w, c = x.shape
    want = condition_channels(kind)
    if c != want:
        raise ValueError(f"{kind} condition must have {want} channels, "
                         f"got {c}")
    if h % 4 or w % 4:
        raise ValueError(f"condition resolution {h}x{w} not divisible by 4")
    x = x.transpose(2, 0, 1)                       # channels first
    x = _conv_fwd(x, p["stems"][kind], pad=0)
    e0 = _style_block(x, p["enc0"], p["style0"], s)            # (w0,H,W)
    x = _conv_fwd(e0, p["down0"], stride=2, pad=1)
    e1 = _style_block(x, p["enc1"], p["style1"], s)            # (w1,H/2,W/2)
    x = _conv_fwd(e1, p["down1"], stride=2, pad=1)
    x = _style_block(x, p["enc2"], p["style2"], s)             # (w2,H/4,W/4)

    from .blocks import encoder_layer
    c2, hh, ww = x.shape
    toks = x.reshape(c2, hh * ww).transpose(1, 0)              # (HW, w2)
    for layer in p["bottleneck"]:
        toks = encoder_layer(toks, layer, p["bottleneck_heads"])
    x = toks.transpose(1, 0).reshape(c2, hh, ww)

    x = T.conv2d_transpose(x, p["up1"]["w"], p["up1"]["b"], stride=2, pad=1)
    x = T.concat([x, e1], axis=0)
    x = _style_block(x, p["dec1"], p["style_d1"], s)
    x = T.conv2d_transpose(x, p["up0"]["w"], p["up0"]["b"], stride=2, pad=1)
    x = T.concat([x, e0], axis=0)
    x = _style_block(x, p["dec0"], p["style_d0"], s)
    x = _conv_fwd(x, p["head"], pad=0)                         # (D_lat,H,W)
    return x.transpose(1, 2, 0)


def aux_decode(latents: Tensor, p: dict) -> Tensor:
    """Latent map -> RGB image in [0,1] through 3 conv layers."""
    x = latents.transpose(2, 0, 1)
    x = T.gelu(_conv_fwd(x, p["c1"], pad=1))
    x = T.gelu(_conv_fwd(x, p["c2"], pad=1))
    x = T.sigmoid(_conv_fwd(x, p["c3"], pad=0))
    return x.transpose(1, 2, 0)
