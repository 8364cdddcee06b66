"""Full pipeline assembly: every parameter group of the two-branch
reconstruction model, flat parameter addressing for the optimizer and
checkpoints, the image/condition branch forwards, and ray helpers for
patch and strided rendering.

Pose handling: the decoder's camera modulation consumes poses expressed
relative to the reference view (reference -> identity), while rendering
uses the canonical frame that puts the reference camera at
(0, 0, view_distance) looking down -z so the object sits inside the
renderer's [-1, 1]^3 box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (LatentStats, TokenSequence, condition_encode,
                     image_encode, init_condition_encoder,
                     init_image_encoder, init_triplane_decoder,
                     triplane_decode)
from .camera import (CameraPose, RayBundle, canonicalize_poses, embed_camera,
                     flatten_camera, generate_rays, init_camera_embedder,
                     normalize_to_reference)
from .generator import (Prompt, aux_decode, condition_channels,
                        generate_latents, init_aux_decoder, init_generator,
                        init_style_mlp, init_text_table, make_style,
                        text_embed, tokenize)
from .tensor import Tensor, no_tape
from .triplane import (RenderOutput, Triplane, init_nerf_decoder,
                       render_image, volume_render)

__all__ = [
    "ModelConfig", "BranchOutput", "init_model", "flatten_params",
    "parameter_groups", "camera_feature", "image_branch", "condition_branch",
    "render_view", "render_ray_subset", "patch_ray_indices",
    "strided_ray_indices", "take_rays", "prepare_poses", "make_render_fn",
]

PARAM_GROUPS = ("core", "cross_image", "cross_cond", "image_enc", "cond_gen")


@dataclass
class ModelConfig:
    """Desk-scale architecture hyperparameters (one consistent set)."""

    image_size: int = 64        # reference/render resolution
    patch: int = 8              # encoder patch size
    d_embed: int = 64           # encoder token width
    d_feat: int = 64            # triplane token width in the decoder
    n_heads: int = 4
    n_layers: int = 4           # decoder depth
    d_cam: int = 64             # camera embedding width
    plane_res: int = 16         # triplane resolution after upsampling
    plane_feat: int = 8         # triplane feature channels
    low_res: int = 8            # token-grid resolution before upsampling
    nerf_hidden: int = 32
    cond_res: int = 64          # condition-encoder input resolution
    d_txt: int = 32
    d_noise: int = 32
    d_style: int = 64
    d_lat: int = 64             # generator latent channels
    gen_widths: tuple[int, int, int] = (32, 64, 96)
    vocab_size: int = 12
    view_distance: float = 2.2
    n_samples_train: int = 48   # ray samples during training
    n_samples_eval: int = 128
    local_patch: int = 32
    global_stride: int = 2

    def validate(self) -> None:
        if self.d_feat % self.n_heads or self.d_embed % self.n_heads:
            raise ValueError("token widths must be divisible by n_heads")
        if self.plane_res != 2 * self.low_res:
            raise ValueError("plane_res must be 2x low_res (stride-2 deconv)")
        if self.image_size % self.patch or self.cond_res % self.patch:
            raise ValueError("resolutions must be divisible by patch size")
        if self.image_size % 4 or self.cond_res % 4:
            raise ValueError("generator needs resolutions divisible by 4")
        if self.local_patch > self.image_size:
            raise ValueError("local patch larger than the render")
        if self.image_size % self.global_stride:
            raise ValueError("global_stride must divide image_size")


@dataclass
class BranchOutput:
    """One branch forward up to the 3D latent (rendering happens per view)."""

    triplane: Triplane
    aux_image: Tensor | None = None   # condition branch only
    latent_stats: LatentStats | None = None
    tokens: TokenSequence | None = None


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_model(rng: np.random.Generator,
               cfg: ModelConfig | None = None) -> dict:
    cfg = cfg or ModelConfig()
    cfg.validate()
    return {
        "camera": init_camera_embedder(rng, cfg.d_cam),
        "image_enc": init_image_encoder(rng, d_e=cfg.d_embed, patch=cfg.patch,
                                        image_size=cfg.image_size),
        "cond_enc": init_condition_encoder(rng, d_e=cfg.d_embed,
                                           patch=cfg.patch, res=cfg.cond_res,
                                           d_lat=cfg.d_lat),
        "decoder": init_triplane_decoder(rng, d_f=cfg.d_feat,
                                         d_ctx=cfg.d_embed, d_cam=cfg.d_cam,
                                         d_t=cfg.plane_feat, r_lo=cfg.low_res,
                                         n_layers=cfg.n_layers),
        "nerf": init_nerf_decoder(rng, 3 * cfg.plane_feat, cfg.nerf_hidden),
        "text": init_text_table(rng, cfg.vocab_size, cfg.d_txt),
        "style": init_style_mlp(rng, cfg.d_txt, cfg.d_noise, cfg.d_style),
        "generator": init_generator(rng, cfg.gen_widths, cfg.d_style,
                                    cfg.d_lat),
        "aux": init_aux_decoder(rng, cfg.d_lat),
    }


def flatten_params(tree, prefix: str = "") -> dict[str, Tensor]:
    """Tensor leaves of a parameter tree as a flat {path: Tensor} map.

    Paths join nested keys with "/"; list entries use their index.  Dict
    keys are walked in sorted order so the layout is deterministic, and
    non-Tensor leaves (structural integers etc.) are skipped.
    """
    out: dict[str, Tensor] = {}
    if isinstance(tree, Tensor):
        out[prefix] = tree
    elif isinstance(tree, dict):
        for k in sorted(tree):
            out.update(flatten_params(tree[k], f"{prefix}/{k}" if prefix
                                      else str(k)))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            out.update(flatten_params(v, f"{prefix}/{i}" if prefix
                                      else str(i)))
    return out


def parameter_groups(params: dict) -> dict[str, str]:
    """Flat parameter name -> training group.

    Groups partition every tensor exactly once:
      core        shared decoder trunk: camera embedder, learned triplane
                  tokens, per-block modulation/self-attn/MLP, the upsampling
                  deconv, and the density/color MLP
      cross_image the decoder blocks' image cross-attention
      cross_cond  the decoder blocks' condition cross-attention
      image_enc   the reference-image encoder
      cond_gen    everything on the condition side: text table, style MLP,
                  U-Net generator, condition encoder, aux decoder
    """
    groups: dict[str, str] = {}
    for name in flatten_params(params):
        top = name.split("/", 1)[0]
        if top in ("camera", "decoder", "nerf"):
            if "/cross_image/" in name:
                groups[name] = "cross_image"
            elif "/cross_cond/" in name:
                groups[name] = "cross_cond"
            else:
                groups[name] = "core"
        elif top == "image_enc":
            groups[name] = "image_enc"
        elif top in ("cond_enc", "text", "style", "generator", "aux"):
            groups[name] = "cond_gen"
        else:
            raise ValueError(f"parameter {name!r} belongs to no group")
    return groups


# ---------------------------------------------------------------------------
# branch forwards
# ---------------------------------------------------------------------------

def prepare_poses(poses: list[CameraPose], ref_index: int = 0,
                  view_distance: float = 2.2
                  ) -> tuple[list[CameraPose], list[CameraPose]]:
    """(modulation poses, render poses) for a scene's views.

    Modulation poses are relative to the reference view; render poses are
    the canonical frame the triplane lives in.
    """
    return (normalize_to_reference(poses, ref_index),
            canonicalize_poses(poses, ref_index, view_distance))


def camera_feature(params: dict, pose: CameraPose) -> Tensor:
    """Pose -> flat 20-vector -> learned camera embedding."""
    return embed_camera(flatten_camera(pose), params["camera"])


def image_branch(params: dict, cfg: ModelConfig, ref_image,
                 mod_pose: CameraPose) -> BranchOutput:
    """Reference image -> triplane, conditioned on the reference camera."""
    cam = camera_feature(params, mod_pose)
    ctx = image_encode(ref_image, params["image_enc"], patch=cfg.patch,
                       n_heads=cfg.n_heads)
    tp = triplane_decode(ctx, cam, params["decoder"], kind="image",
                         n_heads=cfg.n_heads)
    return BranchOutput(triplane=tp, tokens=ctx)


def condition_branch(params: dict, cfg: ModelConfig, cond_map, kind: str,
                     prompt: Prompt, mod_pose: CameraPose,
                     rng: np.random.Generator | None = None,
                     train_mode: bool = False,
                     noise: np.ndarray | None = None) -> BranchOutput:
    """Condition image + prompt -> triplane, plus the auxiliary 2D decode.

    ``rng`` drives both the style noise and the latent sampling in
    train mode; eval mode uses the latent mean and requires explicit
    ``noise`` only if the caller wants a non-deterministic style.
    """
    condition_channels(kind)
    cam = camera_feature(params, mod_pose)
    tvec = text_embed(prompt, params["text"])
    if noise is None and rng is None:
        noise = np.zeros(params["style"]["d_noise"], dtype=np.float32)
    s = make_style(tvec, rng, params["style"], noise=noise)
    lat = generate_latents(cond_map, s, params["generator"], kind)
    aux = aux_decode(lat, params["aux"])
    tokens, stats = condition_encode(lat, params["cond_enc"], rng=rng,
                                     train_mode=train_mode, patch=cfg.patch,
                                     n_heads=cfg.n_heads)
    tp = triplane_decode(tokens, cam, params["decoder"], kind="condition",
                         n_heads=cfg.n_heads)
    return BranchOutput(triplane=tp, aux_image=aux, latent_stats=stats,
                        tokens=tokens)


# ---------------------------------------------------------------------------
# rendering helpers
# ---------------------------------------------------------------------------

def take_rays(rays: RayBundle, idx: np.ndarray) -> RayBundle:
    return RayBundle(rays.origins[idx], rays.directions[idx],
                     rays.t_near[idx], rays.t_far[idx], rays.hit[idx])


def patch_ray_indices(width: int, y0: int, x0: int, patch: int) -> np.ndarray:
    """Row-major pixel indices of a patch whose top-left corner is (y0, x0)."""
    rows = (y0 + np.arange(patch))[:, None] * width
    return (rows + x0 + np.arange(patch)).ravel()


def strided_ray_indices(height: int, width: int, stride: int) -> np.ndarray:
    """Row-major indices of every stride-th pixel (downsampled global view)."""
    rows = np.arange(0, height, stride)[:, None] * width
    return (rows + np.arange(0, width, stride)).ravel()


def render_ray_subset(tp: Triplane, nerf: dict, pose: CameraPose,
                      width: int, height: int, idx: np.ndarray,
                      n_samples: int,
                      rng: np.random.Generator | None = None
                      ) -> RenderOutput:
    """Render only the pixels in ``idx`` (flat, row-major); output stays flat."""
    rays = take_rays(generate_rays(pose, width, height), idx)
    jitter = None
    if rng is not None:
        jitter = rng.uniform(0.0, 1.0, (len(rays), n_samples))
    return volume_render(tp, rays, n_samples, nerf, jitter=jitter)


def render_view(tp: Triplane, nerf: dict, pose: CameraPose, size: int,
                n_samples: int, chunk_size: int = 4096,
                rng: np.random.Generator | None = None) -> RenderOutput:
    """Full square render at ``size``; thin wrapper fixing width == height."""
    return render_image(tp, pose, size, size, chunk_size=chunk_size,
                        n_samples=n_samples, params=nerf, rng=rng)


def make_render_fn(params: dict, cfg: ModelConfig,
                   n_samples: int | None = None, size: int | None = None,
                   chunk_size: int = 4096):
    """Build the ``render_fn(sample, kind, view_ids)`` the metric loop wants.

    Runs the condition branch once per (sample, kind) -- in eval mode, off
    the tape -- caches the triplane, and renders each requested view from
    the canonical pose frame.  Returns (rgb, depth) numpy pairs.
    """
    n_samples = cfg.n_samples_eval if n_samples is None else n_samples
    size = cfg.image_size if size is None else size
    cache: dict[tuple[int, str], Triplane] = {}

    def render_fn(sample, kind, view_ids):
        poses = [v.pose for v in sample.views]
        mod, canon = prepare_poses(poses, sample.ref_index,
                                   view_distance=cfg.view_distance)
        key = (id(sample), kind)
        with no_tape():
            if key not in cache:
                cond = sample.conditions[kind]
                prompt = (tokenize(cond.prompt)
                          if isinstance(cond.prompt, str) else cond.prompt)
                out = condition_branch(params, cfg, cond.map, kind,
                                       prompt, mod[sample.ref_index])
                cache[key] = out.triplane
            tp = cache[key]
            pairs = []
            for i in view_ids:
                r = render_view(tp, params["nerf"], canon[i], size,
                                n_samples, chunk_size=chunk_size)
                pairs.append((np.asarray(r.rgb.data),
                              np.asarray(r.depth.data)))
        return pairs

    return render_fn
