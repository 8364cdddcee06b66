"""Two-branch training: reconstruction/adversarial/text-alignment losses,
foreground-weighted patch sampling, the alternating freeze schedule, the
Adam optimizer, and binary checkpoints.

The schedule alternates an image step (reference image in, shared decoder
trunk + image cross-attention + image encoder trainable) with a condition
step (condition map in, condition-side stack + condition cross-attention
trainable, everything else frozen bit-for-bit).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .generator import tokenize
from .scenes import CONDITION_KINDS
from .tensor import NumericError, Tensor

__all__ = [
    "TrainConfig", "BranchMask", "TrainState", "Checkpoint",
    "init_train_state",
    "init_discriminator", "recon_loss", "pyramid_l2", "adversarial_bce",
    "adversarial_loss", "clip_slot_loss", "kl_loss",
    "sample_local_patches", "joint_step",
    "adam_update", "save_checkpoint", "load_checkpoint",
    "restore_checkpoint", "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"CLRM"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    side_views: int = 1          # rendered side views per step, besides ref
    w_recon: float = 1.0         # perceptual weight inside recon terms
    w_adv: float = 0.5
    w_clip: float = 0.0
    w_kl: float = 0.0
    lr: float = 2e-3
    lr_disc: float = 2e-3
    batch_size: int = 1
    steps: int = 1000
    seed: int = 0
    schedule: tuple[int, int] = (1, 1)   # (image steps, condition steps)
    weight_decay: float = 0.0

    def validate(self) -> None:
        for name in ("w_recon", "w_adv", "w_clip", "w_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.side_views < 0:
            raise ValueError("side_views must be non-negative")
        if min(self.schedule) < 0 or max(self.schedule) == 0:
            raise ValueError("schedule needs at least one positive count")


@dataclass
class BranchMask:
    """Assignment of every parameter to a group plus per-group train flags.

    Groups come from ``model.parameter_groups`` (plus "disc" for the
    discriminator); the two factory methods encode the freeze schedule.
    """

    groups: dict[str, str]
    trainable: dict[str, bool]

    IMAGE_GROUPS = ("core", "cross_image", "image_enc")
    CONDITION_GROUPS = ("cross_cond", "cond_gen")

    @classmethod
    def for_branch(cls, groups: dict[str, str], branch: str) -> "BranchMask":
        if branch == "image":
            active = cls.IMAGE_GROUPS
        elif branch == "condition":
            active = cls.CONDITION_GROUPS
        elif branch == "disc":
            active = ("disc",)
        else:
            raise ValueError(f"unknown branch {branch!r}")
        flags = {g: g in active
                 for g in (*M.PARAM_GROUPS, "disc")}
        return cls(groups=groups, trainable=flags)

    def trainable_names(self) -> list[str]:
        return [n for n, g in self.groups.items() if self.trainable[g]]

    def frozen_names(self) -> list[str]:
        return [n for n, g in self.groups.items() if not self.trainable[g]]


@dataclass
class TrainState:
    params: dict                      # model parameter tree
    disc: dict                        # discriminator parameter tree
    model_cfg: M.ModelConfig
    train_cfg: TrainConfig
    moments: dict = field(default_factory=lambda: {"t": {}, "m": {}, "v": {}})
    step: int = 0

    def flat(self) -> dict[str, Tensor]:
        out = M.flatten_params(self.params)
        out.update(M.flatten_params(self.disc, "disc"))
        return out

    def groups(self) -> dict[str, str]:
        g = M.parameter_groups(self.params)
        for name in M.flatten_params(self.disc, "disc"):
            g[name] = "disc"
        return g


def init_train_state(mcfg: M.ModelConfig, tcfg: TrainConfig,
                     seed: int | None = None) -> TrainState:
    """Fresh model + discriminator sized for the configs' global renders."""
    rng = np.random.default_rng(tcfg.seed if seed is None else seed)
    params = M.init_model(rng, mcfg)
    disc = init_discriminator(rng,
                              in_res=mcfg.image_size // mcfg.global_stride)
    return TrainState(params=params, disc=disc, model_cfg=mcfg,
                      train_cfg=tcfg)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _avg_pool(x: Tensor, k: int) -> Tensor:
    h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"pool size {k} does not divide {h}x{w}")
    return x.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))


def pyramid_l2(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Default perceptual proxy: L2 between 3-level average-pool pyramids."""
    tr = Tensor(np.asarray(truth, dtype=pred.dtype))
    terms = []
    for k in (2, 4, 8):
        d = _avg_pool(pred, k) - _avg_pool(tr, k)
        terms.append((d * d).mean())
    return (terms[0] + terms[1] + terms[2]) * (1.0 / 3.0)


def recon_loss(renders: list[Tensor], truths: list[np.ndarray],
               aux: Tensor | None = None,
               aux_truth: np.ndarray | None = None,
               w_perceptual: float = 1.0,
               perceptual_fn=pyramid_l2) -> Tensor:
    """Mean over all supplied image pairs of MSE + w·perceptual.

    The auxiliary decode (when given) counts as one more pair against the
    reference truth.  Every image is (H, W, 3) in [0, 1].
    """
    if len(renders) != len(truths):
        raise ValueError(f"{len(renders)} renders vs {len(truths)} truths")
    pairs: list[tuple[Tensor, np.ndarray]] = list(zip(renders, truths))
    if aux is not None:
        if aux_truth is None:
            raise ValueError("aux image supplied without its truth")
        pairs.append((aux, aux_truth))
    if not pairs:
        raise ValueError("no image pairs to compare")
    total = None
    for pred, truth in pairs:
        gt = np.asarray(truth, dtype=pred.dtype)
        if pred.shape != gt.shape:
            raise ValueError(f"render {pred.shape} vs truth {gt.shape}")
        d = pred - Tensor(gt)
        term = (d * d).mean()
        if w_perceptual:
            term = term + perceptual_fn(pred, gt) * w_perceptual
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def init_discriminator(rng: np.random.Generator,
                       widths: tuple[int, int, int, int] = (16, 32, 64, 64),
                       in_res: int = 32) -> dict:
    """4-layer stride-2 conv stack on (in_res, in_res, 3) + linear readout."""

    def conv(c_in, c_out):
        scale = np.sqrt(2.0 / (c_in * 9 + c_out))
        return {"w": Tensor((rng.normal(0, scale, (c_out, c_in, 3, 3)))
                            .astype(np.float32), requires_grad=True),
                "b": Tensor(np.zeros(c_out, np.float32),
                            requires_grad=True)}

    p = {"c0": conv(3, widths[0]), "c1": conv(widths[0], widths[1]),
         "c2": conv(widths[1], widths[2]), "c3": conv(widths[2], widths[3]),
         "head": {"w": Tensor((rng.normal(0, 0.05, (widths[3], 1)))
                              .astype(np.float32), requires_grad=True),
                  "b": Tensor(np.zeros(1, np.float32),
                              requires_grad=True)},
         "in_res": in_res}
    return p


def _disc_logit(img: Tensor, p: dict) -> Tensor:
    res = p["in_res"]
    if img.shape != (res, res, 3):
        raise ValueError(f"discriminator wants ({res},{res},3), "
                         f"got {img.shape}")
    x = img.transpose(2, 0, 1)
    for key in ("c0", "c1", "c2", "c3"):
        x = T.gelu(T.conv2d(x, p[key]["w"], p[key]["b"], stride=2, pad=1))
    pooled = x.reshape(x.shape[0], -1).mean(axis=1)
    return (pooled @ p["head"]["w"] + p["head"]["b"]).reshape(())


def adversarial_bce(real_logits: list[Tensor], fake_logits: list[Tensor],
                    side: str) -> Tensor:
    """Non-saturating GAN objective on raw discriminator logits.

    side="D": mean over all terms of softplus(-real) and softplus(fake);
    a logit of 0 contributes exactly ln 2, a confident correct logit ~0.
    side="G": mean of softplus(-fake), pushing fakes toward "real".
    """
    if side not in ("G", "D"):
        raise ValueError(f"side must be 'G' or 'D', got {side!r}")
    if side == "G":
        terms = [T.softplus(-z) for z in fake_logits]
    else:
        terms = ([T.softplus(-z) for z in real_logits]
                 + [T.softplus(z) for z in fake_logits])
    if not terms:
        raise ValueError("adversarial loss needs at least one logit")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def adversarial_loss(fakes: list[Tensor], reals: list[np.ndarray],
                     disc: dict, side: str) -> Tensor:
    """Non-saturating GAN loss on already-downsampled global images.

    side="D" detaches the fakes so the generator graph is not dragged in;
    side="G" ignores ``reals``.
    """
    if side == "G":
        return adversarial_bce([], [_disc_logit(f, disc) for f in fakes],
                               "G")
    rl = [_disc_logit(Tensor(np.asarray(r, np.float32)), disc)
          for r in reals]
    fl = [_disc_logit(Tensor(np.asarray(f.data)), disc) for f in fakes]
    return adversarial_bce(rl, fl, side)


def clip_slot_loss(images: list[Tensor], prompt, embedder=None) -> Tensor:
    """Text-image alignment slot: mean of 1 - cos(image emb, text emb).

    Ships disabled: with no embedder the loss is exactly 0.  An embedder
    provides embed_image(Tensor image) -> Tensor vector and
    embed_text(prompt) -> vector.
    """
    if embedder is None:
        return Tensor(np.float32(0.0))
    tvec = np.asarray(embedder.embed_text(prompt), np.float64)
    tvec = tvec / max(np.linalg.norm(tvec), 1e-12)
    total = None
    for img in images:
        emb = embedder.embed_image(img)
        if emb.shape != tvec.shape:
            raise ValueError(f"embedder width {emb.shape} vs text "
                             f"{tvec.shape}")
        norm = T.sqrt((emb * emb).sum()) + 1e-12
        cos = (emb * Tensor(tvec.astype(np.float64))).sum() / norm
        term = 1.0 - cos
        total = term if total is None else total + term
    return total * (1.0 / len(images))


def kl_loss(stats) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), mean over latent entries."""
    mu, sg = stats.mu, stats.sigma
    return ((mu * mu + sg * sg - T.log(sg * sg) - 1.0) * 0.5).mean()


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

def sample_local_patches(masks: np.ndarray, patch: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Top-left corners (n, 2) of one patch per mask, drawn with probability
    proportional to the foreground pixel count inside the candidate window.

    Masks with no foreground fall back to a uniform draw over valid
    positions.
    """
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    n, h, w = masks.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds mask {h}x{w}")
    # summed-area table -> foreground count of every candidate window
    pad = np.zeros((n, h + 1, w + 1), np.float64)
    np.cumsum(np.cumsum(masks, axis=1), axis=2, out=pad[:, 1:, 1:])
    hi = h - patch + 1
    wi = w - patch + 1
    counts = (pad[:, patch:patch + hi, patch:patch + wi]
              - pad[:, 0:hi, patch:patch + wi]
              - pad[:, patch:patch + hi, 0:wi]
              + pad[:, 0:hi, 0:wi])
    out = np.empty((n, 2), np.intp)
    for i in range(n):
        weights = counts[i].ravel()
        s = weights.sum()
        if s <= 0:
            flat = rng.integers(0, hi * wi)
        else:
            flat = rng.choice(hi * wi, p=weights / s)
        out[i] = divmod(int(flat), wi)
    return out


# ---------------------------------------------------------------------------
# the joint step
# ---------------------------------------------------------------------------

def _pick_branch(step: int, schedule: tuple[int, int]) -> str:
    img, cond = schedule
    if cond == 0:
        return "image"
    if img == 0:
        return "condition"
    return "image" if step % (img + cond) < img else "condition"


def _render_pairs(tp, nerf, sample, view_ids, corners, cfg: M.ModelConfig,
                  render_poses, rng) -> tuple[list, list, list, list]:
    """Render the local patch + strided global set for each chosen view.

    One volume-render call per view covers both ray sets; outputs come
    back as ((p,p,3) local, (g,g,3) global) pairs with matching truths.
    """
    size = cfg.image_size
    p = cfg.local_patch
    gidx = M.strided_ray_indices(size, size, cfg.global_stride)
    g = size // cfg.global_stride
    loc_r, loc_t, glob_r, glob_t = [], [], [], []
    for (vid, (y0, x0)) in zip(view_ids, corners):
        lidx = M.patch_ray_indices(size, int(y0), int(x0), p)
        idx = np.concatenate([lidx, gidx])
        out = M.render_ray_subset(tp, nerf, render_poses[vid], size, size,
                                  idx, cfg.n_samples_train, rng=rng)
        truth = sample.views[vid].rgb.reshape(-1, 3)
        loc_r.append(out.rgb[:p * p].reshape(p, p, 3))
        loc_t.append(truth[lidx].reshape(p, p, 3))
        glob_r.append(out.rgb[p * p:].reshape(g, g, 3))
        glob_t.append(truth[gidx].reshape(g, g, 3))
    return loc_r, loc_t, glob_r, glob_t


def _finite_or_abort(value: float, step: int, branch: str,
                     parts: dict) -> None:
    if not np.isfinite(value):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in parts.items())
        raise NumericError(
            f"non-finite loss at step {step} ({branch} branch): {detail}")


def joint_step(state: TrainState, sample, rng: np.random.Generator,
               embedder=None) -> dict:
    """One alternating-schedule optimizer step on one scene sample.

    Returns the per-term loss metrics; ``state.step`` advances by one.
    """
    mcfg, tcfg = state.model_cfg, state.train_cfg
    branch = _pick_branch(state.step, tcfg.schedule)
    groups = state.groups()
    flat = state.flat()

    poses = [v.pose for v in sample.views]
    mod_poses, render_poses = M.prepare_poses(poses, sample.ref_index,
                                              mcfg.view_distance)
    n_views = len(sample.views)
    side = [i for i in range(n_views) if i != sample.ref_index]
    k = min(tcfg.side_views, len(side))
    chosen = [sample.ref_index] + ([int(i) for i in
                                    rng.choice(side, size=k, replace=False)]
                                   if k else [])
    mask_stack = np.stack([sample.views[i].mask for i in chosen])
    corners = sample_local_patches(mask_stack, mcfg.local_patch, rng)

    metrics = {"step": state.step, "branch": branch, "recon": 0.0,
               "adv_g": 0.0, "adv_d": 0.0, "clip": 0.0, "kl": 0.0,
               "total": 0.0}

    if branch == "image":
        with T.Tape() as tape:
            out = M.image_branch(state.params, mcfg,
                                 sample.views[sample.ref_index].rgb,
                                 mod_poses[sample.ref_index])
            lr_, lt_, gr_, gt_ = _render_pairs(
                out.triplane, state.params["nerf"], sample, chosen, corners,
                mcfg, render_poses, rng)
            loss = (recon_loss(lr_, lt_, w_perceptual=tcfg.w_recon)
                    + recon_loss(gr_, gt_, w_perceptual=tcfg.w_recon))
            grads = tape.backward(loss)
        metrics["recon"] = metrics["total"] = float(loss.data)
        _finite_or_abort(metrics["total"], state.step, branch, metrics)
        mask = BranchMask.for_branch(groups, "image")
        adam_update(flat, grads, state.moments, mask.trainable_names(),
                    tcfg.lr, weight_decay=tcfg.weight_decay)
        state.step += 1
        return metrics

    # condition branch: generator stack + condition cross-attention train;
    # the rest of the decoder stays frozen.  The discriminator gets its own
    # update from the same renders.
    kind = str(rng.choice(CONDITION_KINDS))
    cond = sample.conditions[kind]
    prompt = tokenize(cond.prompt)
    ref = sample.ref_index
    ref_rgb = sample.views[ref].rgb
    stride = mcfg.global_stride
    with T.Tape() as tape:
        out = M.condition_branch(state.params, mcfg, cond.map, kind, prompt,
                                 mod_poses[ref], rng=rng, train_mode=True)
        lr_, lt_, gr_, gt_ = _render_pairs(
            out.triplane, state.params["nerf"], sample, chosen, corners,
            mcfg, render_poses, rng)
        y0, x0 = corners[0]
        aux_patch = out.aux_image[y0:y0 + mcfg.local_patch,
                                  x0:x0 + mcfg.local_patch]
        aux_glob = out.aux_image[::stride, ::stride]
        l_loc = recon_loss(lr_, lt_, aux=aux_patch,
                           aux_truth=lt_[0], w_perceptual=tcfg.w_recon)
        l_glob = recon_loss(gr_, gt_, aux=aux_glob,
                            aux_truth=gt_[0], w_perceptual=tcfg.w_recon)
        loss = l_loc + l_glob
        fakes = gr_ + [aux_glob]
        if tcfg.w_adv:
            l_adv = adversarial_loss(fakes, [], state.disc, side="G")
            loss = loss + l_adv * tcfg.w_adv
            metrics["adv_g"] = float(l_adv.data)
        if tcfg.w_clip:
            l_clip = clip_slot_loss(gr_ + [aux_glob], prompt, embedder)
            loss = loss + l_clip * tcfg.w_clip
            metrics["clip"] = float(l_clip.data)
        if tcfg.w_kl:
            l_kl = kl_loss(out.latent_stats)
            loss = loss + l_kl * tcfg.w_kl
            metrics["kl"] = float(l_kl.data)
        grads = tape.backward(loss)
    metrics["recon"] = float((l_loc + l_glob).data)
    metrics["total"] = float(loss.data)
    _finite_or_abort(metrics["total"], state.step, branch, metrics)
    mask = BranchMask.for_branch(groups, "condition")
    adam_update(flat, grads, state.moments, mask.trainable_names(),
                tcfg.lr, weight_decay=tcfg.weight_decay)

    if tcfg.w_adv:
        reals = list(gt_) + [ref_rgb[::stride, ::stride]]
        with T.Tape() as dtape:
            d_loss = adversarial_loss(fakes, reals, state.disc, side="D")
            d_grads = dtape.backward(d_loss)
        metrics["adv_d"] = float(d_loss.data)
        _finite_or_abort(metrics["adv_d"], state.step, "disc", metrics)
        dmask = BranchMask.for_branch(groups, "disc")
        adam_update(flat, d_grads, state.moments, dmask.trainable_names(),
                    tcfg.lr_disc, weight_decay=0.0)
    state.step += 1
    return metrics


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_update(flat: dict[str, Tensor], grads, moments: dict,
                names: list[str], lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8,
                weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam step (decoupled weight decay) on ``names``.

    Moment buffers and step counts live per parameter name, so parameters
    trained on alternating schedules keep correct bias correction.
    Parameters without a gradient entry are skipped.
    """
    for name in names:
        t = flat[name]
        g = grads.get(t)
        if g is None:
            g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = moments["m"].get(name)
        if m is None:
            m = np.zeros(t.shape, np.float64)
            v = np.zeros(t.shape, np.float64)
        else:
            v = moments["v"][name]
        tc = moments["t"].get(name, 0) + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** tc)
        vhat = v / (1 - beta2 ** tc)
        delta = mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            delta = delta + weight_decay * t.data
        t.data = (t.data - lr * delta).astype(t.data.dtype, copy=False)
        moments["m"][name] = m
        moments["v"][name] = v
        moments["t"][name] = tc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    step: int
    config: dict
    tensors: dict[str, np.ndarray]
    moments: dict


def _blob_table(arrays: dict[str, np.ndarray]):
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.str[1:], "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return table, b"".join(blobs)


def save_checkpoint(path: str, state: TrainState) -> None:
    arrays = {f"param/{n}": t.data for n, t in state.flat().items()}
    for n, arr in state.moments["m"].items():
        arrays[f"adam_m/{n}"] = arr
    for n, arr in state.moments["v"].items():
        arrays[f"adam_v/{n}"] = arr
    table, blob = _blob_table(arrays)
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": {"model": asdict(state.model_cfg),
                   "train": asdict(state.train_cfg)},
        "adam_t": state.moments["t"],
        "tensors": table,
    }).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack_from("<Q", data, 8)[0]
    if len(data) < 16 + hlen:
        raise ValueError(f"{path}: truncated header "
                         f"({len(data)} bytes, need {16 + hlen})")
    header = json.loads(data[16:16 + hlen])
    blob = data[16 + hlen:]
    tensors = {}
    for row in header["tensors"]:
        end = row["offset"] + row["nbytes"]
        if end > len(blob):
            raise ValueError(f"{path}: truncated blob for {row['name']!r} "
                             f"(need {end} bytes, have {len(blob)})")
        arr = np.frombuffer(blob, dtype="<" + row["dtype"],
                            count=row["nbytes"] // np.dtype(row["dtype"]).itemsize,
                            offset=row["offset"])
        tensors[row["name"]] = arr.reshape(row["shape"]).astype(
            row["dtype"], copy=True)
    moments = {"t": {k: int(v) for k, v in header["adam_t"].items()},
               "m": {}, "v": {}}
    for name, arr in tensors.items():
        if name.startswith("adam_m/"):
            moments["m"][name[7:]] = arr.astype(np.float64)
        elif name.startswith("adam_v/"):
            moments["v"][name[7:]] = arr.astype(np.float64)
    return Checkpoint(version=version, step=header["step"],
                      config=header["config"],
                      tensors={k[6:]: v for k, v in tensors.items()
                               if k.startswith("param/")},
                      moments=moments)


def restore_checkpoint(ckpt: Checkpoint, state: TrainState) -> None:
    """Copy checkpoint tensors into an existing state, shape-checked."""
    flat = state.flat()
    for name, t in flat.items():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != t.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape "
                f"{tuple(arr.shape)}, model expects {t.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
    state.moments = ckpt.moments
    state.step = ckpt.step
