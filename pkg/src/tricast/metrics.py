"""Controllability metrics: PSNR/SSIM/MSE kernels, edge and sketch
comparisons through the shared extractors, scale/shift-aligned depth error,
depth-to-normal consistency, view selection, and report aggregation.

Every extracted-condition comparison reuses the exact extractor code path
that produced the dataset conditions, so a perfect render scores perfectly
by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose
from .scenes import VIEW_FOCAL, canny_edges, gaussian_blur, sketch_proxy

__all__ = [
    "MetricReport", "image_metrics", "edge_metrics", "sketch_metrics",
    "rmse_depth", "depth_to_normal_map", "dn_consistency", "select_views",
    "evaluate", "PSNR_CAP", "UNPLUGGED_METRICS",
]

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5            # 11x11 window
UNPLUGGED_METRICS = ("FID", "CLIP-I", "CLIP-T")   # need external models

VIEW_SETTINGS = ("reference", "all", "front-k")


# ---------------------------------------------------------------------------
# pixel kernels
# ---------------------------------------------------------------------------

def image_metrics(a: np.ndarray, b: np.ndarray
                  ) -> tuple[float, float, float]:
    """(psnr, ssim, mse) between two [0,1] images of identical shape.

    PSNR = 10*log10(1/mse), capped at PSNR_CAP for (near-)exact matches;
    SSIM uses an 11x11 Gaussian window (sigma 1.5) and the standard
    K1/K2 constants at dynamic range 1, averaged over windows and
    channels.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        psnr = PSNR_CAP
    else:
        psnr = min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
    return psnr, _ssim(a, b), mse


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def blur(img):
        return gaussian_blur(img, SSIM_SIGMA, SSIM_RADIUS)

    mu_x = blur(x)
    mu_y = blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def _ssim(a: np.ndarray, b: np.ndarray) -> float:
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    maps = [_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[-1])]
    return float(np.mean(maps))


# ---------------------------------------------------------------------------
# per-kind comparisons
# ---------------------------------------------------------------------------

def edge_metrics(render_rgb: np.ndarray, cond_edge: np.ndarray
                 ) -> tuple[float, float, float]:
    """Edge map extracted from the render vs the conditioning edge map."""
    return image_metrics(canny_edges(render_rgb), cond_edge)


def sketch_metrics(render_rgb: np.ndarray, cond_sketch: np.ndarray
                   ) -> tuple[float, float, float]:
    """Sketch extracted from the render vs the conditioning sketch."""
    return image_metrics(sketch_proxy(canny_edges(render_rgb)), cond_sketch)


def rmse_depth(pred_depth: np.ndarray, cond_depth: np.ndarray,
               mask: np.ndarray) -> float:
    """Masked MSE after the best least-squares scale/shift of the prediction.

    Solves min over (s, t) of sum((s*pred + t - cond)^2) on the mask by the
    2x2 normal equations; a constant prediction degenerates the system, in
    which case s=0 and t=mean(cond) (pure-shift fallback).
    """
    m = np.asarray(mask, bool)
    if not m.any():
        raise ValueError("rmse_depth: empty mask")
    p = np.asarray(pred_depth, np.float64)[m]
    c = np.asarray(cond_depth, np.float64)[m]
    n = p.size
    sp, spp = p.sum(), (p * p).sum()
    det = n * spp - sp * sp
    if det <= 1e-12 * max(1.0, spp) * n:
        s, t = 0.0, float(c.mean())
    else:
        sc, spc = c.sum(), (p * c).sum()
        s = (n * spc - sp * sc) / det
        t = (sc - s * sp) / n
    r = s * p + t - c
    return float((r * r).mean())


def depth_to_normal_map(depth: np.ndarray, mask: np.ndarray,
                        focal: float = VIEW_FOCAL) -> np.ndarray:
    """Screen-space normals from a depth map, as unit vectors in [-1,1].

    The depth is min-max normalized over the mask to a 0..1 map first;
    central differences of that map, rescaled back to world units through
    the per-pixel footprint depth/(focal*width), give the surface slopes.
    Camera convention: u right, v down, z toward the viewer.
    """
    d = np.asarray(depth, np.float64)
    m = np.asarray(mask, bool)
    if not m.any():
        raise ValueError("depth_to_normal_map: empty mask")
    h, w = d.shape
    dmin = d[m].min()
    span = d[m].max() - dmin
    n = np.zeros((h, w, 3))
    n[..., 2] = 1.0
    if span < 1e-12:
        return n
    dn = (d - dmin) / span
    du = np.zeros_like(dn)
    dv = np.zeros_like(dn)
    du[:, 1:-1] = (dn[:, 2:] - dn[:, :-2]) / 2.0
    dv[1:-1, :] = (dn[2:, :] - dn[:-2, :]) / 2.0
    # restore world-unit slopes: d = dn*span + dmin, footprint d/(focal*w);
    # the floor keeps masked pixels with no depth (a missed ray under the
    # conditioning mask) finite -- they read as maximal tilt
    px = np.where(m, np.maximum(dn * span + dmin, 1e-6), 1.0) / (focal * w)
    n[..., 0] = du * span / px
    n[..., 1] = -dv * span / px
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n


def _erode(mask: np.ndarray) -> np.ndarray:
    e = mask.copy()
    e[1:, :] &= mask[:-1, :]
    e[:-1, :] &= mask[1:, :]
    e[:, 1:] &= mask[:, :-1]
    e[:, :-1] &= mask[:, 1:]
    return e


def dn_consistency(pred_depth: np.ndarray, cond_normal: np.ndarray,
                   mask: np.ndarray, focal: float = VIEW_FOCAL) -> float:
    """MSE between normals differentiated from the predicted depth and the
    conditioning normal map ((n+1)/2 encoded), over a 1-pixel-eroded mask.

    The erosion keeps silhouette-boundary finite differences, which
    straddle the background, out of the score.
    """
    m = np.asarray(mask, bool)
    if not m.any():
        raise ValueError("dn_consistency: empty mask")
    n = depth_to_normal_map(pred_depth, m, focal)
    enc = (n + 1.0) / 2.0
    e = _erode(m)
    if not e.any():
        raise ValueError("dn_consistency: mask vanished under erosion")
    diff = enc[e] - np.asarray(cond_normal, np.float64)[e]
    return float((diff * diff).mean())


# ---------------------------------------------------------------------------
# view selection
# ---------------------------------------------------------------------------

def select_views(poses: list[CameraPose], ref_index: int, setting: str,
                 k: int = 4) -> list[int]:
    """View indices for one evaluation setting.

    "reference" -> just the reference view; "all" -> every view;
    "front-k" -> the k views whose optical axes are angularly closest to
    the reference's (the reference itself included).  k beyond the view
    count clamps with a warning.
    """
    n = len(poses)
    if not 0 <= ref_index < n:
        raise ValueError(f"ref_index {ref_index} outside 0..{n - 1}")
    if setting == "reference":
        return [ref_index]
    if setting == "all":
        return list(range(n))
    if setting != "front-k":
        raise ValueError(f"unknown view setting {setting!r}")
    if k < 1:
        raise ValueError("front-k needs k >= 1")
    if k > n:
        warnings.warn(f"front-k clamped: k={k} exceeds {n} views")
        k = n
    axes = np.stack([-p.E[:3, 2] for p in poses])
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    ang = np.arccos(np.clip(axes @ axes[ref_index], -1.0, 1.0))
    ang[ref_index] = -1.0          # the reference always sorts first
    order = np.argsort(ang, kind="stable")
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Mean metric table: (kind, setting) -> {metric: value}, with the
    number of aggregated (scene, view) pairs per cell."""

    rows: dict[tuple[str, str], dict[str, float | str]] = field(
        default_factory=dict)
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("kind,setting,metric,value,n\n")
            for (kind, setting) in sorted(self.rows):
                n = self.counts[(kind, setting)]
                for metric, value in self.rows[(kind, setting)].items():
                    sval = value if isinstance(value, str) else f"{value:.6g}"
                    f.write(f"{kind},{setting},{metric},{sval},{n}\n")


_KIND_METRICS = {
    "edge": ("C-PSNR", "C-SSIM", "C-MSE"),
    "sketch": ("S-PSNR", "S-SSIM", "S-MSE"),
    "depth": ("R-MSE",),
    "normal": ("DN-MSE",),
}


def _view_scores(kind: str, rgb: np.ndarray, depth: np.ndarray,
                 cond_map: np.ndarray, ref_mask: np.ndarray) -> dict:
    if kind == "edge":
        p, s, m = edge_metrics(rgb, cond_map)
        return {"C-PSNR": p, "C-SSIM": s, "C-MSE": m}
    if kind == "sketch":
        p, s, m = sketch_metrics(rgb, cond_map)
        return {"S-PSNR": p, "S-SSIM": s, "S-MSE": m}
    if kind == "depth":
        return {"R-MSE": rmse_depth(depth, cond_map, ref_mask)}
    if kind == "normal":
        return {"DN-MSE": dn_consistency(depth, cond_map, ref_mask)}
    raise ValueError(f"no metrics for condition kind {kind!r}")


def evaluate(samples, render_fn, kinds=("edge", "sketch", "depth", "normal"),
             settings=("reference", "all", "front-k"), k: int = 4
             ) -> MetricReport:
    """Aggregate controllability metrics over a dataset.

    ``render_fn(sample, kind, view_ids) -> list[(rgb, depth)]`` supplies
    the model's renders (numpy arrays) for the requested views; every
    render is compared against the sample's reference-view condition.
    Means are per (condition kind x view setting x metric).
    """
    sums: dict[tuple[str, str], dict[str, float]] = {}
    counts: dict[tuple[str, str], int] = {}
    for sample in samples:
        poses = [v.pose for v in sample.views]
        ref = sample.ref_index
        ref_mask = sample.views[ref].mask > 0.5
        for kind in kinds:
            if kind not in sample.conditions:
                raise ValueError(
                    f"dataset sample lacks condition kind {kind!r}; "
                    f"has {sorted(sample.conditions)}")
            cond_map = sample.conditions[kind].map
            for setting in settings:
                ids = select_views(poses, ref, setting, k)
                renders = render_fn(sample, kind, ids)
                if len(renders) != len(ids):
                    raise ValueError(f"render_fn returned {len(renders)} "
                                     f"images for {len(ids)} views")
                cell = sums.setdefault((kind, setting),
                                       {m: 0.0 for m in
                                        _KIND_METRICS[kind]})
                for rgb, depth in renders:
                    for name, val in _view_scores(kind, rgb, depth,
                                                  cond_map,
                                                  ref_mask).items():
                        cell[name] += val
                counts[(kind, setting)] = (counts.get((kind, setting), 0)
                                           + len(renders))
    report = MetricReport()
    for key, cell in sums.items():
        n = counts[key]
        row: dict[str, float | str] = {m: v / n for m, v in cell.items()}
        for extra in UNPLUGGED_METRICS:
            row[extra] = "n/a"
        report.rows[key] = row
        report.counts[key] = n
    return report
