"""Procedural scenes with an analytic ray-trace oracle.

Scenes are 1-4 colored primitives (sphere, box, torus) confined to
[-0.8, 0.8]^3 — safely inside the renderer's [-1,1]^3 bound.  The oracle
produces per-view RGB / depth / normal / mask ground truth by closed-form
intersection (spheres, boxes) or SDF sphere tracing (torus), shaded by a
Lambertian headlight plus ambient.  Condition maps (edge, sketch, depth,
normal) are extracted from the reference view.

Normals are stored in the camera frame (x right, y up, z toward the
camera) so they line up with screen-space normals differentiated from
depth.  RGB is quantized to 8 bits at creation so image files round-trip
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import CameraPose, generate_rays, look_at

__all__ = [
    "Primitive", "SceneSpec", "ViewRecord", "ConditionSet",
    "CONDITION_KINDS", "AMBIENT", "VIEW_RADIUS", "VIEW_FOCAL",
    "sample_scene", "scene_prompt", "orbit_poses",
    "primitive_sdf", "primitive_normal", "scene_sdf", "scene_field",
    "raytrace_views", "gaussian_blur", "canny_edges", "sketch_proxy",
    "make_condition_set",
]

CONDITION_KINDS = ("edge", "sketch", "depth", "normal")

AMBIENT = 0.35          # ambient fraction of the headlight shading model
VIEW_RADIUS = 2.2       # orbit camera distance
VIEW_FOCAL = 1.1        # normalized focal length of every dataset camera
_BOUND = 0.8            # scene geometry stays inside [-_BOUND, _BOUND]^3

_PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.20, 0.30, 0.85),
    "yellow": (0.90, 0.85, 0.20),
    "purple": (0.60, 0.25, 0.70),
    "orange": (0.95, 0.55, 0.15),
    "cyan": (0.20, 0.75, 0.80),
}


@dataclass
class Primitive:
    kind: str                  # sphere | box | torus
    center: np.ndarray         # (3,)
    size: np.ndarray           # sphere: [radius]; box: [hx,hy,hz]; torus: [major,minor]
    color_name: str
    albedo: np.ndarray         # (3,) in [0,1]

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.kind not in ("sphere", "box", "torus"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    @property
    def extent(self) -> float:
        """Radius of the bounding sphere around the primitive's center."""
        if self.kind == "sphere":
            return float(self.size[0])
        if self.kind == "box":
            return float(np.linalg.norm(self.size))
        return float(self.size[0] + self.size[1])


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.primitives) <= 4:
            raise ValueError("a scene holds between 1 and 4 primitives")
        for p in self.primitives:
            if np.abs(p.center).max() + p.extent > _BOUND + 1e-9:
                raise ValueError(
                    f"primitive {p.kind} at {p.center} leaves the [-0.8,0.8]^3 bound")


@dataclass
class ViewRecord:
    pose: CameraPose
    rgb: np.ndarray            # (H,W,3) float32 in [0,1], 8-bit quantized
    depth: np.ndarray          # (H,W) float32 planar z-depth, world units, 0 on miss
    normal: np.ndarray         # (H,W,3) float32 camera-frame unit normals, 0 on miss
    mask: np.ndarray           # (H,W) float32 {0,1}


@dataclass
class ConditionSet:
    kind: str                  # edge | sketch | depth | normal
    map: np.ndarray            # (H,W) or (H,W,3) float32 in [0,1]
    prompt: str
    ref_index: int = 0


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

def sample_scene(seed: int, max_primitives: int = 3) -> SceneSpec:
    """Deterministic random scene: distinct-colored primitives, no bound
    violations.  Same seed, same scene, bit for bit."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_primitives + 1))
    names = list(_PALETTE)
    rng.shuffle(names)
    prims = []
    for i in range(n):
        kind = ("sphere", "box", "torus")[int(rng.integers(0, 3))]
        if kind == "sphere":
            size = np.array([rng.uniform(0.18, 0.32)])
            extent = size[0]
        elif kind == "box":
            size = rng.uniform(0.14, 0.28, 3)
            extent = float(np.linalg.norm(size))
        else:
            size = np.array([rng.uniform(0.22, 0.34), rng.uniform(0.07, 0.12)])
            extent = size[0] + size[1]
        room = _BOUND - extent - 0.02
        if n == 1:
            center = rng.uniform(-0.15, 0.15, 3)
        else:
            center = rng.uniform(-min(0.42, room), min(0.42, room), 3)
        center = np.clip(center, -room, room)
        name = names[i % len(names)]
        prims.append(Primitive(kind, center, size, name,
                               np.array(_PALETTE[name])))
    return SceneSpec(prims, seed=seed)


def scene_prompt(scene: SceneSpec) -> str:
    parts = [f"a {p.color_name} {p.kind}" for p in scene.primitives]
    return " and ".join(parts)


def orbit_poses(n_ring: int = 16, n_random: int = 4,
                rng: np.random.Generator | None = None,
                radius: float = VIEW_RADIUS, ring_elevation: float = 0.35
                ) -> list[CameraPose]:
    """Dataset cameras: a fixed-elevation ring plus a few random viewpoints.

    The reference view is index 0.  All cameras look at the origin from
    ``radius`` with the standard dataset intrinsics.
    """
    poses = []
    for k in range(n_ring):
        az = 2 * np.pi * k / n_ring
        poses.append(_orbit_cam(radius, az, ring_elevation))
    if n_random:
        rng = np.random.default_rng(0) if rng is None else rng
        for _ in range(n_random):
            az = rng.uniform(0, 2 * np.pi)
            el = rng.uniform(-0.5, 0.9)
            poses.append(_orbit_cam(radius, az, el))
    return poses


def _orbit_cam(radius: float, azimuth: float, elevation: float) -> CameraPose:
    eye = radius * np.array([np.cos(elevation) * np.sin(azimuth),
                             np.sin(elevation),
                             np.cos(elevation) * np.cos(azimuth)])
    return look_at(eye, (0.0, 0.0, 0.0), foc_x=VIEW_FOCAL, foc_y=VIEW_FOCAL)


# ---------------------------------------------------------------------------
# geometry: signed distance, normals, intersections
# ---------------------------------------------------------------------------

def primitive_sdf(prim: Primitive, pts: np.ndarray) -> np.ndarray:
    """Signed distance from (N,3) points; negative inside."""
    q = pts - prim.center
    if prim.kind == "sphere":
        return np.linalg.norm(q, axis=-1) - prim.size[0]
    if prim.kind == "box":
        d = np.abs(q) - prim.size
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside
    major, minor = prim.size
    rho = np.hypot(q[:, 0], q[:, 2])
    return np.hypot(rho - major, q[:, 1]) - minor


def primitive_normal(prim: Primitive, pts: np.ndarray) -> np.ndarray:
    """Outward unit surface normal (world frame) at/near the surface."""
    q = pts - prim.center
    if prim.kind == "sphere":
        n = q
    elif prim.kind == "box":
        # dominant face: the axis where the point sits deepest toward a face
        rel = np.abs(q) / prim.size
        axis = np.argmax(rel, axis=-1)
        n = np.zeros_like(q)
        rows = np.arange(len(q))
        n[rows, axis] = np.sign(q[rows, axis])
    else:
        major, _ = prim.size
        rho = np.hypot(q[:, 0], q[:, 2])
        safe = np.maximum(rho, 1e-12)
        k = np.hypot(rho - major, q[:, 1])
        ks = np.maximum(k, 1e-12)
        n = np.stack([(rho - major) / ks * q[:, 0] / safe,
                      q[:, 1] / ks,
                      (rho - major) / ks * q[:, 2] / safe], axis=-1)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def scene_sdf(scene: SceneSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min signed distance over primitives and the argmin primitive index."""
    dists = np.stack([primitive_sdf(p, pts) for p in scene.primitives], axis=0)
    which = np.argmin(dists, axis=0)
    return dists[which, np.arange(pts.shape[0])], which


def _shade(albedo: np.ndarray, normal: np.ndarray, to_light: np.ndarray) -> np.ndarray:
    lam = np.maximum((normal * to_light).sum(axis=-1), 0.0)
    return albedo * (AMBIENT + (1.0 - AMBIENT) * lam)[..., None]


def scene_field(scene: SceneSpec, camera_pos, sigma_inside: float = 1000.0):
    """Density/color field matching the ray-trace oracle's shading.

    Returns ``field_fn(points) -> (sigma, rgb)`` for the volume renderer:
    constant high density inside any primitive, zero outside; color =
    headlight-shaded albedo of the nearest primitive.  Rendering this field
    must agree with raytrace_views up to discretization.
    """
    cam = np.asarray(camera_pos, dtype=np.float64)

    def field_fn(pts: np.ndarray):
        d, which = scene_sdf(scene, pts)
        sigma = np.where(d < 0.0, sigma_inside, 0.0)
        normal = np.zeros_like(pts)
        albedo = np.zeros_like(pts)
        for i, prim in enumerate(scene.primitives):
            sel = which == i
            if sel.any():
                normal[sel] = primitive_normal(prim, pts[sel])
                albedo[sel] = prim.albedo
        to_light = cam - pts
        to_light /= np.maximum(np.linalg.norm(to_light, axis=-1, keepdims=True), 1e-12)
        return sigma, _shade(albedo, normal, to_light)

    return field_fn


def _intersect_sphere(prim, o, d):
    oc = o - prim.center
    b = (oc * d).sum(-1)
    c0 = (oc * oc).sum(-1) - prim.size[0] ** 2
    disc = b * b - c0
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    hit = ok & (t > 1e-6)
    return np.where(hit, t, np.inf), hit


def _intersect_box(prim, o, d):
    oc = o - prim.center
    par = d == 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(par, np.inf, 1.0 / np.where(par, 1.0, d))
    t0 = (-prim.size - oc) * inv
    t1 = (prim.size - oc) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    inside = np.abs(oc) <= prim.size
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    hit = (tf > tn) & (tn > 1e-6)
    return np.where(hit, tn, np.inf), hit


def _intersect_torus(prim, o, d, t_max: float = 6.0):
    """SDF sphere tracing; converges to ~1e-6 of the surface."""
    n = o.shape[0]
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(256):
        if not active.any():
            break
        p = o[active] + t[active, None] * d[active]
        dist = primitive_sdf(prim, p)
        newly_hit = dist < 1e-6
        idx = np.nonzero(active)[0]
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(dist, 0.0)
        escaped = t[idx] > t_max
        active[idx[newly_hit | escaped]] = False
    good = hit & (t > 1e-6)
    return np.where(good, t, np.inf), good


_INTERSECT = {"sphere": _intersect_sphere, "box": _intersect_box,
              "torus": _intersect_torus}


def raytrace_views(scene: SceneSpec, poses: list[CameraPose],
                   width: int = 64, height: int = 64) -> list[ViewRecord]:
    """Analytic ground truth per view: shaded RGB, planar z-depth,
    camera-frame normal, binary mask.  Misses are white / 0 / 0 / 0."""
    records = []
    for pose in poses:
        rays = generate_rays(pose, width, height)
        o, d = rays.origins, rays.directions
        best_t = np.full(len(rays), np.inf)
        best_p = np.full(len(rays), -1, dtype=np.intp)
        for i, prim in enumerate(scene.primitives):
            t, hit = _INTERSECT[prim.kind](prim, o, d)
            closer = hit & (t < best_t)
            best_t = np.where(closer, t, best_t)
            best_p = np.where(closer, i, best_p)
        mask = best_p >= 0

        normal = np.zeros((len(rays), 3))
        albedo = np.zeros((len(rays), 3))
        pts = o + np.where(mask, best_t, 0.0)[:, None] * d
        for i, prim in enumerate(scene.primitives):
            sel = best_p == i
            if sel.any():
                normal[sel] = primitive_normal(prim, pts[sel])
                albedo[sel] = prim.albedo

        rgb = np.ones((len(rays), 3))
        rgb[mask] = _shade(albedo[mask], normal[mask], -d[mask])
        rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0  # 8-bit exact

        n_cam = normal @ pose.R          # world -> camera: R^T n, batched
        n_cam[~mask] = 0.0
        # planar z-depth (distance along the viewing axis), so a frontal
        # plane reads as constant depth and screen-space differentiation
        # recovers the true surface slope
        forward = -pose.E[:3, 2]
        depth = np.where(mask, best_t * (d @ forward), 0.0)

        records.append(ViewRecord(
            pose=pose,
            rgb=rgb.reshape(height, width, 3).astype(np.float32),
            depth=depth.reshape(height, width).astype(np.float32),
            normal=n_cam.reshape(height, width, 3).astype(np.float32),
            mask=mask.reshape(height, width).astype(np.float32),
        ))
    return records


# ---------------------------------------------------------------------------
# condition maps
# ---------------------------------------------------------------------------

def gaussian_blur(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """Separable Gaussian with symmetric edge padding."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k /= k.sum()
    pad = np.pad(img.astype(np.float64), radius, mode="symmetric")
    # rows then columns
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, pad)
    out = np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, out)
    return out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)


def _conv3(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = np.pad(img, 1, mode="symmetric")
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(pad, (3, 3))
    return np.einsum("ijkl,kl->ij", win, k)


def canny_edges(img: np.ndarray, low: float = 100.0, high: float = 200.0) -> np.ndarray:
    """Binary edge map of an RGB image in [0,1].

    Classic pipeline on the 0-255 intensity scale: Rec.601 grayscale,
    5x5 Gaussian (sigma 1.4), Sobel gradients, non-maximum suppression,
    double threshold at (low, high), 8-connected hysteresis.
    """
    gray = (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]) * 255.0
    smooth = gaussian_blur(gray, sigma=1.4, radius=2)
    gx = _conv3(smooth, _SOBEL_X)
    gy = _conv3(smooth, _SOBEL_Y)
    mag = np.hypot(gx, gy)
    thin = _kernels.canny_nms(np.ascontiguousarray(mag),
                              np.ascontiguousarray(gx),
                              np.ascontiguousarray(gy))
    strong = (thin >= high).astype(np.uint8)
    weak = ((thin >= low) & (thin < high)).astype(np.uint8)
    return _kernels.canny_hysteresis(strong, weak).astype(np.float32)


def sketch_proxy(edge: np.ndarray) -> np.ndarray:
    """Soft stroke map: 3x3 dilation of the edges, then a gentle blur."""
    from numpy.lib.stride_tricks import sliding_window_view
    pad = np.pad(edge.astype(np.float64), 1, mode="constant")
    dil = sliding_window_view(pad, (3, 3)).max(axis=(2, 3))
    out = gaussian_blur(dil, sigma=1.0, radius=2)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_condition_set(view: ViewRecord, kind: str, prompt: str = "",
                       ref_index: int = 0) -> ConditionSet:
    """Extract one condition map from a ground-truth view."""
    if kind not in CONDITION_KINDS:
        raise ValueError(f"unknown condition kind {kind!r}")
    mask = view.mask > 0.5
    if not mask.any():
        raise ValueError("cannot build conditions from an empty mask")
    if kind == "edge":
        cmap = canny_edges(view.rgb)
    elif kind == "sketch":
        cmap = sketch_proxy(canny_edges(view.rgb))
    elif kind == "depth":
        d = view.depth
        dmin, dmax = d[mask].min(), d[mask].max()
        if dmax - dmin < 1e-9:
            norm = np.zeros_like(d)   # constant-depth foreground maps to 0
        else:
            norm = (d - dmin) / (dmax - dmin)
        cmap = np.where(mask, norm, 1.0).astype(np.float32)
    else:
        # background normals are zero, so misses land on neutral 0.5 gray
        cmap = ((view.normal + 1.0) / 2.0).astype(np.float32)
    return ConditionSet(kind=kind, map=cmap, prompt=prompt, ref_index=ref_index)
