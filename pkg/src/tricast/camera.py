"""Camera geometry: poses, view normalization, the flat 20-float camera
feature, its MLP embedding, and per-pixel ray generation.

Conventions (fixed here, used by the renderer and the analytic ray tracer
alike): extrinsics are camera-to-world; the camera looks down its own -z
axis with y up and x right; intrinsics are normalized by image size so the
camera feature is resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "CameraPose", "Ray", "RayBundle", "look_at",
    "normalize_to_reference", "canonicalize_poses",
    "flatten_camera", "unflatten_camera",
    "init_camera_embedder", "embed_camera",
    "generate_rays", "ray_box_intersect",
]

_EYE4 = np.eye(4)


@dataclass
class CameraPose:
    """Camera-to-world extrinsic plus normalized pinhole intrinsics."""

    E: np.ndarray                 # 4x4 camera-to-world
    foc_x: float = 1.0            # focal length / image width
    foc_y: float = 1.0            # focal length / image height
    pp_x: float = 0.5             # principal point / image width
    pp_y: float = 0.5             # principal point / image height

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.E.shape != (4, 4):
            raise ValueError(f"extrinsic must be 4x4, got {self.E.shape}")
        self.validate()

    def validate(self, tol: float = 1e-5) -> None:
        R = self.E[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=tol):
            raise ValueError("rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > tol:
            raise ValueError("rotation block must have determinant +1")
        if not np.allclose(self.E[3], [0, 0, 0, 1], atol=tol):
            raise ValueError("last extrinsic row must be [0,0,0,1]")

    @property
    def R(self) -> np.ndarray:
        return self.E[:3, :3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.E[:3, 3]

    def with_extrinsic(self, E: np.ndarray) -> "CameraPose":
        return CameraPose(E, self.foc_x, self.foc_y, self.pp_x, self.pp_y)


@dataclass
class Ray:
    origin: np.ndarray         # 3-vector, world units
    direction: np.ndarray      # unit 3-vector
    t_near: float              # march start (clipped to the [-1,1]^3 box)
    t_far: float               # march end
    hit: bool = True           # False when the ray misses the box


class RayBundle:
    """One ray per pixel, stored as arrays; indexes like a list of Ray."""

    def __init__(self, origins, directions, t_near, t_far, hit):
        self.origins = origins        # (N,3)
        self.directions = directions  # (N,3)
        self.t_near = t_near          # (N,)
        self.t_far = t_far            # (N,)
        self.hit = hit                # (N,) bool

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i],
                   float(self.t_near[i]), float(self.t_far[i]),
                   bool(self.hit[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def slice(self, start: int, stop: int) -> "RayBundle":
        return RayBundle(self.origins[start:stop], self.directions[start:stop],
                         self.t_near[start:stop], self.t_far[start:stop],
                         self.hit[start:stop])


def look_at(eye, target, up=(0.0, 1.0, 0.0), foc_x: float = 1.0,
            foc_y: float = 1.0, pp_x: float = 0.5, pp_y: float = 0.5) -> CameraPose:
    """Camera at ``eye`` looking toward ``target`` (down its own -z)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("look_at: view direction parallel to up")
    right = right / rn
    upv = np.cross(right, fwd)
    E = np.eye(4)
    E[:3, 0] = right
    E[:3, 1] = upv
    E[:3, 2] = -fwd     # camera +z points backward
    E[:3, 3] = eye
    return CameraPose(E, foc_x, foc_y, pp_x, pp_y)


# ---------------------------------------------------------------------------
# view normalization
# ---------------------------------------------------------------------------

def normalize_to_reference(poses: list[CameraPose], ref_index: int = 0) -> list[CameraPose]:
    """Express every pose relative to the reference view.

    The reference pose maps to the identity; pose i maps to E_ref^-1 E_i.
    Pairwise relative transforms are preserved up to conjugation by E_ref.
    """
    ref = poses[ref_index]
    if abs(np.linalg.det(ref.E)) < 1e-12:
        raise ValueError("singular reference extrinsic")
    inv_ref = np.linalg.inv(ref.E)
    return [p.with_extrinsic(inv_ref @ p.E) for p in poses]


def canonicalize_poses(poses: list[CameraPose], ref_index: int = 0,
                       view_distance: float = 2.2) -> list[CameraPose]:
    """Normalize to the reference view, then shift so the object the
    reference camera looks at (``view_distance`` ahead) sits at the origin.

    The renderer's bounding box [-1,1]^3 lives in this canonical frame: the
    reference camera ends up at (0,0,view_distance) looking down -z.
    """
    shift = np.eye(4)
    shift[2, 3] = view_distance
    return [p.with_extrinsic(shift @ p.E)
            for p in normalize_to_reference(poses, ref_index)]


# ---------------------------------------------------------------------------
# the flat camera feature
# ---------------------------------------------------------------------------

def flatten_camera(pose: CameraPose) -> np.ndarray:
    """Pose -> 20 floats: row-major extrinsic then foc_x, foc_y, pp_x, pp_y."""
    return np.concatenate([
        pose.E.reshape(16),
        [pose.foc_x, pose.foc_y, pose.pp_x, pose.pp_y],
    ]).astype(np.float32)


def unflatten_camera(vec) -> CameraPose:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.shape[0] != 20:
        raise ValueError(f"camera feature must have 20 entries, got {vec.shape[0]}")
    return CameraPose(vec[:16].reshape(4, 4), float(vec[16]), float(vec[17]),
                      float(vec[18]), float(vec[19]))


# ---------------------------------------------------------------------------
# camera embedding MLP
# ---------------------------------------------------------------------------

def init_camera_embedder(rng: np.random.Generator, d_out: int,
                         hidden: int | None = None, d_in: int = 20) -> dict[str, Tensor]:
    """Two-hidden-layer GELU MLP mapping the 20-float feature to width d_out."""
    hidden = d_out if hidden is None else hidden

    def lin(fan_in, fan_out):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        return Tensor((rng.standard_normal((fan_in, fan_out)) * scale).astype(np.float32),
                      requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    return {
        "w1": lin(d_in, hidden), "b1": zeros(hidden),
        "w2": lin(hidden, hidden), "b2": zeros(hidden),
        "w3": lin(hidden, d_out), "b3": zeros(d_out),
    }


def embed_camera(c, params: dict[str, Tensor]) -> Tensor:
    """Embed flat camera features (20,) or (B,20) through the pose MLP."""
    x = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float32))
    if x.shape[-1] != params["w1"].shape[0]:
        raise ValueError(
            f"camera feature width {x.shape[-1]} != embedder input {params['w1'].shape[0]}")
    h = T.gelu(x @ params["w1"] + params["b1"])
    h = T.gelu(h @ params["w2"] + params["b2"])
    return h @ params["w3"] + params["b3"]


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------

def ray_box_intersect(origins: np.ndarray, directions: np.ndarray,
                      lo: float = -1.0, hi: float = 1.0):
    """Slab intersection with the axis-aligned box [lo,hi]^3.

    Returns (t_near, t_far, hit). t_near is clipped to >= 0 (marching starts
    at the camera); a ray parallel to an axis counts the slab as
    unconstrained when its origin lies inside that slab and as a miss
    otherwise.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    par = d == 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(par, np.inf, 1.0 / np.where(par, 1.0, d))
    t0 = (lo - o) * inv
    t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    return t_near, t_far, hit


def generate_rays(pose: CameraPose, width: int, height: int) -> RayBundle:
    """One world-space ray per pixel center, row-major pixel order.

    Pixel (u,v) with u rightward and v downward maps through the normalized
    pinhole intrinsics into the camera frame (x right, y up, looking down
    -z), then rotates into the world. March bounds come from intersecting
    the [-1,1]^3 box.
    """
    if pose.foc_x <= 0 or pose.foc_y <= 0:
        raise ValueError("degenerate intrinsics: focal lengths must be positive")
    u = (np.arange(width, dtype=np.float64) + 0.5) / width
    v = (np.arange(height, dtype=np.float64) + 0.5) / height
    uu, vv = np.meshgrid(u, v)                      # (H,W), row-major
    dx = (uu - pose.pp_x) / pose.foc_x
    dy = -(vv - pose.pp_y) / pose.foc_y             # image y down -> camera y up
    dz = -np.ones_like(dx)                          # camera looks down -z
    dirs_cam = np.stack([dx, dy, dz], axis=-1).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    dirs = dirs_cam @ pose.R.T
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    t_near, t_far, hit = ray_box_intersect(origins, dirs)
    return RayBundle(origins, dirs, t_near, t_far, hit)
