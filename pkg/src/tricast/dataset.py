"""Dataset persistence: scene directories of PPM images and raw float rasters.

Layout per scene (all multi-byte values little-endian):

    <root>/scene_<id>/
        meta.json        scene recipe, poses, prompt, dims, condition kinds
        view_<k>.ppm     8-bit binary RGB (P6)
        depth_<k>.f32    H*W float32, planar
        normal_<k>.f32   3*H*W float32, channel-planar (x plane, y plane, z plane)
        mask_<k>.f32     H*W float32
        cond_<kind>.f32  reference-view condition map (normal kind: 3 planes)

No image codecs involved: PPM for bytes, raw float32 for everything else,
dimensions carried by meta.json.  Read errors name the offending path (and
byte offset where one makes sense).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose
from .scenes import (CONDITION_KINDS, ConditionSet, Primitive, SceneSpec,
                     ViewRecord, make_condition_set, orbit_poses,
                     raytrace_views, sample_scene, scene_prompt)

__all__ = [
    "DatasetError", "SceneSample",
    "write_ppm", "read_ppm", "write_f32", "read_f32",
    "write_scene_dir", "read_scene_dir",
    "write_dataset", "read_dataset", "make_dataset",
]


class DatasetError(Exception):
    """Malformed or missing dataset file; message names the path."""


@dataclass
class SceneSample:
    scene: SceneSpec
    views: list[ViewRecord]
    conditions: dict[str, ConditionSet]
    prompt: str
    ref_index: int = 0


# ---------------------------------------------------------------------------
# low-level file formats
# ---------------------------------------------------------------------------

def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Binary P6 with maxval 255 from an (H,W,3) image in [0,1]."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    data = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0),
                   0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _ppm_tokens(buf: bytes, path: str, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace tokens of a PPM header, skipping comments.
    Returns (tokens, offset just past the final single whitespace)."""
    toks = []
    i = 0
    while len(toks) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise DatasetError(f"{path}: truncated header at byte {i}")
        toks.append(buf[i:j])
        i = j
    return toks, i + 1   # exactly one whitespace byte after maxval


def read_ppm(path: str) -> np.ndarray:
    """(H,W,3) float32 in [0,1] from a binary P6 file."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    toks, offset = _ppm_tokens(buf, path, 4)
    if toks[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {toks[0]!r})")
    try:
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except ValueError:
        raise DatasetError(f"{path}: non-numeric header fields {toks[1:]}")
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    pix = buf[offset:offset + need]
    if len(pix) < need:
        raise DatasetError(
            f"{path}: pixel data truncated at byte {offset + len(pix)} "
            f"(expected {offset + need} bytes total)")
    img = np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3)
    return (img.astype(np.float32) / 255.0)


def write_f32(path: str, arr: np.ndarray) -> None:
    """Raw little-endian float32.  (H,W,C) arrays are stored channel-planar."""
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 3:
        a = np.moveaxis(a, -1, 0)   # channel planes
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(a).tobytes())


def read_f32(path: str, shape: tuple[int, ...]) -> np.ndarray:
    """Read a raster written by write_f32 back into `shape` (trailing
    channel axis for 3-D shapes)."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read raster {path}: {e}") from e
    n = int(np.prod(shape))
    if len(buf) != 4 * n:
        raise DatasetError(
            f"{path}: expected {4 * n} bytes for shape {shape}, "
            f"got {len(buf)}")
    a = np.frombuffer(buf, dtype="<f4")
    if len(shape) == 3:
        h, w, c = shape
        return np.moveaxis(a.reshape(c, h, w), 0, -1).astype(np.float32)
    return a.reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# scene directories
# ---------------------------------------------------------------------------

def _pose_to_meta(p: CameraPose) -> dict:
    return {"extrinsic": p.E.reshape(-1).tolist(),
            "foc_x": p.foc_x, "foc_y": p.foc_y,
            "pp_x": p.pp_x, "pp_y": p.pp_y}


def _pose_from_meta(d: dict) -> CameraPose:
    E = np.array(d["extrinsic"], dtype=np.float64).reshape(4, 4)
    return CameraPose(E, d["foc_x"], d["foc_y"], d["pp_x"], d["pp_y"])


def _prim_to_meta(p: Primitive) -> dict:
    return {"kind": p.kind, "center": p.center.tolist(),
            "size": p.size.tolist(), "color_name": p.color_name,
            "albedo": p.albedo.tolist()}


def _prim_from_meta(d: dict) -> Primitive:
    return Primitive(d["kind"], np.array(d["center"]), np.array(d["size"]),
                     d["color_name"], np.array(d["albedo"]))


def write_scene_dir(sample: SceneSample, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    h, w = sample.views[0].rgb.shape[:2]
    meta = {
        "width": w, "height": h,
        "seed": sample.scene.seed,
        "prompt": sample.prompt,
        "ref_index": sample.ref_index,
        "primitives": [_prim_to_meta(p) for p in sample.scene.primitives],
        "poses": [_pose_to_meta(v.pose) for v in sample.views],
        "condition_kinds": sorted(sample.conditions),
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    for k, v in enumerate(sample.views):
        write_ppm(os.path.join(path, f"view_{k}.ppm"), v.rgb)
        write_f32(os.path.join(path, f"depth_{k}.f32"), v.depth)
        write_f32(os.path.join(path, f"normal_{k}.f32"), v.normal)
        write_f32(os.path.join(path, f"mask_{k}.f32"), v.mask)
    for kind, cond in sample.conditions.items():
        write_f32(os.path.join(path, f"cond_{kind}.f32"), cond.map)


def read_scene_dir(path: str) -> SceneSample:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise DatasetError(f"missing metadata file {meta_path}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"unreadable metadata {meta_path}: {e}") from e
    try:
        w, h = meta["width"], meta["height"]
        poses = [_pose_from_meta(d) for d in meta["poses"]]
        prims = [_prim_from_meta(d) for d in meta["primitives"]]
        scene = SceneSpec(prims, seed=meta["seed"])
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetError(f"invalid metadata in {meta_path}: {e}") from e
    views = []
    for k, pose in enumerate(poses):
        views.append(ViewRecord(
            pose=pose,
            rgb=read_ppm(os.path.join(path, f"view_{k}.ppm")),
            depth=read_f32(os.path.join(path, f"depth_{k}.f32"), (h, w)),
            normal=read_f32(os.path.join(path, f"normal_{k}.f32"), (h, w, 3)),
            mask=read_f32(os.path.join(path, f"mask_{k}.f32"), (h, w)),
        ))
    conditions = {}
    for kind in meta["condition_kinds"]:
        shape = (h, w, 3) if kind == "normal" else (h, w)
        conditions[kind] = ConditionSet(
            kind=kind,
            map=read_f32(os.path.join(path, f"cond_{kind}.f32"), shape),
            prompt=meta["prompt"],
            ref_index=meta["ref_index"],
        )
    return SceneSample(scene=scene, views=views, conditions=conditions,
                       prompt=meta["prompt"], ref_index=meta["ref_index"])


# ---------------------------------------------------------------------------
# whole datasets
# ---------------------------------------------------------------------------

def _scene_dirs(root: str) -> list[str]:
    if not os.path.isdir(root):
        raise DatasetError(f"dataset directory {root} does not exist")
    names = sorted((n for n in os.listdir(root) if n.startswith("scene_")),
                   key=lambda n: int(n.split("_")[1]))
    if not names:
        raise DatasetError(f"no scene_<id> directories under {root}")
    return [os.path.join(root, n) for n in names]


def write_dataset(samples: list[SceneSample], root: str) -> None:
    os.makedirs(root, exist_ok=True)
    for i, s in enumerate(samples):
        write_scene_dir(s, os.path.join(root, f"scene_{i}"))


def read_dataset(root: str) -> list[SceneSample]:
    return [read_scene_dir(d) for d in _scene_dirs(root)]


def build_sample(seed: int, width: int = 64, height: int = 64,
                 n_ring: int = 16, n_random: int = 4,
                 cond_kinds: tuple[str, ...] = CONDITION_KINDS,
                 max_primitives: int = 3) -> SceneSample:
    """Scene + oracle views + reference-view conditions, all from one seed."""
    scene = sample_scene(seed, max_primitives=max_primitives)
    poses = orbit_poses(n_ring, n_random,
                        rng=np.random.default_rng(seed + 1_000_003))
    views = raytrace_views(scene, poses, width, height)
    prompt = scene_prompt(scene)
    ref = 0
    conditions = {k: make_condition_set(views[ref], k, prompt=prompt,
                                        ref_index=ref)
                  for k in cond_kinds}
    return SceneSample(scene=scene, views=views, conditions=conditions,
                       prompt=prompt, ref_index=ref)


def make_dataset(root: str, n_scenes: int, base_seed: int = 0,
                 width: int = 64, height: int = 64,
                 n_ring: int = 16, n_random: int = 4,
                 cond_kinds: tuple[str, ...] = CONDITION_KINDS,
                 max_primitives: int = 3) -> list[str]:
    """Generate and persist a dataset; same arguments, same bytes."""
    os.makedirs(root, exist_ok=True)
    dirs = []
    for i in range(n_scenes):
        sample = build_sample(base_seed + i, width=width, height=height,
                              n_ring=n_ring, n_random=n_random,
                              cond_kinds=cond_kinds,
                              max_primitives=max_primitives)
        d = os.path.join(root, f"scene_{i}")
        write_scene_dir(sample, d)
        dirs.append(d)
    return dirs
