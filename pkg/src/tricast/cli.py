"""Operator entry point: dataset generation, training, rendering, and
evaluation.

Every command writes a ``manifest.json`` into its output directory before
doing any work (command, config snapshot, seed, version-control describe,
timestamps, outputs), so each run is reproducible from its own artifacts.
Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric abort.
Set TRICAST_THREADS to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import signal
import subprocess
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

LOSS_LOG_HEADER = "step,branch,recon,adv_g,adv_d,clip,total"


class DataError(Exception):
    """Unreadable/unwritable artifacts, mismatched checkpoints, bad data."""


class UsageError(Exception):
    """Bad command-line input not caught by argparse itself."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(out_dir: str, command: str, config: dict, seed: int,
                   outputs: list[str]) -> str:
    """Record the run in ``out_dir`` before any work happens."""
    path = os.path.join(out_dir, "manifest.json")
    doc = {"command": command, "config": config, "seed": seed,
           "git": _git_describe(), "started": _now(), "finished": None,
           "outputs": outputs}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    return path


def finish_manifest(out_dir: str, outputs: list[str] | None = None,
                    note: str | None = None) -> None:
    path = os.path.join(out_dir, "manifest.json")
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    doc["finished"] = _now()
    if outputs is not None:
        doc["outputs"] = outputs
    if note is not None:
        doc["note"] = note
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def _make_out_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w") as f:
            f.write("")
        os.remove(probe)
    except OSError as e:
        raise DataError(f"output directory {path!r} not writable: {e}")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .dataset import make_dataset
    from .scenes import CONDITION_KINDS

    kinds = tuple(k for k in args.kinds.split(",") if k)
    bad = [k for k in kinds if k not in CONDITION_KINDS]
    if bad:
        raise UsageError(f"unknown condition kinds {bad}; "
                         f"choose from {list(CONDITION_KINDS)}")
    if args.n_scenes <= 0:
        raise UsageError("n_scenes must be positive")
    _make_out_dir(args.out)
    snapshot = {"n_scenes": args.n_scenes, "kinds": list(kinds),
                "width": args.width, "height": args.height,
                "n_ring": args.n_ring, "n_random": args.n_random,
                "max_primitives": args.max_primitives}
    write_manifest(args.out, "gen-data", snapshot, args.seed, [])
    dirs = make_dataset(args.out, args.n_scenes, base_seed=args.seed,
                        width=args.width, height=args.height,
                        n_ring=args.n_ring, n_random=args.n_random,
                        cond_kinds=kinds, max_primitives=args.max_primitives)
    finish_manifest(args.out, outputs=[os.path.basename(d) for d in dirs])
    print(f"wrote {len(dirs)} scenes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_STOP = False


def _sigint(_sig, _frame):
    global _STOP
    _STOP = True


def _preview_grid(state, sample, path: str) -> None:
    """Truth/render pairs for the reference and first side view, one row."""
    import numpy as np

    from . import model as M
    from .tensor import no_tape

    mcfg = state.model_cfg
    poses = [v.pose for v in sample.views]
    mod, canon = M.prepare_poses(poses, sample.ref_index, mcfg.view_distance)
    ids = [sample.ref_index] + ([i for i in range(len(poses))
                                 if i != sample.ref_index][:1])
    with no_tape():
        out = M.image_branch(state.params, mcfg,
                             sample.views[sample.ref_index].rgb,
                             mod[sample.ref_index])
        tiles = []
        for i in ids:
            r = M.render_view(out.triplane, state.params["nerf"], canon[i],
                              mcfg.image_size, mcfg.n_samples_train)
            tiles.append(sample.views[i].rgb)
            tiles.append(np.clip(np.asarray(r.rgb.data), 0.0, 1.0))
    from .dataset import write_ppm
    write_ppm(path, np.concatenate(tiles, axis=1))


def _check_resolution(samples, mcfg) -> None:
    got = samples[0].views[0].rgb.shape[0]
    if got != mcfg.image_size:
        raise DataError(f"dataset views are {got}px but the config "
                        f"renders {mcfg.image_size}px")


def _restore_into(state, ckpt_path: str):
    from .training import load_checkpoint, restore_checkpoint
    try:
        ckpt = load_checkpoint(ckpt_path)
        restore_checkpoint(ckpt, state)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {ckpt_path}")
    except ValueError as e:
        raise DataError(f"checkpoint mismatch for {ckpt_path}: {e}")
    return ckpt


def cmd_train(args) -> int:
    import numpy as np

    from .config import build_configs, config_snapshot
    from .dataset import DatasetError, read_dataset
    from .tensor import NumericError
    from .training import init_train_state, joint_step, save_checkpoint

    overrides = {k: v for k, v in vars(args).items()
                 if k in _config_keys() and v is not None}
    mcfg, tcfg = build_configs(args.config, overrides)

    try:
        samples = read_dataset(args.data)
    except (OSError, ValueError, DatasetError) as e:
        raise DataError(f"cannot read dataset {args.data!r}: {e}")
    _check_resolution(samples, mcfg)

    _make_out_dir(args.out)
    write_manifest(args.out, "train", config_snapshot(mcfg, tcfg),
                   tcfg.seed, [])

    state = init_train_state(mcfg, tcfg)
    if args.resume:
        _restore_into(state, args.resume)

    log_path = os.path.join(args.out, "loss_log.csv")
    fresh_log = state.step == 0 or not os.path.exists(log_path)
    log = open(log_path, "w" if fresh_log else "a", encoding="utf-8")
    if fresh_log:
        log.write(LOSS_LOG_HEADER + "\n")

    ckpt_latest = os.path.join(args.out, "ckpt_latest.bin")
    outputs = ["loss_log.csv"]
    global _STOP
    _STOP = False
    prev = signal.signal(signal.SIGINT, _sigint)
    interrupted = False
    try:
        while state.step < tcfg.steps:
            step_rng = np.random.default_rng((tcfg.seed, state.step))
            sample = samples[int(step_rng.integers(len(samples)))]
            try:
                m = joint_step(state, sample, step_rng)
            except NumericError as e:
                log.close()
                finish_manifest(args.out, outputs=outputs,
                                note=f"numeric abort: {e}")
                print(f"numeric abort: {e}", file=sys.stderr)
                if os.path.exists(ckpt_latest):
                    print(f"last good checkpoint: {ckpt_latest}",
                          file=sys.stderr)
                return EXIT_NUMERIC
            log.write(f"{m['step']},{m['branch']},{m['recon']:.6g},"
                      f"{m['adv_g']:.6g},{m['adv_d']:.6g},{m['clip']:.6g},"
                      f"{m['total']:.6g}\n")
            log.flush()
            if args.checkpoint_every and state.step % args.checkpoint_every == 0:
                save_checkpoint(ckpt_latest, state)
            if args.preview_every and state.step % args.preview_every == 0:
                name = f"preview_{state.step:06d}.ppm"
                _preview_grid(state, sample, os.path.join(args.out, name))
                outputs.append(name)
            if _STOP:
                interrupted = True
                break
    finally:
        signal.signal(signal.SIGINT, prev)
        log.close()

    save_checkpoint(ckpt_latest, state)
    outputs.append("ckpt_latest.bin")
    note = f"interrupted at step {state.step}" if interrupted else None
    finish_manifest(args.out, outputs=outputs, note=note)
    if interrupted:
        print(f"interrupted at step {state.step}; checkpoint saved")
    else:
        print(f"trained to step {state.step}; checkpoint saved")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def _state_from_checkpoint(path: str):
    from .config import configs_from_snapshot
    from .training import init_train_state, load_checkpoint, \
        restore_checkpoint
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    except ValueError as e:
        raise DataError(f"cannot read checkpoint {path!r}: {e}")
    mcfg, tcfg = configs_from_snapshot(ckpt.config)
    state = init_train_state(mcfg, tcfg)
    try:
        restore_checkpoint(ckpt, state)
    except ValueError as e:
        raise DataError(f"checkpoint mismatch for {path!r}: {e}")
    return state, mcfg, tcfg


def _load_condition(args, cond_res: int):
    """(cond_map, kind, prompt) from a scene dir, PPM, or raw f32 file.

    Kind resolution: explicit flag first, then the scene dir's single
    stored kind, then channel count (3 distinct channels reads as a
    normal map); grayscale inputs need the flag.
    """
    import numpy as np

    from .dataset import read_ppm, read_scene_dir
    from .scenes import CONDITION_KINDS

    path, kind = args.condition, args.kind
    if kind is not None and kind not in CONDITION_KINDS:
        raise UsageError(f"unknown condition kind {kind!r}")
    if os.path.isdir(path):
        try:
            sample = read_scene_dir(path)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot read scene dir {path!r}: {e}")
        have = sorted(sample.conditions)
        if kind is None:
            if len(have) != 1:
                raise UsageError(f"scene dir has kinds {have}; pass --kind")
            kind = have[0]
        if kind not in sample.conditions:
            raise DataError(f"scene dir lacks kind {kind!r}; has {have}")
        cond = sample.conditions[kind]
        return cond.map, kind, (args.prompt or cond.prompt)
    if not os.path.exists(path):
        raise DataError(f"condition file not found: {path}")
    if path.endswith(".ppm"):
        img = read_ppm(path)
        gray = bool(np.all(img[..., 0] == img[..., 1])
                    and np.all(img[..., 1] == img[..., 2]))
        if kind is None:
            if gray:
                raise UsageError(
                    "grayscale condition image is ambiguous; pass --kind")
            kind = "normal"
        cmap = img[..., 0] if kind in ("edge", "sketch", "depth") else img
    elif path.endswith(".f32"):
        if kind is None:
            raise UsageError("raw .f32 condition needs --kind")
        from .dataset import read_f32
        from .generator import condition_channels
        ch = condition_channels(kind)
        shape = (cond_res, cond_res) if ch == 1 else (cond_res, cond_res, ch)
        try:
            cmap = read_f32(path, shape)
        except ValueError as e:
            raise DataError(str(e))
    else:
        raise UsageError(f"unsupported condition format: {path}")
    if cmap.shape[0] != cond_res or cmap.shape[1] != cond_res:
        raise DataError(f"condition resolution {cmap.shape[:2]} does not "
                        f"match the checkpoint's {cond_res}x{cond_res}")
    return cmap, kind, (args.prompt or "")


def _parse_poses(spec: str):
    from .scenes import orbit_poses
    if spec == "ref":
        return orbit_poses(1, 0)
    if spec.startswith("turntable:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad pose spec {spec!r}")
        if n < 1:
            raise UsageError("turntable needs at least one pose")
        return orbit_poses(n, 0)
    raise UsageError(f"unknown pose spec {spec!r} "
                     "(use 'ref' or 'turntable:N')")


def cmd_render(args) -> int:
    import numpy as np

    from . import model as M
    from .dataset import write_f32, write_ppm
    from .generator import tokenize
    from .tensor import no_tape

    state, mcfg, _ = _state_from_checkpoint(args.checkpoint)
    cmap, kind, prompt_text = _load_condition(args, mcfg.cond_res)
    try:
        prompt = tokenize(prompt_text)
    except ValueError as e:
        raise UsageError(str(e))
    poses = _parse_poses(args.poses)
    n_samples = args.n_samples or mcfg.n_samples_eval

    _make_out_dir(args.out)
    write_manifest(args.out, "render",
                   {"checkpoint": args.checkpoint, "kind": kind,
                    "prompt": prompt_text, "poses": args.poses,
                    "n_samples": n_samples}, 0, [])

    mod, canon = M.prepare_poses(poses, 0, mcfg.view_distance)
    t0 = time.perf_counter()
    with no_tape():
        out = M.condition_branch(state.params, mcfg, cmap, kind, prompt,
                                 mod[0])
        renders = [M.render_view(out.triplane, state.params["nerf"], c,
                                 mcfg.image_size, n_samples)
                   for c in canon]
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    outputs = []
    for i, r in enumerate(renders):
        rgb_name = f"view_{i:02d}_rgb.ppm"
        depth_name = f"view_{i:02d}_depth.f32"
        write_ppm(os.path.join(args.out, rgb_name),
                  np.clip(np.asarray(r.rgb.data), 0.0, 1.0))
        write_f32(os.path.join(args.out, depth_name),
                  np.asarray(r.depth.data, dtype=np.float32))
        outputs += [rgb_name, depth_name]
    finish_manifest(args.out, outputs=outputs)
    print(f"inference_ms={elapsed_ms:.3f}")
    print(f"wrote {len(renders)} views to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _to_rgb(img):
    import numpy as np
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.clip(img, 0.0, 1.0)


def _eval_grid(state, mcfg, sample, kind: str, path: str) -> None:
    """Side-by-side strip: render | conditioning map | re-extracted map."""
    import numpy as np

    from . import model as M
    from .metrics import depth_to_normal_map
    from .scenes import canny_edges, sketch_proxy

    fn = M.make_render_fn(state.params, mcfg)
    (rgb, depth), = fn(sample, kind, [sample.ref_index])
    cond = sample.conditions[kind].map
    mask = sample.views[sample.ref_index].mask > 0.5
    if kind == "edge":
        extracted = canny_edges(rgb)
    elif kind == "sketch":
        extracted = sketch_proxy(canny_edges(rgb))
    elif kind == "depth":
        lo, hi = depth.min(), depth.max()
        extracted = (depth - lo) / (hi - lo) if hi > lo \
            else np.zeros_like(depth)
    else:
        extracted = (depth_to_normal_map(depth, mask) + 1.0) / 2.0
    strip = np.concatenate([_to_rgb(rgb), _to_rgb(cond),
                            _to_rgb(extracted)], axis=1)
    from .dataset import write_ppm
    write_ppm(path, strip)


def cmd_eval(args) -> int:
    from . import model as M
    from .dataset import DatasetError, read_dataset
    from .metrics import evaluate

    state, mcfg, tcfg = _state_from_checkpoint(args.checkpoint)
    try:
        samples = read_dataset(args.data)
    except (OSError, ValueError, DatasetError) as e:
        raise DataError(f"cannot read dataset {args.data!r}: {e}")
    _check_resolution(samples, mcfg)
    if args.max_scenes:
        samples = samples[:args.max_scenes]

    kinds = (tuple(k for k in args.kinds.split(",") if k) if args.kinds
             else tuple(sorted(samples[0].conditions)))
    settings = tuple(s for s in args.settings.split(",") if s)

    out_dir = os.path.dirname(os.path.abspath(args.out_csv)) or "."
    _make_out_dir(out_dir)
    write_manifest(out_dir, "eval",
                   {"checkpoint": args.checkpoint, "kinds": list(kinds),
                    "settings": list(settings), "k": args.k,
                    "n_samples": args.n_samples or mcfg.n_samples_eval},
                   0, [])

    fn = M.make_render_fn(state.params, mcfg, n_samples=args.n_samples)
    try:
        report = evaluate(samples, fn, kinds=kinds, settings=settings,
                          k=args.k)
    except ValueError as e:
        raise DataError(str(e))
    report.to_csv(args.out_csv)
    outputs = [os.path.basename(args.out_csv)]

    if args.grids:
        _make_out_dir(args.grids)
        grid_names = []
        if os.path.abspath(args.grids) != os.path.abspath(out_dir):
            write_manifest(args.grids, "eval",
                           {"checkpoint": args.checkpoint,
                            "kinds": list(kinds)}, 0, [])
        for kind in kinds:
            name = f"grid_{kind}.ppm"
            _eval_grid(state, mcfg, samples[0], kind,
                       os.path.join(args.grids, name))
            grid_names.append(name)
        outputs += grid_names
        if os.path.abspath(args.grids) != os.path.abspath(out_dir):
            finish_manifest(args.grids, outputs=grid_names)
    finish_manifest(out_dir, outputs=outputs)
    print(f"wrote {args.out_csv} "
          f"({len(report.rows)} kind/setting rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _config_keys():
    from .config import CONFIG_TYPES
    return CONFIG_TYPES


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tricast",
        description="Controllable triplane generation: data, training, "
                    "rendering, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a procedural dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n_scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--kinds", default="edge,sketch,depth,normal")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--n_ring", type=int, default=16)
    g.add_argument("--n_random", type=int, default=4)
    g.add_argument("--max_primitives", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the two-branch model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None,
                   help="key=value file; flags below override it")
    t.add_argument("--resume", default=None, help="checkpoint to continue")
    t.add_argument("--checkpoint_every", type=int, default=100)
    t.add_argument("--preview_every", type=int, default=0,
                   help="PPM preview grid cadence (0 = off)")
    for key in _config_keys():
        t.add_argument(f"--{key}", default=None, metavar="V")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a condition")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--condition", required=True,
                   help="scene dir, .ppm, or raw .f32 condition map")
    r.add_argument("--kind", default=None,
                   help="edge|sketch|depth|normal (else auto-detected)")
    r.add_argument("--prompt", default=None)
    r.add_argument("--poses", default="turntable:8")
    r.add_argument("--n_samples", type=int, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="controllability metric report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out_csv", required=True)
    e.add_argument("--kinds", default=None,
                   help="comma list (default: all in the dataset)")
    e.add_argument("--settings", default="reference,all,front-k")
    e.add_argument("--k", type=int, default=4)
    e.add_argument("--n_samples", type=int, default=None)
    e.add_argument("--max_scenes", type=int, default=None)
    e.add_argument("--grids", default=None,
                   help="directory for render|condition|extracted strips")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("TRICAST_THREADS")
    if threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # config errors arrive from lazy imports
        from .config import ConfigError
        from .tensor import NumericError
        if isinstance(e, ConfigError):
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(e, NumericError):
            print(f"numeric abort: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
