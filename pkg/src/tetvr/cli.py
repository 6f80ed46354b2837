"""Command-line interface: ``tetvr <command> [flags]``.

Every successful command prints one JSON summary line on stdout.  Exit codes:
0 success, 1 user error (bad flags, missing or malformed inputs), 2 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assets import (AssetError, ImageBuffer, bake_ground_truth, blob_transfer_function,
                     gaussian_blob_volume, load_camera_set, load_raw_volume,
                     load_transfer_function, orbit_cameras, read_image, save_camera_set,
                     write_image)
from .backward import GradientBuffer
from .forward import (DEFAULT_NSUB, composite_background, parse_background, render,
                      render_states)
from .optim import (Dataset, TrainConfig, TrainingError, initial_mesh, psnr, train,
                    view_gradients, write_metrics_csv)
from .raycast import generate_fragments, sort_front_to_back
from .regularizer import RegularizerConfig
from .subdivide import RefineError, refine
from .tetmesh import MeshError, build_regular_grid, load_mesh, save_mesh

log = logging.getLogger("tetvr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text, n=None, what="value"):
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None
    if n is not None and len(vals) not in ((n,) if isinstance(n, int) else n):
        raise UsageError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    return vals


def _resolution(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"resolution must look like 128x128, got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError("resolution must be positive")
    return w, h


def _workers(args):
    n = getattr(args, "threads", 1)
    return (os.cpu_count() or 1) if n == 0 else n


def _summary(**kw):
    print(json.dumps(kw, default=float))
    return 0


# -- dataset helpers ----------------------------------------------------------

def _find_image(base: Path, file_path: str) -> Path:
    p = (base / file_path).resolve()
    for cand in (p, p.with_suffix(".pfm"), p.with_suffix(".png")):
        if cand.is_file():
            return cand
    raise AssetError(f"image for frame {file_path!r} not found next to {base}")


def load_dataset(poses: Path, res=None, linear_png=False) -> Dataset:
    poses = Path(poses)
    if poses.is_dir():
        poses = poses / "transforms.json"
    meta = json.loads(poses.read_text()) if poses.is_file() else None
    if meta is None:
        raise AssetError(f"pose file not found: {poses}")
    cams = load_camera_set(poses)
    images = []
    for cam, frame in zip(cams, meta["frames"]):
        img = read_image(_find_image(poses.parent, frame["file_path"]), linear=linear_png)
        images.append(img)
    if res is not None:
        for img in images:
            if (img.width, img.height) != res:
                raise AssetError("images do not match the requested resolution")
    cams = [c.with_resolution(img.width, img.height) if (c.width, c.height) !=
            (img.width, img.height) else c for c, img in zip(cams, images)]
    return Dataset(cams, images)


def _cameras(args):
    if getattr(args, "poses", None):
        cams = load_camera_set(args.poses)
        if args.res:
            w, h = _resolution(args.res)
            cams = [c.with_resolution(w, h) for c in cams]
        return cams
    w, h = _resolution(args.res or "128x128")
    return orbit_cameras(args.orbit, args.radius, math.radians(args.fov), w, h)


# -- commands ---------------------------------------------------------------------

def cmd_make_grid(args):
    dims = [int(v) for v in _floats(args.dims, 3, "--dims")]
    bbox = _floats(args.bbox, 6, "--bbox")
    mesh = build_regular_grid(dims, (bbox[:3], bbox[3:]), color=args.color)
    mesh.opacities[:] = (1.0 / mesh.diagonal) if args.extinction is None else args.extinction
    save_mesh(args.out, mesh, binary=not args.ascii)
    return _summary(command="make-grid", out=str(args.out), tets=mesh.n_tets,
                    vertices=mesh.n_vertices)


def cmd_bake(args):
    if args.volume in (None, "blob"):
        volume = gaussian_blob_volume()
    else:
        volume = load_raw_volume(args.volume)
    tf = blob_transfer_function() if args.tf in (None, "blob") else \
        load_transfer_function(args.tf)
    cams = _cameras(args)
    bg = parse_background(args.bg)
    images = bake_ground_truth(volume, tf, cams, args.step, args.reference_length, bg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for k, (cam, img) in enumerate(zip(cams, images)):
        name = cam.name or f"r_{k}"
        write_image(out / f"{name}.pfm", img)
        if args.png:
            write_image(out / f"{name}.png", img)
        names.append(f"./{name}")
    save_camera_set(out / "transforms.json", cams, names)
    return _summary(command="bake", out=str(out), views=len(images),
                    width=cams[0].width, height=cams[0].height)


def cmd_render(args):
    mesh = load_mesh(args.mesh)
    cams = load_camera_set(args.poses)
    if args.res:
        w, h = _resolution(args.res)
        cams = [c.with_resolution(w, h) for c in cams]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dropped = degenerate = 0
    for k, cam in enumerate(cams):
        states, stats = render_states(mesh, cam, args.nsub, _workers(args))
        img = composite_background(states, args.bg, cam.width, cam.height)
        name = cam.name or f"r_{k}"
        write_image(out / f"{name}.pfm", img)
        if args.png:
            write_image(out / f"{name}.png", img)
        dropped += stats.dropped_tets
        degenerate += stats.degenerate_segments
    if args.dump_fragments:
        flist = sort_front_to_back(generate_fragments(mesh, cams[0]))
        Path(args.dump_fragments).write_text(flist.dump() + "\n")
    return _summary(command="render", out=str(out), views=len(cams), dropped_tets=dropped,
                    degenerate_segments=degenerate)


def _read_config(path):
    """``key = value`` lines (``#`` comments) or a JSON object."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    cfg = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        cfg[k.replace("-", "_")] = v
    return cfg


_OPT_KEYS = {
    "data": str, "mesh": str, "grid": str, "bbox": str, "out": str, "schedule": str,
    "lr_color": float, "lr_opacity": float, "lr_position": float, "reg_lambda": float,
    "reg_beta": float, "nsub": int, "loss": str, "batch": int, "rule": str,
    "refine_fraction": float, "refine_target": int, "seed": int, "holdout": float,
    "bg": str, "epochs": int, "report": str, "save_grads": str,
}


def cmd_optimize(args):
    cfg = {}
    if args.config:
        cfg.update(_read_config(args.config))
    for key in _OPT_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    unknown = set(cfg) - set(_OPT_KEYS)
    if unknown:
        raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
    try:
        cfg = {k: (_OPT_KEYS[k](v) if not isinstance(v, _OPT_KEYS[k]) else v)
               for k, v in cfg.items()}
    except ValueError as exc:
        raise UsageError(f"bad configuration value: {exc}") from None
    for req in ("data", "out"):
        if req not in cfg:
            raise UsageError(f"optimize needs --{req}")
    data = load_dataset(Path(cfg["data"]))
    if "mesh" in cfg:
        mesh = load_mesh(cfg["mesh"])
    else:
        dims = [int(v) for v in _floats(cfg.get("grid", "16,16,16"), 3, "grid")]
        bbox = _floats(cfg.get("bbox", "-1,-1,-1,1,1,1"), 6, "bbox")
        mesh = initial_mesh(dims, (bbox[:3], bbox[3:]))
    schedule = cfg.get("schedule", "color")
    if "epochs" in cfg:
        schedule = ",".join(["color"] * cfg["epochs"]) if "schedule" not in cfg else schedule
    config = TrainConfig(
        lr_color=cfg.get("lr_color", 0.08), lr_opacity=cfg.get("lr_opacity"),
        lr_position=cfg.get("lr_position", 1e-6),
        reg=RegularizerConfig(cfg.get("reg_lambda", 10.0), cfg.get("reg_beta", 100.0)),
        n_sub=cfg.get("nsub", DEFAULT_NSUB), loss=cfg.get("loss", "l2"),
        batch=cfg.get("batch", 1), schedule=schedule, rule=cfg.get("rule", "adam"),
        refine_fraction=cfg.get("refine_fraction", 0.05),
        refine_target_tets=cfg.get("refine_target"), holdout=cfg.get("holdout", 0.1),
        background=tuple(parse_background(cfg.get("bg"))), seed=cfg.get("seed", 0),
        workers=_workers(args))
    out = Path(cfg["out"])
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch, m, row):
        save_mesh(out / "checkpoints" / f"epoch_{epoch:03d}.tet", m)

    result = train(mesh, data, config, on_epoch=on_epoch)
    save_mesh(out / "mesh.tet", result.mesh)
    write_metrics_csv(out / "metrics.csv", result.metrics)
    _, test = data.split(config.holdout)
    previews = []
    (out / "preview").mkdir(exist_ok=True)
    for k, (cam, target) in enumerate(zip(test.cameras[:3], test.images[:3])):
        img = render(result.mesh, cam, config.n_sub, config.background, config.workers)
        write_image(out / "preview" / f"view_{k}.png", img)
        previews.append((img, target))
    figures = []
    if cfg.get("report", "yes").lower() not in ("no", "false", "0"):
        from .report import write_report
        figures = [str(p) for p in write_report(out / "report", result.metrics, previews)]
    if "save_grads" in cfg:
        acc = GradientBuffer(result.mesh.n_vertices)
        train_set, _ = data.split(config.holdout)
        for cam, target in zip(train_set.cameras, train_set.images):
            _, g = view_gradients(result.mesh, cam, target, config, positions=False)
            if g is None:
                raise TrainingError(f"non-finite loss on view {cam.name}")
            acc.add(g)
        acc.save(cfg["save_grads"])
    final = result.metrics[-1] if result.metrics else {}
    return _summary(command="optimize", out=str(out), epochs=len(result.metrics),
                    final_psnr=final.get("psnr"), tets=result.mesh.n_tets,
                    vertices=result.mesh.n_vertices, degenerate=final.get("degenerate", 0),
                    refine_failures=len(result.refine_failures), figures=figures)


def cmd_subdivide(args):
    mesh = load_mesh(args.mesh)
    try:
        data = np.load(args.grads)
    except (OSError, ValueError) as exc:
        raise AssetError(f"cannot read gradient file {args.grads}: {exc}") from exc
    mags = data["abs_grad_color"]
    if len(mags) != mesh.n_vertices:
        raise UsageError("gradient file does not match the mesh vertex count")
    refined = refine(mesh, mags, args.fraction)
    save_mesh(args.out, refined)
    if args.dump_csp:
        from .subdivide import select_split_vertices, split_around_vertex
        sel = select_split_vertices(mags, args.fraction)
        _, info = split_around_vertex(mesh, int(sel.vertices[0]))
        Path(args.dump_csp).write_text((info.graph.dump() if info else "") + "\n")
    return _summary(command="subdivide", out=str(args.out), tets_before=mesh.n_tets,
                    tets_after=refined.n_tets, vertices=refined.n_vertices)


def cmd_grad_check(args):
    from .gradcheck import check_gradients, random_test_scene
    mesh, cam, target = random_test_scene(args.seed, 32)
    if args.mesh:
        mesh = load_mesh(args.mesh)
    if args.pose:
        cams = load_camera_set(args.pose)
        cam = cams[args.frame].with_resolution(32, 32)
    rng = np.random.default_rng(args.seed)
    target = ImageBuffer(rng.random((cam.height, cam.width, 4)))
    res = check_gradients(mesh, cam, target, args.nsub, args.bg, limit=args.limit, rng=rng)
    for r in res.values():
        print(f"{r.name:9s} max_abs={r.max_abs_err:.3e} max_rel={r.max_rel_err:.3e} "
              f"checked={r.checked} skipped={r.skipped}")
    ok = all(r.passed() for r in res.values())
    _summary(command="grad-check", passed=ok,
             **{f"max_rel_{k}": r.max_rel_err for k, r in res.items()})
    return 0 if ok else 2


def cmd_eval(args):
    a = read_image(args.a)
    b = read_image(args.b)
    if a.data.shape != b.data.shape:
        raise UsageError("images differ in size")
    value = psnr(a, b, args.peak)
    print(f"PSNR {value:.4f} dB")
    return _summary(command="eval", psnr=value if math.isfinite(value) else "inf")


def build_parser():
    p = _Parser(prog="tetvr", description="Differentiable tet-mesh volume renderer.")
    p.add_argument("--version", action="version",
                   version=f"tetvr {__version__} (numpy {np.__version__})")
    p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-grid", help="write a regular tet grid")
    s.add_argument("--dims", required=True)
    s.add_argument("--bbox", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--color", type=float, default=0.5)
    s.add_argument("--extinction", type=float, default=None,
                   help="per-vertex extinction (default 1 / diagonal)")
    s.add_argument("--ascii", action="store_true")
    s.set_defaults(func=cmd_make_grid)

    s = sub.add_parser("bake", help="ray-march ground-truth images of a scalar volume")
    s.add_argument("--volume", default="blob", help=".raw volume or 'blob'")
    s.add_argument("--tf", default="blob", help="transfer function file or 'blob'")
    s.add_argument("--poses", help="transforms.json; otherwise an orbit is generated")
    s.add_argument("--orbit", type=int, default=64)
    s.add_argument("--radius", type=float, default=3.5)
    s.add_argument("--fov", type=float, default=55.0, help="horizontal FOV in degrees")
    s.add_argument("--res", default=None)
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--reference-length", type=float, default=None)
    s.add_argument("--bg", default="0,0,0,1")
    s.add_argument("--png", action="store_true", help="also write sRGB previews")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bake)

    s = sub.add_parser("render", help="render a mesh for every pose")
    s.add_argument("--mesh", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--nsub", type=int, default=DEFAULT_NSUB)
    s.add_argument("--bg", default="0,0,0,1")
    s.add_argument("--res", default=None)
    s.add_argument("--png", action="store_true")
    s.add_argument("--dump-fragments", default=None,
                   help="write the first view's sorted fragment lists as text")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("optimize", help="fit vertex attributes to a dataset")
    s.add_argument("--config", default=None)
    s.add_argument("--data")
    s.add_argument("--mesh")
    s.add_argument("--grid")
    s.add_argument("--bbox")
    s.add_argument("--out")
    s.add_argument("--schedule")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr-color", type=float)
    s.add_argument("--lr-opacity", type=float)
    s.add_argument("--lr-position", type=float)
    s.add_argument("--reg-lambda", type=float)
    s.add_argument("--reg-beta", type=float)
    s.add_argument("--nsub", type=int)
    s.add_argument("--loss", choices=("l1", "l2"))
    s.add_argument("--batch", type=int)
    s.add_argument("--rule", choices=("adam", "sgd"))
    s.add_argument("--refine-fraction", type=float)
    s.add_argument("--refine-target", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--holdout", type=float)
    s.add_argument("--bg")
    s.add_argument("--report", help="'no' disables the matplotlib report")
    s.add_argument("--save-grads", help="write accumulated gradients (.npz) at the end")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("subdivide", help="refine around high-gradient vertices")
    s.add_argument("--mesh", required=True)
    s.add_argument("--grads", required=True)
    s.add_argument("--fraction", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-csp", default=None)
    s.set_defaults(func=cmd_subdivide)

    s = sub.add_parser("grad-check", help="finite-difference check of the adjoint pass")
    s.add_argument("--mesh")
    s.add_argument("--pose")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--nsub", type=int, default=4)
    s.add_argument("--bg", default="0.1,0.2,0.3,0.7")
    s.add_argument("--limit", type=int, default=None)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("eval", help="PSNR between two images")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--peak", type=float, default=1.0)
    s.set_defaults(func=cmd_eval)
    return p


_NEGATIVE_LIST = re.compile(r"^-[\d.][\d.,eE+-]*$")


def _join_negative_values(argv):
    """Glue values like ``-1,-1,-1,1,1,1`` to their flag so argparse keeps them."""
    out = []
    for tok in argv:
        if out and _NEGATIVE_LIST.match(tok) and out[-1].startswith("--") and "=" not in out[-1]:
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = _join_negative_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, AssetError, MeshError, RefineError, TrainingError, FileNotFoundError,
            ValueError, KeyError) as exc:
        msg = str(exc)
        if isinstance(exc, FileNotFoundError) and exc.filename:
            msg = f"file not found: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is an internal bug
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
