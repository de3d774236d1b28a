"""Command-line entry point: dataset generation, panel flattening, model
training, sequence reconstruction, and evaluation.

Grammar: ``uvgarment <command> --config <file> [--seed N] [--out DIR]``.
Configuration is a flat JSON object; every hyperparameter has a default, so
a minimal config only names its inputs. Each command writes the fully
resolved configuration into its output directory.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
failure, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


class CommandError(Exception):
    """Failure with a designated process exit code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# -- config plumbing -------------------------------------------------------------------


def load_config(path):
    p = Path(path)
    if not p.is_file():
        raise CommandError(EXIT_CONFIG, f"config file not found: {p}")
    try:
        with open(p) as f:
            config = json.load(f)
    except json.JSONDecodeError as e:
        raise CommandError(EXIT_CONFIG, f"malformed config {p}: {e}")
    if not isinstance(config, dict):
        raise CommandError(EXIT_CONFIG, "config must be a JSON object")
    return config


def cfg(config, key, default=None, required=False):
    if key in config:
        return config[key]
    if required:
        raise CommandError(EXIT_CONFIG, f"config key '{key}' is required")
    return default


def require_seed(args, config):
    seed = args.seed if args.seed is not None else config.get("seed")
    if seed is None:
        raise CommandError(EXIT_CONFIG,
                           "a seed is required (--seed or config 'seed')")
    return int(seed)


def resolve_out(args, config):
    out = args.out or config.get("out")
    if out is None:
        raise CommandError(EXIT_CONFIG,
                           "an output directory is required (--out or config 'out')")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def require_path(path, kind):
    p = Path(path)
    if not p.exists():
        raise CommandError(EXIT_MISSING, f"missing {kind}: {p}")
    return p


def write_resolved(out, resolved):
    with open(Path(out) / "resolved_config.json", "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def apply_thread_cap(n):
    """Best-effort cap on BLAS worker pools."""
    if n is None:
        return
    n = int(n)
    if n < 1:
        raise CommandError(EXIT_CONFIG, "thread cap must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _write_curve(path, history):
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(history):
            f.write(f"{i + 1},{v:.8f}\n")


# -- commands --------------------------------------------------------------------------


def cmd_synth(args, config):
    from . import synth

    seed = require_seed(args, config)
    out = resolve_out(args, config)
    resolved = {
        "per_category": cfg(config, "per_category", 2),
        "categories": cfg(config, "categories", list(synth.CATEGORIES)),
        "scripts_per_garment": cfg(config, "scripts_per_garment", 2),
        "frames_per_script": cfg(config, "frames_per_script", 8),
        "resolution": cfg(config, "resolution", 64),
        "points_per_frame": cfg(config, "points_per_frame", 1200),
        "test_fraction": cfg(config, "test_fraction", 0.25),
        "arap_iters": cfg(config, "arap_iters", 60),
        "seed": seed,
        "out": str(out),
    }
    specs = synth.default_specs(per_category=resolved["per_category"],
                                rng=np.random.default_rng(seed),
                                categories=tuple(resolved["categories"]))
    synth.build_dataset(out, specs,
                        scripts_per_garment=resolved["scripts_per_garment"],
                        frames_per_script=resolved["frames_per_script"],
                        resolution=resolved["resolution"], seed=seed,
                        points_per_frame=resolved["points_per_frame"],
                        test_fraction=resolved["test_fraction"],
                        arap_iters=resolved["arap_iters"])
    write_resolved(out, resolved)
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_flatten(args, config):
    from . import flatten, meshio
    from .nn import checkpoint

    out = resolve_out(args, config)
    gdir = require_path(cfg(config, "garments", required=True),
                        "garment directory")
    iters = cfg(config, "arap_iters", 100)
    objs = sorted(gdir.rglob("*.obj"))
    if not objs:
        raise CommandError(EXIT_MISSING, f"no OBJ meshes under {gdir}")
    rows = []
    for obj in objs:
        v, t, _ = meshio.read_obj(obj)
        pieces = flatten.cut_mesh(v, t)
        panels = [flatten.arap_flatten(p, iters=iters) for p in pieces]
        flatten.normalize_panels(panels)
        arrays = {}
        for i, p in enumerate(panels):
            arrays[f"v2d_{i}"] = p.vertices2d
            arrays[f"tris_{i}"] = p.triangles.astype(float)
            arrays[f"src_{i}"] = np.asarray(p.source_map, float)
        name = obj.stem if obj.parent == gdir else obj.parent.name
        checkpoint.save_arrays(out / f"{name}_panels.bin", arrays)
        rows.append((name, len(panels)))
    with open(out / "flatten.csv", "w") as f:
        f.write("garment,panels\n")
        for name, n in rows:
            f.write(f"{name},{n}\n")
    write_resolved(out, {"garments": str(gdir), "arap_iters": iters,
                         "out": str(out)})
    print(f"flattened {len(rows)} garments into {out}")
    return EXIT_OK


def _load_manifest(config):
    dataset = require_path(cfg(config, "dataset", required=True),
                           "dataset directory")
    manifest_path = dataset / "manifest.json"
    if not manifest_path.is_file():
        raise CommandError(EXIT_MISSING, f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        return dataset, json.load(f)


def _train_isp(config, seed, out, resolved):
    from . import isp, synth, uvspace

    dataset, manifest = _load_manifest(config)
    resolved.update(steps=cfg(config, "steps", 4000),
                    lr=cfg(config, "lr", 2e-3),
                    batch_per_panel=cfg(config, "batch_per_panel", 192),
                    sdf_weight=cfg(config, "sdf_weight", 3.0),
                    arap_iters=cfg(config, "arap_iters", 60))
    garments = []
    for gid in manifest["splits"]["train"]:
        g = manifest["garments"][gid]
        spec = synth.GarmentSpec(
            category=g["category"], width=g["width"], length=g["length"],
            taper=g["taper"], sleeve_length=g["sleeve_length"],
            sleeve_width=g["sleeve_width"], resolution=g["resolution"])
        garment = synth.gen_garment(spec)
        front_panel, back_panel = synth.garment_panels(
            garment, arap_iters=resolved["arap_iters"])
        lo, hi = uvspace.bounding_box(garment.vertices)
        box = (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
        garments.append((isp.panel_truth(front_panel, garment.front, box),
                         isp.panel_truth(back_panel, garment.back, box)))
    history = []
    model = isp.train_isp(garments, steps=resolved["steps"], lr=resolved["lr"],
                          seed=seed, batch_per_panel=resolved["batch_per_panel"],
                          sdf_weight=resolved["sdf_weight"],
                          log=lambda step, loss, report: history.append(loss))
    isp.save_isp(model, out / "isp.bin")
    _write_curve(out / "isp_curve.csv", history)


def _load_gt_pairs(dataset, manifest, split):
    from . import uvspace

    pairs = []
    for gid in manifest["splits"][split]:
        for uvz in sorted((dataset / "frames" / gid).rglob("*_gt.uvz")):
            pair, _ = uvspace.load_panel_pair(uvz)
            pairs.append(pair)
    if not pairs:
        raise CommandError(EXIT_MISSING,
                           f"no ground-truth UV maps in split '{split}'")
    return pairs


def _train_diffusion(config, seed, out, resolved):
    from . import diffusion

    dataset, manifest = _load_manifest(config)
    resolved.update(steps=cfg(config, "steps", 2000),
                    batch=cfg(config, "batch", 8),
                    lr=cfg(config, "lr", 2e-4),
                    T=cfg(config, "T", 200),
                    beta_start=cfg(config, "beta_start", 1e-4),
                    beta_end=cfg(config, "beta_end", 0.02),
                    base=cfg(config, "base", 32),
                    mults=cfg(config, "mults", [1, 2, 4]),
                    blocks=cfg(config, "blocks", 2),
                    emb_dim=cfg(config, "emb_dim", 64))
    samples = np.stack([diffusion.pack_sample(p)
                        for p in _load_gt_pairs(dataset, manifest, "train")])
    schedule = diffusion.Schedule.linear(T=resolved["T"],
                                         beta_start=resolved["beta_start"],
                                         beta_end=resolved["beta_end"])
    model = diffusion.Denoiser(base=resolved["base"],
                               mults=tuple(resolved["mults"]),
                               blocks=resolved["blocks"],
                               emb_dim=resolved["emb_dim"],
                               rng=np.random.default_rng(seed))
    history = diffusion.train_diffusion(model, schedule, samples,
                                        steps=resolved["steps"],
                                        batch=resolved["batch"],
                                        lr=resolved["lr"], seed=seed)
    diffusion.save_diffusion(model, schedule, out / "diffusion.bin")
    _write_curve(out / "diffusion_curve.csv", history)


def _train_mapper(config, seed, out, resolved):
    from . import mapper, meshio
    from .nn import checkpoint

    dataset, manifest = _load_manifest(config)
    resolved.update(steps=cfg(config, "steps", 3000),
                    lr=cfg(config, "lr", 1e-3),
                    k=cfg(config, "k", manifest.get("resolution", 64)),
                    points_per_step=cfg(config, "points_per_step", 256))
    pairs = []
    for gid in manifest["splits"]["train"]:
        for ply in sorted((dataset / "frames" / gid).rglob("*.ply")):
            assign = ply.with_name(ply.stem + "_assign.bin")
            if not assign.is_file():
                raise CommandError(EXIT_MISSING, f"missing assignments: {assign}")
            pts = meshio.read_ply_points(ply)
            arrays = checkpoint.load_arrays(assign)
            pairs.append((mapper.PointCloudFrame(pts),
                          mapper.PointTargets(arrays["sigma"],
                                              arrays["ku"].astype(int),
                                              arrays["kv"].astype(int))))
    if not pairs:
        raise CommandError(EXIT_MISSING, "no training frames in dataset")
    model, history = mapper.train_mapper(
        pairs, k=resolved["k"], steps=resolved["steps"], lr=resolved["lr"],
        points_per_step=resolved["points_per_step"], seed=seed)
    mapper.save_mapper(model, out / "mapper.bin")
    _write_curve(out / "mapper_curve.csv", history)


def cmd_train(args, config):
    seed = require_seed(args, config)
    out = resolve_out(args, config)
    resolved = {"target": args.target, "seed": seed, "out": str(out),
                "dataset": cfg(config, "dataset", required=True)}
    trainers = {"isp": _train_isp, "diffusion": _train_diffusion,
                "mapper": _train_mapper}
    trainers[args.target](config, seed, out, resolved)
    write_resolved(out, resolved)
    print(f"{args.target} checkpoint written to {out}")
    return EXIT_OK


def _frame_order(path):
    digits = "".join(c for c in path.stem if c.isdigit())
    return (int(digits) if digits else -1, path.stem)


def cmd_reconstruct(args, config):
    from . import diffusion, isp, mapper, meshio, recon

    seed = require_seed(args, config)
    out = resolve_out(args, config)
    seq_dir = require_path(cfg(config, "sequence", required=True),
                           "sequence directory")
    plys = sorted((p for p in seq_dir.glob("*.ply")
                   if not p.stem.endswith("_assign")), key=_frame_order)
    if not plys:
        raise CommandError(EXIT_MISSING, f"no point-cloud frames in {seq_dir}")
    models = recon.ReconModels(
        mapper_model=mapper.load_mapper(
            require_path(cfg(config, "mapper", required=True), "mapper checkpoint")),
        isp_model=isp.load_isp(
            require_path(cfg(config, "isp", required=True), "pattern checkpoint")),
        denoiser=None, schedule=None,
        resolution=cfg(config, "resolution", 64),
        rho=cfg(config, "rho", 2.0),
        lam=cfg(config, "lam", 0.5),
        clip=cfg(config, "clip", 1.0))
    models.denoiser, models.schedule = diffusion.load_diffusion(
        require_path(cfg(config, "diffusion", required=True),
                     "diffusion checkpoint"))
    clouds = [meshio.read_ply_points(p) for p in plys]
    recon.reconstruct_sequence(clouds, models, seed=seed,
                               fit_steps=cfg(config, "fit_steps", 500),
                               out_dir=str(out),
                               use_prev=cfg(config, "use_prev", True))
    write_resolved(out, {"sequence": str(seq_dir), "seed": seed,
                         "out": str(out),
                         "resolution": models.resolution, "rho": models.rho,
                         "lam": models.lam, "clip": models.clip})
    print(f"reconstructed {len(clouds)} frames into {out}")
    return EXIT_OK


def cmd_eval(args, config):
    from . import meshio, metrics

    out = resolve_out(args, config)
    recon_dir = require_path(cfg(config, "recon", required=True),
                             "reconstruction directory")
    gt_dir = require_path(cfg(config, "gt", required=True),
                          "ground-truth directory")
    stems = sorted(set(p.stem for p in recon_dir.glob("*.obj"))
                   & set(p.stem for p in gt_dir.glob("*.obj")), key=str)
    if not stems:
        raise CommandError(EXIT_MISSING,
                           "no OBJ frames common to both directories")
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    samples = cfg(config, "samples", metrics.DEFAULT_SAMPLES)
    cm = cfg(config, "cm_per_unit", metrics.DEFAULT_CM_PER_UNIT)
    d_cf, d_cr = [], []
    for stem in stems:
        vr, tr, _ = meshio.read_obj(recon_dir / f"{stem}.obj")
        vg, tg, _ = meshio.read_obj(gt_dir / f"{stem}.obj")
        d_cf.append(metrics.chamfer((vr, tr), (vg, tg), samples=samples,
                                    seed=seed, cm_per_unit=cm,
                                    symmetric=cfg(config, "symmetric", False)))
        # canonical coordinates default to the mesh's own vertices, which is
        # a correct identity when both meshes share a canonical layout
        canon_r = recon_dir / f"{stem}.canon.xyz"
        canon_g = gt_dir / f"{stem}.canon.xyz"
        cr = meshio.read_xyz_points(canon_r) if canon_r.is_file() else vr
        cg = meshio.read_xyz_points(canon_g) if canon_g.is_file() else vg
        d_cr.append(metrics.correspondence_distance(vr, cr, vg, cg,
                                                    cm_per_unit=cm))
    report = metrics.MetricReport(np.array(d_cf), np.array(d_cr),
                                  thresholds=tuple(cfg(config, "thresholds",
                                                       (3.0, 5.0))))
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    write_resolved(out, {"recon": str(recon_dir), "gt": str(gt_dir),
                         "samples": samples, "cm_per_unit": cm, "seed": seed,
                         "out": str(out)})
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return EXIT_OK


# -- argument parsing / dispatch -------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uvgarment",
        description="garment reconstruction from partial point clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int,
                       default=os.environ.get("UVGARMENT_THREADS"),
                       help="cap BLAS worker threads")

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    common(sub.add_parser("flatten", help="flatten garment meshes into panels"))
    p_train = sub.add_parser("train", help="train one model")
    p_train.add_argument("target", choices=("isp", "diffusion", "mapper"))
    common(p_train)
    common(sub.add_parser("reconstruct", help="reconstruct a cloud sequence"))
    common(sub.add_parser("eval", help="score reconstructions against truth"))
    return parser


COMMANDS = {"synth": cmd_synth, "flatten": cmd_flatten, "train": cmd_train,
            "reconstruct": cmd_reconstruct, "eval": cmd_eval}


def run(argv=None):
    args = build_parser().parse_args(argv)
    apply_thread_cap(args.threads)
    config = load_config(args.config)
    return COMMANDS[args.command](args, config)


def main(argv=None):
    try:
        return run(argv)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except OSError as e:
        print(f"error: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
