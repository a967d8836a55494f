"""Command-line entry point and end-to-end pipelines.

Commands: gen-data, train-vae, finetune-decoder, train-diffusion,
finetune-uncond, sample, reconstruct, eval, export, config-reference.
Every command honors --config/--seed/--out/--set; all randomness flows from
the root seed through named sub-streams, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffusion as dif
from . import metrics as met
from . import vae as vae_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config, reference_text, save_config
from .render import rasterize_hard, sample_camera, write_pfm, write_pgm
from .rng import stream
from .shapes import get_dataset, sample_colored_pointcloud, sphere_trace_render
from .tetmesh import TriMesh, sample_surface, watertight_report


def export_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY with uchar vertex colors (gray when absent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    verts = np.asarray(mesh.vertices_np, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    n, f = len(verts), len(faces)
    if mesh.colors is not None:
        cols = np.clip(np.round(np.asarray(mesh.colors) * 255.0), 0, 255).astype(np.uint8)
    else:
        cols = np.full((n, 3), 200, dtype=np.uint8)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {f}\n"
        "property list uchar int32 vertex_indices\nend_header\n"
    )
    vdt = np.dtype([("xyz", "<f4", (3,)), ("rgb", "u1", (3,))])
    vbuf = np.empty(n, dtype=vdt)
    vbuf["xyz"] = verts.astype("<f4")
    vbuf["rgb"] = cols
    fdt = np.dtype([("cnt", "u1"), ("idx", "<i4", (3,))])
    fbuf = np.empty(f, dtype=fdt)
    fbuf["cnt"] = 3
    fbuf["idx"] = faces.astype("<i4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vbuf.tobytes())
        fh.write(fbuf.tobytes())


def _vae_ckpt(cfg: Config, model, stage: int, path) -> None:
    meta = {"kind": "vae", "stage": stage, "config": cfg.flat(),
            "steps": cfg.vae.steps_stage1 if stage == 1 else cfg.vae.steps_stage2}
    save_checkpoint(path, model.state_dict(), meta)


def load_vae(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ValueError(f"{path} is not a VAE checkpoint")
    cfg = Config.from_flat(meta["config"])
    model = vae_mod.VaeModel(cfg, stream(cfg.run.seed, "vae.init"))
    model.load_state_dict(tensors)
    return model, cfg, meta


def load_diffusion(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "diffusion":
        raise ValueError(f"{path} is not a diffusion checkpoint")
    cfg = Config.from_flat(meta["config"])
    model = dif.DiffusionModel(cfg, stream(cfg.run.seed, "diffusion.init"))
    model.load_state_dict(tensors)
    model.unconditional = bool(meta.get("unconditional", False))
    return model, cfg, meta


def _out(cfg: Config) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: Config):
    return get_dataset(cfg.data.dataset)


def cmd_gen_data(cfg: Config, args) -> int:
    out = _out(cfg) / "dataset"
    out.mkdir(parents=True, exist_ok=True)
    specs = _dataset(cfg)
    with open(out / "specs.json", "w") as f:
        json.dump([s.to_dict() for s in specs], f, indent=2, sort_keys=True)
    rng = stream(cfg.run.seed, "gendata")
    for spec in specs:
        cloud = sample_colored_pointcloud(spec, cfg.data.points, rng)
        mesh = TriMesh(vertices=cloud[:, :3], faces=np.zeros((0, 3), dtype=np.int64),
                       colors=cloud[:, 3:])
        export_ply(mesh, out / f"{spec.name}_cloud.ply")
    save_config(cfg, out / "config_used.cfg")
    print(f"wrote {len(specs)} shape specs and clouds to {out}")
    return 0


def cmd_train_vae(cfg: Config, args) -> int:
    out = _out(cfg)
    model, _ = vae_mod.train_vae(_dataset(cfg), cfg, stage=1,
                                 log_path=out / "train_vae_stage1.log")
    _vae_ckpt(cfg, model, 1, out / "vae_stage1.tfck")
    print(f"saved {out / 'vae_stage1.tfck'}")
    return 0


def cmd_finetune_decoder(cfg: Config, args) -> int:
    out = _out(cfg)
    ckpt = Path(args.vae or out / "vae_stage1.tfck")
    if not ckpt.exists():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {ckpt}; run train-vae first")
    tensors, meta = load_checkpoint(ckpt)
    cfg_snap = Config.from_flat(meta["config"])
    cfg_snap.run = cfg.run  # keep the caller's seed/out
    model, _ = vae_mod.train_vae(_dataset(cfg_snap), cfg_snap, stage=2, init_state=tensors,
                                 log_path=out / "train_vae_stage2.log")
    _vae_ckpt(cfg_snap, model, 2, out / "vae_stage2.tfck")
    print(f"saved {out / 'vae_stage2.tfck'}")
    return 0


def _pick_vae(cfg: Config, explicit) -> Path:
    out = Path(cfg.run.out_dir)
    if explicit:
        return Path(explicit)
    for name in ("vae_stage2.tfck", "vae_stage1.tfck"):
        if (out / name).exists():
            return out / name
    raise FileNotFoundError(f"no VAE checkpoint under {out}; run train-vae first")


def cmd_train_diffusion(cfg: Config, args) -> int:
    out = _out(cfg)
    vae_model, vae_cfg, _ = load_vae(_pick_vae(cfg, args.vae))
    cfg.vae = vae_cfg.vae  # architecture must match the encoder that made the latents
    cfg.data = vae_cfg.data
    latents, conds, tags = dif.latents_from_vae(vae_model, _dataset(cfg), cfg)
    model, _ = dif.train_diffusion(latents, conds, cfg, log_path=out / "train_diffusion.log")
    meta = {"kind": "diffusion", "config": cfg.flat(), "tags": tags, "unconditional": False}
    save_checkpoint(out / "diffusion.tfck", model.state_dict(), meta)
    print(f"saved {out / 'diffusion.tfck'}")
    return 0


def cmd_finetune_uncond(cfg: Config, args) -> int:
    out = _out(cfg)
    ck = Path(args.diffusion or out / "diffusion.tfck")
    if not ck.exists():
        raise FileNotFoundError(f"diffusion checkpoint not found: {ck}; run train-diffusion first")
    model, dcfg, meta = load_diffusion(ck)
    dcfg.run = cfg.run
    vae_model, _, _ = load_vae(_pick_vae(dcfg, args.vae))
    latents, conds, tags = dif.latents_from_vae(vae_model, _dataset(dcfg), dcfg)
    model, _ = dif.finetune_unconditional(model, latents, conds, dcfg,
                                          log_path=out / "finetune_uncond.log")
    meta = {"kind": "diffusion", "config": dcfg.flat(), "tags": tags, "unconditional": True}
    save_checkpoint(out / "diffusion_uncond.tfck", model.state_dict(), meta)
    print(f"saved {out / 'diffusion_uncond.tfck'}")
    return 0


def cmd_sample(cfg: Config, args) -> int:
    out = _out(cfg)
    ck = Path(args.diffusion or (out / "diffusion_uncond.tfck" if args.uncond else out / "diffusion.tfck"))
    if not ck.exists():
        raise FileNotFoundError(f"diffusion checkpoint not found: {ck}")
    model, dcfg, meta = load_diffusion(ck)
    dcfg.run = cfg.run
    vae_model, _, _ = load_vae(_pick_vae(dcfg, args.vae))
    sched = dif.cosine_schedule(dcfg.diffusion.timesteps)
    tags = args.tag or [""]
    sample_dir = out / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    for tag in tags:
        cond = dif.toy_condition_embed(tag, dcfg.diffusion.cond_dim)
        rng = stream(cfg.run.seed, f"sample.{tag}")
        latents = dif.sample(model, cond[None, :], args.steps or dcfg.diffusion.sample_steps,
                             rng, dcfg, sched, mode=args.mode, n_samples=args.n)
        for i, lat in enumerate(latents):
            z = dif.latent_to_triplane(lat, dcfg)
            with ad.no_grad():
                mesh, _ = vae_model.decode(z, dcfg.vae.grid_res_stage2,
                                           want_color=dcfg.data.textured)
            name = tag if tag else "uncond"
            dst = sample_dir / f"{name}_{i:03d}.ply"
            export_ply(mesh, dst)
            wt = watertight_report(mesh)
            print(f"{dst} faces={mesh.n_faces} closed={wt.is_closed}")
    return 0


def cmd_reconstruct(cfg: Config, args) -> int:
    out = _out(cfg)
    model, vcfg, meta = load_vae(_pick_vae(cfg, args.vae))
    grid = args.grid or vcfg.vae.grid_res_stage2
    rng = stream(cfg.run.seed, "reconstruct.data")
    rec_dir = out / "reconstructions"
    for spec in _dataset(vcfg):
        cloud = sample_colored_pointcloud(spec, vcfg.data.points, rng)
        x = cloud if vcfg.data.textured else cloud[:, :3]
        mesh, _ = vae_mod.reconstruct(model, x, grid, want_color=vcfg.data.textured)
        export_ply(mesh, rec_dir / f"{spec.name}.ply")
        print(f"{rec_dir / (spec.name + '.ply')} faces={mesh.n_faces}")
    return 0


def cmd_eval(cfg: Config, args) -> int:
    out = _out(cfg)
    model, vcfg, meta = load_vae(_pick_vae(cfg, args.vae))
    grid = args.grid or vcfg.vae.grid_res_stage2
    rng = stream(cfg.run.seed, "eval.data")
    lines = []
    for spec in _dataset(vcfg):
        cloud = sample_colored_pointcloud(spec, vcfg.data.points, rng)
        x = cloud if vcfg.data.textured else cloud[:, :3]
        mesh, _ = vae_mod.reconstruct(model, x, grid)
        report = evaluate_mesh_vs_spec(mesh, spec, vcfg, dump_dir=out / "renders" if args.dump_renders else None)
        lines.extend(report.records())
    metrics_path = out / "metrics.txt"
    with open(metrics_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {metrics_path}")
    return 0


def evaluate_mesh_vs_spec(mesh: TriMesh, spec, cfg: Config, dump_dir=None) -> met.MetricReport:
    """Chamfer on surface samples + mask IoU over fixed-seed cameras."""
    ec, rc = cfg.eval, cfg.render
    gt_cloud = sample_colored_pointcloud(spec, ec.chamfer_samples,
                                         stream(cfg.run.seed, f"eval.points.{spec.name}"))[:, :3]
    if mesh.n_faces:
        pred_pts = sample_surface(mesh, ec.chamfer_samples, stream(cfg.run.seed, f"eval.surf.{spec.name}"))[0]
        cd = met.chamfer_l1(pred_pts, gt_cloud)
    else:
        cd = float("inf")
    per_view = []
    for i in range(ec.iou_views):
        cam = sample_camera(
            stream(cfg.run.seed, f"eval.cam.{i}"), (rc.dist_min, rc.dist_max),
            (np.deg2rad(rc.elev_min_deg), np.deg2rad(rc.elev_max_deg)),
            fov_y=np.deg2rad(rc.fov_y_deg), resolution=(ec.iou_res, ec.iou_res),
            near=rc.near, far=rc.far,
        )
        gt = sphere_trace_render(spec, cam)
        pred = rasterize_hard(mesh, cam)
        per_view.append(met.mask_iou(pred.mask_np, gt.mask_np))
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            write_pgm(pred.mask_np, Path(dump_dir) / f"{spec.name}_v{i}_mask.pgm")
            write_pfm(pred.depth_np, Path(dump_dir) / f"{spec.name}_v{i}_depth.pfm")
    return met.MetricReport(sample_id=spec.name, chamfer_l1=cd,
                            mask_iou=float(np.mean(per_view)), per_view=per_view)


def cmd_export(cfg: Config, args) -> int:
    model, vcfg, meta = load_vae(_pick_vae(cfg, args.vae))
    specs = {s.name: s for s in _dataset(vcfg)}
    if args.shape not in specs:
        raise KeyError(f"unknown shape {args.shape!r}; choices: {sorted(specs)}")
    rng = stream(cfg.run.seed, "reconstruct.data")
    cloud = sample_colored_pointcloud(specs[args.shape], vcfg.data.points, rng)
    x = cloud if vcfg.data.textured else cloud[:, :3]
    mesh, _ = vae_mod.reconstruct(model, x, args.grid or vcfg.vae.grid_res_stage2,
                                  want_color=vcfg.data.textured)
    export_ply(mesh, args.output)
    print(f"wrote {args.output} ({mesh.n_faces} faces)")
    return 0


def cmd_config_reference(cfg: Config, args) -> int:
    text = reference_text()
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triforge",
                                description="triplane VAE + latent diffusion mesh generation")
    p.add_argument("--config", help="config file (sectioned key = value)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="override run.out_dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set vae.grid_res=32")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="write dataset fixtures (specs + colored clouds)")
    sub.add_parser("train-vae", help="train VAE stage 1")
    sp = sub.add_parser("finetune-decoder", help="stage 2: freeze encoder, finetune decoder")
    sp.add_argument("--vae", help="stage-1 checkpoint path")
    sp = sub.add_parser("train-diffusion", help="train the conditional latent diffusion model")
    sp.add_argument("--vae", help="VAE checkpoint path")
    sp = sub.add_parser("finetune-uncond", help="finetune diffusion unconditionally")
    sp.add_argument("--diffusion", help="diffusion checkpoint path")
    sp.add_argument("--vae", help="VAE checkpoint path")
    sp = sub.add_parser("sample", help="generate meshes from tags or unconditionally")
    sp.add_argument("--diffusion", help="diffusion checkpoint path")
    sp.add_argument("--vae", help="VAE checkpoint path")
    sp.add_argument("--tag", action="append", help="conditioning tag (repeatable)")
    sp.add_argument("--n", type=int, default=4, help="samples per tag")
    sp.add_argument("--steps", type=int, help="sampler steps (default from config)")
    sp.add_argument("--mode", choices=("ode", "ancestral"), default="ode")
    sp.add_argument("--uncond", action="store_true", help="use the unconditional checkpoint")
    sp = sub.add_parser("reconstruct", help="encode->decode the dataset shapes")
    sp.add_argument("--vae", help="VAE checkpoint path")
    sp.add_argument("--grid", type=int, help="tet grid resolution")
    sp = sub.add_parser("eval", help="Chamfer-L1 + mask IoU for reconstructions")
    sp.add_argument("--vae", help="VAE checkpoint path")
    sp.add_argument("--grid", type=int, help="tet grid resolution")
    sp.add_argument("--dump-renders", action="store_true", help="write PGM/PFM debug images")
    sp = sub.add_parser("export", help="reconstruct one shape and write a PLY")
    sp.add_argument("--vae", help="VAE checkpoint path")
    sp.add_argument("--shape", required=True, help="dataset shape name")
    sp.add_argument("--grid", type=int)
    sp.add_argument("--output", required=True, help="destination .ply path")
    sp = sub.add_parser("config-reference", help="print the documented config reference")
    sp.add_argument("--output", help="write to file instead of stdout")
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "finetune-decoder": cmd_finetune_decoder,
    "train-diffusion": cmd_train_diffusion,
    "finetune-uncond": cmd_finetune_uncond,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "export": cmd_export,
    "config-reference": cmd_config_reference,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else Config()
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.out is not None:
            cfg.run.out_dir = args.out
        for item in args.set:
            if "=" not in item:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            cfg.set_key(key.strip(), value)
        return _COMMANDS[args.command](cfg, args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
