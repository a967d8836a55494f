"""Stage-1 model: point cloud -> triplane Gaussian latent -> textured mesh.

The encoder is a PointNet + UNet producing mu/logvar triplanes; the decoder
refines a latent with a second UNet, queries an MLP head on tet-grid
vertices for SDF + bounded deformation, and extracts the mesh with
marching tetrahedra.  Training is purely render-supervised (soft mask +
depth against sphere-traced ground truth) plus Laplacian smoothness, a KL
penalty and, in textured mode, a color loss at ground-truth surface points.

Stage 1 trains everything at a coarse grid; stage 2 freezes the encoder and
finetunes the decoder at a finer grid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from . import triplane as tpl
from .autodiff import Tensor
from .config import Config, parse_channels
from .optim import AdamW, linear_decay
from .render import RenderOut, rasterize_soft, render_losses, sample_camera
from .rng import stream
from .shapes import ShapeSpec, sample_colored_pointcloud, sphere_trace_render
from .tetmesh import TriMesh, VertexFields, bound_deform, build_grid, laplacian_loss, marching_tets


@dataclass
class LatentDist:
    mu: tpl.Triplane
    logvar: tpl.Triplane  # clamped to [-30, 20]


_GRID_EMB_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _grid_embedding(grid, n_freqs: int) -> np.ndarray:
    """Fourier embedding of the (fixed) grid vertices, cached per resolution."""
    key = (grid.resolution, n_freqs)
    if key not in _GRID_EMB_CACHE:
        _GRID_EMB_CACHE[key] = nets.fourier_embed(grid.verts, n_freqs).data
    return _GRID_EMB_CACHE[key]


class TextureField:
    """Surface color query backed by the refined triplane and the color head."""

    def __init__(self, refined: tpl.Triplane, head: nets.ColorHead | None):
        self.refined = refined
        self.head = head

    def query(self, pts) -> Tensor:
        if self.head is None:
            raise RuntimeError("model was built without a color head (data.textured=false)")
        feats = tpl.sample_features(self.refined, pts)
        return self.head(feats, np.asarray(pts, dtype=np.float64))


class VaeModel(nets.Module):
    def __init__(self, cfg: Config, rng: np.random.Generator):
        vc = cfg.vae
        self.channels = vc.channels
        self.triplane_res = vc.triplane_res
        self.sdf_prior = vc.sdf_prior
        textured = cfg.data.textured
        self.pointnet = nets.PointNetEncoder(
            rng, vc.point_feat, vc.triplane_res,
            color_emb_dim=vc.color_emb_dim if textured else 0, n_freqs=vc.n_freqs,
        )
        self.enc_unet = nets.UNet(rng, vc.point_feat, 2 * vc.channels, parse_channels(vc.enc_channels))
        # start the posterior tight so reparameterization noise does not
        # swamp the mean early in training
        self.enc_unet.out_conv.b.data[vc.channels :] = -6.0
        self.dec_unet = nets.UNet(rng, vc.channels, vc.channels, parse_channels(vc.dec_channels))
        self.sdf_head = nets.SdfDeformHead(rng, 3 * vc.channels, vc.head_width, vc.head_depth, vc.n_freqs)
        self.color_head = (
            nets.ColorHead(rng, 3 * vc.channels, vc.head_width, vc.head_depth, vc.n_freqs)
            if textured else None
        )

    def encoder_parameters(self):
        yield from self.pointnet.named_parameters("pointnet.")
        yield from self.enc_unet.named_parameters("enc_unet.")

    def encode(self, points: np.ndarray) -> LatentDist:
        raw = self.pointnet(points)
        x = ad.reshape(raw.planes, (1,) + tuple(raw.planes.shape))
        out = self.enc_unet.forward_planes(x)  # (1, 3, 2C, H, W)
        c = self.channels
        mu = tpl.Triplane(out[0, :, :c])
        logvar = tpl.Triplane(ad.clip(out[0, :, c:], -30.0, 20.0))
        return LatentDist(mu=mu, logvar=logvar)

    def decode(self, z: tpl.Triplane, grid_res: int, want_color: bool = False):
        refined = tpl.Triplane(
            self.dec_unet.forward_planes(ad.reshape(z.planes, (1,) + tuple(z.planes.shape)))[0]
        )
        grid = build_grid(grid_res)
        feats = tpl.sample_features(refined, grid.verts)
        sdf_raw, deform_raw = self.sdf_head(feats, grid.verts, _grid_embedding(grid, self.sdf_head.n_freqs))
        if self.sdf_prior == "sphere":
            sdf = sdf_raw + Tensor(np.linalg.norm(grid.verts, axis=1) - 0.5)
        else:
            sdf = sdf_raw
        deform = bound_deform(deform_raw, grid_res)
        mesh = marching_tets(grid, VertexFields(sdf=sdf, deform=deform))
        texture = TextureField(refined, self.color_head)
        if want_color and self.color_head is not None and mesh.n_vertices:
            with ad.no_grad():
                mesh.colors = texture.query(mesh.vertices_np).data
        return mesh, texture


def reparam_sample(dist: LatentDist, seed) -> tpl.Triplane:
    """z = mu + exp(logvar / 2) * eps, eps ~ N(0, 1) elementwise."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(dist.mu.planes.shape)
    z = dist.mu.planes + ad.exp(dist.logvar.planes * 0.5) * Tensor(eps)
    return tpl.Triplane(z)


def kl_divergence(dist: LatentDist) -> Tensor:
    """Closed-form KL(q || N(0,1)) summed over latent elements."""
    mu = dist.mu.planes
    lv = dist.logvar.planes
    return ad.tsum(0.5 * (mu * mu + ad.exp(lv) - 1.0 - lv))


def vae_loss(pred_renders, gt_renders, mesh: TriMesh, dist: LatentDist | None,
             colors_pred: Tensor | None, colors_gt: np.ndarray | None, cfg: Config):
    """Combined loss; returns (total, components) with total == sum(components)."""
    vc = cfg.vae
    n_views = len(pred_renders)
    if n_views != len(gt_renders) or n_views == 0:
        raise ValueError("need matching non-empty render lists")
    l_mask = None
    l_depth = None
    for pred, gt in zip(pred_renders, gt_renders):
        lm, ld = render_losses(pred, gt)
        l_mask = lm if l_mask is None else l_mask + lm
        l_depth = ld if l_depth is None else l_depth + ld
    components: dict[str, Tensor] = {
        "mask": l_mask * (1.0 / n_views),
        "depth": l_depth * (1.0 / n_views),
    }
    if vc.lambda_smooth > 0 and mesh.n_vertices:
        components["smooth"] = laplacian_loss(mesh) * vc.lambda_smooth
    if dist is not None and vc.gamma_kl > 0:
        components["kl"] = kl_divergence(dist) * vc.gamma_kl
    if colors_pred is not None:
        diff = colors_pred - Tensor(np.asarray(colors_gt))
        l1 = ad.tmean(ad.tsum(ad.absval(diff), axis=1))
        l2 = ad.tmean(ad.tsum(diff * diff, axis=1))
        components["color"] = l1 + l2
    total = None
    for part in components.values():
        total = part if total is None else total + part
    return total, components


def resize_augment(z: tpl.Triplane, rng: np.random.Generator, lo: int, hi: int) -> tpl.Triplane:
    """Down-sample to a random resolution in [lo, hi], then back up."""
    r = int(rng.integers(lo, hi + 1))
    native = z.resolution
    if r == native:
        return z
    return tpl.resize(tpl.resize(z, r), native)


def train_vae(dataset: list[ShapeSpec], cfg: Config, stage: int,
              init_state: dict[str, np.ndarray] | None = None,
              log_path=None, quiet: bool = False):
    """Run one training stage; returns (model, log_lines).

    Stage 1 trains all parameters at vae.grid_res; stage 2 requires a
    stage-1 state, freezes the encoder, and finetunes the decoder at
    vae.grid_res_stage2.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if stage == 2 and init_state is None:
        raise ValueError("stage 2 requires a stage-1 checkpoint")
    prev_dtype = ad.default_dtype()
    ad.set_default_dtype(np.float32 if cfg.run.float32 else np.float64)
    try:
        return _train_vae(cfg, dataset, stage, init_state, log_path, quiet)
    finally:
        ad.set_default_dtype(prev_dtype)


def _train_vae(cfg, dataset, stage, init_state, log_path, quiet):
    vc = cfg.vae
    rc = cfg.render
    seed = cfg.run.seed
    model = VaeModel(cfg, stream(seed, "vae.init"))
    if init_state is not None:
        model.load_state_dict(init_state)
    if stage == 2:
        for _, p in model.encoder_parameters():
            p.requires_grad = False
    grid_res = vc.grid_res if stage == 1 else vc.grid_res_stage2
    steps = vc.steps_stage1 if stage == 1 else vc.steps_stage2

    data_rng = stream(seed, f"vae.data.stage{stage}")
    noise_rng = stream(seed, f"vae.noise.stage{stage}")
    cam_rng = stream(seed, f"vae.cams.stage{stage}")
    aug_rng = stream(seed, f"vae.aug.stage{stage}")
    color_rng = stream(seed, f"vae.colorpts.stage{stage}")

    opt = AdamW(model.parameters(), lr=vc.lr, weight_decay=vc.weight_decay,
                clip_norm=vc.clip_norm if vc.clip_norm > 0 else None)
    textured = cfg.data.textured
    elev = (np.deg2rad(rc.elev_min_deg), np.deg2rad(rc.elev_max_deg))
    log_lines: list[str] = []
    t0 = time.time()

    for step in range(steps):
        spec = dataset[step % len(dataset)]
        cloud = sample_colored_pointcloud(spec, cfg.data.points, data_rng)
        x = cloud if textured else cloud[:, :3]
        dist = model.encode(x)
        z = reparam_sample(dist, noise_rng)
        z = resize_augment(z, aug_rng, vc.aug_min, vc.aug_max)
        mesh, texture = model.decode(z, grid_res)

        preds: list[RenderOut] = []
        gts: list[RenderOut] = []
        for _ in range(vc.views):
            cam = sample_camera(
                cam_rng, (rc.dist_min, rc.dist_max), elev,
                fov_y=np.deg2rad(rc.fov_y_deg), resolution=(vc.render_res, vc.render_res),
                near=rc.near, far=rc.far,
            )
            gts.append(sphere_trace_render(spec, cam))
            preds.append(rasterize_soft(mesh, cam, vc.soft_tau, vc.depth_gamma, vc.bg_weight))

        colors_pred = colors_gt = None
        if textured:
            ref = sample_colored_pointcloud(spec, cfg.data.color_points, color_rng)
            colors_pred = texture.query(ref[:, :3])
            colors_gt = ref[:, 3:]

        loss, comps = vae_loss(preds, gts, mesh, dist, colors_pred, colors_gt, cfg)
        if not np.isfinite(loss.item()):
            raise RuntimeError(
                f"non-finite loss at stage {stage} step {step}: "
                + " ".join(f"{k}={v.item():.4g}" for k, v in comps.items())
            )
        loss.backward(free=True)
        opt.step(lr=linear_decay(vc.lr, step, steps))
        opt.zero_grad()

        if step % vc.log_every == 0 or step == steps - 1:
            parts = " ".join(f"{k}={v.item():.5f}" for k, v in comps.items())
            line = (
                f"stage={stage} step={step} total={loss.item():.5f} {parts} "
                f"shape={spec.name} faces={mesh.n_faces} "
                f"lr={opt.lr:.2e} time={time.time() - t0:.1f}"
            )
            log_lines.append(line)
            if not quiet:
                print(line, flush=True)
            if log_path is not None:
                with open(log_path, "a") as f:
                    f.write(line + "\n")
    return model, log_lines


def reconstruct(model: VaeModel, points: np.ndarray, grid_res: int, want_color: bool = False):
    """encode -> decode using the posterior mean (deterministic)."""
    with ad.no_grad():
        dist = model.encode(points)
        return model.decode(dist.mu, grid_res, want_color=want_color)
