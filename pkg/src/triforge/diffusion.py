"""Stage-2 model: latent diffusion over scaled, rolled-out triplanes.

Variance-preserving forward process z_t = alpha_t z_0 + sigma_t eps with a
cosine schedule; the UNet predicts v = alpha_t eps - sigma_t z_0, from which
clean sample and noise are recovered algebraically.  Conditioning enters via
LayerNorm + concat with the timestep embedding + AdaGN; classifier-free
guidance trains by randomly zeroing the conditioning vector.  The fast
sampler is a deterministic exponential-integrator ODE in (z0_hat, eps_hat)
form with an optional second-order multistep correction; the final step
returns z0_hat directly.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from . import triplane as tpl
from .autodiff import Tensor
from .config import Config, parse_channels
from .optim import AdamW, cosine_decay
from .rng import stream


@dataclass
class NoiseSchedule:
    timesteps: int
    alpha: np.ndarray  # (T,)
    sigma: np.ndarray  # (T,)


def cosine_schedule(timesteps: int, s: float = 0.008) -> NoiseSchedule:
    """alpha_t = cos(pi/2 * (t/T + s) / (1 + s)), sigma_t = sqrt(1 - alpha_t^2)."""
    if timesteps < 2:
        raise ValueError("need at least 2 timesteps")
    t = np.arange(timesteps, dtype=np.float64)
    alpha = np.cos(0.5 * np.pi * (t / timesteps + s) / (1.0 + s))
    sigma = np.sqrt(1.0 - alpha * alpha)
    return NoiseSchedule(timesteps=timesteps, alpha=alpha, sigma=sigma)


def _coeffs(sched: NoiseSchedule, t, ndim: int):
    """Schedule coefficients broadcastable against an ndim-dimensional batch."""
    a = sched.alpha[t]
    s = sched.sigma[t]
    if np.ndim(t):
        shape = (len(np.atleast_1d(t)),) + (1,) * (ndim - 1)
        return a.reshape(shape), s.reshape(shape)
    return a, s


def _ndim(x) -> int:
    return x.ndim if hasattr(x, "ndim") else np.ndim(x)


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """Forward process: z_t = alpha_t z0 + sigma_t eps."""
    a, s = _coeffs(sched, t, _ndim(z0))
    return a * z0 + s * eps


def v_target(z0, eps, t, sched: NoiseSchedule):
    a, s = _coeffs(sched, t, _ndim(z0))
    return a * eps - s * z0


def invert_v(z_t, v, t, sched: NoiseSchedule):
    """(z0_hat, eps_hat) from a v prediction; exact under alpha^2+sigma^2=1."""
    a, s = _coeffs(sched, t, _ndim(z_t))
    return a * z_t - s * v, s * z_t + a * v


class DiffusionModel(nets.Module):
    """UNet over stacked diffusion-resolution triplanes with AdaGN conditioning."""

    def __init__(self, cfg: Config, rng: np.random.Generator):
        dc = cfg.diffusion
        self.cond_dim = dc.cond_dim
        self.timesteps = dc.timesteps
        self.unconditional = False  # set by finetune_unconditional
        self.temb = nets.TimestepEmbed(rng, dc.sin_dim, dc.emb_dim)
        self.fuse = nets.CondFuse(rng, dc.cond_dim, dc.emb_dim, dc.emb_dim)
        c = cfg.vae.channels
        self.unet = nets.UNet(rng, c, c, parse_channels(dc.channels), emb_dim=dc.emb_dim, zero_out=True)

    def embed(self, t, cond) -> Tensor:
        t_arr = np.atleast_1d(np.asarray(t))
        if np.any(t_arr < 0) or np.any(t_arr >= self.timesteps):
            raise ValueError(f"timestep out of range [0, {self.timesteps})")
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        return self.fuse(Tensor(cond), self.temb(t_arr))

    def predict_v(self, z_t, t, cond) -> Tensor:
        """z_t: (B, 3, C, h, w); t: (B,) ints; cond: (B, D)."""
        z_t = ad.as_tensor(z_t)
        emb = self.embed(t, cond)
        return self.unet.forward_planes(z_t, emb)


def toy_condition_embed(tag: str, dim: int = 64) -> np.ndarray:
    """Deterministic unit-norm pseudo-embedding of a tag; empty tag -> zeros."""
    if tag == "":
        return np.zeros(dim)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


CONDITION_EMBEDDERS = {"toy": toy_condition_embed}


def get_embedder(name: str):
    """Registry hook so a real encoder can replace the toy embedder."""
    if name not in CONDITION_EMBEDDERS:
        raise KeyError(f"unknown condition embedder {name!r}")
    return CONDITION_EMBEDDERS[name]


def diffusion_step_loss(model: DiffusionModel, z0_batch: np.ndarray, cond_batch: np.ndarray,
                        rng: np.random.Generator, cfg: Config, sched: NoiseSchedule) -> Tensor:
    """Mean squared v-prediction error with conditioning dropout.

    z0_batch must already be scaled by the latent factor and resized to the
    diffusion resolution; draw order (t, eps, dropout) is fixed.
    """
    b = len(z0_batch)
    t = rng.integers(0, sched.timesteps, size=b)
    eps = rng.standard_normal(z0_batch.shape)
    drop = rng.random(b) < cfg.diffusion.dropout
    cond = np.array(cond_batch, dtype=np.float64, copy=True)
    cond[drop] = 0.0
    z_t = q_sample(z0_batch, t, eps, sched)
    target = v_target(z0_batch, eps, t, sched)
    v_hat = model.predict_v(z_t, t, cond)
    diff = v_hat - Tensor(target)
    loss = ad.tmean(diff * diff)
    if not np.isfinite(loss.item()):
        raise RuntimeError("non-finite diffusion loss")
    return loss


def cfg_predict(model: DiffusionModel, z_t, t, cond, scale: float) -> np.ndarray:
    """v_uncond + scale * (v_cond - v_uncond); scale=1 is conditional only."""
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    with ad.no_grad():
        v_u = model.predict_v(z_t, t, np.zeros_like(cond)).data
        if scale == 0.0 or not np.any(cond):
            return v_u
        v_c = model.predict_v(z_t, t, cond).data
    return v_u + scale * (v_c - v_u)


def sample(model: DiffusionModel, cond, steps: int, seed, cfg: Config,
           sched: NoiseSchedule, mode: str = "ode", n_samples: int = 1) -> np.ndarray:
    """Generate diffusion-resolution latents (n, 3, C, h, w).

    ode mode: deterministic exponential-integrator steps on a uniform time
    grid, optional 2nd-order eps extrapolation, final step emits z0_hat.
    ancestral mode: adds schedule-consistent noise per step (eta = 1).
    """
    if steps < 1:
        raise ValueError("need steps >= 1")
    if mode not in ("ode", "ancestral"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    dc = cfg.diffusion
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if model.unconditional:
        cond = np.zeros_like(cond)
    if len(cond) == 1 and n_samples > 1:
        cond = np.repeat(cond, n_samples, axis=0)
    n = len(cond)
    c = model.unet.stem.w.shape[1]
    shape = (n, 3, c, dc.resolution, dc.resolution)
    z = rng.standard_normal(shape)
    ts = np.unique(np.round(np.linspace(sched.timesteps - 1, 0, steps)).astype(np.int64))[::-1]
    eps_prev = None
    t_prev = None
    for k, t in enumerate(ts):
        t_arr = np.full(n, t, dtype=np.int64)
        v_hat = cfg_predict(model, z, t_arr, cond, dc.guidance)
        z0_hat, eps_hat = invert_v(z, v_hat, t, sched)
        if mode == "ode" and dc.solver_order >= 2 and eps_prev is not None and k < len(ts) - 1:
            r = (t - ts[k + 1]) / max(t_prev - t, 1)
            eps_use = eps_hat + 0.5 * r * (eps_hat - eps_prev)
            z0_use = (z - sched.sigma[t] * eps_use) / sched.alpha[t]
        else:
            eps_use, z0_use = eps_hat, z0_hat
        if k == len(ts) - 1:
            z = z0_use
        else:
            t_next = ts[k + 1]
            a_n, s_n = sched.alpha[t_next], sched.sigma[t_next]
            if mode == "ode":
                z = a_n * z0_use + s_n * eps_use
            else:
                a_t, s_t = sched.alpha[t], sched.sigma[t]
                var = (s_n / s_t) ** 2 * (1.0 - a_t**2 / a_n**2)
                sig = np.sqrt(max(var, 0.0))
                direction = np.sqrt(max(s_n**2 - sig**2, 0.0))
                z = a_n * z0_hat + direction * eps_hat + sig * rng.standard_normal(shape)
        eps_prev, t_prev = eps_hat, t
    return z


def latents_from_vae(vae_model, dataset, cfg: Config):
    """Posterior means, scaled and resized to the diffusion resolution.

    Returns (latents (N, 3, C, h, w), conds (N, D), tags).
    """
    from .shapes import sample_colored_pointcloud
    from .vae import VaeModel  # noqa: F401  (typing only)

    dc = cfg.diffusion
    rng = stream(cfg.run.seed, "diffusion.dataset")
    latents = []
    conds = []
    tags = []
    with ad.no_grad():
        for spec in dataset:
            cloud = sample_colored_pointcloud(spec, cfg.data.points, rng)
            x = cloud if cfg.data.textured else cloud[:, :3]
            dist = vae_model.encode(x)
            mu = tpl.Triplane(dist.mu.planes * dc.latent_scale)
            mu = tpl.resize(mu, dc.resolution)
            latents.append(mu.planes.data)
            conds.append(toy_condition_embed(spec.name, dc.cond_dim))
            tags.append(spec.name)
    return np.stack(latents), np.stack(conds), tags


def latent_to_triplane(latent: np.ndarray, cfg: Config) -> tpl.Triplane:
    """Un-scale and resize one generated latent back to the VAE resolution."""
    z = tpl.Triplane(Tensor(np.asarray(latent)))
    z = tpl.resize(z, cfg.vae.triplane_res)
    return tpl.Triplane(z.planes / cfg.diffusion.latent_scale)


def train_diffusion(latents: np.ndarray, conds: np.ndarray, cfg: Config,
                    model: DiffusionModel | None = None, steps: int | None = None,
                    force_uncond: bool = False, log_path=None, quiet: bool = False,
                    stream_tag: str = "train"):
    """Standard loop over diffusion_step_loss; AdamW + cosine LR decay."""
    prev_dtype = ad.default_dtype()
    ad.set_default_dtype(np.float32 if cfg.run.float32 else np.float64)
    try:
        return _train_diffusion(latents, conds, cfg, model, steps, force_uncond,
                                log_path, quiet, stream_tag)
    finally:
        ad.set_default_dtype(prev_dtype)


def _train_diffusion(latents, conds, cfg, model, steps, force_uncond, log_path, quiet, stream_tag):
    dc = cfg.diffusion
    sched = cosine_schedule(dc.timesteps)
    if model is None:
        model = DiffusionModel(cfg, stream(cfg.run.seed, "diffusion.init"))
    steps = dc.train_steps if steps is None else steps
    rng = stream(cfg.run.seed, f"diffusion.{stream_tag}")
    opt = AdamW(model.parameters(), lr=dc.lr, weight_decay=dc.weight_decay,
                clip_norm=dc.clip_norm if dc.clip_norm > 0 else None)
    log_lines = []
    t0 = time.time()
    for step in range(steps):
        idx = rng.integers(0, len(latents), size=min(dc.batch, len(latents) * 2))
        cond_batch = np.zeros_like(conds[idx]) if force_uncond else conds[idx]
        loss = diffusion_step_loss(model, latents[idx], cond_batch, rng, cfg, sched)
        loss.backward(free=True)
        opt.step(lr=cosine_decay(dc.lr, step, steps))
        opt.zero_grad()
        if step % dc.log_every == 0 or step == steps - 1:
            line = f"step={step} loss={loss.item():.6f} lr={opt.lr:.2e} time={time.time() - t0:.1f}"
            log_lines.append(line)
            if not quiet:
                print(line, flush=True)
            if log_path is not None:
                with open(log_path, "a") as f:
                    f.write(line + "\n")
    return model, log_lines


def finetune_unconditional(model: DiffusionModel, latents: np.ndarray, conds: np.ndarray,
                           cfg: Config, log_path=None, quiet: bool = False):
    """Zero the conditioning pathway and mark the model unconditional."""
    model, lines = train_diffusion(
        latents, conds, cfg, model=model, steps=cfg.diffusion.finetune_steps,
        force_uncond=True, log_path=log_path, quiet=quiet, stream_tag="finetune_uncond",
    )
    model.unconditional = True
    return model, lines
