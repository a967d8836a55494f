"""Configuration: every tunable as a flat namespaced key with one default.

File format is sectioned "key = value" text; unknown sections or keys are
rejected.  ``reference_text()`` renders the complete documented key set, so
the generated reference is always in sync with the dataclasses.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


def _f(default, help_text: str):
    return field(default=default, metadata={"help": help_text})


@dataclass
class RunCfg:
    seed: int = _f(0, "root seed; all randomness flows from named sub-streams of it")
    out_dir: str = _f("runs/out", "output directory for checkpoints, logs, exports")
    float32: bool = _f(False, "train in 32-bit storage (tests and gradient checks stay 64-bit)")


@dataclass
class DataCfg:
    dataset: str = _f("desk4", "built-in dataset name")
    points: int = _f(4096, "input surface points per training sample")
    color_points: int = _f(8192, "reference surface points for the color loss")
    textured: bool = _f(False, "encode colors and train the texture field")


@dataclass
class RenderCfg:
    dist_min: float = _f(2.0, "camera distance range, lower bound")
    dist_max: float = _f(3.0, "camera distance range, upper bound")
    elev_min_deg: float = _f(-60.0, "camera elevation range in degrees, lower bound")
    elev_max_deg: float = _f(60.0, "camera elevation range in degrees, upper bound")
    fov_y_deg: float = _f(40.0, "vertical field of view in degrees")
    near: float = _f(0.1, "near clip depth")
    far: float = _f(10.0, "far clip depth / background value")


@dataclass
class VaeCfg:
    channels: int = _f(8, "latent channels C per plane")
    triplane_res: int = _f(64, "latent plane resolution H = W")
    grid_res: int = _f(48, "tet grid cells per axis, stage 1")
    grid_res_stage2: int = _f(64, "tet grid cells per axis, stage-2 decoder finetune")
    lambda_smooth: float = _f(0.01, "weight of the Laplacian smoothness loss")
    gamma_kl: float = _f(1e-6, "weight of the KL penalty")
    views: int = _f(4, "rendered views per training step")
    render_res: int = _f(128, "training render resolution (square)")
    soft_tau: float = _f(1e-4, "soft rasterizer temperature (NDC^2 units)")
    depth_gamma: float = _f(0.1, "soft rasterizer depth softmax temperature")
    bg_weight: float = _f(1e-3, "soft rasterizer background weight")
    aug_min: int = _f(32, "resize augmentation: minimum resolution")
    aug_max: int = _f(64, "resize augmentation: maximum resolution")
    point_feat: int = _f(16, "PointNet per-point feature width")
    color_emb_dim: int = _f(16, "color embedding width m (textured mode)")
    enc_channels: str = _f("16,32,64", "encoder UNet channels per level")
    dec_channels: str = _f("16,32,64", "decoder UNet channels per level")
    head_width: int = _f(64, "MLP head hidden width")
    head_depth: int = _f(2, "MLP head residual blocks")
    n_freqs: int = _f(6, "Fourier position-embedding frequencies per axis")
    sdf_prior: str = _f("sphere", "SDF head prior: sphere | none")
    lr: float = _f(2e-3, "AdamW base learning rate (linear decay)")
    weight_decay: float = _f(1e-4, "AdamW decoupled weight decay")
    clip_norm: float = _f(10.0, "global gradient-norm clip (0 disables)")
    steps_stage1: int = _f(1200, "training steps in stage 1")
    steps_stage2: int = _f(400, "decoder finetune steps in stage 2")
    log_every: int = _f(25, "steps between log lines")


@dataclass
class DiffusionCfg:
    timesteps: int = _f(1000, "denoising steps T of the forward process")
    sample_steps: int = _f(50, "fast sampler steps")
    guidance: float = _f(5.0, "classifier-free guidance scale")
    latent_scale: float = _f(0.1, "triplane latent scale factor before diffusion")
    resolution: int = _f(32, "diffusion triplane resolution")
    dropout: float = _f(0.2, "conditioning dropout probability during training")
    cond_dim: int = _f(64, "conditioning vector dimension D_cond")
    channels: str = _f("32,64,128", "diffusion UNet channels per level")
    emb_dim: int = _f(128, "UNet embedding width (time + condition)")
    sin_dim: int = _f(64, "sinusoidal timestep embedding width")
    solver_order: int = _f(2, "ODE sampler order: 1 (DDIM-form) or 2 (multistep)")
    batch: int = _f(8, "training batch size")
    lr: float = _f(1e-3, "AdamW base learning rate (cosine decay)")
    weight_decay: float = _f(1e-4, "AdamW decoupled weight decay")
    clip_norm: float = _f(10.0, "global gradient-norm clip (0 disables)")
    train_steps: int = _f(2500, "training steps")
    finetune_steps: int = _f(600, "unconditional finetune steps")
    log_every: int = _f(50, "steps between log lines")


@dataclass
class EvalCfg:
    chamfer_samples: int = _f(4096, "surface samples per mesh for Chamfer")
    iou_views: int = _f(8, "fixed-seed cameras for mask IoU")
    iou_res: int = _f(256, "render resolution for mask IoU")


_SECTIONS = {
    "run": RunCfg,
    "data": DataCfg,
    "render": RenderCfg,
    "vae": VaeCfg,
    "diffusion": DiffusionCfg,
    "eval": EvalCfg,
}


@dataclass
class Config:
    run: RunCfg = field(default_factory=RunCfg)
    data: DataCfg = field(default_factory=DataCfg)
    render: RenderCfg = field(default_factory=RenderCfg)
    vae: VaeCfg = field(default_factory=VaeCfg)
    diffusion: DiffusionCfg = field(default_factory=DiffusionCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)

    def set_key(self, key: str, raw: str) -> None:
        """Apply 'section.field = raw' with type coercion; unknown keys raise."""
        if "." not in key:
            raise KeyError(f"config key must be section.field, got {key!r}")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise KeyError(f"unknown config section {section!r}")
        target = getattr(self, section)
        if name not in {f.name for f in dataclasses.fields(target)}:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(raw, type(current), key))

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section, cls in _SECTIONS.items():
            obj = getattr(self, section)
            for f in dataclasses.fields(cls):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "Config":
        cfg = cls()
        for key, value in flat.items():
            cfg.set_key(key, str(value))
        return cfg


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean for {key}: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def parse_channels(spec: str) -> tuple[int, ...]:
    return tuple(int(x) for x in spec.split(","))


def load_config(path) -> Config:
    cfg = Config()
    section = None
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in _SECTIONS:
                    raise KeyError(f"{path}:{ln}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            full = key if "." in key else (f"{section}.{key}" if section else key)
            cfg.set_key(full, raw)
    return cfg


def save_config(cfg: Config, path) -> None:
    with open(path, "w") as f:
        for section, cls in _SECTIONS.items():
            f.write(f"[{section}]\n")
            obj = getattr(cfg, section)
            for fld in dataclasses.fields(cls):
                f.write(f"{fld.name} = {getattr(obj, fld.name)}\n")
            f.write("\n")


def reference_text() -> str:
    """Documented reference of every key and its default."""
    lines = ["# Configuration reference (generated)", ""]
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        for fld in dataclasses.fields(cls):
            default = fld.default if fld.default is not dataclasses.MISSING else fld.default_factory()
            help_text = fld.metadata.get("help", "")
            lines.append(f"{fld.name} = {default}")
            lines.append(f"    # {help_text}")
        lines.append("")
    return "\n".join(lines)
