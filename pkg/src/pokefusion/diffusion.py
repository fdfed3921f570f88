"""Noise schedule, forward process, loss, guidance and samplers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import decode_latent, save_png
from .model import Denoiser, FusionConfig

SAMPLERS = ("ddpm_ancestral", "ddim_deterministic")
MAX_BETA = 0.999


class NoiseSchedule:
    """Linear beta schedule with cumulative alpha products (float64 tables).

    The 1e-4 -> 0.02 endpoints are quoted for a 1000-step chain; with
    ``rescale`` (default) both are multiplied by 1000/T so a shorter chain
    still ends near pure noise (alpha_bar_T ~ 3e-5 at T=200 instead of 0.13).
    Rescaled betas are capped at ``MAX_BETA`` so very short chains stay valid.
    """

    def __init__(self, T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02, rescale: bool = True):
        if T < 2:
            raise ValueError("schedule needs at least two steps")
        if rescale:
            beta_start = min(beta_start * 1000.0 / T, MAX_BETA / 2)
            beta_end = min(beta_end * 1000.0 / T, MAX_BETA)
        if not 0 < beta_start < beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        self.T = T
        self.beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = torch.cumprod(self.alpha, dim=0)

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t >= self.T).any():
            raise ValueError(f"timestep outside [0, {self.T})")
        return t


def forward_noise(y0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """y_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) eps, with t per batch row or scalar."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t].to(y0.dtype)
    if ab.ndim == 1 and y0.ndim > 1:
        ab = ab.reshape(-1, *([1] * (y0.ndim - 1)))
    return forward_noise_ab(y0, ab, eps)


def forward_noise_ab(y0: torch.Tensor, alpha_bar, eps: torch.Tensor) -> torch.Tensor:
    ab = torch.as_tensor(alpha_bar, dtype=y0.dtype)
    return torch.sqrt(ab) * y0 + torch.sqrt(1.0 - ab) * eps


def training_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def guide(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, omega: float) -> torch.Tensor:
    # (1-w)u + w c: same affine map as u + w(c-u), exact at w in {0, 1}
    return (1.0 - omega) * eps_uncond + omega * eps_cond


def cfg_predict(model: Denoiser, y_t: torch.Tensor, t, token_ids: torch.Tensor, style: torch.Tensor | None,
                omega: float, fusion: FusionConfig | None = None,
                null_tokens: torch.Tensor | None = None) -> torch.Tensor:
    """Classifier-free guided noise prediction.

    The unconditional pass drops text and style together (null tokens and
    the learned null style).
    """
    if omega < 0:
        raise ValueError("guidance scale must be >= 0")
    b = y_t.shape[0]
    if null_tokens is None:
        null_tokens = torch.zeros_like(token_ids)
    null_style = model.null_style_batch(b) if model.cfg.style_mode != "none" else None
    eps_c = model(y_t, t, token_ids, style, fusion)
    if omega == 1.0:
        return guide(eps_c, eps_c, omega)
    eps_u = model(y_t, t, null_tokens, null_style, fusion)
    return guide(eps_u, eps_c, omega)


@dataclass
class GuidanceConfig:
    omega: float = 3.0
    sampler: str = "ddim_deterministic"
    steps_used: int = 50

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")

    def timesteps(self, T: int) -> list[int]:
        if not 1 <= self.steps_used <= T or T % self.steps_used:
            raise ValueError(f"steps_used={self.steps_used} must divide T={T}")
        stride = T // self.steps_used
        return list(range(T - 1, -1, -stride))


def latent_to_model(latent: torch.Tensor) -> torch.Tensor:
    """Map codec latents in [0,1] to the model range [-1,1]."""
    return latent * 2.0 - 1.0


def model_to_latent(y: torch.Tensor) -> torch.Tensor:
    return ((y + 1.0) / 2.0).clamp(0.0, 1.0)


@torch.no_grad()
def sample(model: Denoiser, token_ids: torch.Tensor, style: torch.Tensor | None, guidance: GuidanceConfig,
           fusion: FusionConfig | None = None, seed: int = 0, sched: NoiseSchedule | None = None):
    """Generate latents and decoded images. Returns (latents (B,4,16,16) in [0,1], images (B,32,32,3))."""
    cfg = model.cfg
    sched = sched or NoiseSchedule(cfg.timesteps)
    if sched.T != cfg.timesteps:
        raise ValueError("schedule length disagrees with the model config")
    b = token_ids.shape[0]
    gen = torch.Generator().manual_seed(int(seed))
    shape = (b, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    y = torch.randn(shape, generator=gen, dtype=torch.float64)
    steps = guidance.timesteps(sched.T)
    ab = sched.alpha_bar
    was_training = model.training
    model.eval()
    try:
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else -1
            tt = torch.full((b,), t, dtype=torch.long)
            eps = cfg_predict(model, y.to(torch.get_default_dtype()), tt, token_ids, style,
                              guidance.omega, fusion).to(torch.float64)
            ab_t = ab[t]
            ab_prev = ab[t_prev] if t_prev >= 0 else torch.tensor(1.0, dtype=torch.float64)
            x0 = ((y - torch.sqrt(1 - ab_t) * eps) / torch.sqrt(ab_t)).clamp(-1.0, 1.0)
            eps = (y - torch.sqrt(ab_t) * x0) / torch.sqrt(1 - ab_t)
            if guidance.sampler == "ddim_deterministic":
                y = torch.sqrt(ab_prev) * x0 + torch.sqrt(1 - ab_prev) * eps
            else:
                # ancestral step of the strided chain
                beta_t = 1 - ab_t / ab_prev
                mean = (torch.sqrt(ab_prev) * beta_t / (1 - ab_t)) * x0 \
                    + (torch.sqrt(1 - beta_t) * (1 - ab_prev) / (1 - ab_t)) * y
                if t_prev >= 0:
                    var = beta_t * (1 - ab_prev) / (1 - ab_t)
                    y = mean + torch.sqrt(var) * torch.randn(shape, generator=gen, dtype=torch.float64)
                else:
                    y = mean
    finally:
        model.train(was_training)
    latents = model_to_latent(y).to(torch.float32)
    images = np.stack([decode_latent(l) for l in latents.numpy()])
    return latents, images


def write_samples(images: np.ndarray, out_dir: Path, meta: dict, prefix: str = "sample") -> list[Path]:
    """Write one PNG plus one ``.json`` sidecar per image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(images):
        p = out_dir / f"{prefix}_{i:04d}.png"
        save_png(im, p)
        side = dict(meta, index=i)
        p.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=1))
        paths.append(p)
    return paths
