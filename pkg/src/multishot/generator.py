"""Pixel-space DiT-style video denoiser, DDPM noise schedule, loss and CFG sampler."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeMismatch
from .layers import MLP, Attention, timestep_embedding

# eps_theta(x_t, t, cond) -> predicted noise, same shape as x_t
NoisePredictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64, index t-1 for step t

    @classmethod
    def linear(cls, timesteps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, timesteps, dtype=np.float64))

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "NoiseSchedule":
        return cls.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return self.alpha_bars[t - 1]

    def digest(self) -> str:
        return hashlib.sha256(self.betas.tobytes()).hexdigest()[:16]


def q_sample(x0: torch.Tensor, alpha_bar, eps: torch.Tensor) -> torch.Tensor:
    """sqrt(abar) * x0 + sqrt(1 - abar) * eps, with abar per batch element or scalar."""
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = torch.as_tensor(alpha_bar, dtype=x0.dtype)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def add_noise(schedule: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    return q_sample(x0, schedule.alpha_bar(np.asarray(t)), eps)


def diffusion_loss(
    eps_model: NoisePredictor,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    cond: torch.Tensor,
    t,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Mean squared error between the true noise and the model's prediction.

    Accepts a single clip (F, H, W, 3) with a (Q, D) condition, or a batch with a
    leading dimension on ``x0``, ``eps`` and ``cond``; ``t`` is a scalar or one
    step per batch element.
    """
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if x0.ndim == 4:
        x0, eps, cond = x0[None], eps[None], cond[None]
    b = x0.shape[0]
    steps = np.asarray(t, dtype=np.int64).reshape(-1)
    if steps.size not in (1, b):
        raise ShapeMismatch(f"{steps.size} timesteps for a batch of {b}")
    steps = np.broadcast_to(steps, (b,)).copy()
    x_t = add_noise(schedule, x0, steps, eps)
    pred = eps_model(x_t, torch.from_numpy(steps), cond)
    if pred.shape != eps.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs eps {tuple(eps.shape)}")
    return F.mse_loss(pred, eps)


def guided_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance, written so w=0 and w=1 reproduce the branches exactly."""
    return (1.0 - w) * eps_uncond + w * eps_cond


@torch.no_grad()
def sample(
    eps_model: NoisePredictor,
    schedule: NoiseSchedule,
    cond: torch.Tensor,
    uncond: torch.Tensor,
    guidance_scale: float,
    seed: int,
    shape: tuple[int, ...],
    dtype: torch.dtype = torch.float32,
    callback: Callable[[int, torch.Tensor, torch.Tensor, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Ancestral DDPM sampling from t=T down to 1; returns a (F, H, W, 3) tensor in [-1, 1].

    ``callback(t, eps_hat, eps_cond, eps_uncond)`` is invoked once per step.
    """
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be non-negative")
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((1, *shape), generator=gen, dtype=torch.float64).to(dtype)
    c, u = cond[None].to(dtype), uncond[None].to(dtype)
    betas, alphas, abars = schedule.betas, schedule.alphas, schedule.alpha_bars
    for t in range(schedule.T, 0, -1):
        tt = torch.tensor([t], dtype=torch.long)
        # separate passes keep each branch bit-identical to its standalone evaluation
        e_c = eps_model(x, tt, c)
        e_u = eps_model(x, tt, u)
        e = guided_eps(e_c, e_u, guidance_scale)
        if callback is not None:
            callback(t, e[0], e_c[0], e_u[0])
        beta, alpha, abar = betas[t - 1], alphas[t - 1], abars[t - 1]
        mean = (x - (beta / np.sqrt(1.0 - abar)) * e) / np.sqrt(alpha)
        if t > 1:
            z = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(dtype)
            x = mean + np.sqrt(beta) * z
        else:
            x = mean
    return x[0].clamp(-1.0, 1.0)


class DiTBlock(nn.Module):
    """adaLN-modulated self-attention, cross-attention to the condition rows, MLP."""

    def __init__(self, width: int, heads: int, d_cond: int, lora_rank: int, lora_alpha: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = Attention(width, heads, lora_rank=lora_rank, lora_alpha=lora_alpha)
        self.norm_c = nn.LayerNorm(width)
        self.cross = Attention(width, heads, kv_dim=d_cond, lora_rank=lora_rank, lora_alpha=lora_alpha)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.mlp = MLP(width)
        self.modulation = nn.Linear(width, 6 * width)
        nn.init.normal_(self.modulation.weight, std=0.02)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, temb, cond):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(F.silu(temb))[:, None].chunk(6, dim=-1)
        x = x + (1 + gate1) * self.attn(self.norm1(x) * (1 + scale1) + shift1)
        x = x + self.cross(self.norm_c(x), context=cond)
        return x + (1 + gate2) * self.mlp(self.norm2(x) * (1 + scale2) + shift2)


class VideoDenoiser(nn.Module):
    """Predicts the noise in a (B, F, H, W, 3) clip given timesteps and (B, Q, D_cond) conditions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p, w = cfg.gen_patch, cfg.gen_width
        if cfg.image_size % p:
            raise ValueError(f"image_size {cfg.image_size} not divisible by gen_patch {p}")
        self.grid = cfg.image_size // p
        self.patch_in = nn.Linear(3 * p * p, w)
        self.spatial_pos = nn.Parameter(torch.randn(self.grid * self.grid, w) * 0.02)
        self.temporal_pos = nn.Parameter(torch.randn(cfg.frames, w) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(
            DiTBlock(w, cfg.gen_heads, cfg.d_cond, cfg.lora_rank, cfg.lora_alpha) for _ in range(cfg.gen_blocks)
        )
        self.norm_out = nn.LayerNorm(w, elementwise_affine=False)
        self.out_modulation = nn.Linear(w, 2 * w)
        nn.init.normal_(self.out_modulation.weight, std=0.02)
        nn.init.zeros_(self.out_modulation.bias)
        self.patch_out = nn.Linear(w, 3 * p * p)

    @property
    def expected_shape(self) -> tuple[int, int, int, int]:
        s = self.cfg.image_size
        return (self.cfg.frames, s, s, 3)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        b, f, h, w, c = x.shape
        p = self.cfg.gen_patch
        x = x.reshape(b, f, h // p, p, w // p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(b, f * (h // p) * (w // p), p * p * c)

    def unpatchify(self, tokens: torch.Tensor, f: int) -> torch.Tensor:
        b = tokens.shape[0]
        p, g = self.cfg.gen_patch, self.grid
        x = tokens.reshape(b, f, g, g, p, p, 3).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(b, f, g * p, g * p, 3)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or tuple(x.shape[1:]) != self.expected_shape:
            raise ShapeMismatch(f"expected (B, {self.expected_shape}) input, got {tuple(x.shape)}")
        b, f = x.shape[:2]
        if cond.ndim != 3 or cond.shape[0] != b or cond.shape[-1] != self.cfg.d_cond:
            raise ShapeMismatch(f"condition shape {tuple(cond.shape)} incompatible with batch {b}")
        t = torch.as_tensor(t).reshape(-1).expand(b)
        tokens = self.patch_in(self.patchify(x))
        pos = (self.temporal_pos[:, None, :] + self.spatial_pos[None]).reshape(-1, tokens.shape[-1])
        tokens = tokens + pos
        temb = self.time_mlp(timestep_embedding(t, self.cfg.gen_width).to(x.dtype))
        for block in self.blocks:
            tokens = block(tokens, temb, cond)
        shift, scale = self.out_modulation(F.silu(temb))[:, None].chunk(2, dim=-1)
        tokens = self.norm_out(tokens) * (1 + scale) + shift
        return self.unpatchify(self.patch_out(tokens), f)
