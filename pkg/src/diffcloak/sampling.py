"""Ancestral DDPM sampling, deterministic DDIM sampling, and DDIM inversion."""

import torch

from .corpus import ImageBatch
from .model import LoraAdapter, NoisePredictor, PromptEmbedding
from .seeding import torch_gen


def _context(prompt):
    return prompt.tensor if isinstance(prompt, PromptEmbedding) else prompt


@torch.no_grad()
def sample_ddpm(model: NoisePredictor, prompt, count: int = 16, seed: int = 0,
                adapter: LoraAdapter | None = None) -> ImageBatch:
    """Ancestral sampling over all schedule steps; clipped to [-1, 1] at the end."""
    sched = model.schedule
    size = model.config.image_size
    gen = torch_gen(seed, 0xDD9)
    x = torch.randn(count, 3, size, size, generator=gen).to(model.dtype)
    ctx = _context(prompt)
    for t in reversed(range(sched.timesteps)):
        eps, _ = model.predict_noise(x, t, ctx, adapter=adapter)
        beta = sched.betas[t].to(x.dtype)
        alpha = sched.alphas[t].to(x.dtype)
        abar = sched.alpha_bars[t].to(x.dtype)
        mean = (x - beta / (1 - abar).sqrt() * eps) / alpha.sqrt()
        if t > 0:
            abar_prev = sched.alpha_bars[t - 1].to(x.dtype)
            var = (1 - abar_prev) / (1 - abar) * beta
            x = mean + var.sqrt() * torch.randn(x.shape, generator=gen).to(x.dtype)
        else:
            x = mean
    labels = torch.full((count,), -1, dtype=torch.long)
    return ImageBatch(x.clamp(-1, 1), labels)


def _ddim_stride(timesteps: int, steps: int) -> int:
    if steps < 1 or timesteps % steps != 0:
        raise ValueError(f"steps={steps} must divide timesteps={timesteps} evenly")
    return timesteps // steps


def _abar(sched, t, dtype):
    if t < 0:
        return torch.tensor(1.0, dtype=dtype)
    return sched.alpha_bars[t].to(dtype)


@torch.no_grad()
def sample_ddim(model: NoisePredictor, prompt, steps: int = 50, eta: float = 0.0,
                start: torch.Tensor | None = None, seed: int = 0, count: int = 16,
                adapter: LoraAdapter | None = None) -> ImageBatch:
    """Denoise along the stride-subsampled timestep sequence; eta=0 is deterministic."""
    sched = model.schedule
    stride = _ddim_stride(sched.timesteps, steps)
    size = model.config.image_size
    gen = torch_gen(seed, 0xDD1)
    if start is None:
        start = torch.randn(count, 3, size, size, generator=gen).to(model.dtype)
    x = start.clone().to(model.dtype)
    ctx = _context(prompt)
    for t in range(sched.timesteps - stride, -1, -stride):
        eps, _ = model.predict_noise(x, t, ctx, adapter=adapter)
        abar = _abar(sched, t, x.dtype)
        abar_prev = _abar(sched, t - stride, x.dtype)
        x0_hat = (x - (1 - abar).sqrt() * eps) / abar.sqrt()
        if eta > 0:
            sigma = eta * ((1 - abar_prev) / (1 - abar) * (1 - abar / abar_prev)).sqrt()
            noise = torch.randn(x.shape, generator=gen).to(x.dtype)
            x = (abar_prev.sqrt() * x0_hat
                 + (1 - abar_prev - sigma ** 2).clamp(min=0).sqrt() * eps
                 + sigma * noise)
        else:
            x = abar_prev.sqrt() * x0_hat + (1 - abar_prev).sqrt() * eps
    labels = torch.full((x.shape[0],), -1, dtype=torch.long)
    return ImageBatch(x.clamp(-1, 1), labels)


@torch.no_grad()
def ddim_invert(model: NoisePredictor, image, prompt, steps: int = 50,
                adapter: LoraAdapter | None = None) -> torch.Tensor:
    """Run the DDIM trajectory backwards from a clean image to its start latent.

    The model is evaluated at each target level t while the state sits at
    t - stride, mirroring sample_ddim's pairing; the usual inversion
    approximation, exact only for a locally constant predictor.
    """
    sched = model.schedule
    stride = _ddim_stride(sched.timesteps, steps)
    x = (image.pixels if isinstance(image, ImageBatch) else image).clone().to(model.dtype)
    ctx = _context(prompt)
    for t in range(0, sched.timesteps, stride):
        eps, _ = model.predict_noise(x, t, ctx, adapter=adapter)
        abar_src = _abar(sched, t - stride, x.dtype)
        abar_dst = _abar(sched, t, x.dtype)
        x0_hat = (x - (1 - abar_src).sqrt() * eps) / abar_src.sqrt()
        x = abar_dst.sqrt() * x0_hat + (1 - abar_dst).sqrt() * eps
    return x
