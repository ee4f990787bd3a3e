"""DDPM noise schedule, forward noising, and the conditional denoising loss."""

from dataclasses import dataclass

import torch

from .corpus import ImageBatch


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def to(self, dtype: torch.dtype) -> "NoiseSchedule":
        return NoiseSchedule(self.timesteps, self.betas.to(dtype),
                             self.alphas.to(dtype), self.alpha_bars.to(dtype))


def build_linear_schedule(timesteps: int, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly spaced from beta_start to beta_end inclusive."""
    if timesteps < 2:
        raise ValueError(f"timesteps must be >= 2, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(timesteps, betas.float(), alphas.float(), alpha_bars.float())


def _pixels(x):
    return x.pixels if isinstance(x, ImageBatch) else x


def _check_t(t, timesteps):
    lo = int(t.min()) if torch.is_tensor(t) else int(t)
    hi = int(t.max()) if torch.is_tensor(t) else int(t)
    if lo < 0 or hi >= timesteps:
        raise ValueError(f"timestep {lo if lo < 0 else hi} outside [0, {timesteps})")


def q_sample(x0, t, eps: torch.Tensor, schedule: NoiseSchedule):
    """Forward noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    `t` may be an int (whole batch at one level) or a per-sample 1-D tensor.
    Output lives in the unbounded noisy space; no clipping.
    """
    _check_t(t, schedule.timesteps)
    pix = _pixels(x0)
    abar = schedule.alpha_bars.to(pix.dtype)[t]
    if torch.is_tensor(t) and t.ndim == 1:
        abar = abar.view(-1, *([1] * (pix.ndim - 1)))
    noisy = abar.sqrt() * pix + (1.0 - abar).sqrt() * eps
    if isinstance(x0, ImageBatch):
        return ImageBatch(noisy, x0.labels)
    return noisy


def cond_loss(model, x0, prompt, t, eps: torch.Tensor | None = None,
              gen: torch.Generator | None = None) -> torch.Tensor:
    """Denoising loss: mean squared error between eps and the model's prediction.

    Mean is over batch and elements; differentiable w.r.t. x0 and prompt.
    """
    pix = _pixels(x0)
    if eps is None:
        eps = torch.randn(pix.shape, generator=gen, dtype=pix.dtype)
    noisy = q_sample(pix, t, eps, model.schedule)
    pred, _ = model.predict_noise(noisy, t, prompt)
    if pred.shape != eps.shape:
        raise RuntimeError(f"model output shape {tuple(pred.shape)} != noise shape {tuple(eps.shape)}")
    return (eps - pred).pow(2).mean()
