"""Fine-tuning mechanisms: base training, Dreambooth with prior preservation,
and the LoRA / textual-inversion variants used for cross-mechanism evaluation."""

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .corpus import TOKEN_IDS, ImageBatch, find_keyword, load_image_batch, save_image_batch, tokenize
from .errors import TrainingError
from .model import LoraAdapter, NoisePredictor
from .sampling import sample_ddim
from .schedule import q_sample
from .seeding import derive_seed, torch_gen


@dataclass
class DreamboothConfig:
    lr: float = 5e-4                  # toy-scale step size
    reference_lr: float = 5e-7        # real-scale value, documented, unused by toy loops
    steps: int = 1000
    batch: int = 2
    prior_weight: float = 1.0
    instance_prompt: str = "a photo of sks person"
    base_prompt: str = "a photo of person"
    class_image_count: int = 8
    optimizer: str = "sgd"            # "sgd" (alternating-attack loops) or "adam" (standalone)


@dataclass
class TIEmbedding:
    """Single learnable embedding row bound to the instance keyword."""

    token_id: int
    keyword: str
    vector: torch.Tensor


def _make_optimizer(name, params, lr):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def _pick(batch: ImageBatch, size: int, gen: torch.Generator) -> torch.Tensor:
    n = len(batch)
    if size >= n:
        return batch.pixels
    idx = torch.randperm(n, generator=gen)[:size]
    return batch.pixels[idx]


def _denoise_step_loss(model, pixels, context, t_scalar, gen):
    """Squared error of the noise prediction for one fresh (t, eps) draw."""
    eps = torch.randn(pixels.shape, generator=gen).to(pixels.dtype)
    noisy = q_sample(pixels, t_scalar, eps, model.schedule)
    pred = model(noisy, t_scalar, context)
    return (eps - pred).pow(2).mean()


def train_base(model: NoisePredictor, corpus: ImageBatch, steps: int,
               lr: float = 1e-3, batch_size: int = 16, seed: int = 0,
               prompt: str = "a photo of person") -> list[float]:
    """Train the base model on the corpus under the class prompt; returns the loss history."""
    context = model.encode_prompt(tokenize(prompt)).tensor.detach()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = model.schedule
    history = []
    for step in range(steps):
        gen = torch_gen(seed, 0xBA5E, step)
        pixels = _pick(corpus, batch_size, gen).to(model.dtype)
        t = torch.randint(0, sched.timesteps, (pixels.shape[0],), generator=gen)
        eps = torch.randn(pixels.shape, generator=gen).to(pixels.dtype)
        noisy = q_sample(pixels, t, eps, sched)
        pred = model(noisy, t, context)
        loss = (eps - pred).pow(2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"base training diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history


def generate_class_images(model: NoisePredictor, base_prompt: str, count: int,
                          cache_dir, seed: int = 0, ddim_steps: int = 50) -> ImageBatch:
    """Sample class-prior images, cached as PNGs for reuse across attack rounds.

    Returns the disk-backed (quantized) pixels so repeated calls are identical.
    """
    cache_dir = Path(cache_dir)
    manifest_path = cache_dir / "manifest.json"
    key = {"prompt": base_prompt, "count": count, "seed": seed, "ddim_steps": ddim_steps}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if all(manifest.get(k) == v for k, v in key.items()):
            return load_image_batch(cache_dir)
    prompt = model.encode_prompt(tokenize(base_prompt))
    batch = sample_ddim(model, prompt, steps=ddim_steps, count=count,
                        seed=derive_seed(seed, 0xC1A55))
    save_image_batch(batch, cache_dir, render_seed=seed, prefix="class", extra=key)
    return load_image_batch(cache_dir)


def dreambooth_finetune(model: NoisePredictor, instance_images: ImageBatch,
                        config: DreamboothConfig, class_images: ImageBatch | None = None,
                        seed: int = 0, steps: int | None = None) -> NoisePredictor:
    """Fine-tune the UNet in place on the instance images with prior preservation.

    Instance images pair with the instance prompt, class images with the base
    prompt; each step draws fresh (t, eps) and (t', eps').  The prompt encoder
    stays frozen.
    """
    steps = config.steps if steps is None else steps
    if config.prior_weight > 0 and class_images is None:
        raise ValueError("prior_weight > 0 requires class images")
    p_new = model.encode_prompt(tokenize(config.instance_prompt)).tensor.detach()
    p_base = model.encode_prompt(tokenize(config.base_prompt)).tensor.detach()
    opt = _make_optimizer(config.optimizer, model.unet_parameters(), config.lr)
    sched = model.schedule
    for step in range(steps):
        gen = torch_gen(seed, 0xD6, step)
        inst = _pick(instance_images, config.batch, gen).to(model.dtype)
        t = int(torch.randint(0, sched.timesteps, (1,), generator=gen))
        loss = _denoise_step_loss(model, inst, p_new, t, gen)
        if config.prior_weight > 0:
            cls = _pick(class_images, config.batch, gen).to(model.dtype)
            t_prior = int(torch.randint(0, sched.timesteps, (1,), generator=gen))
            loss = loss + config.prior_weight * _denoise_step_loss(model, cls, p_base, t_prior, gen)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"dreambooth diverged at step {step}/{steps}: loss={loss.item()} "
                f"(lr={config.lr}, optimizer={config.optimizer})")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


class _frozen:
    """Temporarily disable grads on all model parameters."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.saved = [(p, p.requires_grad) for p in self.model.parameters()]
        for p, _ in self.saved:
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, flag in self.saved:
            p.requires_grad_(flag)


def lora_finetune(model: NoisePredictor, instance_images: ImageBatch,
                  config: DreamboothConfig, class_images: ImageBatch | None = None,
                  rank: int = 4, scale: float = 1.0, seed: int = 0,
                  steps: int | None = None, lr: float | None = None) -> LoraAdapter:
    """Train low-rank attention adapters with the base model frozen."""
    steps = config.steps if steps is None else steps
    if config.prior_weight > 0 and class_images is None:
        raise ValueError("prior_weight > 0 requires class images")
    adapter = LoraAdapter(model.lora_keys(), rank=rank, scale=scale, seed=seed)
    adapter.to(model.dtype)
    p_new = model.encode_prompt(tokenize(config.instance_prompt)).tensor.detach()
    p_base = model.encode_prompt(tokenize(config.base_prompt)).tensor.detach()
    opt = torch.optim.Adam(adapter.parameters(), lr=config.lr if lr is None else lr)
    sched = model.schedule
    with _frozen(model):
        for step in range(steps):
            gen = torch_gen(seed, 0x10AF, step)
            inst = _pick(instance_images, config.batch, gen).to(model.dtype)
            t = int(torch.randint(0, sched.timesteps, (1,), generator=gen))
            eps = torch.randn(inst.shape, generator=gen).to(inst.dtype)
            noisy = q_sample(inst, t, eps, sched)
            pred = model(noisy, t, p_new, adapter=adapter)
            loss = (eps - pred).pow(2).mean()
            if config.prior_weight > 0:
                cls = _pick(class_images, config.batch, gen).to(model.dtype)
                t_prior = int(torch.randint(0, sched.timesteps, (1,), generator=gen))
                eps_p = torch.randn(cls.shape, generator=gen).to(cls.dtype)
                pred_p = model(q_sample(cls, t_prior, eps_p, sched), t_prior, p_base,
                               adapter=adapter)
                loss = loss + config.prior_weight * (eps_p - pred_p).pow(2).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"lora diverged at step {step}/{steps}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return adapter


def textual_inversion_finetune(model: NoisePredictor, instance_images: ImageBatch,
                               config: DreamboothConfig, seed: int = 0,
                               steps: int | None = None, lr: float | None = None) -> TIEmbedding:
    """Optimize only the keyword's embedding row; every model parameter stays frozen."""
    steps = config.steps if steps is None else steps
    keyword, _ = find_keyword(config.instance_prompt, config.base_prompt)
    token_id = TOKEN_IDS[keyword]
    tokens = tokenize(config.instance_prompt)
    row = model.prompt_encoder.embedding.weight[token_id].detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([row], lr=config.lr if lr is None else lr)
    sched = model.schedule
    with _frozen(model):
        for step in range(steps):
            gen = torch_gen(seed, 0x71, step)
            inst = _pick(instance_images, config.batch, gen).to(model.dtype)
            t = int(torch.randint(0, sched.timesteps, (1,), generator=gen))
            eps = torch.randn(inst.shape, generator=gen).to(inst.dtype)
            noisy = q_sample(inst, t, eps, sched)
            context = model.encode_prompt(tokens, overrides={token_id: row}).tensor
            pred = model(noisy, t, context)
            loss = (eps - pred).pow(2).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"textual inversion diverged at step {step}/{steps}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return TIEmbedding(token_id=token_id, keyword=keyword, vector=row.detach())
