"""Two-stage anti-customization attack engine.

Stage 1 ascends the denoising loss over the prompt embedding to produce an
adversarial prompt vector.  Stage 2 alternates surrogate fine-tuning with
projected sign-gradient updates on an image perturbation, driven by a
segment-ensembled gradient of the denoising loss plus self-/cross-attention
disruption terms.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .corpus import ImageBatch, tokenize
from .customize import DreamboothConfig, dreambooth_finetune
from .errors import AttackError, DegenerateAttentionWarning, DegenerateGradientWarning, TrainingError
from .model import NoisePredictor, PromptEmbedding, clone_model
from .schedule import cond_loss
from .seeding import derive_seed, torch_gen

VARIANTS = ("full", "cond_only_ensemble", "cond_only_single_step",
            "self_attn_only", "cross_attn_only")

LOG_COLUMNS = ("outer_round", "inner_iter", "segment_scores_json",
               "L_cond", "L_SA", "L_CA", "L_A", "delta_linf")


@dataclass
class AttackConfig:
    segments: int = 25            # B, timestep segments per ensemble gradient
    alpha1: float = 0.5           # cross- vs self-attention mix inside L_A
    alpha2: float = 0.4           # attention-gradient weight in the total gradient
    outer_rounds: int = 50        # alternating train/attack rounds
    inner_iters: int = 6          # PGD iterations per round
    db_steps: int = 3             # surrogate fine-tune steps per round
    prompt_rounds: int = 500      # adversarial-prompt iterations
    omega: float = 0.05           # L-inf perturbation budget
    eta: float = 0.005            # PGD step size
    prompt_lr: float = 0.005      # adversarial-prompt step size
    cross_attn_sign: float = 1.0  # +1 ascends cosine alignment, -1 descends
    seed: int = 0

    @property
    def total_rounds(self) -> int:
        return self.outer_rounds * self.inner_iters

    def validate(self, timesteps: int) -> list[str]:
        problems = []
        if self.segments < 1 or timesteps % self.segments != 0:
            problems.append(f"segments={self.segments} must divide timesteps={timesteps}")
        if not (0.0 <= self.alpha1 <= 1.0):
            problems.append(f"alpha1={self.alpha1} outside [0, 1]")
        if self.alpha2 < 0:
            problems.append(f"alpha2={self.alpha2} must be >= 0")
        if self.omega <= 0 or self.eta <= 0:
            problems.append("omega and eta must be positive")
        if self.cross_attn_sign not in (1.0, -1.0):
            problems.append(f"cross_attn_sign={self.cross_attn_sign} must be +1 or -1")
        return problems


@dataclass
class AdversarialPromptState:
    embedding: PromptEmbedding      # source == "adversarial"
    iterations_done: int
    lr: float
    loss_series: list[float] = field(default_factory=list)


@dataclass
class PerturbationState:
    delta: torch.Tensor
    omega: float
    eta: float
    round: int
    x0: torch.Tensor                # the protected pixels, for range re-clipping


@dataclass
class GradientBundle:
    g_cond: torch.Tensor            # summed raw denoising-loss gradient
    g_attn: torch.Tensor            # summed raw attention-loss gradient
    g_total: torch.Tensor           # normalized mix used by the PGD step
    cond_scores: list[float]        # per-segment mean |gradient|
    attn_scores: list[float]
    losses: dict[str, float]        # segment means: cond, sa, ca, attn
    timesteps: list[int]


def normalize_l1(g: torch.Tensor) -> torch.Tensor:
    """Scale to unit L1 norm; an all-zero input stays zero and raises a warning."""
    norm = g.abs().sum()
    if norm == 0:
        warnings.warn("all-zero gradient, normalization skipped", DegenerateGradientWarning)
        return torch.zeros_like(g)
    return g / norm


def sample_segment_timesteps(segments: int, timesteps: int,
                             gen: torch.Generator) -> torch.Tensor:
    """One uniformly random timestep from each of the equal-width segments."""
    if timesteps % segments != 0:
        raise ValueError(f"segments={segments} must divide timesteps={timesteps}")
    width = timesteps // segments
    offsets = torch.randint(0, width, (segments,), generator=gen)
    return torch.arange(segments) * width + offsets


def prompt_attack(model: NoisePredictor, x0, init_prompt: PromptEmbedding,
                  rounds: int, lr: float, seed: int = 0,
                  state: AdversarialPromptState | None = None) -> AdversarialPromptState:
    """Gradient-ascend the denoising loss over the prompt matrix.

    One uniformly random timestep per iteration; the gradient is L1-normalized
    before the step.  Pass a previous state to resume (per-iteration seeding
    makes resumed runs identical to uninterrupted ones).
    """
    pixels = (x0.pixels if isinstance(x0, ImageBatch) else x0).to(model.dtype)
    if state is None:
        vec = init_prompt.tensor.detach().clone().requires_grad_(True)
        start, series = 0, []
    else:
        vec = state.embedding.tensor.detach().clone().requires_grad_(True)
        start, series = state.iterations_done, list(state.loss_series)
    sched = model.schedule
    degenerate_streak = 0
    for r in range(start, start + rounds):
        gen = torch_gen(seed, 0xA9, r)
        t = int(torch.randint(0, sched.timesteps, (1,), generator=gen))
        eps = torch.randn(pixels.shape, generator=gen).to(pixels.dtype)
        loss = cond_loss(model, pixels, PromptEmbedding(vec, "adversarial"), t, eps)
        grad = torch.autograd.grad(loss, vec)[0]
        if grad.abs().sum() == 0:
            degenerate_streak += 1
            if degenerate_streak >= 10:
                raise AttackError(f"stage=prompt_attack: 10 consecutive degenerate "
                                  f"gradients at iteration {r}")
        else:
            degenerate_streak = 0
        with torch.no_grad():
            vec += lr * normalize_l1(grad)
        series.append(loss.item())
    return AdversarialPromptState(
        PromptEmbedding(vec.detach(), "adversarial"), start + rounds, lr, series)


def _sum_mse(adv_entries, clean_entries):
    total = torch.zeros((), dtype=adv_entries[0].output.dtype)
    for a, c in zip(adv_entries, clean_entries):
        total = total + F.mse_loss(a.output, c.output.detach())
    return total


def _sum_cosine(adv_entries, clean_entries):
    total = torch.zeros((), dtype=adv_entries[0].output.dtype)
    for a, c in zip(adv_entries, clean_entries):
        flat_a, flat_b = a.output.reshape(-1), c.output.detach().reshape(-1)
        na, nb = flat_a.norm(), flat_b.norm()
        if na.item() == 0.0 or nb.item() == 0.0:
            warnings.warn(f"zero-norm attention output in {a.module_id}; term counts as 0",
                          DegenerateAttentionWarning)
            continue
        total = total + (flat_a * flat_b).sum() / (na * nb)
    return total


def self_attn_loss(model: NoisePredictor, x_adv_t: torch.Tensor, x_clean_t: torch.Tensor,
                   t, prompt: PromptEmbedding, module_ids=None) -> torch.Tensor:
    """Summed per-layer MSE between adversarial and clean self-attention outputs.

    Both inputs must be noised at the same (t, eps); the clean trace is a
    constant target.
    """
    _, adv = model.predict_noise(x_adv_t, t, prompt, capture=True)
    with torch.no_grad():
        _, clean = model.predict_noise(x_clean_t, t, prompt, capture=True)
    adv_e, clean_e = adv.select("self", module_ids), clean.select("self", module_ids)
    if not adv_e:
        raise RuntimeError("no self-attention layers captured")
    return _sum_mse(adv_e, clean_e)


def cross_attn_loss(model: NoisePredictor, x_adv_t: torch.Tensor, x_clean_t: torch.Tensor,
                    t, instance_prompt: PromptEmbedding,
                    apv: AdversarialPromptState, module_ids=None) -> torch.Tensor:
    """Summed cosine similarity between cross-attention outputs of the
    adversarial branch (instance prompt) and the clean branch (adversarial
    prompt vector); the clean/adversarial-prompt side is constant."""
    _, adv = model.predict_noise(x_adv_t, t, instance_prompt, capture=True)
    with torch.no_grad():
        _, clean = model.predict_noise(x_clean_t, t, apv.embedding, capture=True)
    adv_e, clean_e = adv.select("cross", module_ids), clean.select("cross", module_ids)
    if not adv_e:
        raise RuntimeError("no cross-attention layers captured")
    return _sum_cosine(adv_e, clean_e)


def attention_loss(l_sa: torch.Tensor, l_ca: torch.Tensor, alpha1: float) -> torch.Tensor:
    """Mix the two attention losses: alpha1 * cross + (1 - alpha1) * self."""
    if not (0.0 <= alpha1 <= 1.0):
        raise ValueError(f"alpha1={alpha1} outside [0, 1]")
    return alpha1 * l_ca + (1.0 - alpha1) * l_sa


def _segment_means(per_element: torch.Tensor, segments: int) -> torch.Tensor:
    return per_element.reshape(segments, -1).mean(dim=1)


def ensemble_gradient(model: NoisePredictor, x0: torch.Tensor, delta: torch.Tensor,
                      instance_prompt: PromptEmbedding,
                      apv: AdversarialPromptState | None,
                      config: AttackConfig, seed: int,
                      use_self: bool = True, use_cross: bool = True,
                      segments: int | None = None) -> GradientBundle:
    """Segment-ensembled perturbation gradient.

    Draws one (t, eps) per segment, shared between the adversarial and clean
    branches, and evaluates every segment in a single batched forward pass.
    Per-loss gradients are summed over segments, L1-normalized separately,
    and mixed with alpha2 into the total gradient.
    """
    sched = model.schedule
    B = config.segments if segments is None else segments
    N = x0.shape[0]
    gen = torch_gen(seed, 0x96)
    t_seg = sample_segment_timesteps(B, sched.timesteps, gen)
    eps = torch.randn((B * N, *x0.shape[1:]), generator=gen).to(model.dtype)

    x0 = x0.to(model.dtype)
    delta = delta.detach().to(model.dtype)
    t_all = t_seg.repeat_interleave(N)
    abar = sched.alpha_bars.to(model.dtype)[t_all].view(B * N, 1, 1, 1)
    x_adv_rep = (x0 + delta).repeat(B, 1, 1, 1)
    noisy_adv = abar.sqrt() * x_adv_rep + (1 - abar).sqrt() * eps
    noisy_adv.requires_grad_(True)

    use_attn = use_self or use_cross
    pred, adv_trace = model.predict_noise(noisy_adv, t_all.float(), instance_prompt,
                                          capture=use_attn)
    cond_per_segment = _segment_means((eps - pred).pow(2), B)
    l_cond = cond_per_segment.sum()

    l_sa = torch.zeros((), dtype=model.dtype)
    l_ca = torch.zeros((), dtype=model.dtype)
    if use_attn:
        if use_cross and apv is None:
            raise ValueError("cross-attention loss requires an adversarial prompt state")
        with torch.no_grad():
            noisy_clean = abar.sqrt() * x0.repeat(B, 1, 1, 1) + (1 - abar).sqrt() * eps
            _, clean_inst = model.predict_noise(noisy_clean, t_all.float(),
                                                instance_prompt, capture=use_self)
            if use_cross:
                _, clean_apv = model.predict_noise(noisy_clean, t_all.float(),
                                                   apv.embedding, capture=True)
        if use_self:
            for a, c in zip(adv_trace.select("self"), clean_inst.select("self")):
                l_sa = l_sa + _segment_means((a.output - c.output.detach()).pow(2), B).sum()
        if use_cross:
            for a, c in zip(adv_trace.select("cross"), clean_apv.select("cross")):
                fa = a.output.reshape(B, -1)
                fb = c.output.detach().reshape(B, -1)
                na, nb = fa.norm(dim=1), fb.norm(dim=1)
                ok = (na > 0) & (nb > 0)
                if not bool(ok.all()):
                    warnings.warn(f"zero-norm attention output in {a.module_id}; "
                                  "term counts as 0", DegenerateAttentionWarning)
                cos = torch.where(ok, (fa * fb).sum(dim=1) / (na * nb).clamp(min=1e-30),
                                  torch.zeros_like(na))
                l_ca = l_ca + cos.sum()

    if use_self and use_cross:
        alpha1 = config.alpha1
    elif use_cross:
        alpha1 = 1.0
    else:
        alpha1 = 0.0
    l_attn = attention_loss(l_sa, config.cross_attn_sign * l_ca, alpha1)

    sqrt_abar_seg = sched.alpha_bars.to(model.dtype)[t_seg].sqrt().view(B, 1, 1, 1, 1)

    def fold(grad_x):
        per_seg = grad_x.view(B, N, *x0.shape[1:]) * sqrt_abar_seg
        scores = per_seg.abs().mean(dim=(1, 2, 3, 4))
        return per_seg.sum(dim=0), [float(s) for s in scores]

    g_cond_x = torch.autograd.grad(l_cond, noisy_adv, retain_graph=use_attn)[0]
    g_cond, cond_scores = fold(g_cond_x)
    if use_attn:
        g_attn_x = torch.autograd.grad(l_attn, noisy_adv, allow_unused=True)[0]
        if g_attn_x is None:
            g_attn_x = torch.zeros_like(g_cond_x)
        g_attn, attn_scores = fold(g_attn_x)
        g_total = normalize_l1(g_cond) + config.alpha2 * normalize_l1(g_attn)
    else:
        g_attn, attn_scores = torch.zeros_like(g_cond), [0.0] * B
        g_total = normalize_l1(g_cond)

    losses = {"cond": float(cond_per_segment.detach().mean()),
              "sa": float(l_sa.detach()) / B, "ca": float(l_ca.detach()) / B,
              "attn": float(l_attn.detach()) / B}
    return GradientBundle(g_cond.detach(), g_attn.detach(), g_total.detach(),
                          cond_scores, attn_scores, losses,
                          [int(t) for t in t_seg])


def pgd_step(state: PerturbationState, g_total: torch.Tensor) -> PerturbationState:
    """Signed ascent step, clipped to the omega ball and the valid pixel range."""
    delta = (state.delta + state.eta * torch.sign(g_total)).clamp(-state.omega, state.omega)
    raw = state.x0 + delta
    clipped = raw.clamp(-1.0, 1.0)
    # recompute delta only where the pixel clamp bit, so untouched entries stay exact
    delta = torch.where(clipped == raw, delta, clipped - state.x0)
    return PerturbationState(delta, state.omega, state.eta, state.round + 1, state.x0)


@dataclass
class RunLogRow:
    outer_round: int
    inner_iter: int
    segment_scores: dict
    l_cond: float
    l_sa: float
    l_ca: float
    l_a: float
    delta_linf: float


@dataclass
class RunLog:
    variant: str
    seed: int
    rows: list[RunLogRow] = field(default_factory=list)

    def add(self, outer, inner, bundle: GradientBundle, delta_linf: float):
        self.rows.append(RunLogRow(
            outer, inner,
            {"cond": bundle.cond_scores, "attn": bundle.attn_scores},
            bundle.losses["cond"], bundle.losses["sa"], bundle.losses["ca"],
            bundle.losses["attn"], float(delta_linf)))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.outer_round, r.inner_iter,
                    json.dumps(r.segment_scores, sort_keys=True),
                    repr(r.l_cond), repr(r.l_sa), repr(r.l_ca), repr(r.l_a),
                    repr(r.delta_linf),
                ])
        return path


def _variant_flags(variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    use_self = variant in ("full", "self_attn_only")
    use_cross = variant in ("full", "cross_attn_only")
    single_step = variant == "cond_only_single_step"
    return use_self, use_cross, single_step


def run_attack(base_model: NoisePredictor, clean_images: ImageBatch,
               config: AttackConfig, dreambooth: DreamboothConfig,
               class_images: ImageBatch | None = None,
               variant: str = "full") -> tuple[ImageBatch, RunLog]:
    """Full alternating attack: adversarial-prompt stage, then rounds of
    {fine-tune surrogate on clean -> PGD iterations -> fine-tune on protected}.

    The surrogate accumulates fine-tuning across rounds and is never reset.
    Returns the protected batch plus a per-iteration run log.
    """
    use_self, use_cross, single_step = _variant_flags(variant)
    problems = config.validate(base_model.schedule.timesteps)
    if problems:
        raise ValueError("; ".join(problems))
    if dreambooth.prior_weight > 0 and class_images is None:
        raise ValueError("prior_weight > 0 requires class images (generate_class_images)")

    apv = None
    if use_cross:
        init = base_model.encode_prompt(tokenize(dreambooth.instance_prompt))
        try:
            apv = prompt_attack(base_model, clean_images, init, config.prompt_rounds,
                                config.prompt_lr, seed=derive_seed(config.seed, 0xA4))
        except AttackError as e:
            raise AttackError(f"stage=prompt_attack variant={variant}: {e}") from e

    surrogate = clone_model(base_model)
    p_new = surrogate.encode_prompt(tokenize(dreambooth.instance_prompt))
    x0 = clean_images.pixels.clone()
    state = PerturbationState(torch.zeros_like(x0), config.omega, config.eta, 0, x0)
    log = RunLog(variant=variant, seed=config.seed)
    segments = 1 if single_step else config.segments

    for outer in range(config.outer_rounds):
        try:
            dreambooth_finetune(surrogate, clean_images, dreambooth, class_images,
                                seed=derive_seed(config.seed, 0xDBC, outer),
                                steps=config.db_steps)
            for inner in range(config.inner_iters):
                it = outer * config.inner_iters + inner
                bundle = ensemble_gradient(
                    surrogate, x0, state.delta, p_new, apv, config,
                    seed=derive_seed(config.seed, 0x6AD, it),
                    use_self=use_self, use_cross=use_cross, segments=segments)
                state = pgd_step(state, bundle.g_total)
                log.add(outer, inner, bundle, state.delta.abs().max())
            protected_now = ImageBatch(x0 + state.delta, clean_images.labels)
            dreambooth_finetune(surrogate, protected_now, dreambooth, class_images,
                                seed=derive_seed(config.seed, 0xDBA, outer),
                                steps=config.db_steps)
        except TrainingError as e:
            raise AttackError(f"stage=surrogate_db round={outer} variant={variant}: {e}") from e

    protected = ImageBatch(x0 + state.delta, clean_images.labels.clone())
    return protected, log


def baseline_attack(base_model: NoisePredictor, clean_images: ImageBatch,
                    config: AttackConfig, dreambooth: DreamboothConfig,
                    variant: str, class_images: ImageBatch | None = None
                    ) -> tuple[ImageBatch, RunLog]:
    """Ablation baselines: the shared pipeline with loss/ensemble parts disabled."""
    if variant == "full":
        raise ValueError("baseline_attack is for ablation variants; use run_attack for full")
    return run_attack(base_model, clean_images, config, dreambooth,
                      class_images=class_images, variant=variant)
