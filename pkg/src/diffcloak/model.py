"""Toy conditional UNet noise predictor with tap-able attention layers.

Pixel-space diffusion; the prompt conditions the up path through
cross-attention.  Each up block holds one self- and one cross-attention
layer whose outputs (after the output projection, before the residual add)
can be captured for disruption losses and heatmaps.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PROMPT_LENGTH, VOCAB, PromptTokens
from .schedule import NoiseSchedule
from .seeding import torch_gen


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    base_channels: int = 32
    embed_dim: int = 64
    prompt_length: int = PROMPT_LENGTH
    vocab_size: int = len(VOCAB)
    num_heads: int = 1
    time_dim: int = 64

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4 (two downsamples)")


@dataclass
class PromptEmbedding:
    """Dense prompt matrix (L, d); source marks encoder output vs attacked vector."""

    tensor: torch.Tensor
    source: str = "encoded"

    def detach_clone(self, source: str | None = None) -> "PromptEmbedding":
        return PromptEmbedding(self.tensor.detach().clone(), source or self.source)


@dataclass
class TraceEntry:
    module_id: str
    kind: str  # "self" | "cross"
    resolution: int
    output: torch.Tensor  # (B, tokens, channels), pre-residual projection output
    weights: torch.Tensor | None = None  # (B, heads, tokens, source) if requested


@dataclass
class AttentionTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __bool__(self):
        return bool(self.entries)

    def select(self, kind: str, module_ids=None) -> list[TraceEntry]:
        return [e for e in self.entries
                if e.kind == kind and (module_ids is None or e.module_id in module_ids)]


class LoraAdapter(nn.Module):
    """Low-rank residuals for attention projections, keyed by "module_id.proj".

    The up factor starts at zero, so a fresh adapter leaves the host model's
    outputs untouched.
    """

    def __init__(self, keys: list[tuple[str, int, int]], rank: int = 4,
                 scale: float = 1.0, seed: int = 0):
        super().__init__()
        self.rank = rank
        self.scale = scale
        self.down = nn.ParameterDict()
        self.up = nn.ParameterDict()
        gen = torch_gen(seed, 0x10A)
        for key, d_in, d_out in keys:
            pkey = key.replace(".", "/")
            self.down[pkey] = nn.Parameter(
                torch.randn(rank, d_in, generator=gen) / math.sqrt(d_in))
            self.up[pkey] = nn.Parameter(torch.zeros(d_out, rank))

    def delta(self, key: str, x: torch.Tensor) -> torch.Tensor:
        pkey = key.replace(".", "/")
        return self.scale * F.linear(F.linear(x, self.down[pkey]), self.up[pkey])


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _positional_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)
    return _timestep_embedding(pos, dim)


class PromptEncoder(nn.Module):
    """Token-embedding lookup plus fixed sinusoidal positions."""

    def __init__(self, vocab_size: int, length: int, dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, dim)
        self.register_buffer("positions", _positional_encoding(length, dim))

    def forward(self, tokens: torch.Tensor,
                overrides: dict[int, torch.Tensor] | None = None) -> torch.Tensor:
        emb = self.embedding(tokens)
        if overrides:
            for token_id, row in overrides.items():
                mask = tokens == token_id
                if mask.any():
                    emb = torch.where(mask[:, None], row[None, :].to(emb.dtype), emb)
        return emb + self.positions.to(emb.dtype)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x))) + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionLayer(nn.Module):
    """Pre-norm attention over pixel tokens; cross variant attends to the prompt."""

    def __init__(self, module_id: str, channels: int, resolution: int,
                 context_dim: int | None = None, num_heads: int = 1):
        super().__init__()
        self.module_id = module_id
        self.kind = "cross" if context_dim is not None else "self"
        self.resolution = resolution
        self.num_heads = num_heads
        self.norm = nn.LayerNorm(channels)
        src = context_dim if context_dim is not None else channels
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(src, channels)
        self.to_v = nn.Linear(src, channels)
        self.to_out = nn.Linear(channels, channels)

    def projection_dims(self):
        src = self.to_k.in_features
        c = self.to_q.in_features
        return [(f"{self.module_id}.q", c, c), (f"{self.module_id}.k", src, c),
                (f"{self.module_id}.v", src, c), (f"{self.module_id}.out", c, c)]

    def forward(self, x, context=None, trace=None, capture_weights=False, adapter=None):
        h = self.norm(x)
        src = context if context is not None else h

        def proj(layer, name, inp):
            out = layer(inp)
            if adapter is not None:
                out = out + adapter.delta(f"{self.module_id}.{name}", inp)
            return out

        q, k, v = proj(self.to_q, "q", h), proj(self.to_k, "k", src), proj(self.to_v, "v", src)
        b, n, c = q.shape
        hd = self.num_heads
        q = q.view(b, n, hd, c // hd).transpose(1, 2)
        k = k.view(b, k.shape[1], hd, c // hd).transpose(1, 2)
        v = v.view(b, v.shape[1], hd, c // hd).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c // hd), dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(b, n, c)
        out = proj(self.to_out, "out", attended)
        if trace is not None:
            trace.append(TraceEntry(self.module_id, self.kind, self.resolution, out,
                                    weights if capture_weights else None))
        return x + out


class UpBlock(nn.Module):
    def __init__(self, idx: int, c_in: int, c_out: int, time_dim: int,
                 context_dim: int, resolution: int, num_heads: int):
        super().__init__()
        self.res = ResBlock(c_in, c_out, time_dim)
        self.self_attn = AttentionLayer(f"up{idx}.self", c_out, resolution,
                                        num_heads=num_heads)
        self.cross_attn = AttentionLayer(f"up{idx}.cross", c_out, resolution,
                                         context_dim=context_dim, num_heads=num_heads)

    def forward(self, x, skip, temb, context, trace, capture_weights, adapter):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.res(torch.cat([x, skip], dim=1), temb)
        b, c, hh, ww = h.shape
        tok = h.flatten(2).transpose(1, 2)
        tok = self.self_attn(tok, None, trace, capture_weights, adapter)
        tok = self.cross_attn(tok, context, trace, capture_weights, adapter)
        return tok.transpose(1, 2).reshape(b, c, hh, ww)


class NoisePredictor(nn.Module):
    """Conditional noise predictor; owns its schedule and prompt encoder."""

    def __init__(self, config: ModelConfig, schedule: NoiseSchedule, seed: int | None = None):
        super().__init__()
        self.config = config
        self.schedule = schedule
        c, d = config.base_channels, config.embed_dim
        tdim = config.time_dim
        self.prompt_encoder = PromptEncoder(config.vocab_size, config.prompt_length, d)
        self.time_mlp = nn.Sequential(nn.Linear(c, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.in_conv = nn.Conv2d(3, c, 3, padding=1)
        self.down1 = ResBlock(c, c, tdim)
        self.downsample1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.down2 = ResBlock(c, 2 * c, tdim)
        self.downsample2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * c, 2 * c, tdim)
        self.up1 = UpBlock(0, 4 * c, 2 * c, tdim, d, config.image_size // 2, config.num_heads)
        self.up2 = UpBlock(1, 3 * c, c, tdim, d, config.image_size, config.num_heads)
        self.out_norm = nn.GroupNorm(min(8, c), c)
        self.out_conv = nn.Conv2d(c, 3, 3, padding=1)
        if seed is not None:
            init_parameters(self, seed)

    @property
    def dtype(self):
        return self.out_conv.weight.dtype

    def attention_layers(self) -> list[AttentionLayer]:
        return [self.up1.self_attn, self.up1.cross_attn,
                self.up2.self_attn, self.up2.cross_attn]

    def lora_keys(self) -> list[tuple[str, int, int]]:
        keys = []
        for layer in self.attention_layers():
            keys.extend(layer.projection_dims())
        return keys

    def unet_parameters(self):
        """Everything except the prompt encoder (frozen during fine-tuning)."""
        enc = set(id(p) for p in self.prompt_encoder.parameters())
        return [p for p in self.parameters() if id(p) not in enc]

    def encode_prompt(self, tokens: PromptTokens | torch.Tensor,
                      overrides: dict[int, torch.Tensor] | None = None) -> PromptEmbedding:
        ids = tokens.tokens if isinstance(tokens, PromptTokens) else tokens
        return PromptEmbedding(self.prompt_encoder(ids, overrides), source="encoded")

    def forward(self, x, t, context, trace=None, capture_weights=False, adapter=None):
        if x.shape[-1] != self.config.image_size or x.shape[-2] != self.config.image_size:
            raise ValueError(f"expected {self.config.image_size}px input, got {tuple(x.shape)}")
        b = x.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), float(t), dtype=x.dtype)
        else:
            t = t.to(x.dtype)
        if context.ndim == 2:
            context = context[None, :, :].expand(b, -1, -1)
        context = context.to(x.dtype)
        temb = self.time_mlp(_timestep_embedding(t, self.config.base_channels))
        h0 = self.in_conv(x)
        d1 = self.down1(h0, temb)
        d2 = self.down2(self.downsample1(d1), temb)
        m = self.mid(self.downsample2(d2), temb)
        u = self.up1(m, d2, temb, context, trace, capture_weights, adapter)
        u = self.up2(u, d1, temb, context, trace, capture_weights, adapter)
        return self.out_conv(F.silu(self.out_norm(u)))

    def predict_noise(self, x_t, t, prompt: PromptEmbedding | torch.Tensor,
                      capture: bool = False, capture_weights: bool = False,
                      adapter: LoraAdapter | None = None):
        """Returns (prediction, AttentionTrace); the trace is empty unless capture."""
        context = prompt.tensor if isinstance(prompt, PromptEmbedding) else prompt
        entries = [] if capture else None
        pred = self(x_t, t, context, trace=entries, capture_weights=capture_weights,
                    adapter=adapter)
        return pred, AttentionTrace(entries or [])


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic parameter init from an explicit seed, independent of global RNG."""
    gen = torch_gen(seed, 0x1417)
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.ndim >= 2:
                if "embedding" in name:
                    p.copy_(torch.randn(p.shape, generator=gen))
                else:
                    fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
                    bound = 1.0 / math.sqrt(fan_in)
                    p.copy_(torch.empty(p.shape).uniform_(-bound, bound, generator=gen))
            elif "weight" in name:  # norm scales
                p.fill_(1.0)
            else:
                p.zero_()


def clone_model(model: NoisePredictor) -> NoisePredictor:
    out = NoisePredictor(model.config, model.schedule)
    out.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return out.to(model.dtype)
