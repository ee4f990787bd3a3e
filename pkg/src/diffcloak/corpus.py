"""Synthetic-identity sprite corpus and the fixed prompt vocabulary.

Identities are rendered as compositions of three hue-coded geometric
primitives on a colored background.  Hues are quantized per identity so any
two identities below id 512 are guaranteed to differ visibly; positions and
sizes add further per-identity variation.  Per-image jitter moves shapes by
up to 2/32 of the canvas and tints the background.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError
from .seeding import np_rng

PAD_TOKEN = 0
UNK_TOKEN = 1

VOCAB = (
    "<pad>", "<unk>",
    "a", "photo", "dslr", "portrait", "of", "person", "sks", "asdf",
    "looking", "mirror", "chair", "sitting", "on", "the", "at", "in",
    "front", "tower",
)
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
PROMPT_LENGTH = 8

PARAM_COUNT = 13
_JITTER_FRAC = 2.0 / 32.0  # max positional jitter, fraction of canvas


@dataclass(frozen=True)
class Identity:
    """Synthetic identity; params derive deterministically from (id, seed)."""

    id: int
    corpus_seed: int
    params: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"identity id must be >= 0, got {self.id}")
        rng = np_rng(self.corpus_seed, self.id, 0xC0)
        params = rng.uniform(0.0, 1.0, size=PARAM_COUNT)
        # Quantized hue digits guarantee separability for ids < 512.
        params[0] = ((self.id % 8) + 0.5) / 8.0
        params[1] = (((self.id // 8) % 8) + 0.5) / 8.0
        params[2] = (((self.id // 64) % 8) + 0.5) / 8.0
        params.setflags(write=False)
        object.__setattr__(self, "params", params)


@dataclass
class ImageBatch:
    """Batch of images, pixels (N, C, H, W) in [-1, 1], one label per image."""

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (N, C, H, W), got {tuple(self.pixels.shape)}")
        if not torch.is_tensor(self.labels):
            self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError("labels length must match batch size")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class PromptTokens:
    """Fixed-length token id sequence over the built-in vocabulary."""

    tokens: torch.Tensor  # (PROMPT_LENGTH,) int64

    def __post_init__(self):
        if not torch.is_tensor(self.tokens):
            self.tokens = torch.as_tensor(self.tokens, dtype=torch.long)
        if self.tokens.ndim != 1 or self.tokens.shape[0] != PROMPT_LENGTH:
            raise ValueError(f"tokens must have length {PROMPT_LENGTH}")
        if int(self.tokens.max()) >= len(VOCAB) or int(self.tokens.min()) < 0:
            raise ValueError("token id outside vocabulary")


def tokenize(text: str) -> PromptTokens:
    """Map text to a padded fixed-length token sequence; unknown words -> <unk>."""
    ids = [TOKEN_IDS.get(w, UNK_TOKEN) for w in text.lower().split()]
    ids = ids[:PROMPT_LENGTH]
    ids += [PAD_TOKEN] * (PROMPT_LENGTH - len(ids))
    return PromptTokens(torch.tensor(ids, dtype=torch.long))


def find_keyword(instance_prompt: str, base_prompt: str) -> tuple[str, int]:
    """Locate the rare keyword: the first instance-prompt word absent from the base prompt."""
    base_words = set(base_prompt.lower().split())
    for pos, word in enumerate(instance_prompt.lower().split()):
        if word not in base_words:
            return word, pos
    raise ValueError("instance prompt contains no keyword beyond the base prompt")


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, all arrays in [0, 1]."""
    h = (h % 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    lut = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k in range(6):
        mask = i == k
        for c in range(3):
            rgb[..., c][mask] = np.broadcast_to(lut[k][c], h.shape)[mask]
    return rgb


def _soft_mask(signed_dist, width):
    # signed_dist < 0 inside the shape; one-pixel antialiased edge
    return np.clip(0.5 - signed_dist / width, 0.0, 1.0)


def _render_one(params, size, shift, bg_jitter):
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    px = 1.0 / size

    hue_c, hue_q, hue_t = params[0], params[1], params[2]
    canvas = _hsv_to_rgb(np.full((size, size), (params[12] + bg_jitter)), 0.25, 0.80)

    def paint(mask, hue, sat, val):
        color = _hsv_to_rgb(np.full((size, size), hue), sat, val)
        return canvas * (1 - mask[..., None]) + color * mask[..., None]

    cx, cy = 0.25 + 0.5 * params[3] + shift[0], 0.25 + 0.5 * params[4] + shift[1]
    r = 0.14 + 0.10 * params[5]
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - r
    canvas = paint(_soft_mask(dist, px), hue_c, 0.95, 0.95)

    qx, qy = 0.25 + 0.5 * params[6] + shift[2], 0.25 + 0.5 * params[7] + shift[3]
    half = 0.10 + 0.08 * params[8]
    dist = np.maximum(np.abs(xx - qx), np.abs(yy - qy)) - half
    canvas = paint(_soft_mask(dist, px), hue_q, 0.95, 0.85)

    tx, ty = 0.25 + 0.5 * params[9] + shift[4], 0.25 + 0.5 * params[10] + shift[5]
    th = 0.12 + 0.08 * params[11]
    # upward triangle: base below apex, sides as half-plane distances
    d_base = (yy - (ty + th / 2))
    d_side1 = ((ty - th / 2) - yy) + 2.0 * (xx - tx)
    d_side2 = ((ty - th / 2) - yy) - 2.0 * (xx - tx)
    dist = np.maximum(d_base, np.maximum(d_side1, d_side2) / np.sqrt(5.0))
    canvas = paint(_soft_mask(dist, px), hue_t, 0.95, 0.75)

    return canvas * 2.0 - 1.0  # (H, W, 3) in [-1, 1]


def generate_identity_images(identity: Identity, count: int, render_seed: int,
                             image_size: int = 32) -> ImageBatch:
    """Render `count` jittered views of one identity; deterministic in all inputs."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if image_size <= 0 or image_size % 2 != 0:
        raise ConfigError(f"image size must be positive and even, got {image_size}")
    frames = []
    for i in range(count):
        rng = np_rng(render_seed, identity.corpus_seed, identity.id, i)
        shift = rng.uniform(-_JITTER_FRAC, _JITTER_FRAC, size=6)
        bg_jitter = rng.uniform(-0.03, 0.03)
        frames.append(_render_one(identity.params, image_size, shift, bg_jitter))
    pixels = torch.from_numpy(np.stack(frames).transpose(0, 3, 1, 2)).float()
    labels = torch.full((count,), identity.id, dtype=torch.long)
    return ImageBatch(pixels, labels)


def split_clean_perturbed(batch: ImageBatch) -> tuple[ImageBatch, ImageBatch]:
    """Split by index parity: even indices form the clean set, odd the perturbed set."""
    n = len(batch)
    if n % 2 != 0:
        raise ValueError(f"batch size must be even, got {n}")
    clean = ImageBatch(batch.pixels[0::2].clone(), batch.labels[0::2].clone())
    perturbed = ImageBatch(batch.pixels[1::2].clone(), batch.labels[1::2].clone())
    return clean, perturbed


def build_corpus(identity_count: int, per_identity: int, corpus_seed: int,
                 render_seed: int = 0, image_size: int = 32) -> ImageBatch:
    """All identities' images in one batch, identity-major order."""
    batches = [
        generate_identity_images(Identity(i, corpus_seed), per_identity, render_seed, image_size)
        for i in range(identity_count)
    ]
    return ImageBatch(
        torch.cat([b.pixels for b in batches]),
        torch.cat([b.labels for b in batches]),
    )


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """[-1, 1] float (N, C, H, W) -> (N, H, W, C) uint8."""
    arr = ((pixels.detach().clamp(-1, 1) + 1.0) * 127.5).round().clamp(0, 255)
    return arr.to(torch.uint8).permute(0, 2, 3, 1).numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) uint8 -> [-1, 1] float (N, C, H, W)."""
    return torch.from_numpy(arr.astype(np.float32)).permute(0, 3, 1, 2) / 127.5 - 1.0


def save_image_batch(batch: ImageBatch, out_dir, render_seed: int = 0,
                     prefix: str = "img", extra: dict | None = None) -> Path:
    """Write PNGs plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(batch.pixels)
    entries = []
    for i in range(len(batch)):
        name = f"{prefix}_{i:04d}.png"
        Image.fromarray(arr[i]).save(out_dir / name)
        entries.append({"identity_id": int(batch.labels[i]), "render_seed": render_seed,
                        "file": name})
    manifest = {"images": entries}
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_image_batch(src_dir) -> ImageBatch:
    """Load a PNG directory written by save_image_batch."""
    src_dir = Path(src_dir)
    manifest = json.loads((src_dir / "manifest.json").read_text())
    frames, labels = [], []
    for entry in manifest["images"]:
        frames.append(np.asarray(Image.open(src_dir / entry["file"]).convert("RGB")))
        labels.append(entry["identity_id"])
    return ImageBatch(from_uint8(np.stack(frames)), torch.tensor(labels, dtype=torch.long))
