"""Desk-scale evaluation: identity embedder, metric proxies, attention
heatmaps, and optimization-dynamics reports.

Proxy substitutions for the real-scale metrics: a small convolutional
identity classifier replaces the face recognizer (embedding cosine for
identity matching), its confidence threshold replaces the face detector
(detection-failure fraction), and its features feed the Frechet distance.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from torch import nn

from .attack import RunLog
from .corpus import ImageBatch, Identity
from .errors import ParseError, TrainingError
from .model import NoisePredictor, PromptEmbedding, init_parameters
from .schedule import q_sample
from .seeding import torch_gen


class IdentityEmbedder(nn.Module):
    """Convolutional identity classifier; the penultimate layer is the embedding.

    The head has one extra background class trained on noise negatives, so
    off-manifold inputs drain probability away from the identity classes
    instead of being classified overconfidently.
    """

    def __init__(self, image_size: int, n_classes: int, emb_dim: int = 64):
        super().__init__()
        self.image_size = image_size
        self.emb_dim = emb_dim
        self.n_identities = n_classes
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.SiLU(),
        )
        feat = 32 * (image_size // 8) ** 2
        self.embed_fc = nn.Linear(feat, emb_dim)
        self.head = nn.Linear(emb_dim, n_classes + 1)
        self.ids: list[int] = []
        self.class_means: torch.Tensor | None = None
        self.loo_accuracy: float = 0.0

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        h = self.conv(pixels).flatten(1)
        return self.embed_fc(h)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.head(F.silu(self.embed(pixels)))

    def identity_probs(self, pixels: torch.Tensor) -> torch.Tensor:
        """Softmax over all classes, restricted to the identity columns."""
        return torch.softmax(self(pixels), dim=1)[:, :self.n_identities]


def _loo_accuracy(emb: torch.Tensor, labels: torch.Tensor) -> float:
    """Leave-one-out nearest-neighbor accuracy under cosine similarity."""
    z = F.normalize(emb, dim=1)
    sim = z @ z.T
    sim.fill_diagonal_(-2.0)
    nearest = sim.argmax(dim=1)
    return float((labels[nearest] == labels).float().mean())


def train_identity_embedder(corpus: ImageBatch, seed: int = 0, steps: int = 400,
                            lr: float = 3e-3) -> IdentityEmbedder:
    """Train the classifier on the clean corpus; aborts below 0.9 LOO accuracy."""
    ids = sorted(set(int(v) for v in corpus.labels))
    if len(ids) < 2:
        raise ValueError("corpus must contain at least 2 identities")
    index = {v: i for i, v in enumerate(ids)}
    targets = torch.tensor([index[int(v)] for v in corpus.labels])
    model = IdentityEmbedder(corpus.pixels.shape[-1], len(ids))
    init_parameters(model, seed)
    gen = torch_gen(seed, 0xE3B)
    n_neg = max(8, len(corpus) // 4)
    negatives = torch.rand((n_neg, *corpus.pixels.shape[1:]), generator=gen) * 2 - 1
    pixels = torch.cat([corpus.pixels, negatives])
    targets = torch.cat([targets, torch.full((n_neg,), len(ids), dtype=torch.long)])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        logits = model(pixels)
        loss = F.cross_entropy(logits, targets)
        if not torch.isfinite(loss):
            raise TrainingError("embedder training diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        emb = model.embed(corpus.pixels)
        model.loo_accuracy = _loo_accuracy(emb, corpus.labels)
        means = torch.stack([emb[corpus.labels == v].mean(dim=0) for v in ids])
    model.ids = ids
    model.class_means = means
    if model.loo_accuracy < 0.9:
        raise TrainingError(
            f"embedder leave-one-out accuracy {model.loo_accuracy:.3f} < 0.9; "
            "identity metrics would be meaningless")
    return model


def _identity_id(identity) -> int:
    return identity.id if isinstance(identity, Identity) else int(identity)


@torch.no_grad()
def ism_proxy(generated: ImageBatch, identity, embedder: IdentityEmbedder) -> float:
    """Mean cosine similarity between generated embeddings and the identity's
    mean clean-image embedding (reported raw: higher = closer to the subject)."""
    if len(generated) == 0:
        raise ValueError("empty batch")
    iid = _identity_id(identity)
    if iid not in embedder.ids:
        raise ValueError(f"identity {iid} unknown to the embedder")
    mean = embedder.class_means[embedder.ids.index(iid)]
    emb = embedder.embed(generated.pixels)
    return float(F.cosine_similarity(emb, mean[None, :], dim=1).mean())


@torch.no_grad()
def fdfr_proxy(generated: ImageBatch, embedder: IdentityEmbedder, tau: float = 0.5) -> float:
    """Fraction of samples whose top identity-class probability falls below tau
    (the sample fails to register as any known identity)."""
    if not (0.0 <= tau < 1.0):
        raise ValueError(f"tau={tau} outside [0, 1)")
    probs = embedder.identity_probs(generated.pixels)
    return float((probs.max(dim=1).values < tau).float().mean())


def _frechet(e1: np.ndarray, e2: np.ndarray) -> tuple[float, bool]:
    mu1, mu2 = e1.mean(axis=0), e2.mean(axis=0)
    c1 = np.cov(e1, rowvar=False)
    c2 = np.cov(e2, rowvar=False)
    jittered = False
    covmean, _ = scipy.linalg.sqrtm(c1 @ c2, disp=False)
    if not np.isfinite(covmean).all() or np.abs(covmean.imag).max() > 1e-6:
        jittered = True
        jitter = 1e-6 * np.eye(c1.shape[0])
        covmean, _ = scipy.linalg.sqrtm((c1 + jitter) @ (c2 + jitter), disp=False)
    value = float(((mu1 - mu2) ** 2).sum() + np.trace(c1 + c2 - 2 * covmean.real))
    return max(value, 0.0), jittered


@torch.no_grad()
def feature_fid(batch_a: ImageBatch, batch_b: ImageBatch,
                embedder: IdentityEmbedder) -> float:
    """Frechet distance between Gaussians fit to the two embedding sets."""
    if len(batch_a) < 2 or len(batch_b) < 2:
        raise ValueError("both batches need at least 2 samples")
    e1 = embedder.embed(batch_a.pixels).double().numpy()
    e2 = embedder.embed(batch_b.pixels).double().numpy()
    value, jittered = _frechet(e1, e2)
    if jittered:
        warnings.warn("near-singular covariance; 1e-6 diagonal jitter applied")
    return value


@dataclass
class MetricsReport:
    ism_proxy: float
    fdfr_proxy: float
    feature_fid: float
    per_prompt: dict[str, dict] = field(default_factory=dict)
    fid_jittered: bool = False


@dataclass
class HeatmapResult:
    cross: np.ndarray          # (H, W) in [0, 1], keyword-token attention
    self_attention: np.ndarray  # (H, W) in [0, 1], mean attention received per pixel
    resolution: int
    timestep: int
    degenerate: dict = field(default_factory=dict)


def _minmax(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.zeros_like(arr), True
    return (arr - lo) / (hi - lo), False


def attention_heatmap(model: NoisePredictor, image, prompt: PromptEmbedding,
                      t: int = 500, resolution: int = 16, keyword_position: int = 3,
                      seed: int = 0) -> HeatmapResult:
    """Cross- and self-attention heatmaps at one timestep and resolution.

    Cross: per-pixel attention weight on the keyword token.  Self: mean
    attention received by each pixel token.  Both are min-max normalized and
    upsampled (nearest) to the image size; a constant field normalizes to
    zeros and is flagged degenerate.
    """
    pixels = (image.pixels if isinstance(image, ImageBatch) else image).to(model.dtype)
    if pixels.ndim == 3:
        pixels = pixels[None]
    pixels = pixels[:1]
    gen = torch_gen(seed, 0x47A7)
    eps = torch.randn(pixels.shape, generator=gen).to(pixels.dtype)
    noisy = q_sample(pixels, t, eps, model.schedule)
    with torch.no_grad():
        _, trace = model.predict_noise(noisy, t, prompt, capture=True, capture_weights=True)
    cross = [e for e in trace.select("cross") if e.resolution == resolution]
    self_e = [e for e in trace.select("self") if e.resolution == resolution]
    if not cross or not self_e:
        available = sorted({e.resolution for e in trace.entries})
        raise ValueError(f"no attention layer at resolution {resolution}; available: {available}")

    cw = cross[0].weights.mean(dim=1)[0]          # (pixels, prompt_len)
    cross_map = cw[:, keyword_position].reshape(resolution, resolution).numpy()
    sw = self_e[0].weights.mean(dim=1)[0]         # (pixels, pixels)
    self_map = sw.mean(dim=0).reshape(resolution, resolution).numpy()

    degenerate = {}
    cross_map, degenerate["cross"] = _minmax(cross_map)
    self_map, degenerate["self"] = _minmax(self_map)
    factor = model.config.image_size // resolution
    up = np.ones((factor, factor))
    return HeatmapResult(np.kron(cross_map, up), np.kron(self_map, up),
                         resolution, t, degenerate)


@dataclass
class DynamicsSummary:
    iterations: int
    final_loss: float            # mean total loss over the last inner block
    increment_variance: float    # variance of total-loss first differences
    mean_cond_score: float
    mean_attn_score: float
    cond_score_variance: float
    attn_score_variance: float


def _rows_from_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", line=1)
        expected = ["outer_round", "inner_iter", "segment_scores_json",
                    "L_cond", "L_SA", "L_CA", "L_A", "delta_linf"]
        if header != expected:
            raise ParseError(f"unexpected header {header}", line=1)
        for n, raw in enumerate(reader, start=2):
            if len(raw) != len(expected):
                raise ParseError(f"expected {len(expected)} fields, got {len(raw)}", line=n)
            try:
                rows.append({
                    "outer_round": int(raw[0]), "inner_iter": int(raw[1]),
                    "scores": json.loads(raw[2]),
                    "l_cond": float(raw[3]), "l_sa": float(raw[4]),
                    "l_ca": float(raw[5]), "l_a": float(raw[6]),
                    "delta_linf": float(raw[7]),
                })
            except (ValueError, json.JSONDecodeError) as e:
                raise ParseError(str(e), line=n) from e
    return rows


def _rows_from_runlog(log: RunLog) -> list[dict]:
    return [{"outer_round": r.outer_round, "inner_iter": r.inner_iter,
             "scores": r.segment_scores, "l_cond": r.l_cond, "l_sa": r.l_sa,
             "l_ca": r.l_ca, "l_a": r.l_a, "delta_linf": r.delta_linf}
            for r in log.rows]


def total_loss_series(rows: list[dict], alpha2: float) -> np.ndarray:
    return np.array([r["l_cond"] + alpha2 * r["l_a"] for r in rows])


def dynamics_report(run_log, out_dir=None, alpha2: float = 0.4) -> DynamicsSummary:
    """Per-iteration loss / gradient-score summary, with figures when out_dir is set."""
    rows = _rows_from_runlog(run_log) if isinstance(run_log, RunLog) else _rows_from_csv(run_log)
    if not rows:
        raise ParseError("run log has no iterations", line=2)
    total = total_loss_series(rows, alpha2)
    last_outer = rows[-1]["outer_round"]
    final_block = total[[i for i, r in enumerate(rows) if r["outer_round"] == last_outer]]
    increments = np.diff(total) if len(total) > 1 else np.zeros(1)
    cond_scores = np.array([float(np.mean(r["scores"]["cond"])) for r in rows])
    attn_scores = np.array([float(np.mean(r["scores"]["attn"])) for r in rows])
    summary = DynamicsSummary(
        iterations=len(rows),
        final_loss=float(final_block.mean()),
        increment_variance=float(increments.var()),
        mean_cond_score=float(cond_scores.mean()),
        mean_attn_score=float(attn_scores.mean()),
        cond_score_variance=float(cond_scores.var()),
        attn_score_variance=float(attn_scores.var()),
    )
    if out_dir is not None:
        _write_figures(rows, total, cond_scores, attn_scores, Path(out_dir))
    return summary


def _write_figures(rows, total, cond_scores, attn_scores, out_dir: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    it = np.arange(len(rows))
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    axes[0].plot(it, [r["l_cond"] for r in rows], label="denoising loss")
    axes[0].plot(it, [r["l_a"] for r in rows], label="attention loss")
    axes[0].plot(it, total, label="total", linewidth=2)
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[1].plot(it, cond_scores, label="denoising grad score")
    axes[1].plot(it, attn_scores, label="attention grad score")
    axes[1].set_xlabel("PGD iteration")
    axes[1].set_ylabel("mean |gradient|")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(out_dir / "dynamics.png", dpi=120)
    plt.close(fig)
