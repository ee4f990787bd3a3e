"""Checkpoint archives: named arrays plus a manifest with a content digest."""

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .attack import AdversarialPromptState
from .customize import TIEmbedding
from .errors import IntegrityError
from .model import LoraAdapter, ModelConfig, NoisePredictor, PromptEmbedding
from .schedule import NoiseSchedule


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".manifest.json")


def _save_arrays(path: Path, arrays: dict, kind: str, extra: dict, config_hash: str) -> dict:
    path.parent.mkdir(parents=True, exist_ok=True)
    np_arrays = {k: v.detach().cpu().numpy() for k, v in arrays.items()}
    np.savez(path, **np_arrays)
    manifest = {
        "kind": kind,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)}
                   for k, v in np_arrays.items()},
        "config_hash": config_hash,
        "digest": _digest(path),
        "extra": extra,
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def save_checkpoint(obj, path, config_hash: str = "") -> dict:
    """Serialize a model, adapter, adversarial prompt, or TI row; returns the manifest."""
    path = Path(path)
    if isinstance(obj, NoisePredictor):
        arrays = dict(obj.state_dict())
        arrays["schedule.betas"] = obj.schedule.betas
        arrays["schedule.alphas"] = obj.schedule.alphas
        arrays["schedule.alpha_bars"] = obj.schedule.alpha_bars
        extra = {"model": {
            "image_size": obj.config.image_size, "base_channels": obj.config.base_channels,
            "embed_dim": obj.config.embed_dim, "prompt_length": obj.config.prompt_length,
            "vocab_size": obj.config.vocab_size, "num_heads": obj.config.num_heads,
            "time_dim": obj.config.time_dim}}
        return _save_arrays(path, arrays, "model", extra, config_hash)
    if isinstance(obj, LoraAdapter):
        arrays = dict(obj.state_dict())
        return _save_arrays(path, arrays, "lora", {"rank": obj.rank, "scale": obj.scale},
                            config_hash)
    if isinstance(obj, AdversarialPromptState):
        arrays = {"embedding": obj.embedding.tensor}
        extra = {"iterations_done": obj.iterations_done, "lr": obj.lr,
                 "loss_series": obj.loss_series}
        return _save_arrays(path, arrays, "adversarial_prompt", extra, config_hash)
    if isinstance(obj, TIEmbedding):
        arrays = {"vector": obj.vector}
        extra = {"token_id": obj.token_id, "keyword": obj.keyword}
        return _save_arrays(path, arrays, "ti_embedding", extra, config_hash)
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def _verify_and_load(path: Path) -> tuple[dict, dict]:
    manifest = json.loads(_manifest_path(path).read_text())
    actual = _digest(path)
    if actual != manifest["digest"]:
        raise IntegrityError(f"{path}: digest mismatch "
                             f"(expected {manifest['digest'][:12]}..., got {actual[:12]}...)")
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    return manifest, arrays


def load_checkpoint(path, base_model: NoisePredictor | None = None):
    """Reconstruct the checkpointed object; verifies the digest first.

    Loading a LoRA adapter requires the host model (for projection shapes).
    """
    path = Path(path)
    manifest, arrays = _verify_and_load(path)
    kind = manifest["kind"]
    if kind == "model":
        mc = ModelConfig(**manifest["extra"]["model"])
        sched = NoiseSchedule(
            timesteps=len(arrays["schedule.betas"]),
            betas=torch.from_numpy(arrays.pop("schedule.betas")),
            alphas=torch.from_numpy(arrays.pop("schedule.alphas")),
            alpha_bars=torch.from_numpy(arrays.pop("schedule.alpha_bars")))
        model = NoisePredictor(mc, sched)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        return model
    if kind == "lora":
        if base_model is None:
            raise ValueError("loading a LoRA adapter requires base_model")
        adapter = LoraAdapter(base_model.lora_keys(), rank=manifest["extra"]["rank"],
                              scale=manifest["extra"]["scale"])
        adapter.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        return adapter
    if kind == "adversarial_prompt":
        return AdversarialPromptState(
            PromptEmbedding(torch.from_numpy(arrays["embedding"]), "adversarial"),
            iterations_done=manifest["extra"]["iterations_done"],
            lr=manifest["extra"]["lr"],
            loss_series=list(manifest["extra"]["loss_series"]))
    if kind == "ti_embedding":
        return TIEmbedding(token_id=manifest["extra"]["token_id"],
                           keyword=manifest["extra"]["keyword"],
                           vector=torch.from_numpy(arrays["vector"]))
    raise ValueError(f"unknown checkpoint kind {kind!r}")
