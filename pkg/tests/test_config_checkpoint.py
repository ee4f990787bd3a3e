import json

import numpy as np
import pytest
import torch

import diffcloak as dc
from diffcloak.checkpoint import _manifest_path
from diffcloak.config import ExperimentConfig, config_from_dict, validate_config, write_config
from diffcloak.errors import ConfigError, IntegrityError


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    cfg = dc.load_config(path)
    assert cfg.schedule.timesteps == 1000
    assert cfg.attack.segments == 25
    assert cfg.attack.omega == 0.05
    assert cfg.attack.eta == 0.005
    assert cfg.attack.prompt_rounds == 500
    assert cfg.attack.outer_rounds == 50 and cfg.attack.inner_iters == 6
    assert cfg.attack.alpha1 == 0.5 and cfg.attack.alpha2 == 0.4
    assert cfg.corpus.identities == 16 and cfg.corpus.per_identity == 8


def test_config_hash_stable(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    h1 = dc.config_hash(dc.load_config(path))
    h2 = dc.config_hash(dc.load_config(path))
    assert h1 == h2
    assert h1 == dc.config_hash(ExperimentConfig())


def test_config_hash_changes_with_content():
    a = config_from_dict({"attack": {"segments": 25}})
    b = config_from_dict({"attack": {"segments": 20}})
    assert dc.config_hash(a) != dc.config_hash(b)


def test_segments_must_divide_timesteps():
    with pytest.raises(ConfigError, match="segments"):
        config_from_dict({"attack": {"segments": 30}})


def test_alpha1_bounds():
    with pytest.raises(ConfigError, match="alpha1"):
        config_from_dict({"attack": {"alpha1": 1.5}})


def test_unknown_field_reported():
    with pytest.raises(ConfigError, match="unknown field"):
        config_from_dict({"attack": {"bogus_knob": 1}})


def test_multiple_problems_collected():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"attack": {"segments": 30, "alpha1": 7},
                          "dreambooth": {"lr": -1}})
    assert len(exc.value.messages) >= 3


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        dc.load_config(path)


def test_validate_config_clean_defaults():
    assert validate_config(ExperimentConfig()) == []


def test_write_config_carries_hash(tmp_path):
    cfg = ExperimentConfig()
    write_config(cfg, tmp_path / "config.json")
    data = json.loads((tmp_path / "config.json").read_text())
    assert data["config_hash"] == dc.config_hash(cfg)


def test_total_rounds_product():
    cfg = config_from_dict({"attack": {"outer_rounds": 50, "inner_iters": 6}})
    assert cfg.attack.total_rounds == 300


# ------------------------------------------------------------------ checkpoints

def test_model_checkpoint_round_trip_bitwise(tmp_path, tiny_model):
    path = tmp_path / "model.npz"
    manifest = dc.save_checkpoint(tiny_model, path, config_hash="abc123")
    assert manifest["config_hash"] == "abc123"
    loaded = dc.load_checkpoint(path)
    for (ka, va), (kb, vb) in zip(sorted(tiny_model.state_dict().items()),
                                  sorted(loaded.state_dict().items())):
        assert ka == kb and torch.equal(va, vb)
    assert torch.equal(loaded.schedule.alpha_bars, tiny_model.schedule.alpha_bars)
    assert loaded.config == tiny_model.config


def test_model_checkpoint_load_produces_same_outputs(tmp_path, tiny_model, instance_prompt):
    path = tmp_path / "model.npz"
    dc.save_checkpoint(tiny_model, path)
    loaded = dc.load_checkpoint(path)
    x = torch.randn(1, 3, 16, 16)
    a, _ = tiny_model.predict_noise(x, 3, instance_prompt)
    b, _ = loaded.predict_noise(x, 3, loaded.encode_prompt(dc.tokenize("a photo of sks person")))
    assert torch.equal(a, b)


def test_tampered_checkpoint_rejected(tmp_path, tiny_model):
    path = tmp_path / "model.npz"
    dc.save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        dc.load_checkpoint(path)


def test_manifest_records_shapes(tmp_path, tiny_model):
    path = tmp_path / "model.npz"
    manifest = dc.save_checkpoint(tiny_model, path)
    stored = json.loads(_manifest_path(path).read_text())
    assert stored["arrays"] == manifest["arrays"]
    assert stored["kind"] == "model"
    assert list(stored["arrays"]["out_conv.weight"]["shape"]) == [3, 8, 3, 3]


def test_lora_checkpoint_round_trip(tmp_path, tiny_model):
    adapter = dc.LoraAdapter(tiny_model.lora_keys(), rank=2, scale=0.5, seed=3)
    with torch.no_grad():
        for key in adapter.up:
            adapter.up[key].add_(0.3)
    path = tmp_path / "lora.npz"
    dc.save_checkpoint(adapter, path)
    loaded = dc.load_checkpoint(path, base_model=tiny_model)
    assert loaded.rank == 2 and loaded.scale == 0.5
    for (ka, va), (kb, vb) in zip(sorted(adapter.state_dict().items()),
                                  sorted(loaded.state_dict().items())):
        assert ka == kb and torch.equal(va, vb)


def test_lora_checkpoint_needs_base_model(tmp_path, tiny_model):
    adapter = dc.LoraAdapter(tiny_model.lora_keys(), rank=2, seed=3)
    path = tmp_path / "lora.npz"
    dc.save_checkpoint(adapter, path)
    with pytest.raises(ValueError, match="base_model"):
        dc.load_checkpoint(path)


def test_adversarial_prompt_checkpoint_records_progress(tmp_path, tiny_model,
                                                        tiny_images, instance_prompt):
    state = dc.prompt_attack(tiny_model, tiny_images, instance_prompt, rounds=4,
                             lr=0.25, seed=9)
    path = tmp_path / "apv.npz"
    dc.save_checkpoint(state, path)
    loaded = dc.load_checkpoint(path)
    assert loaded.iterations_done == 4
    assert loaded.lr == 0.25
    assert torch.equal(loaded.embedding.tensor, state.embedding.tensor)
    # resume from a reloaded checkpoint matches an uninterrupted run
    full = dc.prompt_attack(tiny_model, tiny_images, instance_prompt, rounds=8,
                            lr=0.25, seed=9)
    resumed = dc.prompt_attack(tiny_model, tiny_images, instance_prompt, rounds=4,
                               lr=0.25, seed=9, state=loaded)
    assert torch.equal(full.embedding.tensor, resumed.embedding.tensor)


def test_ti_checkpoint_round_trip(tmp_path):
    emb = dc.TIEmbedding(token_id=8, keyword="sks", vector=torch.randn(16))
    path = tmp_path / "ti.npz"
    dc.save_checkpoint(emb, path)
    loaded = dc.load_checkpoint(path)
    assert loaded.token_id == 8 and loaded.keyword == "sks"
    assert torch.equal(loaded.vector, emb.vector)


def test_unsupported_object_rejected(tmp_path):
    with pytest.raises(TypeError):
        dc.save_checkpoint({"not": "checkpointable"}, tmp_path / "x.npz")
