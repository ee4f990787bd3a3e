import numpy as np
import pytest
import torch

import diffcloak as dc
from diffcloak.attack import GradientBundle, RunLog
from diffcloak.errors import ParseError, TrainingError
from diffcloak.seeding import torch_gen


@pytest.fixture(scope="module")
def small_corpus():
    return dc.build_corpus(8, 6, corpus_seed=0, render_seed=0, image_size=16)


@pytest.fixture(scope="module")
def embedder(small_corpus):
    return dc.train_identity_embedder(small_corpus, seed=0, steps=300)


def _identity_batch(corpus, identity_id):
    mask = corpus.labels == identity_id
    return dc.ImageBatch(corpus.pixels[mask], corpus.labels[mask])


def test_embedder_accuracy_and_determinism(small_corpus, embedder):
    assert embedder.loo_accuracy > 0.9
    again = dc.train_identity_embedder(small_corpus, seed=0, steps=300)
    assert all(torch.equal(a, b) for a, b in zip(embedder.state_dict().values(),
                                                 again.state_dict().values()))


def test_embedder_requires_two_identities():
    solo = dc.generate_identity_images(dc.Identity(0, 0), 4, 0, image_size=16)
    with pytest.raises(ValueError):
        dc.train_identity_embedder(solo, seed=0, steps=10)


def test_embedding_self_similarity(small_corpus, embedder):
    emb = embedder.embed(small_corpus.pixels[:4])
    sims = torch.cosine_similarity(emb, emb, dim=1)
    assert torch.allclose(sims, torch.ones(4), atol=1e-6)


def test_ism_self_match_beats_cross_identity(small_corpus, embedder):
    own = _identity_batch(small_corpus, 0)
    ism_self = dc.ism_proxy(own, 0, embedder)
    assert ism_self > 0.95
    for other in range(1, 8):
        assert dc.ism_proxy(own, other, embedder) < ism_self


def test_ism_all_identity_pairs_ordered(small_corpus, embedder):
    ids = sorted(set(int(v) for v in small_corpus.labels))
    for a in ids:
        own = _identity_batch(small_corpus, a)
        self_match = dc.ism_proxy(own, a, embedder)
        for b in ids:
            if a != b:
                assert self_match > dc.ism_proxy(own, b, embedder)


def test_ism_rejects_empty_and_unknown(small_corpus, embedder):
    empty = dc.ImageBatch(torch.zeros(0, 3, 16, 16), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ValueError):
        dc.ism_proxy(empty, 0, embedder)
    with pytest.raises(ValueError):
        dc.ism_proxy(_identity_batch(small_corpus, 0), 99, embedder)


def test_fdfr_clean_vs_noise(small_corpus, embedder):
    assert dc.fdfr_proxy(small_corpus, embedder, tau=0.5) < 0.1
    noise = dc.ImageBatch(torch.rand(32, 3, 16, 16, generator=torch_gen(1)) * 2 - 1,
                          torch.full((32,), -1, dtype=torch.long))
    assert dc.fdfr_proxy(noise, embedder, tau=0.5) > 0.5


def test_ism_noise_near_null_distribution(small_corpus, embedder):
    # null distribution measured first: cosines of random-noise embeddings
    # against identity 0's mean embedding
    null = dc.ImageBatch(torch.rand(64, 3, 16, 16, generator=torch_gen(7)) * 2 - 1,
                         torch.full((64,), -1, dtype=torch.long))
    with torch.no_grad():
        emb = embedder.embed(null.pixels)
        mean = embedder.class_means[0]
        cosines = torch.cosine_similarity(emb, mean[None, :], dim=1)
    null_mean, null_std = float(cosines.mean()), float(cosines.std())

    probe = dc.ImageBatch(torch.rand(32, 3, 16, 16, generator=torch_gen(8)) * 2 - 1,
                          torch.full((32,), -1, dtype=torch.long))
    value = dc.ism_proxy(probe, 0, embedder)
    assert abs(value - null_mean) < 4 * null_std / np.sqrt(32) + 0.05


def test_fdfr_zero_threshold(small_corpus, embedder):
    assert dc.fdfr_proxy(small_corpus, embedder, tau=0.0) == 0.0
    with pytest.raises(ValueError):
        dc.fdfr_proxy(small_corpus, embedder, tau=1.0)


def test_feature_fid_identical_batches(small_corpus, embedder):
    batch = _identity_batch(small_corpus, 0)
    assert dc.feature_fid(batch, batch, embedder) == pytest.approx(0.0, abs=1e-4)


def test_feature_fid_symmetry(small_corpus, embedder):
    a = _identity_batch(small_corpus, 0)
    b = _identity_batch(small_corpus, 1)
    ab = dc.feature_fid(a, b, embedder)
    ba = dc.feature_fid(b, a, embedder)
    assert ab == pytest.approx(ba, abs=1e-6)
    assert ab > 0


def test_feature_fid_separates_noise(small_corpus, embedder):
    clean_a = dc.ImageBatch(small_corpus.pixels[0::2], small_corpus.labels[0::2])
    clean_b = dc.ImageBatch(small_corpus.pixels[1::2], small_corpus.labels[1::2])
    noise = dc.ImageBatch(torch.rand(24, 3, 16, 16, generator=torch_gen(2)) * 2 - 1,
                          torch.full((24,), -1, dtype=torch.long))
    assert dc.feature_fid(clean_a, noise, embedder) > dc.feature_fid(clean_a, clean_b, embedder)


def test_feature_fid_needs_two_samples(small_corpus, embedder):
    one = dc.ImageBatch(small_corpus.pixels[:1], small_corpus.labels[:1])
    with pytest.raises(ValueError):
        dc.feature_fid(one, one, embedder)


# ------------------------------------------------------------------- heatmaps

def test_heatmap_contract(tiny_model, instance_prompt, tiny_images):
    result = dc.attention_heatmap(tiny_model, tiny_images, instance_prompt,
                                  t=25, resolution=16)
    for arr in (result.cross, result.self_attention):
        assert arr.shape == (16, 16)
        assert arr.min() >= 0.0 and arr.max() <= 1.0
    assert result.resolution == 16 and result.timestep == 25


def test_heatmap_upsamples_from_coarse_resolution(tiny_model, instance_prompt, tiny_images):
    result = dc.attention_heatmap(tiny_model, tiny_images, instance_prompt,
                                  t=25, resolution=8)
    assert result.cross.shape == (16, 16)  # upsampled to the image size
    blocks = result.cross.reshape(8, 2, 8, 2)
    assert np.allclose(blocks, blocks[:, :1, :, :1])  # nearest upsampling


def test_heatmap_missing_resolution(tiny_model, instance_prompt, tiny_images):
    with pytest.raises(ValueError, match="resolution"):
        dc.attention_heatmap(tiny_model, tiny_images, instance_prompt, t=25, resolution=4)


def test_heatmap_uniform_attention_flagged_degenerate(tiny_model, instance_prompt,
                                                      tiny_images):
    model = dc.clone_model(tiny_model)
    with torch.no_grad():  # constant queries -> uniform attention weights
        model.up2.cross_attn.to_q.weight.zero_()
        model.up2.cross_attn.to_q.bias.zero_()
    result = dc.attention_heatmap(model, tiny_images, instance_prompt, t=25, resolution=16)
    assert result.degenerate["cross"]
    assert np.array_equal(result.cross, np.zeros((16, 16)))


def test_heatmap_does_not_perturb_model(tiny_model, instance_prompt, tiny_images):
    x = torch.randn(1, 3, 16, 16, generator=torch_gen(3))
    before, _ = tiny_model.predict_noise(x, 7, instance_prompt)
    dc.attention_heatmap(tiny_model, tiny_images, instance_prompt, t=25, resolution=16)
    after, _ = tiny_model.predict_noise(x, 7, instance_prompt)
    assert torch.equal(before, after)


# ------------------------------------------------------------- dynamics report

def _fake_log(n_iters, inner=3, base=1.0, slope=0.01, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    log = RunLog(variant="full", seed=seed)
    for i in range(n_iters):
        val = base + slope * i + (rng.normal() * noise if noise else 0.0)
        bundle = GradientBundle(torch.zeros(1), torch.zeros(1), torch.zeros(1),
                                [0.1, 0.2], [0.3, 0.4],
                                {"cond": val, "sa": 0.1, "ca": 0.5, "attn": 0.3},
                                [0, 1])
        log.add(i // inner, i % inner, bundle, 0.05)
    return log


def test_dynamics_report_series_length(tmp_path):
    log = _fake_log(300)
    summary = dc.dynamics_report(log, alpha2=0.4)
    assert summary.iterations == 300


def test_dynamics_report_final_loss_and_variance():
    log = _fake_log(30, inner=3, base=1.0, slope=0.01)
    summary = dc.dynamics_report(log, alpha2=0.4)
    # final inner block = iterations 27..29; total = cond + 0.4 * attn
    expected_final = np.mean([1.0 + 0.01 * i + 0.4 * 0.3 for i in (27, 28, 29)])
    assert summary.final_loss == pytest.approx(expected_final, rel=1e-6)
    assert summary.increment_variance == pytest.approx(0.0, abs=1e-12)


def test_dynamics_report_noisier_series_has_higher_increment_variance():
    smooth = dc.dynamics_report(_fake_log(60, noise=0.01, seed=1), alpha2=0.4)
    rough = dc.dynamics_report(_fake_log(60, noise=0.3, seed=1), alpha2=0.4)
    assert rough.increment_variance > smooth.increment_variance


def test_dynamics_report_from_csv(tmp_path):
    log = _fake_log(12)
    path = log.to_csv(tmp_path / "log.csv")
    summary = dc.dynamics_report(path, alpha2=0.4)
    assert summary.iterations == 12


def test_dynamics_report_writes_figures(tmp_path):
    log = _fake_log(12)
    dc.dynamics_report(log, out_dir=tmp_path, alpha2=0.4)
    assert (tmp_path / "dynamics.png").exists()


def test_dynamics_report_empty_log():
    with pytest.raises(ParseError):
        dc.dynamics_report(RunLog(variant="full", seed=0))


def test_dynamics_report_malformed_csv(tmp_path):
    log = _fake_log(3)
    path = log.to_csv(tmp_path / "log.csv")
    lines = path.read_text().splitlines()
    lines[2] = "0,1,{},not_a_number,0,0,0,0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as exc:
        dc.dynamics_report(path)
    assert exc.value.line == 3


def test_dynamics_report_bad_header(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("wrong,header\n1,2\n")
    with pytest.raises(ParseError) as exc:
        dc.dynamics_report(path)
    assert exc.value.line == 1
