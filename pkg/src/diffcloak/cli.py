"""Command-line surface and experiment orchestration.

Run-directory layout: config.json, checkpoints/, images/, logs/, figures/,
report.csv.  Every manifest and report carries the producing config hash.
"""

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

from .attack import VARIANTS, run_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, load_config, write_config
from .corpus import (Identity, build_corpus, generate_identity_images, load_image_batch,
                     save_image_batch, split_clean_perturbed, tokenize)
from .customize import (dreambooth_finetune, generate_class_images, lora_finetune,
                        textual_inversion_finetune, train_base)
from .errors import ConfigError
from .evaluation import (attention_heatmap, dynamics_report, fdfr_proxy, feature_fid,
                         ism_proxy, train_identity_embedder)
from .model import NoisePredictor
from .sampling import sample_ddim
from .schedule import build_linear_schedule
from .seeding import derive_seed


def _load_cfg(args) -> tuple[ExperimentConfig, str]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg, config_hash(cfg)


def _run_dir(out) -> Path:
    out = Path(out)
    for sub in ("checkpoints", "images", "logs", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _build_model(cfg: ExperimentConfig) -> NoisePredictor:
    sched = build_linear_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                                  cfg.schedule.beta_end)
    return NoisePredictor(cfg.model_config(), sched, seed=derive_seed(cfg.seed, 0x3D))


def _identity_split(cfg: ExperimentConfig, identity_id: int, split: str):
    ident = Identity(identity_id, cfg.corpus.corpus_seed)
    batch = generate_identity_images(ident, cfg.corpus.per_identity,
                                     cfg.corpus.render_seed, cfg.corpus.image_size)
    if split == "all":
        return ident, batch
    clean, perturbed = split_clean_perturbed(batch)
    return ident, (clean if split == "clean" else perturbed)


def _instance_images(cfg, args):
    if getattr(args, "images_dir", None):
        return None, load_image_batch(args.images_dir)
    return _identity_split(cfg, args.identity, args.split)


def _class_images(cfg, model, out: Path):
    if cfg.dreambooth.prior_weight <= 0:
        return None
    return generate_class_images(model, cfg.dreambooth.base_prompt,
                                 cfg.dreambooth.class_image_count,
                                 out / "class_cache", seed=cfg.seed,
                                 ddim_steps=cfg.eval.ddim_steps)


def cmd_corpus_generate(args) -> int:
    cfg, chash = _load_cfg(args)
    identities = args.identities if args.identities is not None else cfg.corpus.identities
    per_id = args.per_id if args.per_id is not None else cfg.corpus.per_identity
    seed = args.seed if args.seed is not None else cfg.corpus.corpus_seed
    batch = build_corpus(identities, per_id, seed, cfg.corpus.render_seed,
                         cfg.corpus.image_size)
    save_image_batch(batch, args.out, render_seed=cfg.corpus.render_seed, prefix="corpus",
                     extra={"config_hash": chash, "corpus_seed": seed,
                            "identities": identities, "per_identity": per_id})
    print(f"wrote {len(batch)} images to {args.out}")
    return 0


def cmd_train_base(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    write_config(cfg, out / "config.json")
    corpus = build_corpus(cfg.corpus.identities, cfg.corpus.per_identity,
                          cfg.corpus.corpus_seed, cfg.corpus.render_seed,
                          cfg.corpus.image_size)
    model = _build_model(cfg)
    steps = args.steps if args.steps is not None else cfg.train.steps
    history = train_base(model, corpus, steps, cfg.train.lr, cfg.train.batch,
                         seed=cfg.seed, prompt=cfg.dreambooth.base_prompt)
    save_checkpoint(model, out / "checkpoints" / "base.npz", config_hash=chash)
    with open(out / "logs" / "train_base.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows((i, repr(v)) for i, v in enumerate(history))
    print(f"trained base model for {steps} steps; final loss {history[-1]:.4f}")
    return 0


def cmd_attack(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    write_config(cfg, out / "config.json")
    model = load_checkpoint(args.checkpoint)
    ident, images = _identity_split(cfg, args.identity, "perturbed")
    class_images = _class_images(cfg, model, out)
    protected, log = run_attack(model, images, cfg.attack, cfg.dreambooth,
                                class_images=class_images, variant=args.variant)
    img_dir = out / "images" / f"protected_id{args.identity:03d}_{args.variant}"
    save_image_batch(protected, img_dir, render_seed=cfg.corpus.render_seed,
                     prefix="protected",
                     extra={"config_hash": chash, "seed": cfg.attack.seed,
                            "variant": args.variant, "identity": args.identity})
    log_path = out / "logs" / f"attack_id{args.identity:03d}_{args.variant}.csv"
    log.to_csv(log_path)
    print(f"protected {len(protected)} images -> {img_dir}; log -> {log_path}")
    return 0


def cmd_dreambooth(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    write_config(cfg, out / "config.json")
    model = load_checkpoint(args.checkpoint)
    _, images = _instance_images(cfg, args)
    class_images = _class_images(cfg, model, out)
    dreambooth_finetune(model, images, cfg.dreambooth, class_images, seed=cfg.seed)
    dst = out / "checkpoints" / "dreambooth.npz"
    save_checkpoint(model, dst, config_hash=chash)
    print(f"fine-tuned model -> {dst}")
    return 0


def cmd_lora(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    write_config(cfg, out / "config.json")
    model = load_checkpoint(args.checkpoint)
    _, images = _instance_images(cfg, args)
    class_images = _class_images(cfg, model, out)
    adapter = lora_finetune(model, images, cfg.dreambooth, class_images, seed=cfg.seed)
    dst = out / "checkpoints" / "lora.npz"
    save_checkpoint(adapter, dst, config_hash=chash)
    print(f"trained adapter -> {dst}")
    return 0


def cmd_ti(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    write_config(cfg, out / "config.json")
    model = load_checkpoint(args.checkpoint)
    _, images = _instance_images(cfg, args)
    emb = textual_inversion_finetune(model, images, cfg.dreambooth, seed=cfg.seed)
    dst = out / "checkpoints" / "ti.npz"
    save_checkpoint(emb, dst, config_hash=chash)
    print(f"trained keyword embedding -> {dst}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    write_config(cfg, out / "config.json")
    model = load_checkpoint(args.checkpoint)
    adapter = load_checkpoint(args.adapter, base_model=model) if args.adapter else None
    ti = load_checkpoint(args.ti) if args.ti else None
    corpus = build_corpus(cfg.corpus.identities, cfg.corpus.per_identity,
                          cfg.corpus.corpus_seed, cfg.corpus.render_seed,
                          cfg.corpus.image_size)
    embedder = train_identity_embedder(corpus, seed=cfg.seed)
    ident, clean = _identity_split(cfg, args.identity, "clean")
    rows = []
    for p_idx, prompt_text in enumerate(cfg.eval.prompts):
        tokens = tokenize(prompt_text)
        overrides = {ti.token_id: ti.vector} if ti else None
        prompt = model.encode_prompt(tokens, overrides)
        samples = sample_ddim(model, prompt, steps=cfg.eval.ddim_steps,
                              count=cfg.eval.sample_count,
                              seed=derive_seed(cfg.seed, 0xE7A1, p_idx), adapter=adapter)
        rows.append({
            "prompt": prompt_text,
            "ism_proxy": ism_proxy(samples, ident, embedder),
            "fdfr_proxy": fdfr_proxy(samples, embedder, cfg.eval.tau),
            "feature_fid": feature_fid(samples, clean, embedder),
            "config_hash": chash,
        })
    report = out / "report.csv"
    with open(report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"{row['prompt']!r}: ism={row['ism_proxy']:.3f} "
              f"fdfr={row['fdfr_proxy']:.3f} fid={row['feature_fid']:.2f}")
    return 0


def cmd_heatmap(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    model = load_checkpoint(args.checkpoint)
    if args.image:
        image = load_image_batch(Path(args.image).parent)
    else:
        _, image = _identity_split(cfg, args.identity, "clean")
    prompt_text = args.prompt or cfg.dreambooth.instance_prompt
    prompt = model.encode_prompt(tokenize(prompt_text))
    keyword_pos = args.keyword_position
    result = attention_heatmap(model, image, prompt, t=args.t, resolution=args.resolution,
                               keyword_position=keyword_pos, seed=cfg.seed)
    for name, arr in (("cross", result.cross), ("self", result.self_attention)):
        png = (arr * 255).astype(np.uint8)
        dst = out / "figures" / f"heatmap_{name}_t{args.t}_r{args.resolution}.png"
        Image.fromarray(png, mode="L").save(dst)
        print(f"{name} heatmap -> {dst} (degenerate={result.degenerate[name]})")
    (out / "figures" / "heatmap_manifest.json").write_text(json.dumps(
        {"config_hash": chash, "timestep": args.t, "resolution": args.resolution,
         "prompt": prompt_text, "degenerate": result.degenerate}, indent=2))
    return 0


def cmd_report(args) -> int:
    cfg, chash = _load_cfg(args)
    out = _run_dir(args.out)
    summary = dynamics_report(args.log, out_dir=out / "figures", alpha2=cfg.attack.alpha2)
    report = out / "report.csv"
    with open(report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "config_hash"])
        for key in ("iterations", "final_loss", "increment_variance", "mean_cond_score",
                    "mean_attn_score", "cond_score_variance", "attn_score_variance"):
            writer.writerow([key, repr(getattr(summary, key)), chash])
    print(f"iterations={summary.iterations} final_loss={summary.final_loss:.4f} "
          f"increment_variance={summary.increment_variance:.6f}")
    return 0


def _add_common(p, identity=True, checkpoint=True):
    p.add_argument("--config", default=None, help="JSON config file (defaults if omitted)")
    p.add_argument("--out", default="runs/run", help="run directory")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
    if identity:
        p.add_argument("--identity", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffcloak",
                                     description="Anti-customization attack lab for "
                                                 "toy diffusion models")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("corpus", help="corpus utilities")
    csub = p.add_subparsers(dest="corpus_command")
    g = csub.add_parser("generate", help="render the synthetic corpus to PNGs")
    g.add_argument("--identities", type=int, default=None)
    g.add_argument("--per-id", dest="per_id", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None)
    g.set_defaults(func=cmd_corpus_generate)

    p = sub.add_parser("train-base", help="train the base diffusion model")
    _add_common(p, identity=False, checkpoint=False)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("attack", help="generate protected images")
    _add_common(p)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.set_defaults(func=cmd_attack)

    for name, fn in (("dreambooth", cmd_dreambooth), ("lora", cmd_lora), ("ti", cmd_ti)):
        p = sub.add_parser(name, help=f"{name} fine-tuning")
        _add_common(p)
        p.add_argument("--images-dir", default=None,
                       help="PNG directory (e.g. attack output); overrides --identity")
        p.add_argument("--split", choices=("clean", "perturbed", "all"), default="perturbed")
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="sample and compute metric proxies")
    _add_common(p)
    p.add_argument("--adapter", default=None, help="LoRA adapter checkpoint")
    p.add_argument("--ti", default=None, help="textual-inversion checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="attention heatmaps for one image")
    _add_common(p)
    p.add_argument("--image", default=None, help="PNG path (uses its directory manifest)")
    p.add_argument("--prompt", default=None)
    p.add_argument("--t", type=int, default=500)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--keyword-position", type=int, default=3)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("report", help="optimization-dynamics report from a run log")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="runs/report")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        for msg in e.messages:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure -> exit 1 with stage tag
        stage = getattr(args, "command", "run")
        print(f"[{stage}] failed: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
