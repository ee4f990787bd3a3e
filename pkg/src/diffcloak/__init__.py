"""diffcloak: a desk-scale lab for adversarial image cloaking against
diffusion-model customization."""

from .attack import (AdversarialPromptState, AttackConfig, GradientBundle,
                     PerturbationState, RunLog, attention_loss, baseline_attack,
                     cross_attn_loss, ensemble_gradient, normalize_l1, pgd_step,
                     prompt_attack, run_attack, sample_segment_timesteps, self_attn_loss)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, load_config
from .corpus import (Identity, ImageBatch, PromptTokens, build_corpus,
                     generate_identity_images, split_clean_perturbed, tokenize)
from .customize import (DreamboothConfig, TIEmbedding, dreambooth_finetune,
                        generate_class_images, lora_finetune,
                        textual_inversion_finetune, train_base)
from .evaluation import (DynamicsSummary, HeatmapResult, IdentityEmbedder,
                         MetricsReport, attention_heatmap, dynamics_report,
                         fdfr_proxy, feature_fid, ism_proxy, train_identity_embedder)
from .model import (AttentionTrace, LoraAdapter, ModelConfig, NoisePredictor,
                    PromptEmbedding, TraceEntry, clone_model)
from .sampling import ddim_invert, sample_ddim, sample_ddpm
from .schedule import NoiseSchedule, build_linear_schedule, cond_loss, q_sample

__version__ = "0.1.0"
