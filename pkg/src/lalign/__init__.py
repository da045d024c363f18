"""Locality alignment for vision transformers at desk scale.

A numpy-based toolkit: a reverse-mode autodiff core, a small ViT in
teacher/encoder/decoder roles, mask sampling laws, masked-reconstruction
alignment training with its baselines, a synthetic patch-semantics
dataset, and a frozen-backbone probing benchmark scored by macro recall.
"""

from .additive import (
    AdditiveModel,
    additive_objective,
    enumerate_masks,
    fit_additive,
    shapley_brute_force,
    shapley_kernel_weight,
)
from .autodiff import GradCheckReport, Tensor, grad_check, no_grad
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, params_checksum, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .maskembed import (
    CropPoolHead,
    MaskEmbedConfig,
    ReconstructionSpec,
    additive_fit,
    clean_reconstruction_error,
    clipself_step,
    estimate_step_cost,
    identity_score,
    maskembed_step,
    mim_step,
    reconstruction_loss,
    teacher_target,
)
from .masking import (
    Mask,
    MaskTriple,
    make_triple,
    mask_embeddings,
    mask_image,
    mask_probability,
    sample_bernoulli_mask,
    sample_block_mask,
    sample_uniform_mask,
)
from .metrics import MetricRow, emit_metrics, parse_metrics_csv
from .optim import AdamW, AdamWState, LrSchedule, adamw_step, clip_global_norm, schedule_lr
from .probing import (
    PatchLabelSet,
    ProbeHyperparams,
    ProbeMetrics,
    ProbeSplit,
    build_patch_labels,
    evaluate_suite,
    intervene,
    macro_recall,
    make_probe_head,
    per_class_recall,
    train_probe,
)
from .experiment import RunError, run
from .synthdata import (
    SynthDataset,
    SynthSample,
    SynthSpec,
    bilinear_resize,
    channel_means,
    gen_dataset,
    load_dataset,
    random_crop_resize,
    save_dataset,
)
from .vit import (
    DecoderWeights,
    EmbeddingSequence,
    ViTConfig,
    ViTWeights,
    decoder_forward,
    patchify,
    softcap_logits,
    unpatchify,
    vit_forward,
)

__version__ = "0.1.0"
