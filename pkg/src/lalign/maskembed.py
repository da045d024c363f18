"""Masked-reconstruction alignment training and its baselines.

The main step trains an encoder/decoder pair so that decoding the
encoder's zero-masked embedding sequence reproduces a frozen teacher's
output on the equivalently input-masked image. Baselines share the same
plumbing: a crop-and-average-pool objective, a masked self-reconstruction
precursor, and the per-image additive approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .additive import AdditiveModel, fit_additive, shapley_brute_force  # noqa: F401 (re-export)
from .autodiff import Tensor
from .masking import Mask, mask_embeddings, mask_image, sample_bernoulli_mask, sample_block_mask, sample_uniform_mask
from .optim import AdamW, LrSchedule, clip_global_norm
from .synthdata import bilinear_resize, random_crop_resize
from .vit import DecoderWeights, ViTConfig, ViTWeights, decoder_forward, embed_patches, vit_forward


@dataclass(frozen=True)
class ReconstructionSpec:
    """Which teacher quantity is reconstructed and how it is scored."""

    target: str = "sequence"  # "cls_token" | "sequence"
    layer: str = "second_to_last"  # "final" | "second_to_last"
    loss_kind: str = "mse"  # "mse" | "cosine" | "l1"
    loss_scope: str = "all_patches"  # "all_patches" | "masked_only" | "unmasked_only"

    def __post_init__(self):
        if self.target not in ("cls_token", "sequence"):
            raise ValueError(f"unknown target {self.target!r}")
        if self.layer not in ("final", "second_to_last"):
            raise ValueError(f"unknown layer {self.layer!r}")
        if self.loss_kind not in ("mse", "cosine", "l1"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_scope not in ("all_patches", "masked_only", "unmasked_only"):
            raise ValueError(f"unknown loss scope {self.loss_scope!r}")

    def layer_index(self, depth: int) -> int:
        idx = depth if self.layer == "final" else depth - 1
        if idx < 1:
            raise ValueError(f"target layer {self.layer!r} needs depth >= 2")
        return idx


@dataclass
class MaskEmbedConfig:
    spec: ReconstructionSpec
    mask_sampler: str = "uniform"  # "uniform" | "bernoulli" | "block"
    sampler_param: float | None = None  # p_visible (bernoulli) / target_visible (block)
    use_triple: bool = True
    epochs: int = 5
    batch_size: int = 32
    schedule: LrSchedule | None = None
    clip_norm: float | None = 1.0
    weight_decay: float = 0.01
    augmentation: str = "none"  # "random_crop" | "none"
    crop_scale: tuple[float, float] = (0.6, 1.0)
    mask_fill: str = "dataset_mean"  # "dataset_mean" | "zero"

    def __post_init__(self):
        if self.mask_sampler not in ("uniform", "bernoulli", "block"):
            raise ValueError(f"unknown mask sampler {self.mask_sampler!r}")
        if self.mask_sampler == "bernoulli" and self.sampler_param is None:
            raise ValueError("bernoulli sampler needs sampler_param (visible probability)")
        if self.mask_sampler == "block" and self.sampler_param is None:
            raise ValueError("block sampler needs sampler_param (target visible fraction)")
        if self.augmentation not in ("random_crop", "none"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.mask_fill not in ("dataset_mean", "zero"):
            raise ValueError(f"unknown mask fill policy {self.mask_fill!r}")


def sample_mask_bits(config: MaskEmbedConfig, batch: int, grid_side: int,
                     rng: np.random.Generator) -> np.ndarray:
    """One mask per image as a (batch, n) bit matrix."""
    n = grid_side * grid_side
    rows = []
    for _ in range(batch):
        if config.mask_sampler == "uniform":
            rows.append(sample_uniform_mask(n, rng).bits)
        elif config.mask_sampler == "bernoulli":
            rows.append(sample_bernoulli_mask(n, config.sampler_param, rng).bits)
        else:
            rows.append(sample_block_mask(grid_side, grid_side, config.sampler_param, rng).bits)
    return np.stack(rows)


# -- teacher targets and losses ------------------------------------------------


def teacher_target(teacher: ViTWeights, image: np.ndarray, mask, spec: ReconstructionSpec,
                   fill) -> np.ndarray:
    """Frozen-teacher reconstruction target for an input-masked image batch.

    Returns (batch, d) for the cls_token target or (batch, rows, d) for the
    sequence target; no gradients flow through the teacher.
    """
    cfg = teacher.config
    layer = spec.layer_index(cfg.depth)
    image = np.asarray(image)
    single = image.ndim == 3
    if single:
        image = image[None]
    masked = mask_image(image, mask, fill, cfg)
    with ad.no_grad():
        seq = vit_forward(teacher, cfg, masked, capture={layer})[layer]
    if spec.target == "cls_token":
        if cfg.num_prefix_tokens < 1:
            raise ValueError("cls_token target needs at least one prefix token")
        out = seq.tokens.data[:, 0, :]
    else:
        out = seq.tokens.data
    return out[0] if single else out


def _scope_weights(spec: ReconstructionSpec, mask_bits: np.ndarray, batch: int,
                   num_prefix: int, n: int, dtype) -> np.ndarray:
    """Row weights (batch, rows): prefix rows always count, patch rows per
    the configured scope."""
    bits = np.broadcast_to(np.asarray(mask_bits, dtype=np.float64), (batch, n))
    if spec.loss_scope == "all_patches":
        patch_w = np.ones_like(bits)
    elif spec.loss_scope == "masked_only":
        patch_w = 1.0 - bits
    else:
        patch_w = bits
    prefix_w = np.ones((batch, num_prefix))
    return np.concatenate([prefix_w, patch_w], axis=1).astype(dtype)


def reconstruction_loss(pred: Tensor, target, spec: ReconstructionSpec, mask=None,
                        num_prefix: int | None = None) -> Tensor:
    """Score a reconstruction against the teacher target.

    For sequence targets, rows in scope are selected by the loss scope with
    prefix rows always included; cls targets are a single row per image.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if tuple(pred.shape) != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    if spec.target == "cls_token":
        weights = np.ones((pred.shape[0], 1), dtype=str(pred.dtype))
        pred = pred.reshape((pred.shape[0], 1, pred.shape[1]))
        target = target[:, None, :]
    else:
        bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
        if num_prefix is None:
            num_prefix = pred.shape[1] - bits.shape[-1]
        n = pred.shape[1] - num_prefix
        weights = _scope_weights(spec, bits, pred.shape[0], num_prefix, n, str(pred.dtype))

    total_weight = float(weights.sum())
    if total_weight == 0.0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    w = ad.Tensor(weights[:, :, None])
    target_t = ad.as_tensor(target.astype(str(pred.dtype), copy=False), like=pred)
    if spec.loss_kind == "mse":
        err = (pred - target_t) ** 2.0
        return (err * w).sum() / (total_weight * pred.shape[-1])
    if spec.loss_kind == "l1":
        err = ad.absolute(pred - target_t)
        return (err * w).sum() / (total_weight * pred.shape[-1])
    # cosine: mean over in-scope rows of (1 - cosine similarity)
    target_norms = np.linalg.norm(target, axis=-1)
    in_scope = weights > 0
    if (target_norms[in_scope] == 0).any():
        raise ValueError("cosine loss undefined for a zero-norm target row in scope")
    dot = (pred * target_t).sum(axis=-1)
    pred_norm = ad.sqrt((pred * pred).sum(axis=-1) + 1e-24)
    cos = dot / (pred_norm * ad.Tensor(target_norms.astype(str(pred.dtype))))
    return ((1.0 - cos) * ad.Tensor(weights)).sum() / total_weight


# -- training steps --------------------------------------------------------------


def _augment(images: np.ndarray, config: MaskEmbedConfig, rng: np.random.Generator) -> np.ndarray:
    if config.augmentation == "none":
        return images
    out = [random_crop_resize(im, None, config.crop_scale, rng)[0] for im in images]
    return np.stack(out)


def maskembed_step(encoder: ViTWeights, decoder: DecoderWeights, teacher: ViTWeights,
                   images: np.ndarray, config: MaskEmbedConfig, rng: np.random.Generator,
                   opt: AdamW, lr: float, fill, counters: dict | None = None) -> float:
    """One alignment update on a batch.

    Encodes the clean (possibly crop-augmented) images once, then for each
    mask in the antithetical triple (or the single sampled mask) decodes
    the zero-masked embeddings and scores them against the teacher's
    input-masked output. Gradients reach the encoder and decoder only.
    """
    if images.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    cfg = encoder.config
    images = _augment(np.asarray(images), config, rng)
    bits = sample_mask_bits(config, images.shape[0], cfg.grid, rng)
    slots = [bits, 1 - bits, np.ones_like(bits)] if config.use_triple else [bits]

    enc_seq = vit_forward(encoder, cfg, images, capture={cfg.depth})[cfg.depth]
    if counters is not None:
        counters["encoder_forward"] = counters.get("encoder_forward", 0) + 1

    losses = []
    for slot in slots:
        target = teacher_target(teacher, images, slot, config.spec, fill)
        masked = mask_embeddings(enc_seq, slot, mask_prefix=True)
        pred = decoder_forward(decoder, masked)
        if config.spec.target == "cls_token":
            pred = pred[:, 0, :]
        losses.append(reconstruction_loss(pred, target, config.spec, slot,
                                          num_prefix=cfg.num_prefix_tokens))
        if counters is not None:
            counters["teacher_forward"] = counters.get("teacher_forward", 0) + 1
            counters["decoder_forward"] = counters.get("decoder_forward", 0) + 1
    loss = losses[0]
    for extra in losses[1:]:
        loss = loss + extra
    loss = loss / len(losses)

    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite alignment loss {value}; step aborted")
    opt.zero_grad()
    loss.backward()
    grads = {k: p.grad for k, p in opt.params.items() if p.grad is not None}
    if config.clip_norm is not None:
        clip_global_norm(grads, config.clip_norm)
    opt.step(lr)
    return value


def clean_reconstruction_error(encoder: ViTWeights, decoder: DecoderWeights,
                               teacher: ViTWeights, images: np.ndarray,
                               spec: ReconstructionSpec, fill) -> float:
    """Reconstruction error with the all-visible mask: how well the
    decoder/encoder composition tracks the teacher on clean images."""
    cfg = encoder.config
    ones = np.ones((images.shape[0], cfg.n_patches), dtype=np.uint8)
    with ad.no_grad():
        enc_seq = vit_forward(encoder, cfg, images, capture={cfg.depth})[cfg.depth]
        pred = decoder_forward(decoder, mask_embeddings(enc_seq, ones, mask_prefix=True))
        if spec.target == "cls_token":
            pred = pred[:, 0, :]
        target = teacher_target(teacher, images, ones, spec, fill)
        return reconstruction_loss(pred, target, spec, ones, cfg.num_prefix_tokens).item()


def identity_score(encoder: ViTWeights, images: np.ndarray) -> float:
    """Mean cosine similarity between the encoder's output patch embeddings
    and its raw patch projections; values near 1 flag collapse onto the
    identity shortcut."""
    cfg = encoder.config
    with ad.no_grad():
        raw = embed_patches(encoder, images).data
        out = vit_forward(encoder, cfg, images, capture={cfg.depth})[cfg.depth].patches.data
    dots = (raw * out).sum(axis=-1)
    norms = np.linalg.norm(raw, axis=-1) * np.linalg.norm(out, axis=-1) + 1e-12
    return float((dots / norms).mean())


# -- additive baseline (per image) ------------------------------------------------


def teacher_set_function(teacher: ViTWeights, image: np.ndarray, fill):
    """The teacher's summary output as a function of the visibility mask."""
    cfg = teacher.config
    spec = ReconstructionSpec(target="cls_token", layer="final")

    def fn(bits: np.ndarray) -> np.ndarray:
        return teacher_target(teacher, image, Mask(np.asarray(bits, dtype=np.uint8)), spec, fill)

    return fn


def additive_fit(teacher: ViTWeights, image: np.ndarray, mask_distribution="uniform_cardinality",
                 exhaustive: bool = True, n_steps: int | None = None,
                 rng: np.random.Generator | None = None, fill=0.0) -> AdditiveModel:
    """Fit the additive approximation to a frozen teacher on one image.

    Exhaustive mode solves the weighted least squares over every mask
    (limited to small grids); otherwise stochastic descent over sampled
    masks for n_steps.
    """
    n = teacher.config.n_patches
    if exhaustive and n > 20:
        raise ValueError("exhaustive additive fitting is limited to n <= 20 patches")
    fn = teacher_set_function(teacher, image, fill)
    return fit_additive(fn, n, weighting=mask_distribution, exhaustive=exhaustive,
                        n_steps=n_steps, rng=rng)


# -- crop-reconstruction baseline ---------------------------------------------------


@dataclass
class CropPoolHead:
    """Linear map from pooled encoder embeddings to the teacher summary space."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        return cls(
            w=ad.parameter(rng.normal(0.0, 0.02, size=(in_dim, out_dim)), dtype=dtype),
            b=ad.parameter(np.zeros(out_dim), dtype=dtype),
        )

    def iter_params(self):
        yield "w", self.w
        yield "b", self.b


def sample_grid_crop(grid_side: int, rng: np.random.Generator,
                     min_side: int = 3, max_side: int = 14) -> tuple[int, int, int, int]:
    """Patch-aligned crop window (top, left, height, width) in patch units,
    side lengths uniform on [min_side, min(max_side, grid_side)]."""
    hi = min(max_side, grid_side)
    if hi < min_side:
        raise ValueError(f"grid side {grid_side} cannot fit a {min_side}-patch crop")
    h = int(rng.integers(min_side, hi + 1))
    w = int(rng.integers(min_side, hi + 1))
    top = int(rng.integers(0, grid_side - h + 1))
    left = int(rng.integers(0, grid_side - w + 1))
    return top, left, h, w


def clipself_step(encoder: ViTWeights, teacher: ViTWeights, images: np.ndarray,
                  rng: np.random.Generator, opt: AdamW, head: CropPoolHead, lr: float,
                  counters: dict | None = None) -> float:
    """Crop-based distillation step: average-pool the encoder's patch
    embeddings inside a random grid-aligned crop window and regress (by
    cosine similarity, through a linear head) onto the teacher's summary
    token for the upsampled crop. One crop per image."""
    cfg = encoder.config
    if teacher.config.num_prefix_tokens < 1:
        raise ValueError("teacher needs a summary (prefix) token")
    images = np.asarray(images)
    bsz = images.shape[0]
    p, g = cfg.patch_size, cfg.grid

    crops = [sample_grid_crop(g, rng) for _ in range(bsz)]
    upsampled = np.stack([
        bilinear_resize(
            images[i, top * p : (top + h) * p, left * p : (left + w) * p],
            cfg.image_size, cfg.image_size,
        )
        for i, (top, left, h, w) in enumerate(crops)
    ])
    with ad.no_grad():
        tcfg = teacher.config
        target = vit_forward(teacher, tcfg, upsampled, capture={tcfg.depth})[tcfg.depth]
        target = target.tokens.data[:, 0, :]
    if counters is not None:
        counters["teacher_forward"] = counters.get("teacher_forward", 0) + 1

    window = np.zeros((bsz, 1, cfg.n_patches), dtype=str(encoder.dtype))
    for i, (top, left, h, w) in enumerate(crops):
        mask2d = np.zeros((g, g))
        mask2d[top : top + h, left : left + w] = 1.0
        window[i, 0] = (mask2d / mask2d.sum()).reshape(-1)

    enc_seq = vit_forward(encoder, cfg, images, capture={cfg.depth})[cfg.depth]
    pooled = (Tensor(window) @ enc_seq.patches)[:, 0, :]
    pred = pooled @ head.w + head.b

    dot = (pred * Tensor(target.astype(str(pred.dtype)))).sum(axis=-1)
    norms = ad.sqrt((pred * pred).sum(axis=-1) + 1e-24) * Tensor(
        np.linalg.norm(target, axis=-1).astype(str(pred.dtype))
    )
    loss = (1.0 - dot / norms).mean()

    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite crop-distillation loss {value}; step aborted")
    opt.zero_grad()
    loss.backward()
    grads = {k: q.grad for k, q in opt.params.items() if q.grad is not None}
    clip_global_norm(grads, 1.0)
    opt.step(lr)
    return value


# -- masked self-reconstruction precursor ----------------------------------------------


def mim_step(student: ViTWeights, frozen_self_teacher: ViTWeights, images: np.ndarray,
             mask, opt: AdamW, lr: float, fill, counters: dict | None = None) -> float:
    """Reconstruct the frozen snapshot's clean-image embedding sequence from
    an input-masked view of the same image."""
    cfg = student.config
    images = np.asarray(images)
    with ad.no_grad():
        tcfg = frozen_self_teacher.config
        target = vit_forward(frozen_self_teacher, tcfg, images, capture={tcfg.depth})[tcfg.depth]
        target = target.tokens.data
    masked_images = mask_image(images, mask, fill, cfg)
    student_seq = vit_forward(student, cfg, masked_images, capture={cfg.depth})[cfg.depth]
    diff = student_seq.tokens - Tensor(target.astype(str(student_seq.tokens.dtype)))
    loss = (diff * diff).mean()
    if counters is not None:
        counters["teacher_forward"] = counters.get("teacher_forward", 0) + 1
        counters["student_forward"] = counters.get("student_forward", 0) + 1

    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite masked-reconstruction loss {value}; step aborted")
    opt.zero_grad()
    loss.backward()
    grads = {k: p.grad for k, p in opt.params.items() if p.grad is not None}
    clip_global_norm(grads, 1.0)
    opt.step(lr)
    return value


# -- analytic step-cost model ------------------------------------------------------------


def _vit_forward_macs(cfg: ViTConfig) -> float:
    """Multiply-accumulates in the linear maps and attention products of one
    forward pass; normalizations and activations are ignored."""
    n_tokens = cfg.seq_len
    d = cfg.dim
    hidden = int(d * cfg.mlp_ratio)
    per_block = 4 * n_tokens * d * d + 2 * n_tokens * n_tokens * d + 2 * n_tokens * d * hidden
    return cfg.n_patches * cfg.patch_dim * d + cfg.depth * per_block


def _decoder_forward_macs(cfg: ViTConfig, decoder_depth: int, mlp_ratio: float) -> float:
    n_tokens = cfg.seq_len
    d = cfg.dim
    hidden = int(d * mlp_ratio)
    per_block = 4 * n_tokens * d * d + 2 * n_tokens * n_tokens * d + 2 * n_tokens * d * hidden
    return 2 * n_tokens * d * d + decoder_depth * per_block


def estimate_step_cost(config: MaskEmbedConfig, vit_config: ViTConfig,
                       decoder_depth: int = 2, decoder_mlp_ratio: float = 4.0) -> float:
    """Relative FLOP cost of the configured step against a single-mask step.

    Model: encoder forward plus backward once (backward twice the forward),
    teacher forward once per distinct mask, decoder forward plus backward
    once per mask term.
    """
    enc = _vit_forward_macs(vit_config)
    dec = _decoder_forward_macs(vit_config, decoder_depth, decoder_mlp_ratio)

    def step_cost(n_masks: int) -> float:
        return 3.0 * enc + n_masks * enc + n_masks * 3.0 * dec

    n_masks = 3 if config.use_triple else 1
    return step_cost(n_masks) / step_cost(1)
