"""Vision transformer used in three roles: frozen teacher, trainable encoder,
and a small two-block decoder that maps masked embedding sequences back to the
teacher's output space.

The same pre-norm block runs everywhere. Decoder blocks add per-channel
residual gains (LayerScale) initialized near zero, and attention logits can be
bounded with a tanh soft cap to keep fine-tuning stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    dim: int
    depth: int
    heads: int
    num_prefix_tokens: int = 1
    softcap: float | None = None
    mlp_ratio: float = 4.0
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.softcap is not None and self.softcap <= 0:
            raise ValueError("softcap must be positive when set")
        if self.num_prefix_tokens < 0:
            raise ValueError("num_prefix_tokens must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.n_patches + self.num_prefix_tokens

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class BlockWeights:
    """Pre-norm transformer block parameters; ls1/ls2 are the optional
    LayerScale gains used only by decoder blocks."""

    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    ls1: Tensor | None = None
    ls2: Tensor | None = None

    def iter_params(self, prefix: str):
        for name in ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b",
                     "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
                     "ls1", "ls2"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


def _init_block(dim: int, hidden: int, rng: np.random.Generator, dtype,
                layerscale_init: float | None = None) -> BlockWeights:
    def norm01(*shape):
        return ad.parameter(rng.normal(0.0, 0.02, size=shape), dtype=dtype)

    def zeros(*shape):
        return ad.parameter(np.zeros(shape), dtype=dtype)

    def ones(*shape):
        return ad.parameter(np.ones(shape), dtype=dtype)

    ls1 = ls2 = None
    if layerscale_init is not None:
        ls1 = ad.parameter(np.full(dim, layerscale_init), dtype=dtype)
        ls2 = ad.parameter(np.full(dim, layerscale_init), dtype=dtype)
    return BlockWeights(
        ln1_g=ones(dim), ln1_b=zeros(dim),
        qkv_w=norm01(dim, 3 * dim), qkv_b=zeros(3 * dim),
        proj_w=norm01(dim, dim), proj_b=zeros(dim),
        ln2_g=ones(dim), ln2_b=zeros(dim),
        fc1_w=norm01(dim, hidden), fc1_b=zeros(hidden),
        fc2_w=norm01(hidden, dim), fc2_b=zeros(dim),
        ls1=ls1, ls2=ls2,
    )


@dataclass
class ViTWeights:
    config: ViTConfig
    patch_proj_w: Tensor
    patch_proj_b: Tensor
    pos_emb: Tensor
    prefix_tokens: Tensor
    blocks: list[BlockWeights]
    final_norm_g: Tensor
    final_norm_b: Tensor

    @classmethod
    def init(cls, config: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> "ViTWeights":
        hidden = int(config.dim * config.mlp_ratio)
        return cls(
            config=config,
            patch_proj_w=ad.parameter(rng.normal(0.0, 0.02, size=(config.patch_dim, config.dim)), dtype=dtype),
            patch_proj_b=ad.parameter(np.zeros(config.dim), dtype=dtype),
            pos_emb=ad.parameter(rng.normal(0.0, 0.02, size=(config.seq_len, config.dim)), dtype=dtype),
            prefix_tokens=ad.parameter(rng.normal(0.0, 0.02, size=(config.num_prefix_tokens, config.dim)), dtype=dtype),
            blocks=[_init_block(config.dim, hidden, rng, dtype) for _ in range(config.depth)],
            final_norm_g=ad.parameter(np.ones(config.dim), dtype=dtype),
            final_norm_b=ad.parameter(np.zeros(config.dim), dtype=dtype),
        )

    def iter_params(self):
        yield "patch_proj.w", self.patch_proj_w
        yield "patch_proj.b", self.patch_proj_b
        yield "pos_emb", self.pos_emb
        yield "prefix_tokens", self.prefix_tokens
        for i, blk in enumerate(self.blocks):
            yield from blk.iter_params(f"blocks.{i}")
        yield "final_norm.g", self.final_norm_g
        yield "final_norm.b", self.final_norm_b

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.iter_params())

    def copy(self) -> "ViTWeights":
        return _copy_weights(self)

    @property
    def dtype(self):
        return self.patch_proj_w.dtype


def _copy_weights(weights):
    """Deep copy of a weight container, preserving requires_grad flags."""
    import copy as _copy

    def clone(obj):
        if isinstance(obj, Tensor):
            t = Tensor(obj.data.copy(), requires_grad=obj.requires_grad)
            return t
        if isinstance(obj, list):
            return [clone(x) for x in obj]
        if isinstance(obj, BlockWeights):
            return BlockWeights(**{k: clone(v) for k, v in vars(obj).items()})
        return _copy.copy(obj)

    kwargs = {k: clone(v) for k, v in vars(weights).items()}
    return type(weights)(**kwargs)


@dataclass
class DecoderWeights:
    """Two transformer blocks with LayerScale, learned positions, an input
    linear head and an output linear map to the reconstruction width."""

    heads: int
    in_w: Tensor
    in_b: Tensor
    pos_emb: Tensor
    blocks: list[BlockWeights]
    out_w: Tensor
    out_b: Tensor

    DEPTH = 2

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seq_len: int, heads: int,
             rng: np.random.Generator, dtype=np.float32,
             layerscale_init: float = 1e-4, mlp_ratio: float = 4.0) -> "DecoderWeights":
        if layerscale_init <= 0:
            raise ValueError("layerscale_init must be a small positive constant")
        hidden = int(in_dim * mlp_ratio)
        return cls(
            heads=heads,
            in_w=ad.parameter(rng.normal(0.0, 0.02, size=(in_dim, in_dim)), dtype=dtype),
            in_b=ad.parameter(np.zeros(in_dim), dtype=dtype),
            pos_emb=ad.parameter(rng.normal(0.0, 0.02, size=(seq_len, in_dim)), dtype=dtype),
            blocks=[_init_block(in_dim, hidden, rng, dtype, layerscale_init=layerscale_init)
                    for _ in range(cls.DEPTH)],
            out_w=ad.parameter(rng.normal(0.0, 0.02, size=(in_dim, out_dim)), dtype=dtype),
            out_b=ad.parameter(np.zeros(out_dim), dtype=dtype),
        )

    def iter_params(self):
        yield "in.w", self.in_w
        yield "in.b", self.in_b
        yield "pos_emb", self.pos_emb
        for i, blk in enumerate(self.blocks):
            yield from blk.iter_params(f"blocks.{i}")
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.iter_params())

    def copy(self) -> "DecoderWeights":
        return _copy_weights(self)


@dataclass
class EmbeddingSequence:
    """Batched token sequence captured at one layer: prefix rows first,
    then one row per patch in row-major grid order."""

    tokens: Tensor  # (batch, num_prefix + n, dim)
    num_prefix: int
    layer_index: int

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ValueError("tokens must be (batch, rows, dim)")

    @property
    def prefix(self) -> Tensor:
        return self.tokens[:, : self.num_prefix, :]

    @property
    def patches(self) -> Tensor:
        return self.tokens[:, self.num_prefix :, :]

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[1] - self.num_prefix


# -- patch grid ----------------------------------------------------------


def patchify(image: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Cut an image (or batch) into flat patches, row-major over the grid.

    (H, W, C) -> (n, patch_dim); (B, H, W, C) -> (B, n, patch_dim).
    """
    single = image.ndim == 3
    if single:
        image = image[None]
    b, h, w, c = image.shape
    if h != config.image_size or w != config.image_size or c != config.channels:
        raise ValueError(f"image shape {image.shape[1:]} does not match config")
    p, g = config.patch_size, config.grid
    patches = (
        image.reshape(b, g, p, g, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, g * g, p * p * c)
    )
    return patches[0] if single else patches


def unpatchify(patches: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Exact inverse of patchify."""
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    p, g, c = config.patch_size, config.grid, config.channels
    image = (
        patches.reshape(b, g, g, p, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, g * p, g * p, c)
    )
    return image[0] if single else image


# -- forward passes --------------------------------------------------------


def softcap_logits(logits: Tensor, c: float) -> Tensor:
    """Bound values smoothly to (-c, c) via c * tanh(x / c)."""
    if c <= 0:
        raise ValueError("softcap constant must be positive")
    return ad.tanh(logits * (1.0 / c)) * c


def _affine_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.layer_norm(x) * g + b


def attention(x: Tensor, blk: BlockWeights, heads: int, softcap: float | None) -> Tensor:
    bsz, n, d = x.shape
    dh = d // heads
    qkv = x @ blk.qkv_w + blk.qkv_b
    q = qkv[:, :, :d].reshape((bsz, n, heads, dh)).transpose((0, 2, 1, 3))
    k = qkv[:, :, d : 2 * d].reshape((bsz, n, heads, dh)).transpose((0, 2, 1, 3))
    v = qkv[:, :, 2 * d :].reshape((bsz, n, heads, dh)).transpose((0, 2, 1, 3))
    logits = (q @ k.transpose((0, 1, 3, 2))) * (dh**-0.5)
    if softcap is not None:
        logits = softcap_logits(logits, softcap)
    attn = ad.softmax(logits, axis=-1)
    out = (attn @ v).transpose((0, 2, 1, 3)).reshape((bsz, n, d))
    return out @ blk.proj_w + blk.proj_b


def block_forward(x: Tensor, blk: BlockWeights, heads: int, softcap: float | None = None) -> Tensor:
    a = attention(_affine_norm(x, blk.ln1_g, blk.ln1_b), blk, heads, softcap)
    if blk.ls1 is not None:
        a = a * blk.ls1
    x = x + a
    h = _affine_norm(x, blk.ln2_g, blk.ln2_b)
    m = ad.gelu(h @ blk.fc1_w + blk.fc1_b) @ blk.fc2_w + blk.fc2_b
    if blk.ls2 is not None:
        m = m * blk.ls2
    return x + m


def embed_patches(weights: ViTWeights, image: np.ndarray) -> Tensor:
    """Raw patch projections (before prefix/position/blocks), batched."""
    cfg = weights.config
    patches = patchify(np.asarray(image), cfg)
    if patches.ndim == 2:
        patches = patches[None]
    patches_t = Tensor(patches.astype(weights.dtype, copy=False))
    return patches_t @ weights.patch_proj_w + weights.patch_proj_b


def vit_forward(
    weights: ViTWeights,
    config: ViTConfig,
    image: np.ndarray,
    capture: set[int] | None = None,
    zero_pos_emb: bool = False,
    norm_nonfinal: bool = False,
) -> dict[int, EmbeddingSequence]:
    """Run the transformer and return the token sequence after each captured
    block (1-indexed). The final layer's capture passes through the output
    normalization; earlier captures are returned raw unless norm_nonfinal.
    """
    if capture is None:
        capture = {config.depth}
    capture = set(capture)
    if not capture:
        raise ValueError("capture set must not be empty")
    if not capture <= set(range(1, config.depth + 1)):
        raise ValueError(f"capture {sorted(capture)} outside 1..{config.depth}")

    x = embed_patches(weights, image)
    bsz = x.shape[0]
    if config.num_prefix_tokens > 0:
        prefix = ad.broadcast_to(
            weights.prefix_tokens.reshape((1, config.num_prefix_tokens, config.dim)),
            (bsz, config.num_prefix_tokens, config.dim),
        )
        x = ad.concat([prefix, x], axis=1)
    if not zero_pos_emb:
        x = x + weights.pos_emb
    out: dict[int, EmbeddingSequence] = {}
    for i, blk in enumerate(weights.blocks, start=1):
        x = block_forward(x, blk, config.heads, config.softcap)
        if i in capture:
            captured = x
            if i == config.depth or norm_nonfinal:
                captured = _affine_norm(x, weights.final_norm_g, weights.final_norm_b)
            out[i] = EmbeddingSequence(captured, config.num_prefix_tokens, i)
    return out


def decoder_forward(decoder: DecoderWeights, masked_embeddings: EmbeddingSequence | Tensor) -> Tensor:
    """Decode a masked embedding sequence into the reconstruction space.

    Returns the full output sequence; callers reconstructing a single
    summary vector read the first row. Positions are added after the input
    linear head with no normalization in between.
    """
    tokens = masked_embeddings.tokens if isinstance(masked_embeddings, EmbeddingSequence) else masked_embeddings
    if tokens.shape[-1] != decoder.in_w.shape[0]:
        raise ValueError(
            f"embedding width {tokens.shape[-1]} does not match decoder input width {decoder.in_w.shape[0]}"
        )
    if tokens.shape[1] != decoder.pos_emb.shape[0]:
        raise ValueError(
            f"sequence length {tokens.shape[1]} does not match decoder positions {decoder.pos_emb.shape[0]}"
        )
    x = tokens @ decoder.in_w + decoder.in_b
    x = x + decoder.pos_emb
    for blk in decoder.blocks:
        x = block_forward(x, blk, decoder.heads, softcap=None)
    return x @ decoder.out_w + decoder.out_b
