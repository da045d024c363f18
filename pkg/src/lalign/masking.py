"""Binary patch-visibility masks: sampling laws, the antithetical triple,
mean-fill input masking and zero-fill embedding masking.

Bit convention: 1 = patch visible, 0 = masked out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .vit import EmbeddingSequence, ViTConfig, patchify, unpatchify


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray  # (n,) uint8, 1 = visible

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1:
            raise ValueError("mask bits must be a 1-D vector")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @property
    def cardinality(self) -> int:
        return int(self.bits.sum())

    def complement(self) -> "Mask":
        return Mask(1 - self.bits)


@dataclass(frozen=True)
class MaskTriple:
    m: Mask
    complement: Mask
    full: Mask

    def __post_init__(self):
        if not np.array_equal(self.complement.bits, 1 - self.m.bits):
            raise ValueError("complement bits must be 1 - m")
        if not (self.full.bits == 1).all():
            raise ValueError("full mask must be all ones")

    def __iter__(self):
        return iter((self.m, self.complement, self.full))


def make_triple(m: Mask) -> MaskTriple:
    return MaskTriple(m=m, complement=m.complement(), full=Mask(np.ones(m.n, dtype=np.uint8)))


# -- sampling laws ---------------------------------------------------------


def sample_uniform_mask(n: int, rng: np.random.Generator) -> Mask:
    """Visible-set cardinality uniform on {0..n}, then a uniform subset."""
    if n < 1:
        raise ValueError("n must be >= 1")
    k = int(rng.integers(0, n + 1))
    bits = np.zeros(n, dtype=np.uint8)
    bits[rng.permutation(n)[:k]] = 1
    return Mask(bits)


def mask_probability(mask: Mask) -> float:
    """Probability of a mask under the uniform-cardinality law:
    1 / (C(n, k) * (n + 1)) for a mask with k visible patches."""
    n, k = mask.n, mask.cardinality
    return 1.0 / (math.comb(n, k) * (n + 1))


def sample_bernoulli_mask(n: int, p_visible: float, rng: np.random.Generator) -> Mask:
    if not (0.0 <= p_visible <= 1.0):
        raise ValueError("p_visible must lie in [0, 1]")
    return Mask((rng.random(n) < p_visible).astype(np.uint8))


def sample_block_mask(rows: int, cols: int, target_visible: float, rng: np.random.Generator) -> Mask:
    """Reveal random axis-aligned rectangles on the patch grid until at
    least `target_visible` of the patches are uncovered.

    Rectangle law: each side uniform on [1, ceil(side/2)], position uniform.
    """
    if not (0.0 < target_visible <= 1.0):
        raise ValueError("target_visible must lie in (0, 1]")
    grid = np.zeros((rows, cols), dtype=np.uint8)
    total = rows * cols
    max_h = max(1, math.ceil(rows / 2))
    max_w = max(1, math.ceil(cols / 2))
    while grid.sum() < target_visible * total:
        h = int(rng.integers(1, max_h + 1))
        w = int(rng.integers(1, max_w + 1))
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        grid[top : top + h, left : left + w] = 1
    return Mask(grid.reshape(-1))


# -- applying masks ---------------------------------------------------------


def mask_image(image: np.ndarray, mask, fill, config: ViTConfig) -> np.ndarray:
    """Replace every pixel of each masked patch with the fill value.

    `mask` is a Mask, an (n,) bit vector, or a (batch, n) bit matrix paired
    with a batched image. `fill` is a scalar or per-channel vector.
    """
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    image = np.asarray(image)
    single = image.ndim == 3
    patches = patchify(image, config)
    if single:
        patches = patches[None]
    if bits.ndim == 1:
        bits = np.broadcast_to(bits, (patches.shape[0], bits.shape[0]))
    if bits.shape[1] != config.n_patches:
        raise ValueError("mask length does not match the image patch grid")
    fill_px = np.broadcast_to(
        np.asarray(fill, dtype=image.dtype),
        (config.channels,),
    )
    fill_patch = np.tile(fill_px, config.patch_size * config.patch_size)
    out = np.where(bits[:, :, None].astype(bool), patches, fill_patch[None, None, :])
    out = unpatchify(out.astype(image.dtype, copy=False), config)
    return out[0] if single else out


def mask_embeddings(seq: EmbeddingSequence, mask, mask_prefix: bool = False) -> EmbeddingSequence:
    """Zero the masked patch rows of an embedding sequence; also zero the
    prefix rows when mask_prefix is set. Differentiable in the embeddings."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    if bits.ndim == 1:
        bits = bits[None, :]
    if bits.shape[-1] != seq.n_patches:
        raise ValueError("mask length does not match the sequence's patch count")
    prefix_keep = 0.0 if mask_prefix else 1.0
    keep = np.concatenate(
        [np.full((bits.shape[0], seq.num_prefix), prefix_keep), bits.astype(np.float64)],
        axis=1,
    )
    keep = keep.astype(seq.tokens.dtype)[:, :, None]
    return EmbeddingSequence(
        tokens=seq.tokens * ad.Tensor(keep),
        num_prefix=seq.num_prefix,
        layer_index=seq.layer_index,
    )
