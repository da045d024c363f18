"""Patch-level probing benchmark: cast per-pixel labels to multi-label
patch classification, train output heads on a frozen backbone under BCE,
and score local/global prediction with macro-averaged recall.

Interventions test how much the probe relies on patch embeddings: cls_only
restricts the head to a single summary vector, anonymize strips positions
and presents the embeddings as an unordered set read out by learned
prediction-slot tokens.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW, LrSchedule, clip_global_norm, schedule_lr
from .vit import EmbeddingSequence, ViTConfig, ViTWeights, _init_block, block_forward, vit_forward

NUM_SIZE_BINS = 10


@dataclass
class PatchLabelSet:
    """Per-patch multi-hot labels plus their image-level union."""

    local: np.ndarray  # (n, C) uint8
    global_: np.ndarray  # (C,) uint8

    def __post_init__(self):
        if not np.array_equal(self.global_, self.local.any(axis=0).astype(self.global_.dtype)):
            raise ValueError("global labels must be the union of the local rows")


def build_patch_labels(segmentation: np.ndarray, grid: tuple[int, int], num_classes: int) -> PatchLabelSet:
    """local[i][c] = 1 iff any pixel of class c falls inside patch i
    (row-major patch order); global = column-wise union."""
    seg = np.asarray(segmentation)
    rows, cols = grid
    h, w = seg.shape
    if h % rows or w % cols:
        raise ValueError("segmentation dimensions must be divisible by the grid")
    if seg.max(initial=0) >= num_classes:
        raise ValueError(f"class id {int(seg.max())} outside 0..{num_classes - 1}")
    ph, pw = h // rows, w // cols
    per_patch = (
        seg.reshape(rows, ph, cols, pw).transpose(0, 2, 1, 3).reshape(rows * cols, ph * pw)
    )
    local = np.zeros((rows * cols, num_classes), dtype=np.uint8)
    idx = np.repeat(np.arange(rows * cols), ph * pw)
    local[idx, per_patch.reshape(-1)] = 1
    return PatchLabelSet(local=local, global_=local.any(axis=0).astype(np.uint8))


# -- recall metrics -----------------------------------------------------------


def per_class_recall(predictions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Recall per class over all positions; NaN where a class has no
    positive labels. Predictions are probabilities thresholded at 0.5
    (or already-boolean decisions)."""
    preds = np.asarray(predictions)
    labels = np.asarray(labels).astype(bool)
    if preds.shape != labels.shape:
        raise ValueError("prediction and label shapes must match")
    decided = preds if preds.dtype == bool else preds >= 0.5
    preds2 = decided.reshape(-1, decided.shape[-1])
    labels2 = labels.reshape(-1, labels.shape[-1])
    positives = labels2.sum(axis=0)
    tp = (preds2 & labels2).sum(axis=0)
    out = np.full(labels2.shape[-1], np.nan)
    has = positives > 0
    out[has] = tp[has] / positives[has]
    return out


def macro_recall(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of per-class recall over classes with positives."""
    per_class = per_class_recall(predictions, labels)
    if np.isnan(per_class).all():
        raise ValueError("no positive labels anywhere; macro recall undefined")
    return float(np.nanmean(per_class))


@dataclass
class ProbeMetrics:
    local_macro_recall: float
    global_macro_recall: float
    per_class_recall: np.ndarray  # (C,), NaN for classes without positives
    per_size_bin_recall: np.ndarray  # (NUM_SIZE_BINS,), NaN for empty bins


# -- output heads -------------------------------------------------------------


@dataclass
class HeadInput:
    """What an output head is allowed to see for one batch."""

    tokens: Tensor  # (batch, rows, dim) context tokens
    num_prefix: int
    mode: str  # none | cls_only | anonymize


def intervene(seq: EmbeddingSequence, mode: str) -> HeadInput:
    """Restrict or restructure the head input.

    cls_only keeps one summary vector per image (first prefix token, or the
    mean patch embedding when the backbone has no prefix). anonymize keeps
    the full set of embeddings but marks them as unordered; the caller is
    responsible for having computed them with zeroed position embeddings.
    """
    if mode == "none":
        return HeadInput(seq.tokens, seq.num_prefix, mode)
    if mode == "cls_only":
        if seq.num_prefix >= 1:
            summary = seq.tokens[:, :1, :]
        else:
            summary = seq.patches.mean(axis=1, keepdims=True)
        return HeadInput(summary, 0, mode)
    if mode == "anonymize":
        return HeadInput(seq.tokens, seq.num_prefix, mode)
    raise ValueError(f"unknown intervention {mode!r}")


def _bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    t = ad.as_tensor(targets.astype(logits.dtype, copy=False), like=logits)
    return (t * ad.softplus(-logits) + (1.0 - t) * ad.softplus(logits)).mean()


class LinearHead:
    """Independent linear classifier on each patch embedding; global task
    reads the mean patch embedding."""

    kind = "linear"

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        self.w = ad.parameter(rng.normal(0.0, 0.02, size=(dim, num_classes)), dtype=dtype)
        self.b = ad.parameter(np.zeros(num_classes), dtype=dtype)

    def iter_params(self):
        yield "w", self.w
        yield "b", self.b

    def _project(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def forward(self, inp: HeadInput, task: str) -> Tensor:
        ctx = inp.tokens
        patches = ctx[:, inp.num_prefix :, :]
        if task == "local":
            out = self._project(patches)
            return out
        pooled = patches.mean(axis=1, keepdims=True)
        return self._project(pooled)[:, 0, :]


class MlpHead(LinearHead):
    """One hidden layer with GELU, otherwise identical to the linear head."""

    kind = "mlp"

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator,
                 dtype=np.float32, hidden: int = 1024):
        self.w1 = ad.parameter(rng.normal(0.0, 0.02, size=(dim, hidden)), dtype=dtype)
        self.b1 = ad.parameter(np.zeros(hidden), dtype=dtype)
        self.w = ad.parameter(rng.normal(0.0, 0.02, size=(hidden, num_classes)), dtype=dtype)
        self.b = ad.parameter(np.zeros(num_classes), dtype=dtype)

    def iter_params(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w", self.w
        yield "b", self.b

    def _project(self, x: Tensor) -> Tensor:
        return ad.gelu(x @ self.w1 + self.b1) @ self.w + self.b


class TransformerHead:
    """Two-block transformer over the full sequence with learned positions.

    Local predictions are read from the patch positions; the global task
    reads a dedicated learned query token. Under interventions the context
    is attended to from learned prediction-slot tokens instead, and no
    positional embedding is added to the context rows.
    """

    kind = "transformer"

    def __init__(self, dim: int, heads: int, n_patches: int, num_prefix: int,
                 num_classes: int, rng: np.random.Generator, dtype=np.float32,
                 mlp_ratio: float = 4.0):
        self.dim = dim
        self.heads = heads
        self.n_patches = n_patches
        self.num_prefix = num_prefix
        hidden = int(dim * mlp_ratio)
        self.blocks = [_init_block(dim, hidden, rng, dtype) for _ in range(2)]
        self.pos_emb = ad.parameter(rng.normal(0.0, 0.02, size=(num_prefix + n_patches, dim)), dtype=dtype)
        self.slot_tokens = ad.parameter(rng.normal(0.0, 0.02, size=(n_patches, dim)), dtype=dtype)
        self.global_query = ad.parameter(rng.normal(0.0, 0.02, size=(1, dim)), dtype=dtype)
        self.final_g = ad.parameter(np.ones(dim), dtype=dtype)
        self.final_b = ad.parameter(np.zeros(dim), dtype=dtype)
        self.out_w = ad.parameter(rng.normal(0.0, 0.02, size=(dim, num_classes)), dtype=dtype)
        self.out_b = ad.parameter(np.zeros(num_classes), dtype=dtype)

    def iter_params(self):
        for i, blk in enumerate(self.blocks):
            yield from blk.iter_params(f"blocks.{i}")
        for name in ("pos_emb", "slot_tokens", "global_query", "final_g", "final_b", "out_w", "out_b"):
            yield name, getattr(self, name)

    def _run(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = block_forward(x, blk, self.heads)
        return ad.layer_norm(x) * self.final_g + self.final_b

    def forward(self, inp: HeadInput, task: str) -> Tensor:
        bsz = inp.tokens.shape[0]
        if inp.mode == "none":
            x = inp.tokens + self.pos_emb
            if task == "global":
                q = ad.broadcast_to(self.global_query.reshape((1, 1, self.dim)), (bsz, 1, self.dim))
                x = ad.concat([x, q], axis=1)
            h = self._run(x)
            if task == "local":
                return h[:, inp.num_prefix :, :] @ self.out_w + self.out_b
            return (h[:, -1, :] @ self.out_w + self.out_b)
        # Interventions: learned readout tokens attend to unordered context.
        if task == "local":
            readout = ad.broadcast_to(
                self.slot_tokens.reshape((1, self.n_patches, self.dim)),
                (bsz, self.n_patches, self.dim),
            )
            n_read = self.n_patches
        else:
            readout = ad.broadcast_to(self.global_query.reshape((1, 1, self.dim)), (bsz, 1, self.dim))
            n_read = 1
        x = ad.concat([readout, inp.tokens], axis=1)
        h = self._run(x)
        logits = h[:, :n_read, :] @ self.out_w + self.out_b
        return logits if task == "local" else logits[:, 0, :]


def make_probe_head(kind: str, dim: int, heads: int, n_patches: int, num_prefix: int,
                    num_classes: int, rng: np.random.Generator, dtype=np.float32):
    if kind == "linear":
        return LinearHead(dim, num_classes, rng, dtype)
    if kind == "mlp":
        return MlpHead(dim, num_classes, rng, dtype)
    if kind == "transformer":
        return TransformerHead(dim, heads, n_patches, num_prefix, num_classes, rng, dtype)
    raise ValueError(f"unknown head kind {kind!r}")


# -- training and evaluation ---------------------------------------------------


@dataclass
class ProbeHyperparams:
    epochs: int = 5
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    max_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 500
    clip_norm: float | None = None


@dataclass
class ProbeSplit:
    """Images with their patch-level labels, ready for probing."""

    images: np.ndarray  # (B, H, W, C)
    local: np.ndarray  # (B, n, C)
    global_: np.ndarray  # (B, C)
    pixel_labels: np.ndarray | None = None  # (B, H, W), enables size bins


def compute_embeddings(backbone: ViTWeights, config: ViTConfig, images: np.ndarray,
                       mode: str = "none", batch_size: int = 64) -> np.ndarray:
    """Frozen-backbone final-layer token sequences as a plain array.

    anonymize embeddings come from a forward pass with zeroed position
    embeddings; other modes use the normal forward pass.
    """
    chunks = []
    with ad.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            seqs = vit_forward(
                backbone, config, images[lo : lo + batch_size],
                capture={config.depth}, zero_pos_emb=(mode == "anonymize"),
            )
            chunks.append(seqs[config.depth].tokens.data)
    return np.concatenate(chunks, axis=0)


def _head_input(tokens: np.ndarray, num_prefix: int, mode: str, depth: int) -> HeadInput:
    seq = EmbeddingSequence(Tensor(tokens), num_prefix, depth)
    return intervene(seq, mode)


def train_probe(backbone: ViTWeights, config: ViTConfig, head, split: ProbeSplit,
                task: str, hp: ProbeHyperparams, rng: np.random.Generator,
                mode: str = "none", embeddings: np.ndarray | None = None):
    """Train an output head on frozen-backbone embeddings with BCE.

    Precomputed embeddings may be passed to share work across heads; the
    backbone itself is never updated. Returns the trained head.
    """
    if task not in ("local", "global"):
        raise ValueError(f"unknown probing task {task!r}")
    if split.images.shape[1] != config.image_size:
        raise ValueError("dataset resolution does not match the backbone")
    if embeddings is None:
        embeddings = compute_embeddings(backbone, config, split.images, mode)
    labels = split.local if task == "local" else split.global_
    count = embeddings.shape[0]
    opt = AdamW(dict(head.iter_params()), beta1=hp.beta1, beta2=hp.beta2,
                weight_decay=hp.weight_decay)
    steps_per_epoch = max(1, -(-count // hp.batch_size))
    sched = LrSchedule(max_lr=hp.max_lr, min_lr=hp.min_lr,
                       warmup_steps=min(hp.warmup_steps, hp.epochs * steps_per_epoch),
                       total_steps=max(1, hp.epochs * steps_per_epoch))
    step = 0
    for _ in range(hp.epochs):
        order = rng.permutation(count)
        for lo in range(0, count, hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            inp = _head_input(embeddings[idx], config.num_prefix_tokens, mode, config.depth)
            logits = head.forward(inp, task)
            loss = _bce_with_logits(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            grads = {k: p.grad for k, p in opt.params.items() if p.grad is not None}
            if hp.clip_norm is not None:
                clip_global_norm(grads, hp.clip_norm)
            opt.step(schedule_lr(sched, step))
            step += 1
    return head


def predict_probs(head, embeddings: np.ndarray, num_prefix: int, mode: str,
                  task: str, batch_size: int = 128) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for lo in range(0, embeddings.shape[0], batch_size):
            inp = _head_input(embeddings[lo : lo + batch_size], num_prefix, mode, 0)
            logits = head.forward(inp, task)
            outs.append(ad._sigmoid(logits.data))
    return np.concatenate(outs, axis=0)


def size_bin_recall(local_probs: np.ndarray, split: ProbeSplit) -> np.ndarray:
    """Recall stratified by object size: for each (image, class) with the
    class present, its size is the fraction of image pixels it covers;
    patch-level hits and misses accumulate into one of NUM_SIZE_BINS equal
    bins. Returns NaN for bins that received no positives."""
    if split.pixel_labels is None:
        return np.full(NUM_SIZE_BINS, np.nan)
    decided = local_probs >= 0.5
    tp = np.zeros(NUM_SIZE_BINS)
    pos = np.zeros(NUM_SIZE_BINS)
    area = split.pixel_labels.shape[1] * split.pixel_labels.shape[2]
    for i in range(split.images.shape[0]):
        present = np.nonzero(split.global_[i])[0]
        counts = np.bincount(split.pixel_labels[i].reshape(-1), minlength=split.local.shape[-1])
        for c in present:
            frac = counts[c] / area
            b = min(int(frac * NUM_SIZE_BINS), NUM_SIZE_BINS - 1)
            labeled = split.local[i, :, c].astype(bool)
            pos[b] += labeled.sum()
            tp[b] += (decided[i, :, c] & labeled).sum()
    out = np.full(NUM_SIZE_BINS, np.nan)
    has = pos > 0
    out[has] = tp[has] / pos[has]
    return out


_KIND_IDS = {"linear": 1, "mlp": 2, "transformer": 3}
_MODE_IDS = {"none": 0, "cls_only": 1, "anonymize": 2}


def _eval_configuration(backbone, config, train_split, eval_split, kind, mode, hp, seed,
                        train_cache, eval_cache):
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_KIND_IDS[kind], _MODE_IDS[mode]))
    )
    num_classes = train_split.local.shape[-1]
    metrics = {}
    probs = {}
    for task in ("local", "global"):
        head = make_probe_head(kind, config.dim, config.heads, config.n_patches,
                               config.num_prefix_tokens, num_classes, rng,
                               dtype=backbone.dtype)
        train_probe(backbone, config, head, train_split, task, hp, rng, mode,
                    embeddings=train_cache[mode])
        probs[task] = predict_probs(head, eval_cache[mode], config.num_prefix_tokens, mode, task)
    local_probs, global_probs = probs["local"], probs["global"]
    return ProbeMetrics(
        local_macro_recall=macro_recall(local_probs.reshape(-1, num_classes),
                                        eval_split.local.reshape(-1, num_classes)),
        global_macro_recall=macro_recall(global_probs, eval_split.global_),
        per_class_recall=per_class_recall(local_probs.reshape(-1, num_classes),
                                          eval_split.local.reshape(-1, num_classes)),
        per_size_bin_recall=size_bin_recall(local_probs, eval_split),
    )


def evaluate_suite(backbone: ViTWeights, config: ViTConfig, train_split: ProbeSplit,
                   eval_split: ProbeSplit, head_kinds=("transformer", "mlp", "linear"),
                   interventions=("none",), hp: ProbeHyperparams | None = None,
                   seed: int = 0, threads: int = 1) -> dict[tuple[str, str], ProbeMetrics]:
    """Train and score every (head kind, intervention) configuration.

    Interventions other than "none" apply to the transformer head, which is
    the head whose reliance on patch embeddings they probe.
    """
    hp = hp or ProbeHyperparams()
    combos = [(kind, "none") for kind in head_kinds]
    combos += [(("transformer"), mode) for mode in interventions
               if mode != "none" and "transformer" in head_kinds]
    modes = {mode for _, mode in combos}
    train_cache = {m: compute_embeddings(backbone, config, train_split.images, m) for m in modes}
    eval_cache = {m: compute_embeddings(backbone, config, eval_split.images, m) for m in modes}

    def run(combo):
        kind, mode = combo
        return _eval_configuration(backbone, config, train_split, eval_split, kind, mode,
                                   hp, seed, train_cache, eval_cache)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, combos))
    else:
        results = [run(c) for c in combos]
    return dict(zip(combos, results))
