"""Config-driven experiment runner.

Executes the configured stage chain (data generation, teacher pretraining,
optional masked-reconstruction precursor, alignment, baselines, probing),
emitting machine-readable metrics after every epoch and a resumable
checkpoint that includes optimizer and RNG state, so an interrupted run
continues bitwise-identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, TrainStageConfig, config_fingerprint
from .maskembed import (
    CropPoolHead,
    MaskEmbedConfig,
    additive_fit,
    clean_reconstruction_error,
    clipself_step,
    identity_score,
    maskembed_step,
    mim_step,
    sample_mask_bits,
    teacher_set_function,
)
from .masking import mask_image, sample_uniform_mask
from .metrics import MetricRow, emit_metrics
from .optim import AdamW, LrSchedule, clip_global_norm, schedule_lr
from .probing import ProbeHyperparams, ProbeSplit, evaluate_suite
from .synthdata import SynthDataset, channel_means, gen_dataset, load_dataset, save_dataset
from .vit import DecoderWeights, ViTWeights, vit_forward

STAGE_IDS = {
    "gen_data": 0,
    "pretrain_teacher": 1,
    "mim": 2,
    "maskembed": 3,
    "additive_baseline": 4,
    "clipself_baseline": 5,
    "probe": 6,
}

SMOKE_BATCH = 8


class RunError(RuntimeError):
    pass


class _Halt(Exception):
    pass


@dataclass
class LinearMap:
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


class RunContext:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path, halt_after=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.fingerprint = config_fingerprint(cfg)
        self.vit_config = cfg.model.vit_config(cfg.data)
        self.metrics: list[MetricRow] = []
        self.models: dict[str, object] = {}
        self.rngs: dict[str, np.random.Generator] = {}
        self.halt_after = halt_after
        self.pending_opt: dict | None = None
        self.resume_stage: str | None = None
        self.resume_epochs_done = 0
        self.resume_stage_complete = False
        self.align: SynthDataset | None = None
        self.probe_train: SynthDataset | None = None
        self.probe_eval: SynthDataset | None = None
        self.channel_mean: np.ndarray | None = None

    # -- deterministic RNG streams ------------------------------------

    def rng(self, stage: str) -> np.random.Generator:
        if stage not in self.rngs:
            self.rngs[stage] = np.random.default_rng(
                np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=(STAGE_IDS[stage],))
            )
        return self.rngs[stage]

    # -- metrics --------------------------------------------------------

    def add_metric(self, stage: str, epoch: int, step: int, name: str, value: float):
        self.metrics.append(
            MetricRow(self.cfg.run_id, stage, epoch, step, name, float(value), self.cfg.seed)
        )

    def emit(self):
        emit_metrics(self.metrics, self.out_dir / "metrics.csv", self.out_dir / "metrics.json")

    # -- checkpointing ----------------------------------------------------

    def _snapshot_tensors(self, opt: AdamW | None) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        for mname, model in self.models.items():
            for pname, t in model.iter_params():
                tensors[f"model.{mname}.{pname}"] = t.data
        if opt is not None:
            for pname, arr in opt.state.m.items():
                tensors[f"opt.m.{pname}"] = arr
            for pname, arr in opt.state.v.items():
                tensors[f"opt.v.{pname}"] = arr
        return tensors

    def write_checkpoint(self, stage: str, epochs_done: int, stage_complete: bool,
                         opt: AdamW | None):
        meta = {
            "stage": stage,
            "epochs_done": epochs_done,
            "stage_complete": stage_complete,
            "run_id": self.cfg.run_id,
            "seed": self.cfg.seed,
            "rng": {name: g.bit_generator.state for name, g in self.rngs.items()},
            "metrics": [
                [r.run_id, r.stage, r.epoch, r.step, r.metric_name, r.value, r.seed]
                for r in self.metrics
            ],
            "opt": None if opt is None else {"stage": stage, "step_count": opt.state.step_count},
            "models": sorted(self.models),
        }
        save_checkpoint(self.out_dir / "checkpoint.laln", self.fingerprint, meta,
                        self._snapshot_tensors(opt))
        if stage_complete:
            save_checkpoint(self.out_dir / f"ckpt_{stage}.laln", self.fingerprint, meta,
                            self._snapshot_tensors(None))

    def after_epoch(self, stage: str, epochs_done: int, stage_complete: bool, opt: AdamW | None):
        self.emit()
        self.write_checkpoint(stage, epochs_done, stage_complete, opt)
        if self.halt_after == (stage, epochs_done) and not stage_complete:
            raise _Halt()

    # -- model construction / restore ---------------------------------------

    def new_vit(self, rng=None) -> ViTWeights:
        return ViTWeights.init(self.vit_config, rng or np.random.default_rng(0))

    def new_decoder(self, rng=None) -> DecoderWeights:
        mcfg = self.cfg.maskembed
        return DecoderWeights.init(
            self.vit_config.dim, self.vit_config.dim, self.vit_config.seq_len,
            self.vit_config.heads, rng or np.random.default_rng(0),
            layerscale_init=mcfg.layerscale_init, mlp_ratio=mcfg.decoder_mlp_ratio,
        )

    def _make_skeleton(self, name: str):
        if name in ("teacher", "encoder", "clipself_encoder", "mim_student"):
            return self.new_vit()
        if name == "decoder":
            return self.new_decoder()
        if name == "teacher_head":
            return LinearMap.init(self.vit_config.dim, self.cfg.data.num_classes,
                                  np.random.default_rng(0))
        if name == "clipself_head":
            return CropPoolHead.init(self.vit_config.dim, self.vit_config.dim,
                                     np.random.default_rng(0))
        raise RunError(f"cannot rebuild unknown model {name!r} from checkpoint")

    def restore(self, ckpt, allow_fingerprint_mismatch: bool):
        if ckpt.fingerprint != self.fingerprint and not allow_fingerprint_mismatch:
            raise RunError(
                "checkpoint fingerprint does not match this config; "
                "refusing to resume (pass --force to override)"
            )
        meta = ckpt.meta
        for name in meta["models"]:
            model = self._make_skeleton(name)
            for pname, t in model.iter_params():
                key = f"model.{name}.{pname}"
                if key not in ckpt.tensors:
                    raise RunError(f"checkpoint is missing tensor {key!r}")
                arr = ckpt.tensors[key]
                if arr.shape != t.data.shape:
                    raise RunError(f"checkpoint tensor {key!r} has shape {arr.shape}, "
                                   f"expected {t.data.shape}")
                t.data = arr.astype(t.data.dtype, copy=True)
            self.models[name] = model
        for sname, state in meta["rng"].items():
            g = np.random.default_rng(0)
            g.bit_generator.state = state
            self.rngs[sname] = g
        self.metrics = [MetricRow(r[0], r[1], r[2], r[3], r[4], r[5], r[6])
                        for r in meta["metrics"]]
        if meta["opt"] is not None:
            opt_state = {"stage": meta["opt"]["stage"],
                         "step_count": meta["opt"]["step_count"],
                         "m": {}, "v": {}}
            for key, arr in ckpt.tensors.items():
                if key.startswith("opt.m."):
                    opt_state["m"][key[len("opt.m."):]] = arr.copy()
                elif key.startswith("opt.v."):
                    opt_state["v"][key[len("opt.v."):]] = arr.copy()
            self.pending_opt = opt_state
        self.resume_stage = meta["stage"]
        self.resume_epochs_done = meta["epochs_done"]
        self.resume_stage_complete = meta["stage_complete"]

    def maybe_restore_opt(self, opt: AdamW, stage: str):
        if self.pending_opt is not None and self.pending_opt["stage"] == stage:
            opt.state.step_count = self.pending_opt["step_count"]
            opt.state.m = dict(self.pending_opt["m"])
            opt.state.v = dict(self.pending_opt["v"])
            self.pending_opt = None


# -- dataset preparation ----------------------------------------------------


def _prepare_data(ctx: RunContext):
    cfg = ctx.cfg
    spec = cfg.data.synth_spec()
    path = Path(cfg.data.path) if cfg.data.path else ctx.out_dir / "dataset.lads"
    if path.exists():
        dataset = load_dataset(path)
        if dataset.spec != spec:
            raise RunError(f"dataset at {path} was generated from a different spec")
        if len(dataset) < cfg.data.total_count:
            raise RunError(f"dataset at {path} holds {len(dataset)} samples; "
                           f"the configured splits need {cfg.data.total_count}")
    elif "gen_data" in cfg.stages:
        seed = int(np.random.SeedSequence(entropy=cfg.seed,
                                          spawn_key=(STAGE_IDS["gen_data"],)).generate_state(1)[0])
        dataset = gen_dataset(spec, cfg.data.total_count, seed)
        save_dataset(dataset, path)
    else:
        raise RunError(f"dataset {path} does not exist and no gen_data stage precedes use")
    a, t = cfg.data.align_count, cfg.data.probe_train_count
    e = cfg.data.probe_eval_count
    ctx.align = dataset.slice(0, a)
    ctx.probe_train = dataset.slice(a, a + t)
    ctx.probe_eval = dataset.slice(a + t, a + t + e)
    ctx.channel_mean = channel_means(ctx.align).astype(np.float32)


def to_probe_split(ds: SynthDataset, with_pixels: bool = False) -> ProbeSplit:
    return ProbeSplit(
        images=ds.images(),
        local=ds.local_labels(),
        global_=ds.global_labels(),
        pixel_labels=ds.pixel_label_maps() if with_pixels else None,
    )


# -- shared training loop -----------------------------------------------------


def _train_loop(ctx: RunContext, stage: str, cfg: TrainStageConfig, opt: AdamW,
                count: int, start_epoch: int, step_fn, epoch_metrics_fn=None,
                finalize_fn=None):
    steps_per_epoch = max(1, -(-count // cfg.batch_size))
    sched = LrSchedule(max_lr=cfg.max_lr, min_lr=cfg.min_lr,
                       warmup_steps=min(cfg.warmup_steps, cfg.epochs * steps_per_epoch),
                       total_steps=max(1, cfg.epochs * steps_per_epoch))
    rng = ctx.rng(stage)
    global_step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(count)
        losses = []
        lr = cfg.max_lr
        for lo in range(0, count, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            lr = schedule_lr(sched, min(global_step, sched.total_steps))
            losses.append(step_fn(idx, lr, rng))
            global_step += 1
        ctx.add_metric(stage, epoch, global_step, "loss", float(np.mean(losses)))
        ctx.add_metric(stage, epoch, global_step, "lr", lr)
        if epoch_metrics_fn is not None:
            for name, value in epoch_metrics_fn():
                ctx.add_metric(stage, epoch, global_step, name, value)
        complete = epoch + 1 == cfg.epochs
        if complete and finalize_fn is not None:
            finalize_fn()
        ctx.after_epoch(stage, epoch + 1, complete, opt)


# -- stages ---------------------------------------------------------------------


def _bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    t = ad.as_tensor(targets.astype(logits.dtype, copy=False), like=logits)
    return (t * ad.softplus(-logits) + (1.0 - t) * ad.softplus(logits)).mean()


def _stage_pretrain_teacher(ctx: RunContext, start_epoch: int):
    cfg = ctx.cfg.teacher
    rng = ctx.rng("pretrain_teacher")
    if start_epoch == 0:
        ctx.models["teacher"] = ViTWeights.init(ctx.vit_config, rng)
        ctx.models["teacher_head"] = LinearMap.init(ctx.vit_config.dim,
                                                    ctx.cfg.data.num_classes, rng)
    teacher: ViTWeights = ctx.models["teacher"]
    head: LinearMap = ctx.models["teacher_head"]
    params = {f"teacher.{k}": v for k, v in teacher.iter_params()}
    params |= {f"teacher_head.{k}": v for k, v in head.iter_params()}
    opt = AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    ctx.maybe_restore_opt(opt, "pretrain_teacher")

    images = ctx.align.images()
    labels = ctx.align.global_labels()
    vcfg = ctx.vit_config

    def step(idx, lr, rng):
        batch = images[idx]
        if cfg.mask_augment_prob > 0:
            bits = np.ones((len(idx), vcfg.n_patches), dtype=np.uint8)
            for i in range(len(idx)):
                if rng.random() < cfg.mask_augment_prob:
                    bits[i] = sample_uniform_mask(vcfg.n_patches, rng).bits
            batch = mask_image(batch, bits, ctx.channel_mean, vcfg)
        seq = vit_forward(teacher, vcfg, batch, capture={vcfg.depth})[vcfg.depth]
        logits = seq.tokens[:, 0, :] @ head.w + head.b
        loss = _bce(logits, labels[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise RunError(f"non-finite teacher loss {value}")
        opt.zero_grad()
        loss.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        if cfg.clip is not None:
            clip_global_norm(grads, cfg.clip)
        opt.step(lr)
        return value

    _train_loop(ctx, "pretrain_teacher", cfg, opt, len(ctx.align), start_epoch, step)


def _stage_mim(ctx: RunContext, start_epoch: int):
    cfg = ctx.cfg.mim
    if "teacher" not in ctx.models:
        raise RunError("mim stage needs a teacher; add pretrain_teacher first")
    rng = ctx.rng("mim")
    if start_epoch == 0:
        ctx.models["mim_student"] = ctx.models["teacher"].copy()
    student: ViTWeights = ctx.models["mim_student"]
    frozen: ViTWeights = ctx.models["teacher"]
    params = {f"mim_student.{k}": v for k, v in student.iter_params()}
    opt = AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    ctx.maybe_restore_opt(opt, "mim")
    images = ctx.align.images()
    vcfg = ctx.vit_config
    me_cfg = MaskEmbedConfig(spec=ctx.cfg.maskembed.reconstruction_spec(),
                             mask_sampler=cfg.sampler,
                             sampler_param=cfg.sampler_param or None)

    def step(idx, lr, rng):
        bits = sample_mask_bits(me_cfg, len(idx), vcfg.grid, rng)
        return mim_step(student, frozen, images[idx], bits, opt, lr, ctx.channel_mean)

    def finalize():
        # The refined model becomes the teacher for any later alignment stage.
        ctx.models["teacher"] = student
        del ctx.models["mim_student"]

    _train_loop(ctx, "mim", cfg, opt, len(ctx.align), start_epoch, step, finalize_fn=finalize)


def _stage_maskembed(ctx: RunContext, start_epoch: int):
    cfg = ctx.cfg.maskembed
    if "teacher" not in ctx.models:
        raise RunError("maskembed stage needs a teacher; add pretrain_teacher first")
    rng = ctx.rng("maskembed")
    if start_epoch == 0:
        ctx.models["encoder"] = ctx.models["teacher"].copy()
        ctx.models["decoder"] = ctx.new_decoder(rng)
    encoder: ViTWeights = ctx.models["encoder"]
    decoder: DecoderWeights = ctx.models["decoder"]
    teacher: ViTWeights = ctx.models["teacher"]
    params = {f"encoder.{k}": v for k, v in encoder.iter_params()}
    params |= {f"decoder.{k}": v for k, v in decoder.iter_params()}
    opt = AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    ctx.maybe_restore_opt(opt, "maskembed")

    me_cfg = cfg.maskembed_config()
    fill = ctx.channel_mean if me_cfg.mask_fill == "dataset_mean" else 0.0
    images = ctx.align.images()
    smoke = images[:SMOKE_BATCH]

    def step(idx, lr, rng):
        return maskembed_step(encoder, decoder, teacher, images[idx], me_cfg, rng, opt, lr, fill)

    def epoch_metrics():
        return [
            ("identity_score", identity_score(encoder, smoke)),
            ("clean_recon_error", clean_reconstruction_error(encoder, decoder, teacher,
                                                             smoke, me_cfg.spec, fill)),
        ]

    _train_loop(ctx, "maskembed", cfg, opt, len(ctx.align), start_epoch, step, epoch_metrics)


def _stage_clipself(ctx: RunContext, start_epoch: int):
    cfg = ctx.cfg.clipself
    if "teacher" not in ctx.models:
        raise RunError("clipself_baseline stage needs a teacher; add pretrain_teacher first")
    rng = ctx.rng("clipself_baseline")
    if start_epoch == 0:
        ctx.models["clipself_encoder"] = ctx.models["teacher"].copy()
        ctx.models["clipself_head"] = CropPoolHead.init(ctx.vit_config.dim,
                                                        ctx.vit_config.dim, rng)
    encoder: ViTWeights = ctx.models["clipself_encoder"]
    head: CropPoolHead = ctx.models["clipself_head"]
    teacher: ViTWeights = ctx.models["teacher"]
    params = {f"clipself_encoder.{k}": v for k, v in encoder.iter_params()}
    params |= {f"clipself_head.{k}": v for k, v in head.iter_params()}
    opt = AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    ctx.maybe_restore_opt(opt, "clipself_baseline")
    images = ctx.align.images()

    def step(idx, lr, rng):
        return clipself_step(encoder, teacher, images[idx], rng, opt, head, lr)

    _train_loop(ctx, "clipself_baseline", cfg, opt, len(ctx.align), start_epoch, step)


def _stage_additive(ctx: RunContext):
    cfg = ctx.cfg.additive
    if "teacher" not in ctx.models:
        raise RunError("additive_baseline stage needs a teacher; add pretrain_teacher first")
    teacher: ViTWeights = ctx.models["teacher"]
    rng = ctx.rng("additive_baseline")
    images = ctx.probe_train.images()[: cfg.images]
    residuals = []
    for i, image in enumerate(images):
        model = additive_fit(teacher, image, exhaustive=False, n_steps=cfg.steps,
                             rng=rng, fill=ctx.channel_mean)
        fn = teacher_set_function(teacher, image, ctx.channel_mean)
        errs = []
        for _ in range(32):
            bits = sample_uniform_mask(teacher.config.n_patches, rng).bits
            errs.append(float(((model.predict(bits) - fn(bits)) ** 2).mean()))
        residual = float(np.mean(errs))
        residuals.append(residual)
        ctx.add_metric("additive_baseline", 0, i, f"image{i}.residual", residual)
    ctx.add_metric("additive_baseline", 0, len(images), "mean_residual", float(np.mean(residuals)))
    ctx.after_epoch("additive_baseline", 1, True, None)


def _stage_probe(ctx: RunContext):
    cfg = ctx.cfg.probe
    train_split = to_probe_split(ctx.probe_train)
    eval_split = to_probe_split(ctx.probe_eval, with_pixels=True)
    hp = ProbeHyperparams(epochs=cfg.epochs, batch_size=cfg.batch_size,
                          weight_decay=cfg.weight_decay, max_lr=cfg.max_lr,
                          min_lr=cfg.min_lr, warmup_steps=cfg.warmup_steps)
    backbones = {"teacher": "teacher", "encoder": "encoder", "clipself": "clipself_encoder"}
    for target in cfg.targets:
        key = backbones.get(target)
        if key is None:
            raise RunError(f"unknown probe target {target!r}")
        if key not in ctx.models:
            raise RunError(f"probe target {target!r} needs model {key!r}; "
                           "add the stage that produces it")
        results = evaluate_suite(
            ctx.models[key], ctx.vit_config, train_split, eval_split,
            head_kinds=tuple(cfg.heads), interventions=tuple(cfg.interventions),
            hp=hp, seed=ctx.cfg.seed, threads=ctx.cfg.threads,
        )
        for (kind, mode), m in sorted(results.items()):
            base = f"{target}.{kind}.{mode}"
            ctx.add_metric("probe", 0, 0, f"{base}.local_macro_recall", m.local_macro_recall)
            ctx.add_metric("probe", 0, 0, f"{base}.global_macro_recall", m.global_macro_recall)
            for b, r in enumerate(m.per_size_bin_recall):
                if np.isfinite(r):
                    ctx.add_metric("probe", 0, 0, f"{base}.size_bin_recall.{b}", float(r))
    ctx.after_epoch("probe", 1, True, None)


# -- runner -----------------------------------------------------------------------


def run(cfg: ExperimentConfig, out_dir, resume_from=None,
        allow_fingerprint_mismatch: bool = False, halt_after=None) -> int:
    """Execute the configured stages; returns 0 on success.

    halt_after=(stage, epochs_done) stops right after that epoch's
    checkpoint is written, simulating an interruption; resume_from picks a
    run back up from a checkpoint written by the same config.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, out_dir, halt_after=halt_after)
    _prepare_data(ctx)
    if "gen_data" in cfg.stages and not ctx.metrics:
        ctx.add_metric("gen_data", 0, 0, "samples", cfg.data.total_count)
    if resume_from is not None:
        ctx.restore(load_checkpoint(resume_from), allow_fingerprint_mismatch)

    stage_list = list(cfg.stages)
    start_index = 0
    start_epoch = 0
    if ctx.resume_stage is not None:
        if ctx.resume_stage not in stage_list:
            raise RunError(f"checkpoint stage {ctx.resume_stage!r} is not in the stage list")
        start_index = stage_list.index(ctx.resume_stage)
        if ctx.resume_stage_complete:
            start_index += 1
        else:
            start_epoch = ctx.resume_epochs_done

    try:
        for si in range(start_index, len(stage_list)):
            stage = stage_list[si]
            epoch0 = start_epoch if si == start_index else 0
            if stage == "gen_data":
                pass  # handled during data preparation
            elif stage == "pretrain_teacher":
                _stage_pretrain_teacher(ctx, epoch0)
            elif stage == "mim":
                _stage_mim(ctx, epoch0)
            elif stage == "maskembed":
                _stage_maskembed(ctx, epoch0)
            elif stage == "clipself_baseline":
                _stage_clipself(ctx, epoch0)
            elif stage == "additive_baseline":
                _stage_additive(ctx)
            elif stage == "probe":
                _stage_probe(ctx)
    except _Halt:
        ctx.emit()
        return 0
    ctx.emit()
    return 0
