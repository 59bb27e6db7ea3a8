"""Pretext mini-batches, the joint motion/speed loss, pretraining and probes."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import warp_sampler as ws
from .dataio import (Clip, FrameStore, PreprocessConfig, clips_to_tensor, corpus_statistics,
                     load_clip, make_still_clip, ten_temporal_crops, temporal_crop_starts)
from .model import (NetworkConfig, TransformationNet, build_model, init_weights,
                    parameter_digest, save_checkpoint)
from .rng import make_rng, torch_generator
from .synthclips import VideoRecord

log = logging.getLogger(__name__)

N_MOTION = 4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    method: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    lr_pretrain: float = 3e-4
    lr_transfer: float = 5e-5
    lr_final_factor: float = 1e-3

    def __post_init__(self):
        if self.method != "adamw":
            raise ValueError("only the decoupled-weight-decay adaptive-moment method ('adamw') is supported")
        for name in ("beta1", "beta2", "lr_pretrain", "lr_transfer", "lr_final_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("betas must be < 1")

    def make(self, params, lr: float) -> torch.optim.AdamW:
        return torch.optim.AdamW(params, lr=lr, betas=(self.beta1, self.beta2),
                                 weight_decay=self.weight_decay)


@dataclass
class PretrainConfig:
    epochs: int = 10
    videos_per_batch: int = 7
    holdout_fraction: float = 0.1
    kappa_cap: int = 3
    eval_repeats: int = 2
    checkpoint_every: int = 0
    cache_videos: int = 1024
    augment: bool = True


def cosine_lr(step: int, total_steps: int, lr0: float, final_factor: float = 1e-3) -> float:
    """Cosine annealing from ``lr0`` at step 0 to ``lr0 * final_factor`` at the last step."""
    lr_min = lr0 * final_factor
    if total_steps <= 1:
        return lr0
    frac = min(step, total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * frac))


# -- batches -----------------------------------------------------------------


@dataclass
class TrainingBatch:
    clips: list[Clip]
    motion_labels: np.ndarray
    speed_labels: np.ndarray
    speed_mask: np.ndarray
    video_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.clips)

    def tensors(self, cfg: PreprocessConfig):
        return (clips_to_tensor(self.clips, cfg), torch.from_numpy(self.motion_labels),
                torch.from_numpy(self.speed_labels), torch.from_numpy(self.speed_mask))


def plan_video(length: int, rng: np.random.Generator, kappa_cap: int = 3) -> list[ws.IndexSequence]:
    """The four transformed index sequences for one video, motion labels 0..3."""
    kmax = min(kappa_cap, ws.max_feasible_kappa(length))
    if kmax < 0:
        raise ws.InfeasibleVideoError(length, ws.CLIP_LEN, "pretext batch")
    kappa = int(rng.integers(0, kmax + 1))
    return [
        ws.sample_speed(length, kappa, rng),
        ws.sample_random(length, rng),
        ws.sample_periodic(length, kappa, rng),
        ws.sample_warp(length, rng),
    ]


def build_batch(videos: list[VideoRecord], rng: np.random.Generator, cfg: PreprocessConfig | None = None,
                store: FrameStore | None = None, augment: bool = True, kappa_cap: int = 3,
                aug_rng: np.random.Generator | None = None) -> TrainingBatch:
    """Four clips (speed, random, periodic, warp) per video; short videos are skipped.

    Index sequences draw from ``rng``; crops and flips from ``aug_rng``
    (defaults to ``rng``).
    """
    cfg = cfg or PreprocessConfig()
    aug_rng = aug_rng or rng
    clips, motion, speed, mask, ids = [], [], [], [], []
    for rec in videos:
        if rec.length < ws.CLIP_LEN:
            log.warning("skipping %s: %d frames < %d", rec.video_id, rec.length, ws.CLIP_LEN)
            continue
        for label, seq in enumerate(plan_video(rec.length, rng, kappa_cap)):
            clips.append(load_clip(rec, seq, augment, aug_rng, cfg, store))
            motion.append(label)
            speed.append(seq.spec.kappa if label == ws.Tau.SPEED else 0)
            mask.append(label == ws.Tau.SPEED)
            ids.append(rec.video_id)
    return TrainingBatch(clips, np.asarray(motion, dtype=np.int64), np.asarray(speed, dtype=np.int64),
                         np.asarray(mask, dtype=bool), ids)


# -- loss --------------------------------------------------------------------


@dataclass
class LossTerms:
    total: torch.Tensor
    motion: torch.Tensor
    speed: torch.Tensor


def joint_loss(motion_logits, speed_logits, motion_labels, speed_labels, speed_mask,
               use_motion: bool = True, use_speed: bool = True) -> LossTerms:
    """Mean motion cross-entropy plus mean speed cross-entropy over speed clips."""
    zero = motion_logits.new_zeros(())
    motion = F.cross_entropy(motion_logits, motion_labels) if use_motion else zero
    if use_speed and bool(speed_mask.any()):
        speed = F.cross_entropy(speed_logits[speed_mask], speed_labels[speed_mask])
    else:
        if use_speed:
            log.warning("batch has no speed clips; speed term is 0")
        speed = zero
    return LossTerms(motion + speed, motion, speed)


# -- pretraining -------------------------------------------------------------


@dataclass
class PretrainResult:
    model: TransformationNet
    preprocess: PreprocessConfig
    history: list[dict]
    checkpoint: Path | None = None
    metrics: Path | None = None


def split_holdout(records, fraction: float, seed: int):
    rng = make_rng(seed, "data", 1)
    order = rng.permutation(len(records))
    n_hold = int(round(fraction * len(records)))
    if len(records) >= 2:
        n_hold = max(n_hold, 1) if fraction > 0 else 0
        n_hold = min(n_hold, len(records) - 1)
    else:
        n_hold = 0
    hold = sorted(order[:n_hold].tolist())
    train = sorted(order[n_hold:].tolist())
    return [records[i] for i in train], [records[i] for i in hold]


@torch.no_grad()
def pretext_accuracy(model, batches, cfg: PreprocessConfig) -> tuple[float, float]:
    model.eval()
    hits_m = n_m = hits_s = n_s = 0
    for batch in batches:
        x, motion, speed, mask = batch.tensors(cfg)
        out = model(x)
        hits_m += int((out.motion_logits.argmax(1) == motion).sum())
        n_m += len(motion)
        if mask.any():
            hits_s += int((out.speed_logits[mask].argmax(1) == speed[mask]).sum())
            n_s += int(mask.sum())
    return hits_m / max(n_m, 1), hits_s / max(n_s, 1)


def _rng_snapshot(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {k: str(v) for k, v in state["state"].items()},
            "has_uint32": int(state["has_uint32"]), "uinteger": int(state["uinteger"])}


def pretrain(train_records: list[VideoRecord], net_cfg: NetworkConfig | None = None,
             opt_cfg: OptimizerConfig | None = None, pre_cfg: PreprocessConfig | None = None,
             train_cfg: PretrainConfig | None = None, seed: int = 0, out_dir=None,
             store: FrameStore | None = None, normalize: bool = True) -> PretrainResult:
    """Optimise the joint loss; log per-step losses and per-epoch held-out accuracy.

    When ``out_dir`` is given, writes ``metrics.jsonl`` and ``checkpoint.pt``
    (plus ``checkpoint_epochNNN.pt`` every ``checkpoint_every`` epochs).
    """
    net_cfg = net_cfg or NetworkConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    pre_cfg = pre_cfg or PreprocessConfig(crop=net_cfg.input_size)
    train_cfg = train_cfg or PretrainConfig()
    if pre_cfg.crop != net_cfg.input_size:
        raise ValueError(f"crop {pre_cfg.crop} does not match network input {net_cfg.input_size}")
    store = store or FrameStore(train_cfg.cache_videos)

    usable = [r for r in train_records if r.length >= ws.CLIP_LEN]
    for r in train_records:
        if r.length < ws.CLIP_LEN:
            log.warning("skipping %s: too short (%d frames)", r.video_id, r.length)
    train, hold = split_holdout(usable, train_cfg.holdout_fraction, seed)
    if not train:
        raise ValueError("no usable training videos")

    if normalize:
        mean, std = corpus_statistics(train, store, rng=make_rng(seed, "data", 2))
        pre_cfg = PreprocessConfig(**{**asdict(pre_cfg), "mean": mean[:net_cfg.in_channels],
                                      "std": std[:net_cfg.in_channels]})

    model = build_model(net_cfg, seed)
    optim = opt_cfg.make(model.parameters(), opt_cfg.lr_pretrain)

    eval_rng = make_rng(seed, "eval")
    eval_batches = []
    for _ in range(train_cfg.eval_repeats):
        for i in range(0, len(hold), train_cfg.videos_per_batch):
            eval_batches.append(build_batch(hold[i:i + train_cfg.videos_per_batch], eval_rng, pre_cfg,
                                            store, augment=False, kappa_cap=train_cfg.kappa_cap))

    sampler = make_rng(seed, "sampler")
    aug = make_rng(seed, "augmentation")
    per_epoch = math.ceil(len(train) / train_cfg.videos_per_batch)
    total = per_epoch * train_cfg.epochs
    history: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")

    def emit(rec):
        history.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec) + "\n")
            metrics_fh.flush()

    def checkpoint(path, step):
        save_checkpoint(path, model, step=step, preprocess=asdict(pre_cfg),
                        rng_state={"sampler": _rng_snapshot(sampler), "augmentation": _rng_snapshot(aug)},
                        extra={"seed": seed, "optimizer": asdict(opt_cfg), "pretrain": asdict(train_cfg)})

    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            order = sampler.permutation(len(train))
            hits = seen = 0
            for b in range(per_epoch):
                group = [train[i] for i in order[b * train_cfg.videos_per_batch:(b + 1) * train_cfg.videos_per_batch]]
                batch = build_batch(group, sampler, pre_cfg, store, train_cfg.augment,
                                    train_cfg.kappa_cap, aug_rng=aug)
                x, motion, speed, mask = batch.tensors(pre_cfg)
                lr = cosine_lr(step, total, opt_cfg.lr_pretrain, opt_cfg.lr_final_factor)
                for g in optim.param_groups:
                    g["lr"] = lr
                model.train()
                out_ = model(x)
                terms = joint_loss(out_.motion_logits, out_.speed_logits, motion, speed, mask)
                if not torch.isfinite(terms.total):
                    raise TrainingDiverged(f"loss became {terms.total.item()} at step {step}")
                optim.zero_grad(set_to_none=True)
                terms.total.backward()
                optim.step()
                hits += int((out_.motion_logits.argmax(1) == motion).sum())
                seen += len(motion)
                emit({"step": step, "loss_total": terms.total.item(), "loss_motion": terms.motion.item(),
                      "loss_speed": terms.speed.item(), "lr": lr})
                step += 1
            acc_m, acc_s = pretext_accuracy(model, eval_batches, pre_cfg) if eval_batches else (float("nan"),) * 2
            emit({"epoch": epoch, "acc_motion": acc_m, "acc_speed": acc_s})
            history[-1] = {**history[-1], "train_acc_motion": hits / max(seen, 1)}
            log.info("epoch %d: held-out motion %.3f speed %.3f", epoch, acc_m, acc_s)
            if out is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                checkpoint(out / f"checkpoint_epoch{epoch + 1:03d}.pt", step)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.pt"
        checkpoint(ckpt, step)
    return PretrainResult(model, pre_cfg, history, ckpt, out / "metrics.jsonl" if out else None)


# -- probes ------------------------------------------------------------------


class ProbeHead(nn.Module):
    """Three fully-connected layers over flattened conv5 features."""

    def __init__(self, in_features: int, n_classes: int, hidden: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, n_classes),
        )

    def forward(self, x):
        return self.net(torch.flatten(x, 1))


@dataclass
class ProbeConfig:
    epochs: int = 30
    batch_size: int = 32
    hidden: int = 512
    lr: float | None = None
    features_per_video: int = 4
    kappa: int = 2
    test_crops: int = 10


@dataclass
class ProbeResult:
    accuracy: float
    head: ProbeHead
    train_accuracy: float
    conv_digest_before: str
    conv_digest_after: str
    predictions: list[int] = field(default_factory=list)
    model: TransformationNet | None = None


def train_classifier(features: torch.Tensor, labels: torch.Tensor, n_classes: int, cfg: ProbeConfig,
                     opt_cfg: OptimizerConfig, seed: int, stream: str = "probe") -> ProbeHead:
    """Fit a fresh :class:`ProbeHead` on fixed features with AdamW + cosine decay."""
    gen = torch_generator(seed, stream)
    head = init_weights(ProbeHead(features[0].numel(), n_classes, cfg.hidden), seed)
    lr0 = cfg.lr if cfg.lr is not None else opt_cfg.lr_transfer
    optim = opt_cfg.make(head.parameters(), lr0)
    n = features.shape[0]
    bs = min(cfg.batch_size, n)
    per_epoch = max(n // bs, 1)
    total = per_epoch * cfg.epochs
    step = 0
    head.train()
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for b in range(per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            if idx.numel() < 2:
                continue
            for g in optim.param_groups:
                g["lr"] = cosine_lr(step, total, lr0, opt_cfg.lr_final_factor)
            loss = F.cross_entropy(head(features[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged("probe loss is not finite")
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            step += 1
    head.eval()
    return head


@torch.no_grad()
def predict_classifier(head: ProbeHead, features: torch.Tensor) -> torch.Tensor:
    head.eval()
    return F.softmax(head(features), dim=1)


def _conv5(model, clips, pre_cfg, batch_size=16) -> torch.Tensor:
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            outs.append(model.trunk(clips_to_tensor(clips[i:i + batch_size], pre_cfg)))
    return torch.cat(outs)


def _train_clip(rec, mode, kappa, rng, pre_cfg, store, augment=True) -> Clip:
    if mode == "still":
        return make_still_clip(rec, int(rng.integers(0, rec.length)), augment, rng, pre_cfg, store)
    return load_clip(rec, ws.sample_speed(rec.length, kappa, rng), augment, rng, pre_cfg, store)


def _test_clips(rec, mode, kappa, pre_cfg, store, n) -> list[Clip]:
    if mode == "still":
        half = (15 * 2**kappa) // 2
        return [make_still_clip(rec, s + half, False, None, pre_cfg, store)
                for s in temporal_crop_starts(rec.length, kappa, n)]
    return ten_temporal_crops(rec, kappa, pre_cfg, store, n)


def _usable(records, kappa):
    keep = [r for r in records if ws.max_feasible_kappa(r.length) >= kappa]
    if len(keep) < len(records):
        log.warning("skipping %d videos too short for speed %d", len(records) - len(keep), kappa)
    return keep


def probe_train(model: TransformationNet, train_records, test_records, n_classes: int,
                freeze: str = "conv", pre_cfg: PreprocessConfig | None = None,
                opt_cfg: OptimizerConfig | None = None, cfg: ProbeConfig | None = None,
                seed: int = 0, clip_mode: str = "speed", store: FrameStore | None = None) -> ProbeResult:
    """Action probe on conv5 features.

    ``freeze='conv'`` trains only a fresh 3-layer classifier on frozen features;
    ``freeze='none'`` fine-tunes the trunk together with it. Test videos are
    scored by the class probabilities averaged over their center-cropped
    temporal crops.
    """
    if freeze not in ("conv", "none"):
        raise ValueError("freeze must be 'conv' or 'none'")
    if clip_mode not in ("speed", "still"):
        raise ValueError("clip_mode must be 'speed' or 'still'")
    pre_cfg = pre_cfg or PreprocessConfig(crop=model.config.input_size)
    opt_cfg = opt_cfg or OptimizerConfig()
    cfg = cfg or ProbeConfig()
    store = store or FrameStore(1024)
    labels_seen = {r.label for r in train_records} | {r.label for r in test_records}
    if max(labels_seen) >= n_classes or min(labels_seen) < 0:
        raise ValueError(f"labels {sorted(labels_seen)} do not fit {n_classes} classes")
    train_records = _usable(train_records, cfg.kappa)
    test_records = _usable(test_records, cfg.kappa)
    digest_before = parameter_digest(model.conv_parameters())
    rng = make_rng(seed, "probe", 0 if clip_mode == "speed" else 1)

    if freeze == "conv":
        clips, labels = [], []
        for rec in train_records:
            for _ in range(cfg.features_per_video):
                clips.append(_train_clip(rec, clip_mode, cfg.kappa, rng, pre_cfg, store))
                labels.append(rec.label)
        feats = _conv5(model, clips, pre_cfg)
        y = torch.tensor(labels)
        head = train_classifier(feats, y, n_classes, cfg, opt_cfg, seed)
        train_acc = float((predict_classifier(head, feats).argmax(1) == y).float().mean())
        score = lambda clips_: predict_classifier(head, _conv5(model, clips_, pre_cfg))
    else:
        model = copy.deepcopy(model)
        head, train_acc = _finetune(model, train_records, n_classes, clip_mode, pre_cfg, opt_cfg, cfg,
                                    seed, rng, store)

        def score(clips_):
            model.eval()
            with torch.no_grad():
                return predict_classifier(head, model.trunk(clips_to_tensor(clips_, pre_cfg)))

    preds, hits = [], 0
    for rec in test_records:
        probs = score(_test_clips(rec, clip_mode, cfg.kappa, pre_cfg, store, cfg.test_crops)).mean(0)
        pred = int(probs.argmax())
        preds.append(pred)
        hits += pred == rec.label
    acc = hits / max(len(test_records), 1)
    return ProbeResult(acc, head, train_acc, digest_before, parameter_digest(model.conv_parameters()),
                       preds, model)


def _finetune(model, records, n_classes, clip_mode, pre_cfg, opt_cfg, cfg, seed, rng, store):
    head = init_weights(ProbeHead(int(np.prod(model.config.conv5_shape())), n_classes, cfg.hidden), seed)
    params = list(model.conv_parameters()) + list(head.parameters())
    lr0 = cfg.lr if cfg.lr is not None else opt_cfg.lr_transfer
    optim = opt_cfg.make(params, lr0)
    bs = min(cfg.batch_size, len(records))
    per_epoch = max(len(records) // bs, 1)
    total = per_epoch * cfg.epochs
    step = hits = seen = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(records))
        for b in range(per_epoch):
            group = [records[i] for i in order[b * bs:(b + 1) * bs]]
            if len(group) < 2:
                continue
            x = clips_to_tensor([_train_clip(r, clip_mode, cfg.kappa, rng, pre_cfg, store) for r in group], pre_cfg)
            y = torch.tensor([r.label for r in group])
            for g in optim.param_groups:
                g["lr"] = cosine_lr(step, total, lr0, opt_cfg.lr_final_factor)
            model.train()
            head.train()
            logits = head(model.trunk(x))
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged("fine-tuning loss is not finite")
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            hits += int((logits.argmax(1) == y).sum())
            seen += len(y)
            step += 1
    head.eval()
    model.eval()
    return head, hits / max(seen, 1)
