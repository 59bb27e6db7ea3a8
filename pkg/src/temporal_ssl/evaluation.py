"""Downstream protocols: synchronisation, before/after ordering, still-video
control, and nearest-neighbour retrieval over averaged temporal crops."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import warp_sampler as ws
from .dataio import (Clip, FrameStore, PreprocessConfig, clips_to_tensor, load_frames_clip,
                     ten_temporal_crops)
from .model import TransformationNet, extract_features
from .rng import make_rng
from .synthclips import VideoRecord
from .trainer import (OptimizerConfig, ProbeConfig, predict_classifier, probe_train,
                      train_classifier)

log = logging.getLogger(__name__)

MAX_OFFSET = 6
N_OFFSETS = 2 * MAX_OFFSET + 1
DEFAULT_KS = (1, 5, 10, 20, 50)
INDEX_MAGIC = b"TSIX"
INDEX_VERSION = 1

FeatureFn = Callable[[list[Clip]], torch.Tensor]


def conv5_features(model: TransformationNet, pre_cfg: PreprocessConfig, batch_size: int = 16) -> FeatureFn:
    def fn(clips):
        return extract_features(model, clips_to_tensor(clips, pre_cfg), "conv5", batch_size).flatten(1)
    return fn


def start_index_features(clips: list[Clip]) -> torch.Tensor:
    """Oracle feature: the clip's first source frame index."""
    return torch.tensor([[c.source_indices[0] / 8.0] for c in clips], dtype=torch.float32)


# -- synchronisation ---------------------------------------------------------


@dataclass
class SyncExample:
    clip_a: Clip
    clip_b: Clip
    offset: int

    @property
    def label(self) -> int:
        return self.offset + MAX_OFFSET


def sync_example(rec: VideoRecord, rng: np.random.Generator, pre_cfg: PreprocessConfig,
                 store: FrameStore | None = None, offset: int | None = None) -> SyncExample:
    """Two consecutive-frame clips from one video, ``clip_b`` delayed by ``offset``."""
    if rec.length < ws.CLIP_LEN + MAX_OFFSET:
        raise ws.InfeasibleVideoError(rec.length, ws.CLIP_LEN + MAX_OFFSET, "sync example")
    if offset is None:
        offset = int(rng.integers(-MAX_OFFSET, MAX_OFFSET + 1))
    lo = max(0, -offset)
    hi = rec.length - ws.CLIP_LEN - max(0, offset)
    a = int(rng.integers(lo, hi + 1))
    clip_a = load_frames_clip(rec, range(a, a + ws.CLIP_LEN), cfg=pre_cfg, store=store)
    clip_b = load_frames_clip(rec, range(a + offset, a + offset + ws.CLIP_LEN), cfg=pre_cfg, store=store)
    return SyncExample(clip_a, clip_b, offset)


def fuse(features: FeatureFn, examples: list[SyncExample], batch: int = 32) -> torch.Tensor:
    out = []
    for i in range(0, len(examples), batch):
        chunk = examples[i:i + batch]
        fa = features([e.clip_a for e in chunk])
        fb = features([e.clip_b for e in chunk])
        out.append(fa - fb)
    return torch.cat(out)


@dataclass
class SyncResult:
    accuracy: float
    mae: float
    zero_baseline_mae: float
    n_train: int
    n_test: int

    def to_json(self):
        return {"task": "sync", "accuracy": self.accuracy, "mae": self.mae,
                "zero_baseline_mae": self.zero_baseline_mae, "n_train": self.n_train, "n_test": self.n_test}


def sync_windows(rec: VideoRecord, rng: np.random.Generator, n_windows: int = 2 * MAX_OFFSET + 1) -> list[int]:
    """Start frames of ``n_windows`` consecutive 16-frame windows at a random place in the video."""
    n = min(n_windows, rec.length - ws.CLIP_LEN + 1)
    if n < MAX_OFFSET + 1:
        raise ws.InfeasibleVideoError(rec.length, ws.CLIP_LEN + MAX_OFFSET, "sync windows")
    b = int(rng.integers(0, rec.length - ws.CLIP_LEN - n + 2))
    return list(range(b, b + n))


def _sync_features(features, records, per_video, n_windows, rng, pre_cfg, store):
    """Fused features for ``per_video`` pairs per video, offsets uniform in -6..6.

    Each video contributes one block of consecutive windows; every pair is
    (window i, window i + offset) inside that block, so conv5 is computed once
    per window rather than twice per pair.
    """
    fused, offsets = [], []
    for rec in records:
        if rec.length < ws.CLIP_LEN + MAX_OFFSET:
            log.warning("sync: skipping %s (%d frames)", rec.video_id, rec.length)
            continue
        starts = sync_windows(rec, rng, n_windows)
        clips = [load_frames_clip(rec, range(s, s + ws.CLIP_LEN), cfg=pre_cfg, store=store) for s in starts]
        f = _batched(features, clips)
        n = len(starts)
        for _ in range(per_video):
            off = int(rng.integers(-MAX_OFFSET, MAX_OFFSET + 1))
            i = int(rng.integers(max(0, -off), n - max(0, off)))
            fused.append(f[i] - f[i + off])
            offsets.append(off)
    if not fused:
        raise ValueError("no videos long enough for the sync task")
    return torch.stack(fused), torch.tensor(offsets)


def sync_eval(features: FeatureFn, train_records, test_records, pre_cfg: PreprocessConfig,
              probe_cfg: ProbeConfig | None = None, opt_cfg: OptimizerConfig | None = None,
              seed: int = 0, per_video: int = 32, store: FrameStore | None = None,
              n_windows: int = 2 * MAX_OFFSET + 1, test_per_video: int = 8) -> SyncResult:
    """13-way offset classification on fused features ``f(a) - f(b)``.

    Train and test examples come from disjoint video sets.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    store = store or FrameStore(1024)
    rng = make_rng(seed, "eval", 11)
    x_train, y_train = _sync_features(features, train_records, per_video, n_windows, rng, pre_cfg, store)
    x_test, true = _sync_features(features, test_records, test_per_video, n_windows, rng, pre_cfg, store)
    head = train_classifier(x_train, y_train + MAX_OFFSET, N_OFFSETS, probe_cfg, opt_cfg, seed, "sync")
    pred = predict_classifier(head, x_test).argmax(1) - MAX_OFFSET
    return SyncResult(accuracy=float((pred == true).float().mean()),
                      mae=float((pred - true).abs().float().mean()),
                      zero_baseline_mae=float(true.abs().float().mean()),
                      n_train=len(y_train), n_test=len(true))


def zero_predictor_mae(max_offset: int = MAX_OFFSET) -> float:
    offsets = np.arange(-max_offset, max_offset + 1)
    return float(np.abs(offsets).mean())


# -- before / after ----------------------------------------------------------


@dataclass
class OrderPair:
    first: tuple[int, ...]
    second: tuple[int, ...]

    def inputs(self) -> list[tuple[tuple[int, ...], int]]:
        """(frame indices, label) for both orders; 0 = before, 1 = after."""
        return [(self.first + self.second, 0), (self.second + self.first, 1)]


def order_pair(length: int, rng: np.random.Generator, half: int = 8, max_gap: int | None = None) -> OrderPair:
    """Two non-overlapping runs of ``half`` consecutive frames with a random gap >= 0."""
    if length < 2 * half:
        raise ws.InfeasibleVideoError(length, 2 * half, "before/after pair")
    top = length - 2 * half if max_gap is None else min(max_gap, length - 2 * half)
    gap = int(rng.integers(0, top + 1))
    a = int(rng.integers(0, length - 2 * half - gap + 1))
    b = a + half + gap
    return OrderPair(tuple(range(a, a + half)), tuple(range(b, b + half)))


@dataclass
class OrderResult:
    accuracy: float
    n_train: int
    n_test: int

    def to_json(self):
        return {"task": "before-after", "accuracy": self.accuracy,
                "n_train": self.n_train, "n_test": self.n_test}


def _order_set(records, per_video, rng, pre_cfg, store, still=False):
    clips, labels = [], []
    for rec in records:
        if rec.length < ws.CLIP_LEN:
            log.warning("before-after: skipping %s (%d frames)", rec.video_id, rec.length)
            continue
        for _ in range(per_video):
            pair = order_pair(rec.length, rng)
            for indices, label in pair.inputs():
                if still:
                    indices = (pair.first[0],) * len(indices)
                clips.append(load_frames_clip(rec, indices, cfg=pre_cfg, store=store))
                labels.append(label)
    return clips, torch.tensor(labels)


def before_after_eval(features: FeatureFn, train_records, test_records, pre_cfg: PreprocessConfig,
                      probe_cfg: ProbeConfig | None = None, opt_cfg: OptimizerConfig | None = None,
                      seed: int = 0, per_video: int = 2, store: FrameStore | None = None,
                      still: bool = False) -> OrderResult:
    """2-way before/after classification with a fresh FC classifier on frozen features.

    Each sampled pair contributes both orders, so the label prior is exactly
    50/50. ``still=True`` replaces every frame with the pair's first frame
    (a no-signal control).
    """
    probe_cfg = probe_cfg or ProbeConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    store = store or FrameStore(1024)
    rng = make_rng(seed, "eval", 12)
    train_clips, y_train = _order_set(train_records, per_video, rng, pre_cfg, store, still)
    test_clips, y_test = _order_set(test_records, per_video, rng, pre_cfg, store, still)
    x_train = _batched(features, train_clips)
    head = train_classifier(x_train, y_train, 2, probe_cfg, opt_cfg, seed, "before-after")
    pred = predict_classifier(head, _batched(features, test_clips)).argmax(1)
    return OrderResult(float((pred == y_test).float().mean()), len(train_clips), len(test_clips))


def _batched(features: FeatureFn, clips, batch: int = 32) -> torch.Tensor:
    return torch.cat([features(clips[i:i + batch]) for i in range(0, len(clips), batch)])


# -- still-video control -----------------------------------------------------


def still_probe(model: TransformationNet, train_records, test_records, n_classes: int,
                pre_cfg: PreprocessConfig, probe_cfg: ProbeConfig | None = None,
                opt_cfg: OptimizerConfig | None = None, seed: int = 0,
                store: FrameStore | None = None) -> dict:
    """Frozen conv5 probe trained once on still clips and once on Speed-2 clips."""
    store = store or FrameStore(1024)
    kw = dict(freeze="conv", pre_cfg=pre_cfg, opt_cfg=opt_cfg, cfg=probe_cfg, seed=seed, store=store)
    still = probe_train(model, train_records, test_records, n_classes, clip_mode="still", **kw)
    moving = probe_train(model, train_records, test_records, n_classes, clip_mode="speed", **kw)
    return {"task": "still-probe", "still_accuracy": still.accuracy, "moving_accuracy": moving.accuracy,
            "chance": 1.0 / n_classes}


# -- retrieval ---------------------------------------------------------------


@dataclass
class EmbeddingRecord:
    video_id: str
    label: int
    vector: np.ndarray
    split: str


@dataclass
class EmbeddingIndex:
    records: list[EmbeddingRecord]
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        recs = [r for r in self.records if r.split == name]
        if not recs:
            return np.zeros((0, self.dim), np.float32), np.zeros(0, int)
        return np.stack([r.vector for r in recs]), np.array([r.label for r in recs])


def video_embedding(model, rec, pre_cfg, store=None, kappa: int = 2) -> np.ndarray:
    clips = ten_temporal_crops(rec, kappa, pre_cfg, store)
    feats = extract_features(model, clips_to_tensor(clips, pre_cfg), "pooled")
    return feats.mean(0).numpy().astype(np.float64)


def normalize_embeddings(train: np.ndarray, eps: float = 1e-8):
    """Train-split mean/std; constant dimensions keep std 1 so they map to 0."""
    mean = train.mean(0)
    std = train.std(0)
    std = np.where(std < eps, 1.0, std)
    return mean, std


def build_index(model: TransformationNet, train_records, test_records, pre_cfg: PreprocessConfig,
                store: FrameStore | None = None, kappa: int = 2, embed: Callable | None = None) -> EmbeddingIndex:
    """Average pooled embeddings over ten temporal crops, normalised by train statistics."""
    store = store or FrameStore(256)
    embed = embed or (lambda rec: video_embedding(model, rec, pre_cfg, store, kappa))
    raw = []
    for split, recs in (("train", train_records), ("test", test_records)):
        for rec in recs:
            if ws.max_feasible_kappa(rec.length) < kappa:
                log.warning("index: skipping %s, too short for speed %d", rec.video_id, kappa)
                continue
            raw.append((rec, split, np.asarray(embed(rec), dtype=np.float64)))
    train = np.stack([v for _, s, v in raw if s == "train"])
    mean, std = normalize_embeddings(train)
    records = [EmbeddingRecord(rec.video_id, rec.label, ((v - mean) / std).astype(np.float32), split)
               for rec, split, v in raw]
    return EmbeddingIndex(records, mean.astype(np.float32), std.astype(np.float32))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.clip(an @ bn.T, -1.0, 1.0)


def rank_gallery(queries: np.ndarray, gallery: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gallery indices sorted by descending cosine similarity (ties by index)."""
    sim = cosine_similarity(queries, gallery)
    order = np.argsort(-sim, axis=1, kind="stable")
    return order, np.take_along_axis(sim, order, axis=1)


def retrieve(index: EmbeddingIndex, k_values=DEFAULT_KS) -> dict[int, float]:
    """Top-k accuracy: a query is correct if any of its k neighbours shares its class."""
    gallery, g_labels = index.split("train")
    queries, q_labels = index.split("test")
    return topk_accuracy(queries, q_labels, gallery, g_labels, k_values)


def topk_accuracy(queries, q_labels, gallery, g_labels, k_values=DEFAULT_KS) -> dict[int, float]:
    if len(gallery) == 0 or len(queries) == 0:
        raise ValueError("empty gallery or query set")
    order, _ = rank_gallery(queries, gallery)
    hits = g_labels[order] == np.asarray(q_labels)[:, None]
    # cumulative "any hit within the first j" makes accuracy monotone in k
    first_hit = np.cumsum(hits, axis=1) > 0
    out = {}
    for k in sorted(set(int(k) for k in k_values)):
        if k < 1:
            raise ValueError("k must be >= 1")
        kk = k
        if k > len(gallery):
            log.warning("k=%d exceeds gallery size %d; clamping", k, len(gallery))
            kk = len(gallery)
        out[k] = float(first_hit[:, kk - 1].mean())
    return out


def retrieval_json(acc: dict[int, float]) -> list[dict]:
    return [{"k": k, "accuracy": v} for k, v in sorted(acc.items())]


def save_index(index: EmbeddingIndex, path) -> None:
    """``path`` gets the binary vectors, ``path.jsonl`` the id/label sidecar.

    Binary layout, little-endian: magic ``TSIX``, uint32 version, uint32 dim,
    uint32 count, float32[dim] mean, float32[dim] std, float32[count, dim] vectors.
    """
    path = Path(path)
    d, n = index.dim, len(index.records)
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<III", INDEX_VERSION, d, n))
        fh.write(np.asarray(index.mean, dtype="<f4").tobytes())
        fh.write(np.asarray(index.std, dtype="<f4").tobytes())
        for r in index.records:
            fh.write(np.asarray(r.vector, dtype="<f4").tobytes())
    with open(str(path) + ".jsonl", "w") as fh:
        for r in index.records:
            fh.write(json.dumps({"video_id": r.video_id, "label": r.label, "split": r.split}) + "\n")


def load_index(path) -> EmbeddingIndex:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != INDEX_MAGIC:
        raise ValueError(f"{path} is not an embedding index")
    version, d, n = struct.unpack("<III", raw[4:16])
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported index version {version}")
    arr = np.frombuffer(raw[16:], dtype="<f4")
    if arr.size != d * (n + 2):
        raise ValueError("truncated index file")
    mean, std, vecs = arr[:d], arr[d:2 * d], arr[2 * d:].reshape(n, d)
    meta = [json.loads(line) for line in open(str(path) + ".jsonl") if line.strip()]
    if len(meta) != n:
        raise ValueError("sidecar and index disagree on record count")
    records = [EmbeddingRecord(m["video_id"], int(m["label"]), vecs[i].astype(np.float32), m["split"])
               for i, m in enumerate(meta)]
    return EmbeddingIndex(records, mean.astype(np.float32), std.astype(np.float32))
