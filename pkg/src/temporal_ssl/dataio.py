"""Frame-directory loading, C3D-style preprocessing and clip materialisation.

Resize is bilinear with ``align_corners=False`` (pixel centres at half-integer
positions) and no antialiasing, via ``torch.nn.functional.interpolate``.
One crop window and one flip decision are shared by all 16 frames of a clip.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import warp_sampler as ws
from .synthclips import VideoRecord


@dataclass
class PreprocessConfig:
    resize_h: int = 128
    resize_w: int = 171
    crop: int = 112
    flip_prob: float = 0.5
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)
        if self.crop > min(self.resize_h, self.resize_w):
            raise ValueError("crop larger than resized frame")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise ValueError("mean/std must have equal length and positive std")

    def center_offset(self) -> tuple[int, int]:
        return (self.resize_h - self.crop) // 2, (self.resize_w - self.crop) // 2


@dataclass
class Clip:
    frames: np.ndarray  # 16 x crop x crop x C, float32 in [0, 1]
    video_id: str
    source_indices: tuple[int, ...]
    flip_applied: bool
    crop_offsets: tuple[tuple[int, int], ...]
    transform: ws.IndexSequence | None = None
    label: int | None = None
    meta: dict = field(default_factory=dict)

    def check(self, crop: int) -> None:
        f = self.frames
        if f.shape[0] != ws.CLIP_LEN or f.shape[1:3] != (crop, crop):
            raise ValueError(f"bad clip shape {f.shape}")
        if f.min() < 0 or f.max() > 1:
            raise ValueError("clip values outside [0, 1]")
        if len(set(self.crop_offsets)) != 1 or len(self.crop_offsets) != ws.CLIP_LEN:
            raise ValueError("crop window not shared across frames")


class FrameStore:
    """LRU cache of whole decoded videos (uint8, L x H x W x C)."""

    def __init__(self, max_videos: int = 64):
        self.max_videos = max_videos
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()

    def video(self, record: VideoRecord) -> np.ndarray:
        key = record.path
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        arr = read_frames(record.path, range(record.length))
        if self.max_videos > 0:
            self._cache[key] = arr
            while len(self._cache) > self.max_videos:
                self._cache.popitem(last=False)
        return arr

    def frames(self, record: VideoRecord, indices) -> np.ndarray:
        indices = list(indices)
        bad = [i for i in indices if not 0 <= i < record.length]
        if bad:
            raise IndexError(f"frame indices {bad} out of range for {record.video_id} (L={record.length})")
        if self.max_videos > 0:
            return self.video(record)[indices]
        return read_frames(record.path, indices)


def read_frames(directory, indices) -> np.ndarray:
    frames = []
    for i in indices:
        path = Path(directory) / f"{i:06d}.png"
        if not path.exists():
            raise FileNotFoundError(f"missing frame file {path}")
        with Image.open(path) as img:
            arr = np.asarray(img, dtype=np.uint8)
        frames.append(arr[..., None] if arr.ndim == 2 else arr)
    return np.stack(frames)


_DEFAULT_STORE = FrameStore(max_videos=0)


def resize(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize T x H x W x C (any dtype) to float32 T x height x width x C."""
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 3, 1, 2)
    if x.shape[-2:] != (height, width):
        x = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1).contiguous().numpy()


def spatial_transform(frames: np.ndarray, cfg: PreprocessConfig, offset: tuple[int, int],
                      flip: bool) -> np.ndarray:
    """Resize, crop at ``offset`` and optionally flip a T x H x W x C stack."""
    out = resize(frames, cfg.resize_h, cfg.resize_w)
    y, x = offset
    out = out[:, y:y + cfg.crop, x:x + cfg.crop]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def draw_spatial(cfg: PreprocessConfig, augment: bool, rng: np.random.Generator | None):
    if not augment:
        return cfg.center_offset(), False
    y = int(rng.integers(0, cfg.resize_h - cfg.crop + 1))
    x = int(rng.integers(0, cfg.resize_w - cfg.crop + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return (y, x), flip


def _make_clip(record, indices, cfg, augment, rng, store, transform=None) -> Clip:
    raw = (store or _DEFAULT_STORE).frames(record, indices)
    offset, flip = draw_spatial(cfg, augment, rng)
    frames = spatial_transform(raw.astype(np.float32) / 255.0, cfg, offset, flip)
    return Clip(frames=frames, video_id=record.video_id, source_indices=tuple(indices),
                flip_applied=flip, crop_offsets=(offset,) * len(indices),
                transform=transform, label=record.label)


def load_clip(record: VideoRecord, seq: ws.IndexSequence, augment: bool = False,
              rng: np.random.Generator | None = None, cfg: PreprocessConfig | None = None,
              store: FrameStore | None = None) -> Clip:
    """Materialise the frames named by ``seq`` as one preprocessed clip."""
    return _make_clip(record, list(seq.indices), cfg or PreprocessConfig(), augment, rng, store, seq)


def load_frames_clip(record: VideoRecord, indices, augment: bool = False, rng=None,
                     cfg: PreprocessConfig | None = None, store: FrameStore | None = None) -> Clip:
    return _make_clip(record, list(indices), cfg or PreprocessConfig(), augment, rng, store)


def make_still_clip(record: VideoRecord, frame_index: int | None = None, augment: bool = False,
                    rng: np.random.Generator | None = None, cfg: PreprocessConfig | None = None,
                    store: FrameStore | None = None) -> Clip:
    """One frame, preprocessed once, replicated 16 times (default: middle frame)."""
    cfg = cfg or PreprocessConfig()
    if frame_index is None:
        frame_index = record.length // 2
    one = _make_clip(record, [frame_index], cfg, augment, rng, store)
    frames = np.repeat(one.frames, ws.CLIP_LEN, axis=0)
    return Clip(frames=frames, video_id=one.video_id, source_indices=(frame_index,) * ws.CLIP_LEN,
                flip_applied=one.flip_applied, crop_offsets=one.crop_offsets * ws.CLIP_LEN,
                label=record.label, meta={"still": True})


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(int)


def temporal_crop_starts(video_length: int, kappa: int = 2, n: int = 10) -> list[int]:
    """Evenly spaced start offsets over all feasible Speed-kappa starts."""
    if kappa > ws.max_feasible_kappa(video_length):
        raise ws.InfeasibleVideoError(video_length, 15 * 2**kappa + 1, f"speed {kappa} crop")
    last = video_length - 15 * 2**kappa - 1
    return round_half_up(np.linspace(0, last, n)).tolist()


def ten_temporal_crops(record: VideoRecord, kappa: int = 2, cfg: PreprocessConfig | None = None,
                       store: FrameStore | None = None, n: int = 10) -> list[Clip]:
    clips = []
    for rho in temporal_crop_starts(record.length, kappa, n):
        seq = ws.sample_speed(record.length, kappa, rho=rho)
        clips.append(load_clip(record, seq, augment=False, cfg=cfg, store=store))
    return clips


def clips_to_tensor(clips, cfg: PreprocessConfig | None = None, dtype=torch.float32) -> torch.Tensor:
    """Stack clips into a normalised B x C x T x H x W tensor."""
    cfg = cfg or PreprocessConfig()
    arr = np.stack([c.frames if isinstance(c, Clip) else c for c in clips])
    x = torch.from_numpy(arr).to(dtype).permute(0, 4, 1, 2, 3)
    c = x.shape[1]
    mean = torch.tensor(cfg.mean[:c], dtype=dtype).view(1, c, 1, 1, 1)
    std = torch.tensor(cfg.std[:c], dtype=dtype).view(1, c, 1, 1, 1)
    return ((x - mean) / std).contiguous()


def corpus_statistics(records, store: FrameStore | None = None, frames_per_video: int = 4,
                      rng: np.random.Generator | None = None) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean/std of raw [0, 1] pixels over a frame sample."""
    rng = rng or np.random.default_rng(0)
    store = store or _DEFAULT_STORE
    total = total_sq = None
    count = 0
    for rec in records:
        idx = sorted(rng.choice(rec.length, size=min(frames_per_video, rec.length), replace=False).tolist())
        f = store.frames(rec, idx).astype(np.float64) / 255.0
        flat = f.reshape(-1, f.shape[-1])
        s, sq = flat.sum(0), (flat**2).sum(0)
        total = s if total is None else total + s
        total_sq = sq if total_sq is None else total_sq + sq
        count += flat.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-12))
    return tuple(float(m) for m in mean), tuple(float(max(s, 1e-3)) for s in std)


def clip_is_still(clip: Clip) -> bool:
    return bool(np.all(clip.frames == clip.frames[:1]))


def temporal_gradient(clip: Clip) -> np.ndarray:
    return np.diff(clip.frames, axis=0)
