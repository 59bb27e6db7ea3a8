"""Synthetic corpus of single moving shapes whose classes differ only in dynamics.

Appearance (shape, colour, size, start position, background texture) is
drawn from the video seed independently of the class, so no single frame
carries class information. Trajectories are folded back into the frame by
reflection (or wrapped) so the object never leaves the image.

On disk a corpus looks like::

    corpus/
      generator.json          # GeneratorConfig + corpus seed
      train.jsonl             # {"path", "label", "length", "seed"} per video
      test.jsonl
      videos/train_00000/000000.png ...
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import make_rng

log = logging.getLogger(__name__)

CLASS_NAMES = ("linear", "circular", "oscillating", "accelerating")
SHAPES = ("disk", "square", "blob")


@dataclass
class GeneratorConfig:
    n_classes: int = 4
    length: int = 128
    size: int = 64
    grayscale: bool = False
    # mean speed in px/frame; spans less than a factor 2 so playback speed stays identifiable
    speed_range: tuple[float, float] = (0.6, 1.1)
    circle_radius: tuple[float, float] = (8.0, 14.0)
    period_range: tuple[int, int] = (24, 48)
    accel_v0: tuple[float, float] = (0.2, 0.4)
    accel_rate: tuple[float, float] = (0.005, 0.01)
    object_radius: tuple[float, float] = (4.0, 7.0)
    texture_amplitude: float = 0.05
    boundary: str = "reflect"

    def __post_init__(self):
        for name in ("speed_range", "circle_radius", "period_range", "accel_v0",
                     "accel_rate", "object_radius"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in 1..{len(CLASS_NAMES)}")
        if self.length < 16:
            raise ValueError("length must be at least 16 frames")
        if self.size < 4 * self.object_radius[1]:
            raise ValueError("frame size too small for the largest object")
        if self.boundary not in ("reflect", "wrap"):
            raise ValueError("boundary must be 'reflect' or 'wrap'")
        for name in ("speed_range", "circle_radius", "period_range", "accel_v0",
                     "accel_rate", "object_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if not 0 <= self.texture_amplitude <= 0.5:
            raise ValueError("texture_amplitude must be in [0, 0.5]")

    @property
    def channels(self) -> int:
        return 1 if self.grayscale else 3


@dataclass
class Appearance:
    shape: str
    color: tuple[float, ...]
    radius: float
    start: tuple[float, float]
    background: float


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # L x H x W x C, float32 in [0, 1]
    label: int
    seed: int
    centers: np.ndarray  # L x 2 (y, x)
    alpha: np.ndarray  # L x H x W object coverage
    params: dict = field(default_factory=dict)

    @property
    def masks(self) -> np.ndarray:
        return self.alpha > 0.5


@dataclass
class VideoRecord:
    path: str
    label: int
    length: int
    seed: int

    @property
    def video_id(self) -> str:
        return Path(self.path).name

    def to_json(self, root: Path | None = None) -> dict:
        path = self.path
        if root is not None:
            path = os.path.relpath(path, root)
        return {"path": path, "label": self.label, "length": self.length, "seed": self.seed}


# -- dynamics ----------------------------------------------------------------


def draw_dynamics(class_id: int, rng: np.random.Generator, cfg: GeneratorConfig) -> dict:
    name = CLASS_NAMES[class_id]
    theta = float(rng.uniform(0, 2 * math.pi))
    if name == "linear":
        return {"kind": name, "speed": float(rng.uniform(*cfg.speed_range)), "direction": theta}
    if name == "circular":
        return {"kind": name, "speed": float(rng.uniform(*cfg.speed_range)),
                "radius": float(rng.uniform(*cfg.circle_radius)),
                "phase": theta, "orientation": int(rng.choice([-1, 1]))}
    if name == "oscillating":
        return {"kind": name, "speed": float(rng.uniform(*cfg.speed_range)),
                "period": int(rng.integers(cfg.period_range[0], cfg.period_range[1] + 1)),
                "direction": theta, "phase": float(rng.uniform(0, 2 * math.pi))}
    return {"kind": name, "v0": float(rng.uniform(*cfg.accel_v0)),
            "accel": float(rng.uniform(*cfg.accel_rate)), "direction": theta}


def _check_range(value, bounds, what):
    lo, hi = bounds
    if not lo <= value <= hi:
        raise ValueError(f"{what}={value} outside configured range [{lo}, {hi}]")


def check_dynamics(class_id: int, params: dict, cfg: GeneratorConfig) -> None:
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class_id {class_id} not in 0..{cfg.n_classes - 1}")
    kind = CLASS_NAMES[class_id]
    if params.get("kind") != kind:
        raise ValueError(f"params describe {params.get('kind')!r}, class {class_id} is {kind!r}")
    if kind in ("linear", "circular", "oscillating"):
        _check_range(params["speed"], cfg.speed_range, "speed")
    if kind == "circular":
        _check_range(params["radius"], cfg.circle_radius, "radius")
    if kind == "oscillating":
        _check_range(params["period"], cfg.period_range, "period")
    if kind == "accelerating":
        _check_range(params["v0"], cfg.accel_v0, "v0")
        _check_range(params["accel"], cfg.accel_rate, "accel")


def raw_trajectory(params: dict, start, length: int) -> np.ndarray:
    """Unbounded (y, x) positions for t = 0..length-1, starting at ``start``."""
    t = np.arange(length, dtype=np.float64)
    p0 = np.asarray(start, dtype=np.float64)
    kind = params["kind"]
    if kind == "circular":
        omega = params["orientation"] * params["speed"] / params["radius"]
        phi = params["phase"] + omega * t
        r = params["radius"]
        center = p0 - r * np.array([math.sin(params["phase"]), math.cos(params["phase"])])
        return center + r * np.stack([np.sin(phi), np.cos(phi)], axis=1)

    u = np.array([math.sin(params["direction"]), math.cos(params["direction"])])
    if kind == "linear":
        s = params["speed"] * t
    elif kind == "oscillating":
        # mean absolute speed of A*sin(2*pi*t/P) is 4A/P
        amp = params["speed"] * params["period"] / 4.0
        w = 2 * math.pi / params["period"]
        s = amp * (np.sin(w * t + params["phase"]) - math.sin(params["phase"]))
    elif kind == "accelerating":
        s = params["v0"] * t + 0.5 * params["accel"] * t**2
    else:
        raise ValueError(f"unknown dynamics {kind!r}")
    return p0 + s[:, None] * u


def fold(x: np.ndarray, lo: float, hi: float, mode: str = "reflect") -> np.ndarray:
    width = hi - lo
    if mode == "wrap":
        return lo + np.mod(x - lo, width)
    y = np.mod(x - lo, 2 * width)
    return lo + np.where(y > width, 2 * width - y, y)


# -- rendering ---------------------------------------------------------------


def draw_appearance(rng: np.random.Generator, cfg: GeneratorConfig) -> Appearance:
    radius = float(rng.uniform(*cfg.object_radius))
    margin = radius + 1
    start = (float(rng.uniform(margin, cfg.size - 1 - margin)),
             float(rng.uniform(margin, cfg.size - 1 - margin)))
    if cfg.grayscale:
        color = (float(rng.uniform(0.6, 1.0)),)
    else:
        color = tuple(float(c) for c in rng.uniform(0.3, 1.0, size=3))
    return Appearance(shape=str(rng.choice(SHAPES)), color=color, radius=radius,
                      start=start, background=float(rng.uniform(0.0, 0.15)))


def _coverage(shape: str, dy: np.ndarray, dx: np.ndarray, radius: float) -> np.ndarray:
    # soft edges give one pixel of anti-aliasing
    if shape == "disk":
        return np.clip(radius + 0.5 - np.hypot(dy, dx), 0.0, 1.0)
    if shape == "square":
        return np.clip(radius + 0.5 - np.maximum(np.abs(dy), np.abs(dx)), 0.0, 1.0)
    sigma = radius / 1.5
    return np.exp(-(dy**2 + dx**2) / (2 * sigma**2))


def render_video(class_id: int, params: dict, seed: int, cfg: GeneratorConfig | None = None) -> SyntheticVideo:
    """Render one video; appearance comes from ``seed``, motion from ``params``."""
    cfg = cfg or GeneratorConfig()
    check_dynamics(class_id, params, cfg)
    rng = make_rng(seed, "appearance")
    look = draw_appearance(rng, cfg)
    texture = cfg.texture_amplitude * rng.uniform(-1, 1, size=(cfg.size, cfg.size, 1))

    margin = look.radius + 1
    lo, hi = margin, cfg.size - 1 - margin
    centers = fold(raw_trajectory(params, look.start, cfg.length), lo, hi, cfg.boundary)

    yy, xx = np.mgrid[0:cfg.size, 0:cfg.size].astype(np.float64)
    dy = yy[None] - centers[:, 0, None, None]
    dx = xx[None] - centers[:, 1, None, None]
    alpha = _coverage(look.shape, dy, dx, look.radius)

    bg = np.clip(look.background + texture, 0.0, 1.0)
    color = np.asarray(look.color)
    frames = bg[None] * (1 - alpha[..., None]) + color * alpha[..., None]
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return SyntheticVideo(frames=frames, label=class_id, seed=seed, centers=centers,
                          alpha=alpha.astype(np.float32), params={**params, **asdict(look)})


def synthesize(class_id: int, seed: int, cfg: GeneratorConfig | None = None) -> SyntheticVideo:
    cfg = cfg or GeneratorConfig()
    params = draw_dynamics(class_id, make_rng(seed, "dynamics"), cfg)
    return render_video(class_id, params, seed, cfg)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_frames(frames: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(to_uint8(frames)):
        img = Image.fromarray(frame[..., 0] if frame.shape[-1] == 1 else frame)
        img.save(directory / f"{t:06d}.png", optimize=False)


# -- corpus ------------------------------------------------------------------


def corpus_seeds(seed: int, n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    base = int(seed) * 1_000_000
    seeds = [base + i for i in range(n_train + n_test)]
    return seeds[:n_train], seeds[n_train:]


def _render_and_write(job):
    label, seed, cfg, directory = job
    video = synthesize(label, seed, cfg)
    write_frames(video.frames, Path(directory))
    return bool(np.all(np.isfinite(video.frames)))


def write_manifest(records: list[VideoRecord], path: Path) -> None:
    root = path.parent
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(root)) + "\n")


def read_manifest(path) -> list[VideoRecord]:
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                p = Path(doc["path"])
                if not p.is_absolute():
                    p = path.parent / p
                records.append(VideoRecord(str(p), int(doc["label"]), int(doc["length"]), int(doc["seed"])))
    return records


def load_generator_config(corpus_dir) -> tuple[GeneratorConfig, int]:
    doc = json.loads((Path(corpus_dir) / "generator.json").read_text())
    return GeneratorConfig(**doc["config"]), int(doc["seed"])


def generate_corpus(cfg: GeneratorConfig, n_train: int, n_test: int, seed: int, out_dir,
                    workers: int = 1) -> tuple[list[VideoRecord], list[VideoRecord]]:
    """Render ``n_train + n_test`` class-balanced videos and write both manifests."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")

    train_seeds, test_seeds = corpus_seeds(seed, n_train, n_test)
    jobs, splits = [], {"train": [], "test": []}
    for split, seeds in (("train", train_seeds), ("test", test_seeds)):
        for i, s in enumerate(seeds):
            label = i % cfg.n_classes
            directory = out / "videos" / f"{split}_{i:05d}"
            jobs.append((label, s, cfg, str(directory)))
            splits[split].append(VideoRecord(str(directory), label, cfg.length, s))

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            ok = list(pool.map(_render_and_write, jobs, chunksize=8))
    else:
        ok = [_render_and_write(job) for job in jobs]
    if not all(ok):
        raise RuntimeError("non-finite pixels produced")

    (out / "generator.json").write_text(json.dumps({"config": asdict(cfg), "seed": seed}, indent=2))
    write_manifest(splits["train"], out / "train.jsonl")
    write_manifest(splits["test"], out / "test.jsonl")
    log.info("wrote %d train + %d test videos to %s", n_train, n_test, out)
    return splits["train"], splits["test"]
