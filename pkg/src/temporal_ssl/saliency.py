"""Guided backpropagation with per-frame median removal.

Input gradients are computed with the guided rule at every ReLU (only
positive gradients flow where the forward activation was positive). Each
frame of the gradient video then has its median (taken over all channels and
pixels of that frame) subtracted, followed by an absolute value. Channels are
reduced by their maximum so the result is one map per frame.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image
from torch import nn

from .dataio import Clip, PreprocessConfig, clips_to_tensor
from .model import TransformationNet

HEADS = ("motion", "speed")


class UnsupportedArchitecture(TypeError):
    pass


class _GuidedReLUFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        out = x.clamp(min=0)
        ctx.save_for_backward(x)
        return out

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x > 0).to(grad.dtype) * (grad > 0).to(grad.dtype)


class GuidedReLU(nn.Module):
    def forward(self, x):
        return _GuidedReLUFn.apply(x)


@contextlib.contextmanager
def guided_relus(model: nn.Module):
    """Temporarily swap every ``nn.ReLU`` in ``model`` for :class:`GuidedReLU`."""
    swapped = []
    for parent in model.modules():
        for name, child in parent.named_children():
            if isinstance(child, nn.ReLU):
                swapped.append((parent, name, child))
    if not swapped:
        raise UnsupportedArchitecture("model has no ReLU nonlinearities for guided backpropagation")
    try:
        for parent, name, _ in swapped:
            setattr(parent, name, GuidedReLU())
        yield model
    finally:
        for parent, name, child in swapped:
            setattr(parent, name, child)


@dataclass
class SaliencyVideo:
    values: np.ndarray  # T x H x W, non-negative
    clip_id: str
    head: str
    class_id: int


def postprocess_gradient(grad: np.ndarray) -> np.ndarray:
    """C x T x H x W gradient -> T x H x W map: per-frame median removal, abs, channel max."""
    g = np.asarray(grad, dtype=np.float64)
    med = np.median(g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1), axis=1)
    centred = np.abs(g - med[None, :, None, None])
    return centred.max(axis=0)


def input_gradient(model: TransformationNet, x: torch.Tensor, head: str, class_id: int,
                   guided: bool = True) -> np.ndarray:
    """Gradient of one class logit w.r.t. a 1 x C x T x H x W input (BN in eval mode)."""
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    n = model.config.head_motion_classes if head == "motion" else model.config.head_speed_classes
    if not 0 <= class_id < n:
        raise ValueError(f"class {class_id} invalid for the {head} head")
    model.eval()
    x = x.detach().clone().requires_grad_(True)
    ctx = guided_relus(model) if guided else contextlib.nullcontext()
    with ctx:
        out = model(x)
        logits = out.motion_logits if head == "motion" else out.speed_logits
        model.zero_grad(set_to_none=True)
        logits[0, class_id].backward()
    return x.grad[0].detach().numpy()


def guided_backprop(model: TransformationNet, clip: Clip, head: str = "motion", class_id: int = 0,
                    pre_cfg: PreprocessConfig | None = None) -> SaliencyVideo:
    pre_cfg = pre_cfg or PreprocessConfig(crop=model.config.input_size)
    grad = input_gradient(model, clips_to_tensor([clip], pre_cfg), head, class_id)
    return SaliencyVideo(postprocess_gradient(grad).astype(np.float32), clip.video_id, head, class_id)


def display_normalize(values: np.ndarray) -> np.ndarray:
    """Per-video min-max to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def saliency_grid(sal: SaliencyVideo, clip: Clip, cmap: str = "inferno") -> np.ndarray:
    """uint8 image with input frames on the top row and saliency below."""
    frames = clip.frames
    if frames.shape[:3] != sal.values.shape:
        raise ValueError(f"saliency {sal.values.shape} does not match clip {frames.shape[:3]}")
    if frames.shape[-1] == 1:
        frames = np.repeat(frames, 3, axis=-1)
    colored = colormaps[cmap](display_normalize(sal.values))[..., :3]
    top = np.concatenate(list(frames), axis=1)
    bottom = np.concatenate(list(colored), axis=1)
    grid = np.concatenate([top, bottom], axis=0)
    return np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)


def render_saliency_grid(sal: SaliencyVideo, clip: Clip, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(saliency_grid(sal, clip)).save(path, format="PNG")
    return path


def save_frames(sal: SaliencyVideo, directory) -> list[Path]:
    """Optional per-frame sequence of normalised saliency maps."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    norm = display_normalize(sal.values)
    paths = []
    for t, frame in enumerate(norm):
        p = directory / f"{t:06d}.png"
        Image.fromarray(np.round(frame * 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths


def object_contrast(sal: SaliencyVideo, masks: np.ndarray) -> tuple[float, float]:
    """Mean saliency inside and outside boolean ``masks`` (T x H x W)."""
    if masks.shape != sal.values.shape:
        raise ValueError("mask shape mismatch")
    inside = sal.values[masks]
    outside = sal.values[~masks]
    return float(inside.mean()) if inside.size else 0.0, float(outside.mean()) if outside.size else 0.0


def clip_masks(video_masks: np.ndarray, clip: Clip, cfg: PreprocessConfig) -> np.ndarray:
    """Carry native-resolution object masks through the clip's resize/crop/flip."""
    from .dataio import spatial_transform

    sel = video_masks[list(clip.source_indices)].astype(np.float32)[..., None]
    out = spatial_transform(sel, cfg, clip.crop_offsets[0], clip.flip_applied)
    return out[..., 0] > 0.5
