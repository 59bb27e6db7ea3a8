"""A small C3D-style 3D CNN with a motion-type head and a speed head.

Topology (defaults)::

    [conv3x3x3 (no bias) -> BN -> ReLU -> maxpool] x 5      channels 32, 64, 128, 128, 128
        pool (1,2,2) after block 1, (2,2,2) after blocks 2-5
    flatten -> fc 512 -> BN -> ReLU -> fc 512 -> BN -> ReLU   ("pooled" tap)
        -> motion logits (4), speed logits (4)

The ``conv5`` tap is the last block's activation before its pooling layer.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .rng import torch_generator

CHECKPOINT_FORMAT = "temporal-ssl-checkpoint"
CHECKPOINT_VERSION = 1
TAPS = ("conv5", "pooled")


@dataclass
class NetworkConfig:
    channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    temporal_pool: tuple[bool, ...] = (False, True, True, True, True)
    fc_width: int = 512
    in_channels: int = 3
    input_size: int = 112
    clip_len: int = 16
    head_motion_classes: int = 4
    head_speed_classes: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.temporal_pool = tuple(bool(t) for t in self.temporal_pool)
        if len(self.channels) != len(self.temporal_pool) or not self.channels:
            raise ValueError("channels and temporal_pool must be non-empty and equally long")
        if min(self.channels) < 1 or self.fc_width < 1:
            raise ValueError("layer widths must be positive")

    def conv5_shape(self) -> tuple[int, int, int, int]:
        t, s = self.clip_len, self.input_size
        for tp in self.temporal_pool[:-1]:
            t = math.ceil(t / 2) if tp else t
            s = math.ceil(s / 2)
        return self.channels[-1], t, s, s

    def pooled_shape(self) -> tuple[int, int, int, int]:
        c, t, s, _ = self.conv5_shape()
        t = math.ceil(t / 2) if self.temporal_pool[-1] else t
        s = math.ceil(s / 2)
        return c, t, s, s

    @property
    def embedding_dim(self) -> int:
        return self.fc_width


@dataclass
class ForwardOutput:
    motion_logits: torch.Tensor
    speed_logits: torch.Tensor
    conv5: torch.Tensor
    pooled: torch.Tensor


# no bias before BN: the BN shift absorbs it and its gradient is identically zero
def conv_block(cin, cout):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm3d(cout), nn.ReLU())


def fc_block(cin, cout):
    return nn.Sequential(nn.Linear(cin, cout, bias=False), nn.BatchNorm1d(cout), nn.ReLU())


class TransformationNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = cfg = config or NetworkConfig()
        blocks, pools = [], []
        cin = cfg.in_channels
        for cout, tp in zip(cfg.channels, cfg.temporal_pool):
            blocks.append(conv_block(cin, cout))
            pools.append(nn.MaxPool3d((2 if tp else 1, 2, 2), ceil_mode=True))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.pools = nn.ModuleList(pools)
        flat = int(np.prod(cfg.pooled_shape()))
        self.fc = nn.Sequential(fc_block(flat, cfg.fc_width), fc_block(cfg.fc_width, cfg.fc_width))
        self.motion_head = nn.Linear(cfg.fc_width, cfg.head_motion_classes)
        self.speed_head = nn.Linear(cfg.fc_width, cfg.head_speed_classes)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        """Convolutional features (the conv5 tap)."""
        cfg = self.config
        expected = (cfg.in_channels, cfg.clip_len, cfg.input_size, cfg.input_size)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input B x {expected}, got {tuple(x.shape)}")
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                x = self.pools[i](x)
        return x

    def embed(self, conv5: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.pools[-1](conv5), 1))

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        conv5 = self.trunk(x)
        pooled = self.embed(conv5)
        return ForwardOutput(self.motion_head(pooled), self.speed_head(pooled), conv5, pooled)

    def conv_parameters(self):
        return self.blocks.parameters()


def init_weights(model: nn.Module, seed: int = 0) -> nn.Module:
    """Fan-in scaled normal weights, zero biases, unit BN scales."""
    gen = torch_generator(seed, "model-init")
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            with torch.no_grad():
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def build_model(config: NetworkConfig | None = None, seed: int = 0) -> TransformationNet:
    return init_weights(TransformationNet(config), seed)


def forward(model: TransformationNet, x: torch.Tensor, mode: str = "eval") -> ForwardOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(x)
    return model(x)


@torch.no_grad()
def extract_features(model: TransformationNet, x: torch.Tensor, tap: str = "conv5",
                     batch_size: int = 32) -> torch.Tensor:
    """Eval-mode features for ``x`` from the named tap, batched."""
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}; choose from {TAPS}")
    model.eval()
    outs = []
    for i in range(0, x.shape[0], batch_size):
        conv5 = model.trunk(x[i:i + batch_size])
        outs.append(conv5 if tap == "conv5" else model.embed(conv5))
    return torch.cat(outs)


# -- gradient check -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst_parameter: str
    per_parameter: dict = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def tiny_config() -> NetworkConfig:
    return NetworkConfig(channels=(4, 4), temporal_pool=(False, True), fc_width=8,
                         input_size=8, clip_len=16)


def gradient_check(config: NetworkConfig | None = None, h: float = 1e-5, seed: int = 0,
                   use_motion: bool = True, use_speed: bool = True,
                   max_per_parameter: int | None = None) -> GradCheckReport:
    """Compare autograd parameter gradients of the joint loss with central differences.

    Runs in float64 on a 4-clip batch (one clip per motion type, speed label on
    the speed clip). Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    from .trainer import joint_loss

    config = config or tiny_config()
    model = build_model(config, seed).double().train()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(4, config.in_channels, config.clip_len, config.input_size, config.input_size,
                   generator=gen, dtype=torch.float64)
    motion = torch.arange(4)
    speed = torch.tensor([2, 0, 0, 0])
    mask = torch.tensor([True, False, False, False])

    def loss_value():
        out = model(x)
        return joint_loss(out.motion_logits, out.speed_logits, motion, speed, mask,
                          use_motion=use_motion, use_speed=use_speed).total

    model.zero_grad()
    loss_value().backward()
    worst, worst_name, n_checked, per = 0.0, "", 0, {}
    sel = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_per_parameter is not None and idx.size > max_per_parameter:
            idx = np.sort(sel.choice(idx, max_per_parameter, replace=False))
        pmax = 0.0
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                fp = loss_value().item()
                flat[i] = orig - h
                fm = loss_value().item()
                flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic[i].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            pmax = max(pmax, rel)
            n_checked += 1
        per[name] = pmax
        if pmax > worst:
            worst, worst_name = pmax, name
    return GradCheckReport(worst, n_checked, worst_name, per)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: TransformationNet, *, step: int = 0, preprocess: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Write a versioned checkpoint.

    Keys: ``format``, ``version``, ``network_config``, ``state_dict`` (parameters
    and BN running statistics), ``preprocess`` (resize/crop and the data
    normalisation constants), ``rng_state``, ``step``, ``extra``.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_config": asdict(model.config),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "preprocess": preprocess or {},
        "rng_state": rng_state or {},
        "step": int(step),
        "extra": extra or {},
    }
    torch.save(doc, path)


def load_checkpoint(path) -> tuple[TransformationNet, dict]:
    doc = torch.load(path, map_location="cpu", weights_only=True)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = TransformationNet(NetworkConfig(**doc["network_config"]))
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model, doc


def parameter_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
