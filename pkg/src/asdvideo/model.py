"""Dual-stream frame encoder with a temporal transformer head.

Frames of a slice go through two independent per-frame backbones (movement
crops and aligned faces).  Their features are concatenated per frame, a
classification token is prepended, and a small pre-norm transformer mixes
information over time.  The class-token embedding feeds a two-layer MLP that
outputs NT/ASD probabilities.
"""

from __future__ import annotations

import enum
import importlib
import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, SequenceTooLong, ShapeMismatch


class BackboneKind(str, enum.Enum):
    toy_conv = "toy_conv"
    pluggable = "pluggable"


class BackboneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: BackboneKind = BackboneKind.toy_conv
    feature_dim: int = 64
    weights_path: Optional[str] = None
    width: int = 16
    # "package.module:callable" returning an nn.Module that maps
    # (N, 3, H, W) images in [0, 1] to (N, feature_dim) features
    factory: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be at least 1")
        if self.width < 1:
            raise ValueError("width must be at least 1")
        if self.kind == BackboneKind.pluggable and not self.factory:
            raise ValueError("pluggable backbones need a factory")
        return self


class TransformerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    main: BackboneConfig = Field(default_factory=BackboneConfig)
    fer: BackboneConfig = Field(default_factory=BackboneConfig)
    transformer: TransformerConfig = Field(default_factory=TransformerConfig)
    max_seq_len: int = 17
    num_classes: int = 2

    @property
    def fused_dim(self) -> int:
        return self.main.feature_dim + self.fer.feature_dim

    @model_validator(mode="after")
    def _check(self):
        if self.num_classes != 2:
            raise ValueError("num_classes must be 2")
        if self.fused_dim % self.transformer.heads:
            raise ValueError(
                f"fused dim {self.fused_dim} not divisible by {self.transformer.heads} heads"
            )
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must allow the class token plus one frame")
        return self

    @classmethod
    def for_slice_len(cls, slice_len: int, **kw) -> "ModelConfig":
        return cls(max_seq_len=slice_len + 1, **kw)


class ToyConvBackbone(nn.Module):
    """Four strided conv blocks and global average pooling.

    The first block patchifies with an 8x8 stride-8 kernel, which keeps a
    224x224 input cheap on CPU.
    """

    def __init__(self, feature_dim: int = 64, width: int = 16):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, feature_dim]
        blocks = []
        for i in range(4):
            k, s, p = (8, 8, 0) if i == 0 else (3, 2, 1)
            blocks += [nn.Conv2d(chans[i], chans[i + 1], k, s, p), nn.GroupNorm(1, chans[i + 1]), nn.GELU()]
        self.features = nn.Sequential(*blocks)
        self.feature_dim = feature_dim

    def forward(self, x):
        # small inputs: pad up to the patch size so the stem always fits
        h, w = x.shape[-2:]
        if h < 8 or w < 8:
            x = F.pad(x, (0, max(0, 8 - w), 0, max(0, 8 - h)))
        x = self.features((x - 0.5) * 4.0)
        return x.mean(dim=(-2, -1))


def _import_factory(spec: str):
    module, _, attr = spec.partition(":")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot import backbone factory {spec!r}: {e}") from e


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == BackboneKind.toy_conv:
        net = ToyConvBackbone(cfg.feature_dim, cfg.width)
    else:
        net = _import_factory(cfg.factory)(cfg.feature_dim)
    if cfg.weights_path:
        state = torch.load(cfg.weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    return net


class _TorchvisionFeatures(nn.Module):
    def __init__(self, body, feature_dim):
        super().__init__()
        self.body = body
        self.feature_dim = feature_dim
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        return self.body((x - self.mean) / self.std).flatten(1)


def efficientnet_b0_features(feature_dim: int = 1280) -> nn.Module:
    """Untrained EfficientNet-B0 trunk; load pretrained weights via ``weights_path``."""
    from torchvision.models import efficientnet_b0

    net = efficientnet_b0(weights=None)
    if feature_dim != 1280:
        raise ConfigError("efficientnet_b0 features are 1280-dimensional")
    return _TorchvisionFeatures(nn.Sequential(net.features, net.avgpool), 1280)


def resnet18_features(feature_dim: int = 512) -> nn.Module:
    """Untrained ResNet-18 trunk; load expression-recognition weights via ``weights_path``."""
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if feature_dim != 512:
        raise ConfigError("resnet18 features are 512-dimensional")
    net.fc = nn.Identity()
    return _TorchvisionFeatures(net, 512)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).view(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(D // self.heads)
        attn = attn.softmax(dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(B, N, D)
        return self.drop(self.proj(out)), attn


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(mlp_ratio * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        a, weights = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, weights


class TemporalTransformer(nn.Module):
    def __init__(self, dim, cfg: TransformerConfig, max_seq_len):
        super().__init__()
        self.max_seq_len = max_seq_len
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, max_seq_len, dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(dim, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, return_attention=False):
        B, T, D = x.shape
        if T + 1 > self.max_seq_len:
            raise SequenceTooLong(f"{T} frames + class token exceed max_seq_len={self.max_seq_len}")
        x = torch.cat([self.cls_token.expand(B, -1, -1), x], dim=1) + self.pos_embed[:, : T + 1]
        maps = []
        for blk in self.blocks:
            x, w = blk(x)
            maps.append(w)
        cls = self.norm(x[:, 0])
        return (cls, maps) if return_attention else cls


def _as_frames(frames, dtype) -> torch.Tensor:
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(frames)
    if frames.dtype == torch.uint8:
        frames = frames.to(dtype) / 255.0
    return frames.to(dtype)


class DualStreamClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.main_backbone = build_backbone(cfg.main)
        self.fer_backbone = build_backbone(cfg.fer)
        dim = cfg.fused_dim
        self.temporal = TemporalTransformer(dim, cfg.transformer, cfg.max_seq_len)
        self.head = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, cfg.num_classes))

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def _encode(self, net, frames, feature_dim):
        x = _as_frames(frames, self.dtype)
        if x.ndim != 5 or x.shape[-1] != 3:
            raise ShapeMismatch(f"expected (B, T, H, W, 3) frames, got {tuple(x.shape)}")
        B, T = x.shape[:2]
        feats = net(x.flatten(0, 1).permute(0, 3, 1, 2))
        if feats.shape[-1] != feature_dim:
            raise ShapeMismatch(f"backbone produced {feats.shape[-1]} features, expected {feature_dim}")
        return feats.view(B, T, feature_dim)

    def encode_main(self, frames):
        return self._encode(self.main_backbone, frames, self.cfg.main.feature_dim)

    def encode_fer(self, frames):
        return self._encode(self.fer_backbone, frames, self.cfg.fer.feature_dim)

    @staticmethod
    def fuse(main_f, fer_f):
        if main_f.shape[:2] != fer_f.shape[:2]:
            raise ShapeMismatch(f"(B, T) mismatch: {tuple(main_f.shape)} vs {tuple(fer_f.shape)}")
        return torch.cat([main_f, fer_f], dim=-1)

    def temporal_decode(self, fused, return_attention=False):
        if fused.ndim != 3 or fused.shape[-1] != self.cfg.fused_dim:
            raise ShapeMismatch(f"expected (B, T, {self.cfg.fused_dim}), got {tuple(fused.shape)}")
        return self.temporal(fused, return_attention=return_attention)

    def logits(self, embedding):
        if embedding.ndim != 2 or embedding.shape[-1] != self.cfg.fused_dim:
            raise ShapeMismatch(
                f"expected (B, {self.cfg.fused_dim}) embeddings, got {tuple(embedding.shape)}"
            )
        return self.head(embedding)

    def classify(self, embedding):
        return self.logits(embedding).softmax(dim=-1)

    def forward_logits(self, main_frames, fer_frames):
        fused = self.fuse(self.encode_main(main_frames), self.encode_fer(fer_frames))
        return self.logits(self.temporal_decode(fused))

    def forward(self, batch):
        """Per-slice class probabilities, shape (num_slices, 2)."""
        return self.forward_logits(batch.main_frames, batch.fer_frames).softmax(dim=-1)

    @torch.no_grad()
    def predict(self, batch) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            return self.forward(batch).double().numpy()
        finally:
            self.train(was_training)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig, seed: int | None = None) -> DualStreamClassifier:
    if seed is not None:
        torch.manual_seed(seed)
    return DualStreamClassifier(cfg)
