"""
Encoder Models
==============
Feature extractors, abnormality classifiers and the two encoded-image
representations handed to the decoder.

Extractors:
    chunked_2d   volume split into 3-slice chunks, each chunk a 3-channel image
                 through a shared 2D CNN → FeatureMapStack [B, chunks, C, fh, fw]
    whole_3d     one 3D CNN over the whole volume → maps [B, C, d, h, w] + pooled [B, C]

Classifiers (all end in a 100-wide penultimate layer):
    conv3d             three 3D convolutions (channels as channels, chunks as depth),
                       then three linear layers
    attention_pooling  learned score per chunk, softmax over chunks, weighted mean,
                       fully connected to 100 then to the labels
    transformer        one self-attention block over chunk vectors, then attention pooling

The whole-volume extractor only pairs with conv3d.

Usage:
    cfg = EncoderConfig(extractor="chunked_2d", classifier="conv3d", n_labels=11)
    model = build_encoder(cfg)
    out = model(volumes)                  # volumes: [B, D, H, W] float tensor
    tokens = to_token_representation(out.penultimate)
"""

import logging
from dataclasses import dataclass, asdict
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from common.errors import ConfigurationError, InvalidInputError
from volumes.volume_core import Volume

logger = logging.getLogger(__name__)

CHUNK_SIZE = 3
N_TOKENS = 100
TOKEN_MAX = 99
TOKEN_SNAP = 1e-9

EXTRACTORS = ("chunked_2d", "whole_3d")
CLASSIFIERS = ("conv3d", "attention_pooling", "transformer")
SEQUENCE_CLASSIFIERS = ("attention_pooling", "transformer")
ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU}


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    extractor: str = "chunked_2d"
    classifier: str = "conv3d"
    n_labels: int = 11
    backbone_channels: tuple = (16, 32, 32)
    head_channels: int = 16
    hidden_dim: int = 128
    penultimate_dim: int = N_TOKENS
    transformer_dim: int = 64
    transformer_heads: int = 4
    activation: str = "relu"
    freeze_backbone: bool = False

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        self.validate()

    def validate(self) -> None:
        if self.extractor not in EXTRACTORS:
            raise ConfigurationError(f"Unknown extractor {self.extractor!r}; choose from {EXTRACTORS}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigurationError(f"Unknown classifier {self.classifier!r}; choose from {CLASSIFIERS}")
        if self.extractor == "whole_3d" and self.classifier in SEQUENCE_CLASSIFIERS:
            raise ConfigurationError(
                f"whole_3d features have no chunk axis and cannot feed the {self.classifier} classifier"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation {self.activation!r}")
        if self.n_labels < 1 or self.penultimate_dim < 1:
            raise ConfigurationError("n_labels and penultimate_dim must be positive")
        if self.transformer_dim % self.transformer_heads:
            raise ConfigurationError("transformer_dim must be divisible by transformer_heads")
        if self.extractor == "whole_3d" and len(self.backbone_channels) < 2:
            raise ConfigurationError("whole_3d needs at least two backbone channel widths")

    @property
    def architecture(self) -> str:
        return f"encoder:{self.extractor}+{self.classifier}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


@dataclass
class ClassifierOutput:
    logits: torch.Tensor                        # [B, n_labels]
    penultimate: torch.Tensor                   # [B, 100]
    attention: Optional[torch.Tensor] = None    # [B, chunks] for pooling heads


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

def n_chunks(depth: int) -> int:
    return -(-int(depth) // CHUNK_SIZE)


def chunk_slices(v: Union[Volume, np.ndarray]) -> np.ndarray:
    """[ceil(D/3), 3, H, W]; the last partial chunk repeats the final slice."""
    data = np.asarray(v.data if isinstance(v, Volume) else v)
    if data.ndim != 3 or data.shape[0] < 1:
        raise InvalidInputError(f"chunk_slices needs a 3D volume, got {data.shape}")
    pad = n_chunks(data.shape[0]) * CHUNK_SIZE - data.shape[0]
    if pad:
        data = np.concatenate([data, np.repeat(data[-1:], pad, axis=0)], axis=0)
    return data.reshape(-1, CHUNK_SIZE, *data.shape[1:])


def chunk_tensor(volumes: torch.Tensor) -> torch.Tensor:
    """Batched torch version: [B, D, H, W] → [B, chunks, 3, H, W]."""
    if volumes.dim() != 4:
        raise InvalidInputError(f"Expected [B, D, H, W] volumes, got {tuple(volumes.shape)}")
    depth = volumes.shape[1]
    pad = n_chunks(depth) * CHUNK_SIZE - depth
    if pad:
        volumes = torch.cat([volumes, volumes[:, -1:].expand(-1, pad, -1, -1)], dim=1)
    b, d, h, w = volumes.shape
    return volumes.reshape(b, d // CHUNK_SIZE, CHUNK_SIZE, h, w)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------

class Backbone2D(nn.Module):
    """Conv3x3 → activation → MaxPool(2), once per channel width."""

    def __init__(self, channels=(16, 32, 32), activation: str = "relu"):
        super().__init__()
        layers, in_ch = [], CHUNK_SIZE
        for out_ch in channels:
            layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), ACTIVATIONS[activation](), nn.MaxPool2d(2)]
            in_ch = out_ch
        self.net = nn.Sequential(*layers)
        self.out_channels = in_ch
        self.downsample = 2 ** len(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Backbone3D(nn.Module):
    """Strided 3D convolutions over the whole volume; returns maps and a pooled vector."""

    def __init__(self, channels=(16, 32), activation: str = "relu"):
        super().__init__()
        layers, in_ch = [], 1
        for out_ch in channels:
            layers += [nn.Conv3d(in_ch, out_ch, 3, stride=2, padding=1), ACTIVATIONS[activation]()]
            in_ch = out_ch
        self.net = nn.Sequential(*layers)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        maps = self.net(x)
        return maps, maps.mean(dim=(2, 3, 4))


def extract_features_chunked(volumes: torch.Tensor, backbone: Backbone2D) -> torch.Tensor:
    """FeatureMapStack [B, chunks, C, fh, fw]; every chunk through the same weights."""
    chunks = chunk_tensor(volumes)
    b, n, c, h, w = chunks.shape
    if h < backbone.downsample or w < backbone.downsample:
        raise InvalidInputError(f"Slices {h}x{w} are smaller than the backbone downsampling {backbone.downsample}")
    maps = backbone(chunks.reshape(b * n, c, h, w))
    return maps.reshape(b, n, *maps.shape[1:])


def extract_features_whole(volumes: torch.Tensor, backbone: Backbone3D) -> tuple[torch.Tensor, torch.Tensor]:
    """Whole-volume maps [B, C, d, h, w] and feature vector [B, C]."""
    if volumes.dim() != 4:
        raise InvalidInputError(f"Expected [B, D, H, W] volumes, got {tuple(volumes.shape)}")
    return backbone(volumes.unsqueeze(1))


# ---------------------------------------------------------------------------
# Classifier heads
# ---------------------------------------------------------------------------

class Conv3dHead(nn.Module):
    """
    Three 3D convolutions then three linear layers. Input is channel-first
    [B, C, depth, fh, fw]; the first convolution does not pad the depth axis,
    so at least ``min_depth`` chunks are needed.
    """

    depth_padding = (0, 1, 1)

    def __init__(self, in_channels: int, n_labels: int, channels: int = 16, hidden: int = 128,
                 penultimate: int = N_TOKENS, activation: str = "relu"):
        super().__init__()
        act = ACTIVATIONS[activation]
        convs, ch = [], in_channels
        for p in self.depth_padding:
            convs += [nn.Conv3d(ch, channels, 3, padding=(p, 1, 1)), act()]
            ch = channels
        self.convs = nn.Sequential(*convs)
        self.pool = nn.AdaptiveAvgPool3d((4, 2, 2))
        self.fc1 = nn.Linear(channels * 16, hidden)
        self.fc2 = nn.Linear(hidden, penultimate)
        self.out = nn.Linear(penultimate, n_labels)
        self.act = act()

    @property
    def min_depth(self) -> int:
        return 1 + sum(2 - 2 * p for p in self.depth_padding)

    def forward(self, x: torch.Tensor) -> ClassifierOutput:
        if x.shape[2] < self.min_depth:
            raise ConfigurationError(
                f"conv3d head needs at least {self.min_depth} chunks along depth, got {x.shape[2]}"
            )
        h = self.pool(self.convs(x)).flatten(1)
        penultimate = self.act(self.fc2(self.act(self.fc1(h))))
        return ClassifierOutput(self.out(penultimate), penultimate)


class AttentionPooling(nn.Module):
    """Softmax-normalized score per sequence element; one learned scoring vector."""

    def __init__(self, dim: int):
        super().__init__()
        self.score = nn.Linear(dim, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        weights = torch.softmax(self.score(x).squeeze(-1), dim=1)
        return torch.einsum("bn,bnf->bf", weights, x), weights


class AttentionPoolingHead(nn.Module):
    def __init__(self, feature_dim: int, n_labels: int, penultimate: int = N_TOKENS, activation: str = "relu"):
        super().__init__()
        self.pool = AttentionPooling(feature_dim)
        self.fc = nn.Linear(feature_dim, penultimate)
        self.out = nn.Linear(penultimate, n_labels)
        self.act = ACTIVATIONS[activation]()

    def forward(self, x: torch.Tensor) -> ClassifierOutput:
        """``x``: per-chunk vectors [B, chunks, F]."""
        pooled, weights = self.pool(x)
        penultimate = self.act(self.fc(pooled))
        return ClassifierOutput(self.out(penultimate), penultimate, weights)


class TransformerHead(nn.Module):
    """Self-attention block over chunk vectors (no positional encoding), then attention pooling."""

    def __init__(self, feature_dim: int, n_labels: int, dim: int = 64, heads: int = 4,
                 penultimate: int = N_TOKENS, activation: str = "relu"):
        super().__init__()
        self.proj = nn.Linear(feature_dim, dim)
        self.block = nn.TransformerEncoderLayer(
            d_model=dim, nhead=heads, dim_feedforward=2 * dim, dropout=0.0,
            activation=activation, batch_first=True,
        )
        self.head = AttentionPoolingHead(dim, n_labels, penultimate, activation)

    def forward(self, x: torch.Tensor) -> ClassifierOutput:
        return self.head(self.block(self.proj(x)))


def classify_3dconvs(fms: torch.Tensor, head: Conv3dHead) -> ClassifierOutput:
    """FeatureMapStack [B, chunks, C, fh, fw] → logits; chunks become the depth axis."""
    return head(fms.permute(0, 2, 1, 3, 4))


def _chunk_vectors(fms: torch.Tensor) -> torch.Tensor:
    if fms.dim() != 5:
        raise ConfigurationError("Sequence classifiers need a chunked FeatureMapStack [B, chunks, C, fh, fw]")
    return fms.flatten(2)


def classify_attention_pooling(fms: torch.Tensor, head: AttentionPoolingHead) -> ClassifierOutput:
    return head(_chunk_vectors(fms))


def classify_transformer(fms: torch.Tensor, head: TransformerHead) -> ClassifierOutput:
    return head(_chunk_vectors(fms))


# ---------------------------------------------------------------------------
# Full encoder
# ---------------------------------------------------------------------------

class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, input_shape=(64, 64, 64)):
        super().__init__()
        self.cfg = cfg
        depth, h, w = (int(s) for s in input_shape)
        if cfg.extractor == "chunked_2d":
            self.backbone = Backbone2D(cfg.backbone_channels, cfg.activation)
            fh, fw = h // self.backbone.downsample, w // self.backbone.downsample
            feature_dim = self.backbone.out_channels * fh * fw
            self.feature_map_size = (fh, fw)
        else:
            self.backbone = Backbone3D(cfg.backbone_channels[:2], cfg.activation)
            feature_dim = self.backbone.out_channels
            self.feature_map_size = None

        if cfg.classifier == "conv3d":
            self.head = Conv3dHead(self.backbone.out_channels, cfg.n_labels, cfg.head_channels,
                                   cfg.hidden_dim, cfg.penultimate_dim, cfg.activation)
        elif cfg.classifier == "attention_pooling":
            self.head = AttentionPoolingHead(feature_dim, cfg.n_labels, cfg.penultimate_dim, cfg.activation)
        else:
            self.head = TransformerHead(feature_dim, cfg.n_labels, cfg.transformer_dim,
                                        cfg.transformer_heads, cfg.penultimate_dim, cfg.activation)

        if cfg.freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def features(self, volumes: torch.Tensor) -> torch.Tensor:
        """FeatureMapStack for chunked extractors, 3D maps for the whole-volume one."""
        if self.cfg.extractor == "chunked_2d":
            return extract_features_chunked(volumes, self.backbone)
        maps, _ = extract_features_whole(volumes, self.backbone)
        return maps

    def forward(self, volumes: torch.Tensor) -> ClassifierOutput:
        fms = self.features(volumes)
        if self.cfg.extractor == "whole_3d":
            return self.head(fms)
        if self.cfg.classifier == "conv3d":
            return classify_3dconvs(fms, self.head)
        if self.cfg.classifier == "attention_pooling":
            return classify_attention_pooling(fms, self.head)
        return classify_transformer(fms, self.head)


def build_encoder(cfg: EncoderConfig, input_shape=(64, 64, 64)) -> Encoder:
    model = Encoder(cfg, input_shape)
    n_params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    logger.info(f"── Built {cfg.architecture} ({n_params:,} trainable parameters)")
    return model


# ---------------------------------------------------------------------------
# Encoded-image representations
# ---------------------------------------------------------------------------

def to_token_representation(penultimate) -> np.ndarray:
    """
    Rescale [min, max] of each 100-vector onto [0, 99] and round half away
    from zero; constant vectors give all zeros.
    """
    if isinstance(penultimate, torch.Tensor):
        penultimate = penultimate.detach().cpu().double().numpy()
    v = np.asarray(penultimate, dtype=np.float64)
    if v.shape[-1] != N_TOKENS:
        raise InvalidInputError(f"Token representation needs {N_TOKENS} values, got {v.shape[-1]}")
    lo = v.min(axis=-1, keepdims=True)
    span = v.max(axis=-1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = (v - lo) / safe * TOKEN_MAX
    scaled = np.round(scaled / TOKEN_SNAP) * TOKEN_SNAP
    tokens = np.floor(scaled + 0.5)
    tokens = np.where(span > 0, tokens, 0.0)
    return np.clip(tokens, 0, TOKEN_MAX).astype(np.int64)


class FeatureMapProjector(nn.Module):
    """Per chunk: mean over channels, flatten fh·fw, trainable linear to the decoder width."""

    def __init__(self, feature_size: int, embedding_dim: int):
        super().__init__()
        self.linear = nn.Linear(feature_size, embedding_dim)

    def reduce(self, fms: torch.Tensor) -> torch.Tensor:
        return fms.mean(dim=2).flatten(2)

    def forward(self, fms: torch.Tensor) -> torch.Tensor:
        return to_feature_map_representation(fms, self)


def to_feature_map_representation(fms: torch.Tensor, projector: FeatureMapProjector) -> torch.Tensor:
    """EncodedImageMemory [B, chunks, embedding_dim]."""
    if fms.dim() != 5:
        raise ConfigurationError("Feature-map representation needs a chunked FeatureMapStack")
    reduced = projector.reduce(fms)
    if reduced.shape[-1] != projector.linear.in_features:
        raise ConfigurationError(
            f"Projector expects {projector.linear.in_features} values per chunk, got {reduced.shape[-1]}"
        )
    return projector.linear(reduced)
