"""
Report Decoder
==============
Transformer decoder trained from scratch that writes reports token by token.

Conditioning modes:
    cross_attention   every block self-attends over the text prefix, then
                      cross-attends over the image memory (embedded image
                      tokens, or projected feature maps)
    prefix_tokens     the 100 image tokens are embedded and placed in front of
                      the text; their output positions are cut off before the loss

Blocks are pre-norm with learned absolute position embeddings. Image tokens
get their own 100-entry embedding table; under cross-attention they also get
their own 100-entry position table, since token i stands for feature unit i.

The training loss is cross-entropy of the softmax against the next reference
token, i.e. the positive-class term of binary cross-entropy over a one-hot
vocabulary target. <pad> targets are ignored.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from common.errors import ConfigurationError, InvalidInputError
from models.encoder import N_TOKENS, FeatureMapProjector, to_feature_map_representation
from reports.tokenizer import EOS_ID, PAD_ID, SOS_ID

logger = logging.getLogger(__name__)

CONDITIONING = ("cross_attention", "prefix_tokens")
REPRESENTATIONS = ("tokens", "feature_maps")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    n_blocks: int = 6
    model_dim: int = 256
    n_heads: int = 8
    ffn_dim: int = 256
    max_len: int = 64
    conditioning: str = "cross_attention"
    representation: str = "feature_maps"
    feature_size: int = 64          # fh · fw of the encoder feature maps
    n_image_tokens: int = N_TOKENS
    activation: str = "relu"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.conditioning not in CONDITIONING:
            raise ConfigurationError(f"Unknown conditioning {self.conditioning!r}; choose from {CONDITIONING}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigurationError(f"Unknown representation {self.representation!r}; choose from {REPRESENTATIONS}")
        if self.conditioning == "prefix_tokens" and self.representation != "tokens":
            raise ConfigurationError("prefix_tokens conditioning needs the token representation")
        if self.model_dim % self.n_heads:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 5 or self.n_blocks < 1 or self.max_len < 2:
            raise ConfigurationError("vocab_size, n_blocks or max_len too small")
        if self.activation not in ("relu", "gelu"):
            raise ConfigurationError(f"Unknown activation {self.activation!r}")

    @property
    def architecture(self) -> str:
        return f"decoder:{self.conditioning}+{self.representation}"

    @property
    def prefix_len(self) -> int:
        return self.n_image_tokens if self.conditioning == "prefix_tokens" else 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationResult:
    ids: tuple[int, ...]                # starts with <sos>
    distributions: np.ndarray           # [steps, vocab]
    stop_reason: str                    # "eos" | "max_len"


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def causal_mask(n: int, device=None) -> torch.Tensor:
    """True above the diagonal = not allowed to attend."""
    return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig, cross_attention: bool):
        super().__init__()
        d = cfg.model_dim
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.n_heads, dropout=0.0, batch_first=True)
        self.cross = cross_attention
        if cross_attention:
            self.norm_cross = nn.LayerNorm(d)
            self.cross_attn = nn.MultiheadAttention(d, cfg.n_heads, dropout=0.0, batch_first=True)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, cfg.ffn_dim),
            nn.GELU() if cfg.activation == "gelu" else nn.ReLU(),
            nn.Linear(cfg.ffn_dim, d),
        )

    def forward(self, x: torch.Tensor, memory: Optional[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        if self.cross:
            h = self.norm_cross(x)
            x = x + self.cross_attn(h, memory, memory, need_weights=False)[0]
        return x + self.ffn(self.norm_ffn(x))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class ReportDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d, padding_idx=PAD_ID)
        self.position_embedding = nn.Embedding(cfg.prefix_len + cfg.max_len, d)
        cross = cfg.conditioning == "cross_attention"
        if cfg.representation == "tokens":
            self.image_token_embedding = nn.Embedding(cfg.n_image_tokens, d)
            if cross:
                # token i is unit i of the penultimate layer
                self.image_position_embedding = nn.Embedding(cfg.n_image_tokens, d)
        else:
            self.projector = FeatureMapProjector(cfg.feature_size, d)
        self.blocks = nn.ModuleList(DecoderBlock(cfg, cross) for _ in range(cfg.n_blocks))
        self.norm = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size)

    # -- image side --------------------------------------------------------

    def encode_image(self, image: Optional[torch.Tensor], batch: int = 1) -> torch.Tensor:
        """Image tokens [B, 100] (ints) or FeatureMapStack [B, chunks, C, fh, fw] → [B, m, d]."""
        if self.cfg.representation == "tokens":
            if image is None:
                image = torch.zeros(batch, self.cfg.n_image_tokens, dtype=torch.long,
                                    device=self.lm_head.weight.device)
            image = torch.as_tensor(image, device=self.lm_head.weight.device).long()
            if image.dim() != 2 or image.shape[1] != self.cfg.n_image_tokens:
                raise InvalidInputError(f"Expected [B, {self.cfg.n_image_tokens}] image tokens, got {tuple(image.shape)}")
            if image.min() < 0 or image.max() >= self.cfg.n_image_tokens:
                raise InvalidInputError("Image token outside [0, 99]")
            memory = self.image_token_embedding(image)
            if self.cfg.conditioning == "cross_attention":
                memory = memory + self.image_position_embedding(torch.arange(image.shape[1], device=image.device))
            return memory
        if image is None:
            raise InvalidInputError("Feature-map conditioning needs a feature map stack")
        return to_feature_map_representation(image, self.projector)

    # -- text side ---------------------------------------------------------

    def full_logits(self, tokens: torch.Tensor, image: Optional[torch.Tensor]) -> torch.Tensor:
        """Logits for every position, image prefix included: [B, prefix + T, V]."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        b, t = tokens.shape
        if t > self.cfg.max_len:
            raise InvalidInputError(f"Sequence of {t} tokens exceeds max_len {self.cfg.max_len}")
        memory = self.encode_image(image, b)
        x = self.token_embedding(tokens)
        memory_for_blocks = memory
        if self.cfg.conditioning == "prefix_tokens":
            x = torch.cat([memory, x], dim=1)
            memory_for_blocks = None
        positions = torch.arange(x.shape[1], device=x.device)
        x = x + self.position_embedding(positions)
        mask = causal_mask(x.shape[1], x.device)
        for block in self.blocks:
            x = block(x, memory_for_blocks, mask)
        return self.lm_head(self.norm(x))

    def forward(self, tokens: torch.Tensor, image: Optional[torch.Tensor]) -> torch.Tensor:
        """Logits at text positions only: [B, T, V]; position t predicts token t + 1."""
        return self.full_logits(tokens, image)[:, self.cfg.prefix_len:]

    def loss(self, reference: torch.Tensor, image: Optional[torch.Tensor]) -> torch.Tensor:
        if self.cfg.conditioning == "prefix_tokens":
            return loss_with_prefix_masking(self, reference, image)
        return sequence_loss(self(reference, image), reference)


def sequence_loss(text_logits: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Next-token cross-entropy, <pad> targets ignored."""
    logits = text_logits[:, :-1]
    targets = reference[:, 1:]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD_ID)


def prefix_masked_loss(full_logits: torch.Tensor, reference: torch.Tensor, prefix_len: int) -> torch.Tensor:
    """Loss from full-sequence logits with the image positions removed first."""
    return sequence_loss(full_logits[:, prefix_len:], reference)


def loss_with_prefix_masking(model: ReportDecoder, reference: torch.Tensor, image_tokens) -> torch.Tensor:
    if model.cfg.conditioning != "prefix_tokens":
        raise ConfigurationError("Prefix masking only applies to prefix_tokens conditioning")
    if reference.dim() == 1:
        reference = reference.unsqueeze(0)
    return prefix_masked_loss(model.full_logits(reference, image_tokens), reference, model.cfg.prefix_len)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _check_prefix(prefix: torch.Tensor) -> torch.Tensor:
    prefix = torch.as_tensor(prefix, dtype=torch.long)
    if prefix.dim() == 1:
        prefix = prefix.unsqueeze(0)
    if prefix.shape[1] == 0 or bool((prefix[:, 0] != SOS_ID).any()):
        raise InvalidInputError("Prefix must start with <sos>")
    return prefix


@torch.no_grad()
def decode_step(model: ReportDecoder, prefix, image) -> torch.Tensor:
    """Next-token distribution [B, V] given the prefix (which starts with <sos>)."""
    prefix = _check_prefix(prefix).to(model.lm_head.weight.device)
    return torch.softmax(model(prefix, image)[:, -1], dim=-1)


@torch.no_grad()
def teacher_forced_logits(model: ReportDecoder, reference, image) -> torch.Tensor:
    """Distributions [B, T - 1, V]; entry t conditions on reference tokens ≤ t."""
    reference = _check_prefix(reference).to(model.lm_head.weight.device)
    return torch.softmax(model(reference, image)[:, :-1], dim=-1)


@torch.no_grad()
def generate(model: ReportDecoder, image, max_len: Optional[int] = None) -> list[GenerationResult]:
    """Greedy decoding from <sos> until <eos> or ``max_len`` tokens (counting <sos>)."""
    max_len = min(max_len or model.cfg.max_len, model.cfg.max_len)
    device = model.lm_head.weight.device
    if isinstance(image, torch.Tensor):
        batch = image.shape[0]
    elif image is not None:
        batch = len(image)
    else:
        batch = 1
    ids = torch.full((batch, 1), SOS_ID, dtype=torch.long, device=device)
    done = torch.zeros(batch, dtype=torch.bool, device=device)
    dists: list[list[np.ndarray]] = [[] for _ in range(batch)]
    stop = ["max_len"] * batch
    while ids.shape[1] < max_len and not bool(done.all()):
        probs = torch.softmax(model(ids, image)[:, -1], dim=-1)
        nxt = probs.argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        for i in range(batch):
            if not done[i]:
                dists[i].append(probs[i].double().cpu().numpy())
                if int(nxt[i]) == EOS_ID:
                    stop[i] = "eos"
        ids = torch.cat([ids, nxt[:, None]], dim=1)
        done |= nxt == EOS_ID
    results = []
    for i in range(batch):
        seq = [int(t) for t in ids[i].tolist()]
        seq = seq[: 1 + len(dists[i])]
        results.append(GenerationResult(
            ids=tuple(seq),
            distributions=np.stack(dists[i]) if dists[i] else np.zeros((0, model.cfg.vocab_size)),
            stop_reason=stop[i],
        ))
    return results


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_decoder(cfg: DecoderConfig) -> ReportDecoder:
    model = ReportDecoder(cfg)
    logger.info(f"── Built {cfg.architecture}: {cfg.n_blocks} blocks, {count_parameters(model):,} parameters")
    return model
