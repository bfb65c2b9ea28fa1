"""Three-encoder architecture: vision encoder, text encoder, cross-attention fusion.

The vision encoder is a ViT over square patches; the text encoder a masked
Transformer; the fusion encoder runs text queries over image keys/values in
every layer, so its output length equals the text length. CLS summaries from
each stream feed the contrastive projections and the matching/MLM heads.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

SIMILARITY_MODES = ("projected", "raw")

NUM_CHANNELS = 3


@dataclass(frozen=True)
class ModelConfig:
    vision_layers: int = 4
    text_layers: int = 2
    fusion_layers: int = 2
    hidden_dim: int = 128
    heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    vocab_size: int = 512
    max_text_len: int = 32
    projection_dim: int = 64
    similarity: str = "projected"

    def __post_init__(self):
        counts = {
            "vision_layers": self.vision_layers,
            "text_layers": self.text_layers,
            "fusion_layers": self.fusion_layers,
            "hidden_dim": self.hidden_dim,
            "heads": self.heads,
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "vocab_size": self.vocab_size,
            "max_text_len": self.max_text_len,
            "projection_dim": self.projection_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} must be divisible by heads {self.heads}"
            )
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by patch_size {self.patch_size}"
            )
        if self.similarity not in SIMILARITY_MODES:
            raise ValueError(f"similarity must be one of {SIMILARITY_MODES}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def embedding_dim(self) -> int:
        """Dimension of the contrastive embeddings (mode dependent)."""
        return self.projection_dim if self.similarity == "projected" else self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class EncodedImage:
    cls: torch.Tensor      # (B, D)
    tokens: torch.Tensor   # (B, n_v, D)

    @property
    def sequence(self) -> torch.Tensor:
        return torch.cat([self.cls.unsqueeze(1), self.tokens], dim=1)


@dataclass
class EncodedText:
    cls: torch.Tensor      # (B, D)
    tokens: torch.Tensor   # (B, n_t, D)
    mask: torch.Tensor     # (B, n_t + 1) including the CLS slot

    @property
    def sequence(self) -> torch.Tensor:
        return torch.cat([self.cls.unsqueeze(1), self.tokens], dim=1)


@dataclass
class FusedSequence:
    cls: torch.Tensor      # (B, D)
    tokens: torch.Tensor   # (B, n_t, D)

    @property
    def sequence(self) -> torch.Tensor:
        return torch.cat([self.cls.unsqueeze(1), self.tokens], dim=1)


def normalize_embeddings(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalize rows; zero rows are floored at eps (and left near zero)."""
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < eps).any()):
        logger.warning("normalizing near-zero embedding; norm floored at %g", eps)
    return x / norms.clamp_min(eps)


class MultiHeadAttention(nn.Module):
    """Attention with an optional key-padding mask (1 = attend, 0 = ignore).

    Masked keys get -inf scores, so their post-softmax weight is exactly zero
    and padded positions cannot leak into unmasked outputs.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value, key_mask=None):
        b, lq, d = query.shape
        lk = key.shape[1]
        q = self.q_proj(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(key_mask[:, None, None, :] == 0, float("-inf"))
        attn = F.softmax(scores, dim=-1)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(b, lq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-LN self-attention block."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim)

    def forward(self, x, key_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_mask=key_mask)
        x = x + self.mlp(self.norm2(x))
        return x


class FusionBlock(nn.Module):
    """Self-attention over text, cross-attention to image tokens, then FFN."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim)

    def forward(self, x, image_seq, text_mask=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, key_mask=text_mask)
        x = x + self.cross_attn(self.norm2(x), image_seq, image_seq)
        x = x + self.mlp(self.norm3(x))
        return x


class VisionEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        patch_dim = NUM_CHANNELS * config.patch_size ** 2
        self.patch_embed = nn.Linear(patch_dim, config.hidden_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.hidden_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, config.hidden_dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(config.hidden_dim, config.heads) for _ in range(config.vision_layers)
        )
        self.norm = nn.LayerNorm(config.hidden_dim)

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, n_v, patch_size**2 * C), row-major patch order."""
        b, h, w, c = pixels.shape
        p = self.config.patch_size
        x = pixels.reshape(b, h // p, p, w // p, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def embed_patches(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(self.patchify(pixels))

    def encode_sequence(self, seq: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            seq = block(seq)
        return self.norm(seq)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        tokens = self.embed_patches(pixels)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        seq = torch.cat([cls, tokens], dim=1) + self.pos_embed
        return self.encode_sequence(seq)


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.max_text_len + 1, config.hidden_dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(config.hidden_dim, config.heads) for _ in range(config.text_layers)
        )
        self.norm = nn.LayerNorm(config.hidden_dim)

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        seq = self.token_embed(token_ids) + self.pos_embed[:, : token_ids.shape[1]]
        for block in self.blocks:
            seq = block(seq, key_mask=mask)
        return self.norm(seq)


class FusionEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            FusionBlock(config.hidden_dim, config.heads) for _ in range(config.fusion_layers)
        )
        self.norm = nn.LayerNorm(config.hidden_dim)

    def forward(self, text_seq, image_seq, text_mask=None):
        x = text_seq
        for block in self.blocks:
            x = block(x, image_seq, text_mask=text_mask)
        return self.norm(x)


class VisionTextModel(nn.Module):
    """Dual encoders plus fusion, with contrastive projections and ITM/MLM heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.vision = VisionEncoder(config)
        self.text = TextEncoder(config)
        self.fusion = FusionEncoder(config)
        self.image_proj = nn.Linear(config.hidden_dim, config.projection_dim)
        self.text_proj = nn.Linear(config.hidden_dim, config.projection_dim)
        self.itm_head = nn.Linear(config.hidden_dim, 2)
        self.mlm_head = nn.Linear(config.hidden_dim, config.vocab_size)
        self.apply(self._init_module)
        nn.init.trunc_normal_(self.vision.cls_token, std=0.02)
        nn.init.trunc_normal_(self.vision.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.text.pos_embed, std=0.02)

    @staticmethod
    def _init_module(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.trunc_normal_(module.weight, std=0.02)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.image_proj.weight.dtype

    @property
    def device(self) -> torch.device:
        return self.image_proj.weight.device

    def _as_pixels(self, pixels) -> torch.Tensor:
        if isinstance(pixels, np.ndarray):
            pixels = torch.from_numpy(pixels)
        if pixels.dim() == 3:
            pixels = pixels.unsqueeze(0)
        if pixels.dim() != 4:
            raise ContractError(f"pixels must be (B, H, W, C), got {tuple(pixels.shape)}")
        b, h, w, c = pixels.shape
        s = self.config.image_size
        if h != s or w != s or c != NUM_CHANNELS:
            raise ContractError(
                f"pixels must be (B, {s}, {s}, {NUM_CHANNELS}), got {tuple(pixels.shape)}"
            )
        return pixels.to(device=self.device, dtype=self.dtype)

    def encode_image(self, pixels) -> EncodedImage:
        seq = self.vision(self._as_pixels(pixels))
        return EncodedImage(cls=seq[:, 0], tokens=seq[:, 1:])

    def encode_text(self, token_ids, mask) -> EncodedText:
        token_ids = torch.as_tensor(token_ids, dtype=torch.long, device=self.device)
        mask = torch.as_tensor(mask, dtype=torch.long, device=self.device)
        if token_ids.dim() == 1:
            token_ids = token_ids.unsqueeze(0)
            mask = mask.unsqueeze(0)
        if token_ids.shape != mask.shape:
            raise ContractError(
                f"token_ids {tuple(token_ids.shape)} and mask {tuple(mask.shape)} differ"
            )
        if token_ids.shape[1] > self.config.max_text_len + 1:
            raise ContractError(
                f"text length {token_ids.shape[1]} exceeds max_text_len + CLS = "
                f"{self.config.max_text_len + 1}"
            )
        if bool((token_ids < 0).any()) or bool((token_ids >= self.config.vocab_size).any()):
            raise ContractError(
                f"token id out of vocabulary range [0, {self.config.vocab_size})"
            )
        seq = self.text(token_ids, mask)
        return EncodedText(cls=seq[:, 0], tokens=seq[:, 1:], mask=mask)

    def fuse(self, image: EncodedImage, text: EncodedText) -> FusedSequence:
        d = self.config.hidden_dim
        if image.cls.shape[-1] != d or text.cls.shape[-1] != d:
            raise ContractError(
                f"encoder dims {image.cls.shape[-1]}/{text.cls.shape[-1]} do not match "
                f"hidden_dim {d}"
            )
        fused = self.fusion(text.sequence, image.sequence, text_mask=text.mask)
        return FusedSequence(cls=fused[:, 0], tokens=fused[:, 1:])

    def project_cls(self, cls_vector: torch.Tensor, head: str) -> torch.Tensor:
        if head not in ("image", "text"):
            raise ValueError(f"head must be 'image' or 'text', got {head!r}")
        if cls_vector.shape[-1] != self.config.hidden_dim:
            raise ContractError(
                f"cls vector dim {cls_vector.shape[-1]} != hidden_dim {self.config.hidden_dim}"
            )
        proj = self.image_proj if head == "image" else self.text_proj
        return normalize_embeddings(proj(cls_vector))

    def image_embedding(self, pixels) -> torch.Tensor:
        """Unit-norm contrastive embedding for images (honors the similarity mode)."""
        cls = self.encode_image(pixels).cls
        if self.config.similarity == "raw":
            return normalize_embeddings(cls)
        return self.project_cls(cls, "image")

    def text_embedding(self, token_ids, mask) -> torch.Tensor:
        cls = self.encode_text(token_ids, mask).cls
        if self.config.similarity == "raw":
            return normalize_embeddings(cls)
        return self.project_cls(cls, "text")

    def itm_logits(self, fused_cls: torch.Tensor) -> torch.Tensor:
        return self.itm_head(fused_cls)

    def mlm_logits(self, fused: FusedSequence) -> torch.Tensor:
        """Vocabulary logits over the full fused sequence (CLS slot included)."""
        return self.mlm_head(fused.sequence)


def save_checkpoint(path: str | Path, model: VisionTextModel, extra: dict | None = None) -> None:
    """Versioned container: config block + named parameter arrays (+ extras)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(),
            "model_state": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[VisionTextModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig.from_dict(payload["config"])
    model = VisionTextModel(config)
    sample = next(iter(payload["model_state"].values()))
    if sample.dtype == torch.float64:
        model = model.double()
    model.load_state_dict(payload["model_state"], strict=True)
    return model, payload.get("extra", {})


def import_pretrained_backbone(model: VisionTextModel, checkpoint_path: str | Path,
                               stream: str = "vision") -> None:
    """Hook for initializing encoders from externally pre-trained weights."""
    raise NotImplementedError(
        "importing external backbone weights is not implemented; encoders are "
        "trained from the truncated-normal initialization"
    )
