"""Sound event detection transformer.

Convolutional backbone -> time-only sinusoidal positional encoding ->
transformer encoder over the flattened T*F grid -> non-autoregressive
decoder over learned event queries -> prediction heads.

The same module serves fine-tuning (event classes + background, boundary,
clip tagging from a prepended audio query) and random-patch pretraining
(patch/background, boundary, feature reconstruction, no audio query).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_encoder_blocks: int = 3
    n_decoder_blocks: int = 3
    n_heads: int = 4
    n_queries: int = 10
    n_patches: int = 2
    n_classes: int = 3
    n_mels: int = 64
    backbone_channels: tuple[int, ...] = (32, 64, 128, 128)
    backbone_strides: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (2, 2), (1, 1))
    ffn_hidden: int = 256
    dropout: float = 0.0

    def validate(self, pretrain: bool = False) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoidal encoding")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ConfigError("backbone_channels and backbone_strides differ in length")
        if self.n_queries < 1 or self.n_classes < 1:
            raise ConfigError("n_queries and n_classes must be positive")
        if pretrain and (self.n_patches < 1 or self.n_queries % self.n_patches):
            raise ConfigError(
                f"n_queries={self.n_queries} must be a multiple of n_patches={self.n_patches}")

    @property
    def feature_dim(self) -> int:
        return self.backbone_channels[-1]

    def to_json(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["backbone_strides"] = [list(s) for s in self.backbone_strides]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        if "backbone_channels" in obj:
            obj["backbone_channels"] = tuple(obj["backbone_channels"])
        if "backbone_strides" in obj:
            obj["backbone_strides"] = tuple(tuple(s) for s in obj["backbone_strides"])
        return cls(**obj)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PredictionSet:
    """Batched head outputs.

    class_logits: [B, N, C] (C = n_classes + 1 when fine-tuning, 2 when pretraining).
    boundaries:   [B, N, 2] as (center, length) in (0, 1).
    tag_probs:    [B, n_classes] or None.
    recon:        [B, N, feature_dim] or None.
    """

    class_logits: torch.Tensor
    boundaries: torch.Tensor
    tag_probs: Optional[torch.Tensor] = None
    recon: Optional[torch.Tensor] = None

    @property
    def class_probs(self) -> torch.Tensor:
        return self.class_logits.softmax(-1)


class Backbone(nn.Module):
    """Strided 3x3 conv blocks (conv -> batch norm -> ReLU).

    Each block pads by one, so every stride ``s`` maps a length ``n`` to
    ``ceil(n / s)``.
    """

    def __init__(self, channels=(32, 64, 128, 128), strides=((2, 2),) * 3 + ((1, 1),)):
        super().__init__()
        layers = []
        c_in = 1
        for c_out, stride in zip(channels, strides):
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=tuple(stride), padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.strides = [tuple(s) for s in strides]
        self.out_channels = c_in

    @property
    def time_stride(self) -> int:
        return math.prod(s[0] for s in self.strides)

    @property
    def receptive_field(self) -> int:
        """Receptive field along time, in input frames."""
        rf, jump = 1, 1
        for st, _ in self.strides:
            rf += 2 * jump
            jump *= st
        return rf

    def output_size(self, t: int, f: int) -> tuple[int, int]:
        for st, sf in self.strides:
            t, f = -(-t // st), -(-f // sf)
        return t, f

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: [B, T_s, n_mels] spectrogram -> [B, C, T, F] feature map."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[1] < self.receptive_field:
            raise ValueError(
                f"input of {x.shape[1]} frames is shorter than the receptive field "
                f"({self.receptive_field} frames)")
        return self.body(x.unsqueeze(1))


def gap_patch_feature(backbone: nn.Module, patch: torch.Tensor) -> torch.Tensor:
    """Global-average-pooled backbone feature of a spectrogram crop.

    ``patch`` is [T_p, n_mels] or [B, T_p, n_mels]; returns [C] or [B, C].
    """
    squeeze = patch.dim() == 2
    fmap = backbone(patch)
    p = fmap.mean(dim=(2, 3))
    return p[0] if squeeze else p


def positional_encoding(t: int, f: int, d: int) -> torch.Tensor:
    """Sinusoidal encoding of the time index only, shape [d, t, f]."""
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / (10000.0 ** (i / d))
    pe = torch.zeros(d, t, dtype=torch.float64)
    pe[0::2] = torch.sin(angle).T
    pe[1::2] = torch.cos(angle).T
    return pe[:, :, None].expand(d, t, f).to(torch.float32).contiguous()


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout=0.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pos):
        q = k = x + pos
        x = self.norm1(x + self.drop(self.attn(q, k, x, need_weights=False)[0]))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout=0.0):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, tgt, memory, memory_pos, query_pos):
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.drop(self.self_attn(q, k, tgt, need_weights=False)[0]))
        ca = self.cross_attn(tgt + query_pos, memory + memory_pos, memory, need_weights=False)[0]
        tgt = self.norm2(tgt + self.drop(ca))
        return self.norm3(tgt + self.drop(self.ffn(tgt)))


class MLP(nn.Module):
    def __init__(self, d_in, d_hidden, d_out, n_layers):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


# parameter-name prefix -> transfer group
PARAM_GROUPS = {
    "backbone": ("backbone.",),
    "encoder": ("input_proj.", "encoder."),
    "decoder": ("decoder.",),
    "event_queries": ("event_queries",),
    "boundary_head": ("boundary_head.",),
    "class_head": ("class_head.",),
    "audio_query": ("audio_query",),
    "tagging_head": ("tagging_head.",),
    "patch_proj": ("patch_proj.",),
    "recon_head": ("recon_head.",),
}


def param_group(name: str) -> str:
    for group, prefixes in PARAM_GROUPS.items():
        if any(name.startswith(p) for p in prefixes):
            return group
    raise KeyError(f"parameter {name!r} belongs to no group")


class SEDT(nn.Module):
    """Event-based detector; ``pretrain=True`` builds the patch-detection variant."""

    def __init__(self, config: ModelConfig, pretrain: bool = False):
        super().__init__()
        config.validate(pretrain)
        self.config = config
        self.pretrain = pretrain
        d = config.d_model
        self.backbone = Backbone(config.backbone_channels, config.backbone_strides)
        c = self.backbone.out_channels
        self.input_proj = nn.Conv2d(c, d, 1)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.ffn_hidden, config.dropout)
            for _ in range(config.n_encoder_blocks))
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.ffn_hidden, config.dropout)
            for _ in range(config.n_decoder_blocks))
        self.event_queries = nn.Parameter(torch.randn(config.n_queries, d) * 0.1)
        self.boundary_head = MLP(d, d, 2, 3)
        if pretrain:
            self.class_head = nn.Linear(d, 2)
            self.recon_head = nn.Linear(d, c)
            self.patch_proj = nn.Linear(c, d) if c != d else nn.Identity()
        else:
            self.class_head = nn.Linear(d, config.n_classes + 1)
            self.audio_query = nn.Parameter(torch.randn(1, d) * 0.1)
            self.tagging_head = nn.Linear(d, config.n_classes)

    @property
    def background_index(self) -> int:
        return 1 if self.pretrain else self.config.n_classes

    def group_names(self) -> list[str]:
        return sorted({param_group(n) for n, _ in self.named_parameters()})

    def backbone_forward(self, spectrogram: torch.Tensor) -> torch.Tensor:
        return self.backbone(spectrogram)

    def encode(self, src: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        """Run the encoder stack on an already flattened ``[B, L, d]`` sequence.

        ``src`` must already contain the positional encoding; ``pos`` is
        re-added to queries/keys inside every attention layer.
        """
        x = src
        for layer in self.encoder:
            x = layer(x, pos)
        return x

    def encode_feature_map(self, z0: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[B, C, T, F] backbone output -> (memory [B, T*F, d], pos [1, T*F, d])."""
        z = self.input_proj(z0)
        _, d, t, f = z.shape
        pe = positional_encoding(t, f, d).to(z.dtype)
        pos = pe.flatten(1).T.unsqueeze(0)
        src = (z + pe).flatten(2).transpose(1, 2)
        return self.encode(src, pos), pos

    def build_decoder_queries(self, batch: int, patch_features: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Finetune: [audio, q_1..q_N]. Pretrain: q_i + p_g for the g-th block of N/M queries."""
        q = self.event_queries.unsqueeze(0).expand(batch, -1, -1)
        if not self.pretrain:
            if patch_features is not None:
                raise ValueError("patch features are only used in pretraining mode")
            audio = self.audio_query.unsqueeze(0).expand(batch, -1, -1)
            return torch.cat([audio, q], dim=1)
        if patch_features is None:
            raise ValueError("pretraining mode requires patch features")
        n, m = self.config.n_queries, patch_features.shape[1]
        if m < 1 or n % m:
            raise ConfigError(f"n_queries={n} is not a multiple of the patch count {m}")
        p = self.patch_proj(patch_features)
        return q + p.repeat_interleave(n // m, dim=1)

    def decode(self, memory: torch.Tensor, queries: torch.Tensor, memory_pos: torch.Tensor) -> torch.Tensor:
        tgt = queries
        for layer in self.decoder:
            tgt = layer(tgt, memory, memory_pos, queries)
        return tgt

    def heads(self, embeddings: torch.Tensor) -> PredictionSet:
        if self.pretrain:
            events = embeddings
            return PredictionSet(
                class_logits=self.class_head(events),
                boundaries=self.boundary_head(events).sigmoid(),
                recon=self.recon_head(events),
            )
        audio, events = embeddings[:, 0], embeddings[:, 1:]
        return PredictionSet(
            class_logits=self.class_head(events),
            boundaries=self.boundary_head(events).sigmoid(),
            tag_probs=self.tagging_head(audio).sigmoid(),
        )

    def forward(self, spectrogram: torch.Tensor, patch_features: Optional[torch.Tensor] = None) -> PredictionSet:
        """``spectrogram``: [B, T_s, n_mels]; ``patch_features``: [B, M, C] when pretraining."""
        z0 = self.backbone_forward(spectrogram)
        memory, pos = self.encode_feature_map(z0)
        queries = self.build_decoder_queries(spectrogram.shape[0], patch_features)
        return self.heads(self.decode(memory, queries, pos))


def save_state(path: str | Path, config: ModelConfig, state_dict: dict, pretrain: bool,
               meta: Optional[dict] = None) -> None:
    """Write a versioned checkpoint container (config snapshot + named tensors)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": config.to_json(),
        "config_hash": config.config_hash(),
        "pretrain": pretrain,
        "state_dict": {k: v.detach().clone() for k, v in state_dict.items()},
        "meta": meta or {},
    }, path)


def save_checkpoint(model: SEDT, path: str | Path, meta: Optional[dict] = None) -> None:
    save_state(path, model.config, model.state_dict(), model.pretrain, meta)


def load_checkpoint(path: str | Path, expected: Optional[ModelConfig] = None,
                    force_transfer: bool = False) -> dict:
    """Read a checkpoint container; reject a config-hash mismatch unless forced."""
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    if expected is not None and ckpt["config_hash"] != expected.config_hash() and not force_transfer:
        raise CheckpointError(
            f"{path}: model config hash {ckpt['config_hash']} != {expected.config_hash()} "
            "(pass force_transfer to load anyway)")
    return ckpt


def model_from_checkpoint(path: str | Path) -> SEDT:
    ckpt = load_checkpoint(path)
    model = SEDT(ModelConfig.from_json(ckpt["config"]), pretrain=ckpt["pretrain"])
    model.load_state_dict(ckpt["state_dict"])
    return model.eval()
