"""Miniature set-prediction detector: strided conv backbone, channel
projection, transformer encoder-decoder over learned queries, and linear
classification / MLP regression heads.

Every parameter belongs to exactly one ParamGroup. The projection layer and
classification head form the class-specific partition; backbone, transformer
(including query embeddings) and regression head are class-agnostic. The
projection output feature map is exposed on every forward pass so it can be
imitated during distillation.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass
from enum import Enum

import torch
import torch.nn as nn

CHECKPOINT_VERSION = 1


class ParamGroup(str, Enum):
    BACKBONE = "backbone"
    PROJECTION = "projection"
    TRANSFORMER = "transformer"
    CLS_HEAD = "cls_head"
    REG_HEAD = "reg_head"


CLASS_SPECIFIC = frozenset({ParamGroup.PROJECTION, ParamGroup.CLS_HEAD})
CLASS_AGNOSTIC = frozenset({ParamGroup.BACKBONE, ParamGroup.TRANSFORMER, ParamGroup.REG_HEAD})
ALL_GROUPS = frozenset(ParamGroup)

_GROUP_PREFIXES = {
    "backbone.": ParamGroup.BACKBONE,
    "projection.": ParamGroup.PROJECTION,
    "encoder.": ParamGroup.TRANSFORMER,
    "decoder.": ParamGroup.TRANSFORMER,
    "query_embed.": ParamGroup.TRANSFORMER,
    "cls_head.": ParamGroup.CLS_HEAD,
    "reg_head.": ParamGroup.REG_HEAD,
}


@dataclass(frozen=True)
class ModelConfig:
    num_base: int = 3
    num_novel: int = 2
    image_size: int = 96
    backbone_channels: tuple[int, ...] = (16, 32, 48, 64)
    proj_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    num_queries: int = 20
    ffn_dim: int = 128
    dropout: float = 0.0
    cls_bias_prior: float = 0.01

    def __post_init__(self):
        if self.proj_dim % self.heads != 0:
            raise ValueError("proj_dim must be divisible by heads")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8 (three stride-2 stages)")

    @property
    def num_classes(self) -> int:
        """Total head capacity: base + novel + the reserved proposal class."""
        return self.num_base + self.num_novel + 1

    @property
    def pseudo_class(self) -> int:
        return self.num_base + self.num_novel

    @property
    def feature_size(self) -> int:
        return self.image_size // 8

    @property
    def base_class_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_base))

    @property
    def novel_class_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_base, self.num_base + self.num_novel))

    @property
    def real_class_ids(self) -> tuple[int, ...]:
        return self.base_class_ids + self.novel_class_ids


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, M, C)
    boxes: torch.Tensor  # (B, M, 4) center form, sigmoid-bounded
    features: torch.Tensor  # (B, proj_dim, h, w) projection output

    def image(self, i: int) -> "ModelOutput":
        return ModelOutput(self.logits[i], self.boxes[i], self.features[i])


def _conv_block(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    groups = math.gcd(8, c_out)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
    )


def _sinusoidal_positions(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-d sine/cosine grid encoding, (h * w, dim)."""
    if dim % 4 != 0:
        raise ValueError("position encoding dim must be divisible by 4")
    quarter = dim // 4
    freq = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys = torch.arange(h, dtype=torch.float32)[:, None] * freq
    xs = torch.arange(w, dtype=torch.float32)[:, None] * freq
    y_enc = torch.cat([ys.sin(), ys.cos()], dim=1)  # (h, dim/2)
    x_enc = torch.cat([xs.sin(), xs.cos()], dim=1)  # (w, dim/2)
    grid = torch.cat(
        [
            y_enc[:, None, :].expand(h, w, dim // 2),
            x_enc[None, :, :].expand(h, w, dim // 2),
        ],
        dim=-1,
    )
    return grid.reshape(h * w, dim)


class Detector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = config.backbone_channels
        strides = [2, 2, 2] + [1] * (len(chans) - 3)
        blocks = []
        c_prev = 3
        for c, s in zip(chans, strides):
            blocks.append(_conv_block(c_prev, c, s))
            c_prev = c
        self.backbone = nn.Sequential(*blocks)
        self.projection = nn.Conv2d(c_prev, config.proj_dim, kernel_size=1)

        enc_layer = nn.TransformerEncoderLayer(
            config.proj_dim, config.heads, config.ffn_dim, config.dropout, batch_first=True
        )
        dec_layer = nn.TransformerDecoderLayer(
            config.proj_dim, config.heads, config.ffn_dim, config.dropout, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(enc_layer, config.encoder_layers)
        self.decoder = nn.TransformerDecoder(dec_layer, config.decoder_layers)
        self.query_embed = nn.Embedding(config.num_queries, config.proj_dim)

        self.cls_head = nn.Linear(config.proj_dim, config.num_classes)
        self.reg_head = nn.Sequential(
            nn.Linear(config.proj_dim, config.proj_dim),
            nn.ReLU(inplace=True),
            nn.Linear(config.proj_dim, config.proj_dim),
            nn.ReLU(inplace=True),
            nn.Linear(config.proj_dim, 4),
        )

        s = config.feature_size
        self.register_buffer("pos_encoding", _sinusoidal_positions(s, s, config.proj_dim))

        prior = config.cls_bias_prior
        nn.init.constant_(self.cls_head.bias, -math.log((1 - prior) / prior))

    def forward(self, images: torch.Tensor) -> ModelOutput:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-1] != self.config.image_size:
            raise ValueError(
                f"expected (B, 3, {self.config.image_size}, {self.config.image_size}) input, "
                f"got {tuple(images.shape)}"
            )
        feats = self.projection(self.backbone(images))  # (B, d, h, w)
        b, d, h, w = feats.shape
        src = feats.flatten(2).transpose(1, 2) + self.pos_encoding  # (B, hw, d)
        memory = self.encoder(src)
        queries = self.query_embed.weight.unsqueeze(0).expand(b, -1, -1)
        hs = self.decoder(queries, memory)  # (B, M, d)
        logits = self.cls_head(hs)
        boxes = self.reg_head(hs).sigmoid()
        return ModelOutput(logits=logits, boxes=boxes, features=feats)

    def param_group_of(self, name: str) -> ParamGroup:
        for prefix, group in _GROUP_PREFIXES.items():
            if name.startswith(prefix):
                return group
        raise KeyError(f"parameter {name!r} has no group")

    def parameters_in(self, groups: frozenset[ParamGroup] | set[ParamGroup]):
        for name, p in self.named_parameters():
            if self.param_group_of(name) in groups:
                yield name, p

    def set_trainable(self, groups: set[ParamGroup] | frozenset[ParamGroup]) -> None:
        """Only parameters in `groups` receive gradients / optimizer updates."""
        for name, p in self.named_parameters():
            p.requires_grad_(self.param_group_of(name) in groups)

    def clone_frozen(self) -> "Detector":
        """Deep copy in evaluation mode with every parameter frozen."""
        clone = copy.deepcopy(self)
        clone.eval()
        for p in clone.parameters():
            p.requires_grad_(False)
        return clone


def hash_params(model: Detector, groups: frozenset[ParamGroup] | set[ParamGroup] = ALL_GROUPS) -> str:
    """Order-stable sha256 over the named parameters of the given groups."""
    digest = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if model.param_group_of(name) in groups:
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


class CheckpointError(Exception):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


def checkpoint_payload(model: Detector) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": {k: v.clone() for k, v in model.state_dict().items()},
    }


def save_checkpoint(model: Detector, path) -> None:
    torch.save(checkpoint_payload(model), path)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Detector:
    """Restore a detector; raises distinct errors for corrupt files, version
    mismatches, and config mismatches."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointCorruptError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointCorruptError(f"checkpoint {path} has no format version")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {payload['format_version']} != supported {CHECKPOINT_VERSION}"
        )
    raw = dict(payload["config"])
    raw["backbone_channels"] = tuple(raw["backbone_channels"])
    config = ModelConfig(**raw)
    if expected_config is not None and config != expected_config:
        raise CheckpointConfigError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    model = Detector(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except Exception as exc:
        raise CheckpointCorruptError(f"state dict does not fit config: {exc}") from exc
    return model
