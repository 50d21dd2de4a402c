"""Frame-pair + semantic-map fusion network with twin regression heads.

Wiring: a convolutional backbone embeds each frame of the 0.4 s pair; each
timestep's embedding is concatenated with that timestep's encoded semantic
vector and the 2-step sequence runs through an LSTM. The final LSTM output is
concatenated with the current semantic encoding (or, behind the ``lstm_bypass``
flag, the current image embedding) and fed to independent angle and speed
heads. Heads predict in normalized target space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from .core import NormalizationStats
from .errors import ConfigurationError, NumericError, ValidationError

CHECKPOINT_VERSION = 1

PAPER_FC_HIDDEN = (256, 128)
PAPER_HEAD_HIDDEN = (1024, 512, 256)
PAPER_HEAD_DROPOUT = 0.10
PAPER_BACKBONES = ("resnet34", "resnet152")


@dataclass(frozen=True)
class BackboneSpec:
    name: str  # desk | resnet34 | resnet152
    pretrained: bool = False
    # desk backbone only: per-block output channels (each block halves H and W)
    desk_channels: tuple[int, ...] = (16, 32, 64, 64)


@dataclass(frozen=True)
class FusionConfig:
    """Everything needed to rebuild the network deterministically."""

    backbone: BackboneSpec = BackboneSpec("desk")
    input_resolution: tuple[int, int] = (64, 36)  # (width, height)
    use_semantic: bool = True
    semantic_dim: int = 20
    fc_hidden: tuple[int, int] = PAPER_FC_HIDDEN
    lstm_hidden: int = 128
    head_hidden: tuple[int, int, int] = PAPER_HEAD_HIDDEN
    head_dropout: float = PAPER_HEAD_DROPOUT
    lstm_bypass: str = "semantic"  # semantic | image | none
    init_seed: int = 0
    paper_faithful: bool = False

    def __post_init__(self):
        if self.use_semantic and self.semantic_dim <= 0:
            raise ConfigurationError("use_semantic=True requires semantic_dim > 0")
        if not self.use_semantic and self.semantic_dim != 0:
            raise ConfigurationError("use_semantic=False requires semantic_dim == 0")
        if self.lstm_bypass not in ("semantic", "image", "none"):
            raise ConfigurationError(f"unknown lstm_bypass {self.lstm_bypass!r}")
        if len(self.fc_hidden) != 2 or len(self.head_hidden) != 3:
            raise ConfigurationError("fc_hidden must have 2 widths and head_hidden 3")
        if self.paper_faithful:
            if self.fc_hidden != PAPER_FC_HIDDEN:
                raise ConfigurationError(f"paper_faithful pins fc_hidden to {PAPER_FC_HIDDEN}")
            if self.head_hidden != PAPER_HEAD_HIDDEN:
                raise ConfigurationError(f"paper_faithful pins head_hidden to {PAPER_HEAD_HIDDEN}")
            if self.head_dropout != PAPER_HEAD_DROPOUT:
                raise ConfigurationError(f"paper_faithful pins head_dropout to {PAPER_HEAD_DROPOUT}")
            if self.backbone.name not in PAPER_BACKBONES:
                raise ConfigurationError(f"paper_faithful requires a backbone in {PAPER_BACKBONES}")
            if self.use_semantic and self.semantic_dim not in (20, 47):
                raise ConfigurationError("paper_faithful semantic_dim must be 20 or 47")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = asdict(self.backbone)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        d = dict(d)
        b = d.pop("backbone")
        return cls(
            backbone=BackboneSpec(b["name"], bool(b["pretrained"]), tuple(b["desk_channels"])),
            input_resolution=tuple(d["input_resolution"]),
            use_semantic=bool(d["use_semantic"]),
            semantic_dim=int(d["semantic_dim"]),
            fc_hidden=tuple(d["fc_hidden"]),
            lstm_hidden=int(d["lstm_hidden"]),
            head_hidden=tuple(d["head_hidden"]),
            head_dropout=float(d["head_dropout"]),
            lstm_bypass=str(d["lstm_bypass"]),
            init_seed=int(d["init_seed"]),
            paper_faithful=bool(d["paper_faithful"]),
        )


class ModelOutput(NamedTuple):
    angle: torch.Tensor  # (B,) normalized-space prediction
    speed: torch.Tensor


class DeskBackbone(nn.Module):
    """Small strided conv stack so the full pipeline trains on a CPU."""

    def __init__(self, channels: tuple[int, ...], input_resolution: tuple[int, int]):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 3
        for c in channels:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.GroupNorm(1, c), nn.ReLU()]
            prev = c
        self.features = nn.Sequential(*layers)
        w, h = input_resolution
        with torch.no_grad():
            probe = self.features(torch.zeros(1, 3, h, w))
        self.output_dim = int(probe.numel())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).flatten(1)


class ResNetBackbone(nn.Module):
    """torchvision residual backbone with the classifier head removed."""

    def __init__(self, name: str, pretrained: bool):
        super().__init__()
        import torchvision.models as tvm  # deferred: desk mode must not need it

        if name == "resnet34":
            net = tvm.resnet34(weights=tvm.ResNet34_Weights.IMAGENET1K_V1 if pretrained else None)
        elif name == "resnet152":
            net = tvm.resnet152(weights=tvm.ResNet152_Weights.IMAGENET1K_V1 if pretrained else None)
        else:
            raise ConfigurationError(f"unknown resnet variant {name!r}")
        self.output_dim = int(net.fc.in_features)
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_backbone(spec: BackboneSpec, input_resolution: tuple[int, int]) -> nn.Module:
    if spec.name == "desk":
        return DeskBackbone(spec.desk_channels, input_resolution)
    if spec.name in PAPER_BACKBONES:
        return ResNetBackbone(spec.name, spec.pretrained)
    raise ConfigurationError(f"unknown backbone {spec.name!r}")


class SemanticEncoder(nn.Module):
    """Two hidden affine layers with ReLU after each; output width fc_hidden[1]."""

    def __init__(self, in_dim: int, fc_hidden: tuple[int, int]):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, fc_hidden[0]),
            nn.ReLU(),
            nn.Linear(fc_hidden[0], fc_hidden[1]),
            nn.ReLU(),
        )
        self.output_dim = fc_hidden[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"semantic input width {x.shape[-1]} does not match configured {self.in_dim}"
            )
        return self.net(x)


class RegressorHead(nn.Module):
    """Three (affine, ReLU, dropout) blocks, then an affine to one scalar."""

    def __init__(self, in_dim: int, hidden: tuple[int, int, int], dropout: float):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.ReLU(), nn.Dropout(dropout)]
            prev = width
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


class FusionModel(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config.backbone, config.input_resolution)
        if config.use_semantic:
            self.semantic_encoder = SemanticEncoder(config.semantic_dim, config.fc_hidden)
            sem_width = self.semantic_encoder.output_dim
        else:
            self.semantic_encoder = None
            sem_width = 0
        lstm_in = self.backbone.output_dim + sem_width
        self.lstm = nn.LSTM(lstm_in, config.lstm_hidden, batch_first=True)
        if config.lstm_bypass == "semantic" and config.use_semantic:
            head_in = config.lstm_hidden + sem_width
        elif config.lstm_bypass == "image":
            head_in = config.lstm_hidden + self.backbone.output_dim
        else:
            head_in = config.lstm_hidden
        self.angle_head = RegressorHead(head_in, config.head_hidden, config.head_dropout)
        self.speed_head = RegressorHead(head_in, config.head_hidden, config.head_dropout)

    def encode_semantic(self, sem: torch.Tensor) -> torch.Tensor:
        if self.semantic_encoder is None:
            raise ConfigurationError("model was built with use_semantic=False")
        return self.semantic_encoder(sem)

    def _check_finite(self, t: torch.Tensor, layer: str) -> torch.Tensor:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite activations after {layer}")
        return t

    def forward(
        self,
        images_prev: torch.Tensor,  # (B, 3, H, W), channel-normalized
        images_curr: torch.Tensor,
        sem_prev: torch.Tensor | None = None,  # (B, D) raw feature values
        sem_curr: torch.Tensor | None = None,
        state: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> tuple[ModelOutput, tuple[torch.Tensor, torch.Tensor]]:
        w, h = self.config.input_resolution
        if images_curr.shape[-2:] != (h, w):
            raise ConfigurationError(
                f"image shape {tuple(images_curr.shape[-2:])} does not match configured {(h, w)}"
            )
        feat_prev = self._check_finite(self.backbone(images_prev), "backbone")
        feat_curr = self._check_finite(self.backbone(images_curr), "backbone")
        if self.config.use_semantic:
            if sem_prev is None or sem_curr is None:
                raise ConfigurationError("use_semantic=True but no semantic inputs given")
            enc_prev = self.encode_semantic(sem_prev)
            enc_curr = self.encode_semantic(sem_curr)
            step_prev = torch.cat([feat_prev, enc_prev], dim=1)
            step_curr = torch.cat([feat_curr, enc_curr], dim=1)
        else:
            enc_curr = None
            step_prev, step_curr = feat_prev, feat_curr
        seq = torch.stack([step_prev, step_curr], dim=1)
        lstm_out, new_state = self.lstm(seq, state)
        last = self._check_finite(lstm_out[:, -1, :], "lstm")
        if self.config.lstm_bypass == "semantic" and enc_curr is not None:
            fused = torch.cat([last, enc_curr], dim=1)
        elif self.config.lstm_bypass == "image":
            fused = torch.cat([last, feat_curr], dim=1)
        else:
            fused = last
        angle = self._check_finite(self.angle_head(fused), "angle_head")
        speed = self._check_finite(self.speed_head(fused), "speed_head")
        return ModelOutput(angle, speed), new_state

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_fusion_model(config: FusionConfig) -> FusionModel:
    """Construct with deterministic initialization (uniform fan-in, seeded)."""
    torch.manual_seed(config.init_seed)
    return FusionModel(config)


def semantic_param_delta(config: FusionConfig) -> int:
    """Exact parameter-count change from severing the semantic path of ``config``.

    Covers the FC encoder itself, the widened LSTM input, and (for the
    default wiring) the widened first layer of each head. Equals
    parameter_count(config) - parameter_count(config with use_semantic=False).
    """
    if not config.use_semantic:
        raise ConfigurationError("semantic_param_delta needs a semantic-enabled config")
    d = config.semantic_dim
    h1, h2 = config.fc_hidden
    encoder = d * h1 + h1 + h1 * h2 + h2
    lstm_ih = 4 * config.lstm_hidden * h2
    heads = 2 * config.head_hidden[0] * h2 if config.lstm_bypass == "semantic" else 0
    return encoder + lstm_ih + heads


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: Path,
    model: FusionModel,
    stats: NormalizationStats,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    """Versioned container sufficient for bit-exact prediction reload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "stats": stats.to_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


@dataclass
class LoadedCheckpoint:
    model: FusionModel
    stats: NormalizationStats
    epoch: int
    optimizer_state: dict | None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    config = FusionConfig.from_dict(payload["model_config"])
    model = FusionModel(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return LoadedCheckpoint(
        model=model,
        stats=NormalizationStats.from_dict(payload["stats"]),
        epoch=int(payload["epoch"]),
        optimizer_state=payload.get("optimizer_state"),
        extra=payload.get("extra", {}),
    )
