"""Multi-branch embedding network for person re-identification.

A shared residual trunk feeds N independent copies of the final stage. Each
branch i contributes i vertically pooled part vectors (so M = N(N+1)/2 parts
in total under adaptive pooling, or one global vector per branch when pooling
is "GAP_only", M = N). Every part vector passes through its own reduction
head (1x1 conv, batch norm, leaky rectifier) and its own linear classifier;
one softmax log-loss objective is attached per part.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

POOLING_MODES = ("AAP", "GAP_only")
BACKBONES = ("paper_scale", "desk_scale")
DESCRIPTOR_TAPS = ("pre_relu", "post_relu")


@dataclass(frozen=True)
class ModelConfig:
    num_branches: int = 3
    reduce_dim: int = 256
    last_stride: int = 1
    pooling: str = "AAP"
    num_classes: int = 751
    backbone: str = "paper_scale"
    pretrained: bool = False
    leaky_slope: float = 0.1
    descriptor_tap: str = "pre_relu"
    input_size: tuple[int, int] = (384, 128)

    def __post_init__(self):
        if self.num_branches < 1:
            raise ValueError(f"num_branches must be >= 1, got {self.num_branches}")
        if self.reduce_dim < 1:
            raise ValueError(f"reduce_dim must be >= 1, got {self.reduce_dim}")
        if self.last_stride not in (1, 2):
            raise ValueError(f"last_stride must be 1 or 2, got {self.last_stride}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.leaky_slope <= 0:
            raise ValueError(f"leaky_slope must be positive, got {self.leaky_slope}")
        if self.descriptor_tap not in DESCRIPTOR_TAPS:
            raise ValueError(
                f"descriptor_tap must be one of {DESCRIPTOR_TAPS}, got {self.descriptor_tap!r}")
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ValueError(f"input_size must be positive, got {self.input_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def num_part_vectors(num_branches: int, pooling: str = "AAP") -> int:
    """Total part count M across branches: N(N+1)/2 under AAP, N under GAP_only."""
    if num_branches < 1:
        raise ValueError(f"num_branches must be >= 1, got {num_branches}")
    if pooling not in POOLING_MODES:
        raise ValueError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
    if pooling == "AAP":
        return num_branches * (num_branches + 1) // 2
    return num_branches


def part_layout(num_branches: int, pooling: str = "AAP") -> list[tuple[int, int]]:
    """Ordered (branch, part_index) pairs for the M parts.

    Branches are numbered from 1; parts within a branch from 0, top to
    bottom. The order here fixes descriptor concatenation order everywhere.
    """
    layout = []
    for b in range(1, num_branches + 1):
        n_parts = b if pooling == "AAP" else 1
        for p in range(n_parts):
            layout.append((b, p))
    assert len(layout) == num_part_vectors(num_branches, pooling)
    return layout


def part_row_bins(height: int, n_parts: int) -> list[tuple[int, int]]:
    """Row ranges [start, end) of the n vertical bins over a map of given height.

    Part p covers rows floor(p*H/n) to ceil((p+1)*H/n); when H is not a
    multiple of n, adjacent bins overlap by the shared boundary rows.
    """
    if n_parts < 1:
        raise ValueError(f"n_parts must be >= 1, got {n_parts}")
    if height < 1:
        raise ValueError(f"height must be >= 1, got {height}")
    if n_parts > height:
        raise ValueError(f"cannot split height {height} into {n_parts} parts")
    bins = []
    for p in range(n_parts):
        start = (p * height) // n_parts
        end = -((-(p + 1) * height) // n_parts)
        bins.append((start, end))
    return bins


def adaptive_vertical_pool(fmap: torch.Tensor, n_parts: int) -> torch.Tensor:
    """Mean-pool a feature map into n vertical part vectors.

    Accepts (B, C, H, W) or (C, H, W); returns (B, n_parts, C) or
    (n_parts, C). n_parts=1 is global average pooling.
    """
    if fmap.dim() not in (3, 4):
        raise ValueError(f"expected (B, C, H, W) or (C, H, W), got shape {tuple(fmap.shape)}")
    height = fmap.shape[-2]
    bins = part_row_bins(height, n_parts)
    parts = [fmap[..., s:e, :].mean(dim=(-2, -1)) for s, e in bins]
    return torch.stack(parts, dim=-2)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with identity shortcut (expansion 1)."""

    expansion = 1

    def __init__(self, in_channels: int, width: int, stride: int = 1):
        super().__init__()
        out_channels = width * self.expansion
        self.conv1 = nn.Conv2d(in_channels, width, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand residual block (expansion 4)."""

    expansion = 4

    def __init__(self, in_channels: int, width: int, stride: int = 1):
        super().__init__()
        out_channels = width * self.expansion
        self.conv1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _make_stage(block, in_channels: int, width: int, depth: int, stride: int) -> nn.Sequential:
    layers = [block(in_channels, width, stride)]
    for _ in range(depth - 1):
        layers.append(block(width * block.expansion, width, 1))
    return nn.Sequential(*layers)


_BACKBONE_SPECS = {
    "paper_scale": {"block": Bottleneck, "widths": (64, 128, 256, 512), "depths": (3, 4, 6, 3)},
    "desk_scale": {"block": BasicBlock, "widths": (16, 32, 64, 128), "depths": (1, 1, 1, 1)},
}


class ReductionHead(nn.Module):
    """1x1 convolution, batch norm, leaky rectifier over a pooled part vector.

    forward returns (pre_activation, post_activation), both (B, out_channels);
    the descriptor tap picks one, the classifier always consumes the latter.
    """

    def __init__(self, in_channels: int, out_channels: int, leaky_slope: float = 0.1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1, bias=True)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.LeakyReLU(leaky_slope)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() == 2:
            x = x[:, :, None, None]
        elif x.dim() != 4 or x.shape[2] != 1 or x.shape[3] != 1:
            raise ValueError(f"expected (B, C) or (B, C, 1, 1), got {tuple(x.shape)}")
        pre = self.bn(self.conv(x)).flatten(1)
        return pre, self.act(pre)


class EnsembleNet(nn.Module):
    """Shared trunk, N final-stage branches, per-part reduction and classification."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        spec = _BACKBONE_SPECS[config.backbone]
        block, widths, depths = spec["block"], spec["widths"], spec["depths"]

        if config.backbone == "paper_scale":
            self.stem = nn.Sequential(
                nn.Conv2d(3, widths[0], 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, widths[0], 3, stride=1, padding=1, bias=False),
                nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True),
            )

        c = widths[0]
        self.stage1 = _make_stage(block, c, widths[0], depths[0], 1)
        c = widths[0] * block.expansion
        self.stage2 = _make_stage(block, c, widths[1], depths[1], 2)
        c = widths[1] * block.expansion
        self.stage3 = _make_stage(block, c, widths[2], depths[2], 2)
        c = widths[2] * block.expansion

        # One independent copy of the entire final stage per branch; the copy
        # starts at the stage's first, stride-carrying block.
        self.branches = nn.ModuleList([
            _make_stage(block, c, widths[3], depths[3], config.last_stride)
            for _ in range(config.num_branches)
        ])
        self.feature_channels = widths[3] * block.expansion

        self.part_layout = part_layout(config.num_branches, config.pooling)
        self.num_parts = len(self.part_layout)
        self.reductions = nn.ModuleList([
            ReductionHead(self.feature_channels, config.reduce_dim, config.leaky_slope)
            for _ in range(self.num_parts)
        ])
        self.classifiers = nn.ModuleList([
            nn.Linear(config.reduce_dim, config.num_classes)
            for _ in range(self.num_parts)
        ])

    @property
    def descriptor_dim(self) -> int:
        return self.config.reduce_dim * self.num_parts

    def trunk_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage3(self.stage2(self.stage1(self.stem(x))))

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Return (part_features, part_logits), each a list of M tensors.

        part_features[k] is (B, reduce_dim) taken at the configured tap;
        part_logits[k] is (B, num_classes). Order follows self.part_layout.
        """
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected input (B, 3, H, W), got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != tuple(self.config.input_size):
            raise ValueError(
                f"input spatial size {tuple(x.shape[2:])} does not match the "
                f"configured input size {tuple(self.config.input_size)}")
        trunk = self.trunk_forward(x)
        features, logits = [], []
        k = 0
        for b, branch in enumerate(self.branches, start=1):
            fmap = branch(trunk)
            n_parts = b if self.config.pooling == "AAP" else 1
            pooled = adaptive_vertical_pool(fmap, n_parts)
            for p in range(n_parts):
                pre, post = self.reductions[k](pooled[:, p])
                features.append(pre if self.config.descriptor_tap == "pre_relu" else post)
                logits.append(self.classifiers[k](post))
                k += 1
        return features, logits


def build_model(cfg: ModelConfig) -> EnsembleNet:
    """Construct an EnsembleNet (parameters still need init_model)."""
    return EnsembleNet(cfg)


def softmax_log_loss(logits, labels, reduction: str = "sum") -> torch.Tensor:
    """Softmax negative log-likelihood of the true classes.

    ``logits`` is (B, C), ``labels`` (B,) with values in [0, C). The "sum"
    reduction adds the per-sample losses; "mean" divides by B. Computation
    shifts by the row max (via logsumexp), so extreme logits stay finite.
    """
    logits = torch.as_tensor(logits)
    if not logits.is_floating_point():
        logits = logits.double()
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2:
        raise ValueError(f"logits must be (B, C), got {tuple(logits.shape)}")
    if labels.shape != logits.shape[:1]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match "
                         f"batch size {logits.shape[0]}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("labels out of range for the number of classes")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    per_sample = torch.logsumexp(logits, dim=1) - logits.gather(1, labels[:, None]).squeeze(1)
    return per_sample.sum() if reduction == "sum" else per_sample.mean()


def init_model(model: EnsembleNet, pretrained: dict | None = None, seed: int = 0) -> EnsembleNet:
    """Re-initialize every parameter in place, then optionally load a backbone.

    Convolution and linear weights get fan-based He-normal draws from a
    dedicated generator (so results depend only on ``seed``); all biases are
    zeroed; batch-norm scales are 1, shifts 0, running stats reset.

    ``pretrained`` is a mapping of single-network backbone arrays (keys
    ``stem.*``, ``stage1.*`` .. ``stage4.*``); final-stage weights are copied
    into every branch. Name or shape mismatches are all collected into one
    error.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, mode="fan_out",
                                        nonlinearity="relu", generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.reset_running_stats()
    if pretrained is not None:
        _load_backbone(model, pretrained)
    return model


def _load_backbone(model: EnsembleNet, weights: dict) -> None:
    state = model.state_dict()
    updates = {}
    problems = []
    for name, value in weights.items():
        tensor = torch.as_tensor(np.asarray(value))
        if name.startswith("stage4."):
            targets = [f"branches.{i}.{name[len('stage4.'):]}"
                       for i in range(len(model.branches))]
        else:
            targets = [name]
        for target in targets:
            if target not in state:
                problems.append(f"no model parameter for backbone entry {name!r}")
                break
            if tuple(state[target].shape) != tuple(tensor.shape):
                problems.append(
                    f"shape mismatch for {name!r}: file {tuple(tensor.shape)}, "
                    f"model {tuple(state[target].shape)}")
                break
            updates[target] = tensor.to(state[target].dtype)
    if problems:
        raise ValueError("backbone weight mismatches:\n  " + "\n  ".join(problems))
    model.load_state_dict(updates, strict=False)


def extract_backbone_state(model: EnsembleNet) -> dict[str, np.ndarray]:
    """Single-network backbone arrays from the trunk plus branch 0 as stage4."""
    out = {}
    for name, value in model.state_dict().items():
        if name.startswith(("stem.", "stage1.", "stage2.", "stage3.")):
            out[name] = value.detach().cpu().numpy().copy()
        elif name.startswith("branches.0."):
            out["stage4." + name[len("branches.0."):]] = value.detach().cpu().numpy().copy()
    return out


def parameter_counts(model: EnsembleNet) -> dict[str, int]:
    trunk = sum(p.numel() for m in (model.stem, model.stage1, model.stage2, model.stage3)
                for p in m.parameters())
    branches = sum(p.numel() for p in model.branches.parameters())
    heads = sum(p.numel() for m in (model.reductions, model.classifiers)
                for p in m.parameters())
    return {"trunk": trunk, "branches": branches, "heads": heads,
            "total": trunk + branches + heads}


_CONFIG_KEY = "__config__"


def save_checkpoint(model: EnsembleNet, path) -> None:
    """Write model weights and configuration to a self-describing .npz file."""
    arrays = {name: value.detach().cpu().numpy()
              for name, value in model.state_dict().items()}
    config_bytes = json.dumps(model.config.to_dict()).encode("utf-8")
    arrays[_CONFIG_KEY] = np.frombuffer(config_bytes, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> EnsembleNet:
    """Rebuild a model from a checkpoint, validating every name and shape.

    All mismatches (missing entries, unexpected entries, wrong shapes) are
    reported together in a single error.
    """
    with np.load(path) as archive:
        if _CONFIG_KEY not in archive:
            raise ValueError(f"checkpoint {path} has no embedded model configuration")
        config = ModelConfig.from_dict(json.loads(bytes(archive[_CONFIG_KEY]).decode("utf-8")))
        model = EnsembleNet(config)
        state = model.state_dict()
        stored = {k: archive[k] for k in archive.files if k != _CONFIG_KEY}
    problems = []
    for name in sorted(set(state) - set(stored)):
        problems.append(f"missing entry {name!r}")
    for name in sorted(set(stored) - set(state)):
        problems.append(f"unexpected entry {name!r}")
    for name in sorted(set(stored) & set(state)):
        if tuple(stored[name].shape) != tuple(state[name].shape):
            problems.append(f"shape mismatch for {name!r}: file {tuple(stored[name].shape)}, "
                            f"model {tuple(state[name].shape)}")
    if problems:
        raise ValueError(f"checkpoint {path} does not match its configuration:\n  "
                         + "\n  ".join(problems))
    model.load_state_dict({name: torch.as_tensor(arr.copy()) for name, arr in stored.items()})
    return model
