"""ResNet-18 class backbones with named feature taps."""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

# Feature tap per method. Stage names follow torchvision; the jigsaw/rotnet taps are
# the second and third residual stages (layer3/layer4 in the 1-indexed naming that
# counts the stem as layer1).
TAPS = {
    "moco_v2": "pool",
    "byol": "pool",
    "msf": "pool",
    "jigsaw": "layer2",
    "rotnet": "layer3",
    "compress_student": "pool",
}


class SplitBatchNorm(nn.BatchNorm2d):
    """Batch norm whose training statistics are computed on ``num_splits`` sub-batches.

    Stands in for cross-device shuffled BN on a single device, so that a query
    and its key never share normalisation statistics.
    """

    def __init__(self, num_features: int, num_splits: int):
        super().__init__(num_features)
        self.num_splits = num_splits

    def forward(self, x):
        n, c, h, w = x.shape
        if not self.training or self.num_splits == 1:
            return super().forward(x)
        s = self.num_splits
        mean = self.running_mean.repeat(s)
        var = self.running_var.repeat(s)
        out = F.batch_norm(
            x.view(-1, c * s, h, w), mean, var, self.weight.repeat(s), self.bias.repeat(s),
            True, self.momentum, self.eps,
        ).view(n, c, h, w)
        with torch.no_grad():
            self.running_mean.copy_(mean.view(s, c).mean(dim=0))
            self.running_var.copy_(var.view(s, c).mean(dim=0))
            self.num_batches_tracked += 1
        return out


def _norm(planes: int, splits: int) -> nn.Module:
    return nn.BatchNorm2d(planes) if splits <= 1 else SplitBatchNorm(planes, splits)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1, bn_splits: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = _norm(planes, bn_splits)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = _norm(planes, bn_splits)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                _norm(planes, bn_splits),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """ResNet-18 with a configurable width and stem.

    ``stem="cifar"`` is a 3x3 stride-1 convolution without max-pooling, suited to
    32-96 px inputs; ``stem="imagenet"`` is the usual 7x7/2 conv plus max-pool.
    """

    def __init__(self, width: int = 64, stem: str = "cifar", bn_splits: int = 1):
        super().__init__()
        self.width = width
        self.stem_kind = stem
        self.bn_splits = bn_splits
        if stem == "cifar":
            self.stem = nn.Sequential(
                nn.Conv2d(3, width, 3, 1, 1, bias=False), _norm(width, bn_splits), nn.ReLU(inplace=True)
            )
        elif stem == "imagenet":
            self.stem = nn.Sequential(
                nn.Conv2d(3, width, 7, 2, 3, bias=False),
                _norm(width, bn_splits),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
        else:
            raise ValueError(f"unknown stem {stem!r}")
        planes = [width, 2 * width, 4 * width, 8 * width]
        self.layer1 = self._stage(width, planes[0], 1)
        self.layer2 = self._stage(planes[0], planes[1], 2)
        self.layer3 = self._stage(planes[1], planes[2], 2)
        self.layer4 = self._stage(planes[2], planes[3], 2)
        self.feature_dims = {"layer1": planes[0], "layer2": planes[1], "layer3": planes[2], "pool": planes[3]}

    def _stage(self, in_planes, planes, stride):
        return nn.Sequential(
            BasicBlock(in_planes, planes, stride, self.bn_splits),
            BasicBlock(planes, planes, 1, self.bn_splits),
        )

    @property
    def out_dim(self) -> int:
        return self.feature_dims["pool"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x, "pool")

    def features(self, x: torch.Tensor, tap: str = "pool") -> torch.Tensor:
        """Globally average-pooled activations at ``tap``."""
        if tap not in self.feature_dims:
            raise ValueError(f"unknown tap {tap!r}")
        x = self.stem(x)
        for name in ("layer1", "layer2", "layer3", "layer4"):
            x = getattr(self, name)(x)
            if name == tap:
                break
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def mlp(in_dim: int, hidden_dim: int, out_dim: int, batch_norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Linear(in_dim, hidden_dim)]
    if batch_norm:
        layers.append(nn.BatchNorm1d(hidden_dim))
    layers += [nn.ReLU(inplace=True), nn.Linear(hidden_dim, out_dim)]
    return nn.Sequential(*layers)
