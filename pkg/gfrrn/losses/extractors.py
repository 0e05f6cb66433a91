"""Feature extractors for the perceptual loss. Each returns five tapped feature maps."""
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import vgg19

VGG_TAPS = (2, 7, 12, 21, 30)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class VGGExtractor(nn.Module):
    """
    Frozen VGG-19 feature stack tapped after layers 2, 7, 12, 21 and 30.

    Args:
        weights: torchvision weights enum or name (e.g. ``"IMAGENET1K_V1"``);
            ``None`` gives a randomly initialised, fixed network.

    Example:
        .. code-block:: python

            from gfrrn.losses import VGGExtractor, perceptual_loss
            loss = perceptual_loss(t_hat, T, VGGExtractor(weights="IMAGENET1K_V1"))
    """

    def __init__(self, weights=None, taps=VGG_TAPS):
        super().__init__()
        self.taps = tuple(taps)
        features = vgg19(weights=weights).features
        self.features = nn.Sequential(*list(features)[: max(self.taps) + 1]).eval()
        for param in self.features.parameters():
            param.requires_grad = False
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def train(self, mode=True):
        super().train(mode)
        self.features.eval()
        return self

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        outputs = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                outputs.append(x)
        return outputs


class IdentityExtractor(nn.Module):
    """Five copies of the input."""

    def forward(self, x):
        return [x] * 5


class RandomConvExtractor(nn.Module):
    """Fixed random 3x3 conv + ReLU chain with a tap after each stage."""

    def __init__(self, channels=8, seed=0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        prev = 3
        for _ in range(5):
            conv = nn.Conv2d(prev, channels, kernel_size=3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * 0.2)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=generator) * 0.1)
            conv.requires_grad_(False)
            self.stages.append(conv)
            prev = channels

    def forward(self, x):
        outputs = []
        for conv in self.stages:
            x = torch.relu(F.conv2d(x, conv.weight.to(x.dtype), conv.bias.to(x.dtype), padding=1))
            outputs.append(x)
        return outputs
