"""Convolutional building blocks shared by the learned stages."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """U-shaped encoder-decoder returning per-pixel logits.

    Inputs of any size are reflect-padded up to a multiple of
    ``2 ** (levels - 1)`` and the output is cropped back.
    """

    def __init__(self, in_channels, out_channels, base_channels=8, levels=4):
        super().__init__()
        self.levels = levels
        widths = [base_channels * 2**i for i in range(levels)]
        self.down = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.down.append(_double_conv(c, w))
            c = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(c, w, 2, stride=2))
            self.dec.append(_double_conv(2 * w, w))
            c = w
        self.head = nn.Conv2d(c, out_channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** (self.levels - 1)
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect" if min(h, w) > max(ph, pw) else "replicate")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < self.levels - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)[..., :h, :w]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class BiomarkerNet(nn.Module):
    """ResNet18-topology regressor from a one-channel mask to per-A-line thickness.

    The feature map is averaged over depth, projected to one value per
    remaining column and linearly resampled to the input width, so the
    output has one thickness (in pixels, >= 0) per input A-line.
    """

    def __init__(self, base_channels=8):
        super().__init__()
        c = base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, c, 7, 2, 3, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        stages = []
        cin = c
        for i, cout in enumerate([c, 2 * c, 4 * c, 8 * c]):
            stride = 1 if i == 0 else 2
            stages += [BasicBlock(cin, cout, stride), BasicBlock(cout, cout)]
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv1d(cin, 1, 1)
        nn.init.constant_(self.head.bias, -2.0)
        self.frozen = False

    def forward(self, mask):
        h, w = mask.shape[-2:]
        f = self.stages(self.stem(mask))
        z = self.head(f.mean(dim=2))
        z = F.interpolate(z, size=w, mode="linear", align_corners=False)
        return h * F.softplus(z[:, 0])

    def biomarker(self, mask):
        """Mean predicted thickness per sample."""
        return self(mask).mean(dim=-1)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def train(self, mode=True):
        # a frozen regressor stays in inference mode
        return super().train(mode and not getattr(self, "frozen", False))
