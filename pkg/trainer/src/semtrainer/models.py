"""Torch architectures mirroring the verifier's closed layer set
(conv / transposed conv / ReLU / add / flatten / linear: no pooling or
normalization layers, so every trained model is exportable)."""

from __future__ import annotations

import torch
import torch.nn as nn


class Encoder(nn.Module):
    """CNN with 8 channels and one FC layer down to the latent dimension."""

    def __init__(self, in_ch: int, hw: int, latent_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, 8, kernel_size=3, stride=2, padding=1)
        self.act = nn.ReLU()
        self.half = hw // 2
        self.fc = nn.Linear(8 * self.half * self.half, latent_dim)

    def forward(self, x):
        h = self.act(self.conv(x))
        return self.fc(h.flatten(1))


class Decoder(nn.Module):
    """One FC layer back up, then a transposed convolution to image size."""

    def __init__(self, out_ch: int, hw: int, latent_dim: int):
        super().__init__()
        self.half = hw // 2
        self.fc = nn.Linear(latent_dim, 8 * self.half * self.half)
        self.act = nn.ReLU()
        self.deconv = nn.ConvTranspose2d(8, out_ch, kernel_size=4, stride=2, padding=1)

    def forward(self, z):
        h = self.act(self.fc(z))
        h = h.view(-1, 8, self.half, self.half)
        return self.deconv(h)


class ClassifierFC(nn.Module):
    """2-layer FC pragmatic model (128 hidden units, 10 classes)."""

    def __init__(self, in_ch: int, hw: int, classes: int = 10):
        super().__init__()
        self.fc1 = nn.Linear(in_ch * hw * hw, 128)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(128, classes)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x.flatten(1))))


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        h = self.c2(self.act(self.c1(x)))
        return self.act(h + x)


class ClassifierResNet(nn.Module):
    """Desk-scale residual pragmatic model: stride-2 stem to 8 channels,
    three residual blocks, FC head (no pooling, so it stays exportable)."""

    def __init__(self, in_ch: int, hw: int, classes: int = 10):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, 8, 3, stride=2, padding=1)
        self.act = nn.ReLU()
        self.blocks = nn.ModuleList([ResidualBlock(8) for _ in range(3)])
        self.half = hw // 2
        self.fc = nn.Linear(8 * self.half * self.half, classes)

    def forward(self, x):
        h = self.act(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return self.fc(h.flatten(1))


class Generator(nn.Module):
    """Perturbation generator: 3-layer FC, 32 neurons per hidden layer."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, 32), nn.ReLU(),
            nn.Linear(32, 32), nn.ReLU(),
            nn.Linear(32, latent_dim),
        )

    def forward(self, r):
        return self.net(r)


class Discriminator(nn.Module):
    """2-layer FC, 16 neurons: scores whether a latent signal looks Gaussian."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, 16), nn.ReLU(),
            nn.Linear(16, 1),
        )

    def forward(self, z):
        return self.net(z)


def make_classifier(dataset: str, in_ch: int, hw: int, classes: int = 10) -> nn.Module:
    if dataset == "cifar10":
        return ClassifierResNet(in_ch, hw, classes)
    return ClassifierFC(in_ch, hw, classes)
