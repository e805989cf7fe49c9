"""Network architectures shared by the VAE, GAN, alignment, and classifier code.

Layer sizes follow the fixed family used throughout this project: a 9-layer
dense autoencoder for simple 28x28 data, a 3-conv/3-deconv pair (mirrored into
the WGAN critic/generator), an extended pair for CelebA/CIFAR, and the
translator MLP that merges per-task latents with binary task codes.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required."""


class ContractViolation(RuntimeError):
    """A caller or invariant contract was broken."""


class TrainingDivergence(RuntimeError):
    """Loss became non-finite during optimization."""


LEAKY_SLOPE = 0.2
LOG_SIGMA_MIN = float(np.log(1e-4))
LOG_SIGMA_MAX = float(np.log(1e4))


def binary_task_code(tasks, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed binary encoding of task indices, LSB first, padded to `width` bits."""
    tasks = torch.as_tensor(tasks, dtype=torch.long, device=device)
    if tasks.dim() == 0:
        tasks = tasks.unsqueeze(0)
    if int(tasks.max()) >= 2**width:
        raise ContractViolation(f"task index {int(tasks.max())} does not fit in {width} bits")
    bits = torch.arange(width, device=device)
    return ((tasks.unsqueeze(1) >> bits) & 1).to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def conv_trunk_parameters(module: nn.Module) -> int:
    """Parameters of the convolutional trunk only (the mirrored part of the
    encoder/critic and decoder/generator pairs)."""
    return sum(
        p.numel()
        for m in module.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))
        for p in m.parameters()
    )


def _act():
    return nn.LeakyReLU(LEAKY_SLOPE)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


class DenseEncoder(nn.Module):
    """784 -> 512 -> 128 -> 64 trunk with continuous and binary heads."""

    def __init__(self, in_dim: int, d_c: int, d_b: int):
        super().__init__()
        self.d_c, self.d_b = d_c, d_b
        self.trunk = nn.Sequential(
            nn.Linear(in_dim, 512), _act(),
            nn.Linear(512, 128), _act(),
            nn.Linear(128, 64), _act(),
        )
        self.head_mu = nn.Linear(64, d_c)
        self.head_log_sigma = nn.Linear(64, d_c)
        self.head_p = nn.Linear(64, d_b) if d_b else None

    def forward(self, x):
        h = self.trunk(x.flatten(1))
        mu = self.head_mu(h)
        sigma = torch.exp(self.head_log_sigma(h).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        p = torch.sigmoid(self.head_p(h)) if self.head_p is not None else None
        return mu, sigma, p


class ConvEncoder(nn.Module):
    """Three 32-filter 4x4/stride-2 convolutions, then latent heads."""

    def __init__(self, image_shape, d_c: int, d_b: int, norm: bool = True):
        super().__init__()
        c = image_shape[0]
        self.d_c, self.d_b = d_c, d_b
        layers = []
        for i in range(3):
            layers.append(nn.Conv2d(c if i == 0 else 32, 32, 4, stride=2, padding=1))
            if norm:
                layers.append(nn.BatchNorm2d(32))
            layers.append(_act())
        self.trunk = nn.Sequential(*layers)
        with torch.no_grad():
            feat = self.trunk(torch.zeros(1, *image_shape)).numel()
        self.feat_dim = feat
        self.head_mu = nn.Linear(feat, d_c)
        self.head_log_sigma = nn.Linear(feat, d_c)
        self.head_p = nn.Linear(feat, d_b) if d_b else None

    def forward(self, x):
        h = self.trunk(x).flatten(1)
        mu = self.head_mu(h)
        sigma = torch.exp(self.head_log_sigma(h).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        p = torch.sigmoid(self.head_p(h)) if self.head_p is not None else None
        return mu, sigma, p


class CelebaEncoder(nn.Module):
    """Four 5x5 convolutions (50/100/200/200 filters) -> 1800 -> 200 -> heads."""

    def __init__(self, image_shape, d_c: int = 32, d_b: int = 8):
        super().__init__()
        c = image_shape[0]
        self.d_c, self.d_b = d_c, d_b
        chans = (50, 100, 200, 200)
        pads = (2, 2, 2, 1)
        layers = []
        prev = c
        for ch, p in zip(chans, pads):
            layers += [nn.Conv2d(prev, ch, 5, stride=2, padding=p), nn.BatchNorm2d(ch), _act()]
            prev = ch
        self.trunk = nn.Sequential(*layers)
        with torch.no_grad():
            feat = self.trunk(torch.zeros(1, *image_shape)).numel()
        self.fc = nn.Sequential(nn.Linear(feat, 200), _act())
        self.head_mu = nn.Linear(200, d_c)
        self.head_log_sigma = nn.Linear(200, d_c)
        self.head_p = nn.Linear(200, d_b) if d_b else None

    def forward(self, x):
        h = self.fc(self.trunk(x).flatten(1))
        mu = self.head_mu(h)
        sigma = torch.exp(self.head_log_sigma(h).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        p = torch.sigmoid(self.head_p(h)) if self.head_p is not None else None
        return mu, sigma, p


# ---------------------------------------------------------------------------
# Decoders / generators
# ---------------------------------------------------------------------------


class DenseDecoder(nn.Module):
    """in -> 512 -> 1024 -> pixels, sigmoid (VAE) or tanh (GAN) output."""

    def __init__(self, in_dim: int, image_shape, final: str = "sigmoid"):
        super().__init__()
        self.image_shape = tuple(image_shape)
        out_dim = int(np.prod(image_shape))
        self.net = nn.Sequential(
            nn.Linear(in_dim, 512), _act(),
            nn.Linear(512, 1024), _act(),
            nn.Linear(1024, out_dim),
        )
        self.final = _final_act(final)

    def forward(self, z):
        x = self.final(self.net(z))
        return x.view(len(z), *self.image_shape)


# T3/T4 paddings that land the 4->8->16 deconv stack on the target size
_DECONV_PADS = {28: (2, 2), 32: (1, 2)}


class ConvDecoder(nn.Module):
    """in -> 2048 -> deconvs (128, 64, 32 filters) -> image."""

    def __init__(self, in_dim: int, image_shape, final: str = "sigmoid"):
        super().__init__()
        self.image_shape = tuple(image_shape)
        c, h, w = image_shape
        if h != w or h not in _DECONV_PADS:
            raise ContractViolation(f"conv decoder supports square {tuple(_DECONV_PADS)} images, got {image_shape}")
        p3, p4 = _DECONV_PADS[h]
        self.fc = nn.Linear(in_dim, 2048)
        self.net = nn.Sequential(
            _act(),
            nn.ConvTranspose2d(128, 128, 4, stride=2, padding=1), _act(),
            nn.ConvTranspose2d(128, 64, 4, stride=2, padding=1), _act(),
            nn.ConvTranspose2d(64, 32, 4, stride=1, padding=p3), _act(),
            nn.ConvTranspose2d(32, c, 4, stride=2, padding=p4),
        )
        self.final = _final_act(final)

    def forward(self, z):
        h = self.fc(z).view(len(z), 128, 4, 4)
        return self.final(self.net(h))


class CelebaDecoder(nn.Module):
    """1600-d latent -> deconvs (400, 200, 100 filters) -> 3x64x64 image."""

    def __init__(self, in_dim: int = 1600, image_shape=(3, 64, 64), final: str = "sigmoid"):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.fc = nn.Linear(in_dim, 100 * 4 * 4)
        self.net = nn.Sequential(
            _act(),
            nn.ConvTranspose2d(100, 400, 5, stride=2, padding=2, output_padding=1), _act(),
            nn.ConvTranspose2d(400, 200, 5, stride=2, padding=2, output_padding=1), _act(),
            nn.ConvTranspose2d(200, 100, 5, stride=2, padding=2, output_padding=1), _act(),
            nn.ConvTranspose2d(100, image_shape[0], 5, stride=2, padding=2, output_padding=1),
        )
        self.final = _final_act(final)

    def forward(self, z):
        h = self.fc(z).view(len(z), 100, 4, 4)
        return self.final(self.net(h))


class ConvCritic(nn.Module):
    """Encoder trunk with layer normalization (no batch norm) and a scalar head."""

    def __init__(self, image_shape):
        super().__init__()
        c = image_shape[0]
        layers = []
        for i in range(3):
            layers += [
                nn.Conv2d(c if i == 0 else 32, 32, 4, stride=2, padding=1),
                nn.GroupNorm(1, 32),  # layer norm over (C, H, W)
                _act(),
            ]
        self.trunk = nn.Sequential(*layers)
        with torch.no_grad():
            feat = self.trunk(torch.zeros(1, *image_shape)).numel()
        self.head = nn.Linear(feat, 1)

    def forward(self, x):
        return self.head(self.trunk(x).flatten(1)).squeeze(1)


class CifarCritic(nn.Module):
    """Five bias-free convolutions (128..1024 filters) with layer normalization."""

    def __init__(self, image_shape=(3, 32, 32)):
        super().__init__()
        chans = (128, 256, 512, 1024)
        layers = []
        prev = image_shape[0]
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1, bias=False), nn.GroupNorm(1, ch), _act()]
            prev = ch
        layers += [nn.Conv2d(prev, 1024, 3, stride=1, padding=1, bias=False), nn.GroupNorm(1, 1024), _act()]
        self.trunk = nn.Sequential(*layers)
        with torch.no_grad():
            feat = self.trunk(torch.zeros(1, *image_shape)).numel()
        self.head = nn.Linear(feat, 1)

    def forward(self, x):
        return self.head(self.trunk(x).flatten(1)).squeeze(1)


class CifarGenerator(nn.Module):
    """Four 4x4/stride-2 deconvolutions (1024..128 filters) plus a 5x5 output layer."""

    def __init__(self, in_dim: int, image_shape=(3, 32, 32)):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.in_dim = in_dim
        self.net = nn.Sequential(
            nn.ConvTranspose2d(in_dim, 1024, 4, stride=2, padding=0), _act(),
            nn.ConvTranspose2d(1024, 512, 4, stride=2, padding=1), _act(),
            nn.ConvTranspose2d(512, 256, 4, stride=2, padding=1), _act(),
            nn.ConvTranspose2d(256, 128, 4, stride=2, padding=1), _act(),
            nn.ConvTranspose2d(128, image_shape[0], 5, stride=1, padding=2),
        )

    def forward(self, z):
        return torch.tanh(self.net(z.view(len(z), self.in_dim, 1, 1)))


def _final_act(name: str):
    if name == "sigmoid":
        return nn.Sigmoid()
    if name == "tanh":
        return nn.Tanh()
    if name == "none":
        return nn.Identity()
    raise ContractViolation(f"unknown final activation {name!r}")


# ---------------------------------------------------------------------------
# Translator
# ---------------------------------------------------------------------------


class Translator(nn.Module):
    """Maps (per-task latent, binary task code) into the global latent space.

    Binary latents and task codes pass through small two-layer blocks (8->12
    and 18->12 units) before being concatenated with the continuous part and
    projected through 192 units to the global dimension."""

    def __init__(self, cont_dim: int, d_b: int, code_width: int, out_dim: int):
        super().__init__()
        self.cont_dim, self.d_b = cont_dim, d_b
        self.code_width, self.out_dim = code_width, out_dim
        self.code_block = nn.Sequential(nn.Linear(code_width, 18), _act(), nn.Linear(18, 12), _act())
        self.bin_block = (
            nn.Sequential(nn.Linear(d_b, 8), _act(), nn.Linear(8, 12), _act()) if d_b else None
        )
        joint_in = cont_dim + 12 + (12 if d_b else 0)
        self.joint = nn.Sequential(nn.Linear(joint_in, 192), _act(), nn.Linear(192, out_dim))

    def forward(self, cont, binary, code):
        parts = [cont]
        if self.bin_block is not None:
            if binary is None:
                raise ContractViolation("translator expects a binary latent but got None")
            parts.append(self.bin_block(binary))
        parts.append(self.code_block(code))
        return self.joint(torch.cat(parts, dim=1))


# ---------------------------------------------------------------------------
# Classifier networks
# ---------------------------------------------------------------------------


class Mlp400(nn.Module):
    """Two 400-unit hidden layers; the simple-dataset feature extractor."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, 400), nn.ReLU(),
            nn.Linear(400, 400), nn.ReLU(),
            nn.Linear(400, out_dim),
        )

    def forward(self, x):
        return self.net(x.flatten(1))


class HeadNet(nn.Module):
    """Single 100-unit hidden layer classifier head over global latents."""

    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, 100), nn.ReLU(), nn.Linear(100, num_classes))

    def forward(self, z):
        return self.net(z)


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = (
            nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
            if stride != 1 or cin != cout
            else nn.Identity()
        )

    def forward(self, x):
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.short(x))


class CifarResNet(nn.Module):
    """Small CIFAR-style residual network feature extractor."""

    def __init__(self, image_shape, out_dim: int, depth: int = 18):
        super().__init__()
        blocks_per_stage = {18: 2, 32: 5}[depth]
        widths = (64, 128, 256) if depth == 18 else (16, 32, 64)
        layers = [nn.Conv2d(image_shape[0], widths[0], 3, padding=1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()]
        prev = widths[0]
        for s, w in enumerate(widths):
            for b in range(blocks_per_stage):
                layers.append(_ResBlock(prev, w, stride=2 if (s > 0 and b == 0) else 1))
                prev = w
        self.trunk = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(prev, out_dim)

    def forward(self, x):
        return self.fc(self.pool(self.trunk(x)).flatten(1))


class LeNet(nn.Module):
    """LeNet-style classifier; penultimate 84-d layer is the FID feature space."""

    FEATURE_DIM = 84

    def __init__(self, image_shape, num_classes: int):
        super().__init__()
        c, h, w = image_shape
        self.conv = nn.Sequential(
            nn.Conv2d(c, 6, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(6, 16, 5), nn.ReLU(), nn.MaxPool2d(2),
        )
        with torch.no_grad():
            feat = self.conv(torch.zeros(1, *image_shape)).numel()
        self.fc = nn.Sequential(nn.Linear(feat, 120), nn.ReLU(), nn.Linear(120, 84), nn.ReLU())
        self.out = nn.Linear(84, num_classes)

    def features(self, x):
        return self.fc(self.conv(x).flatten(1))

    def forward(self, x):
        return self.out(self.features(x))
