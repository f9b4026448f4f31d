"""Stage-I and Stage-II generators and discriminators.

All stacks are pure functions of ModelDims: upsample = nearest 2x + 3x3 conv
+ batchnorm + ReLU; downsample = 4x4 stride-2 conv + batchnorm + leaky ReLU
(no norm on the first discriminator block); residual blocks use an identity
skip. channel_base scales the wide dims (N_di, N_gi) for desk runs; the
full-size widths are recovered at 1.0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn


def _pow2_steps(src: int, dst: int) -> int:
    """Number of 2x steps from src to dst; error when not a power of two."""
    if src <= 0 or dst <= 0 or dst % src:
        raise ValueError(f"{dst} is not a power-of-two multiple of {src}")
    steps = int(math.log2(dst // src))
    if src * 2**steps != dst:
        raise ValueError(f"{dst} is not a power-of-two multiple of {src}")
    return steps


@dataclass
class ModelDims:
    """Shape parameters for both stages. Desk-scale defaults; full_scale()
    restores the full-size configuration."""

    n_z: int = 16           # noise dim
    w0: int = 16            # Stage-I output side
    h0: int = 16
    m_d: int = 4            # discriminator spatial bottleneck
    n_di: int = 512         # discriminator bottleneck channels (before channel_base)
    n_d: int = 16           # replicated condition channels in D
    n_g: int = 16           # c_hat dim
    m_g: int = 8            # Stage-II downsample side
    n_gi: int = 512         # Stage-II trunk channels (before channel_base)
    w: int = 32             # Stage-II output side
    d: int = 32
    channel_base: float = 0.125
    residual_blocks: int = 2

    @classmethod
    def full_scale(cls) -> "ModelDims":
        return cls(n_z=100, w0=64, h0=64, m_d=4, n_di=512, n_d=128, n_g=128,
                   m_g=16, n_gi=512, w=256, d=256, channel_base=1.0, residual_blocks=4)

    @property
    def n_di_eff(self) -> int:
        return max(1, round(self.n_di * self.channel_base))

    @property
    def n_gi_eff(self) -> int:
        return max(1, round(self.n_gi * self.channel_base))

    def validate(self) -> "ModelDims":
        for name, value in asdict(self).items():
            if name == "channel_base":
                if value <= 0:
                    raise ValueError("channel_base must be positive")
            elif int(value) != value or value <= 0:
                raise ValueError(f"dims.{name} must be a positive integer, got {value}")
        if self.w0 != self.h0 or self.w != self.d:
            raise ValueError("square outputs required: w0 == h0 and w == d")
        if _pow2_steps(self.m_d, self.w0) < 1:
            raise ValueError("w0 must be at least one 2x step above m_d")
        if _pow2_steps(4, self.w0) < 1:
            raise ValueError("w0 must be at least one 2x step above the 4x4 seed map")
        # Stage-II output is a power-of-two multiple of Stage-I (4x at full
        # scale, 2x in the desk configuration)
        if _pow2_steps(self.w0, self.w) < 1:
            raise ValueError("w must be a power-of-two multiple of w0, at least 2x")
        if _pow2_steps(self.m_g, self.w0) < 1:
            raise ValueError("w0 must be at least one 2x step above m_g")
        if _pow2_steps(self.m_d, self.w) < 1:
            raise ValueError("w must sit above m_d by 2x steps")
        if _pow2_steps(self.m_g, self.w) < 1:
            raise ValueError("w must sit above m_g by 2x steps")
        return self


def spatial_replicate(v: torch.Tensor, m: int) -> torch.Tensor:
    """Tile a vector (or batch of vectors) across an m x m spatial grid."""
    if v.ndim == 1:
        return v[:, None, None].expand(v.shape[0], m, m).contiguous()
    if v.ndim == 2:
        return v[:, :, None, None].expand(v.shape[0], v.shape[1], m, m).contiguous()
    raise ValueError(f"expected a vector or batch of vectors, got shape {tuple(v.shape)}")


def upsample_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(c_in, c_out, 3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def downsample_block(c_in: int, c_out: int, norm: bool = True, leaky: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(nn.LeakyReLU(0.2, inplace=True) if leaky else nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class ResidualBlock(nn.Module):
    """out = in + F(in); zeroing F's parameters makes the block an identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.f = nn.Sequential(
            nn.Conv2d(channels, channels, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.f(x)


def _check_image(x: torch.Tensor, side: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != side or x.shape[3] != side:
        raise ValueError(f"{what} must have shape (B, 3, {side}, {side}), got {tuple(x.shape)}")


def _check_vector(v: torch.Tensor, dim: int, what: str) -> None:
    if v.ndim != 2 or v.shape[1] != dim:
        raise ValueError(f"{what} must have shape (B, {dim}), got {tuple(v.shape)}")


class Stage1Generator(nn.Module):
    """(c_hat0 || z) -> affine 4x4 seed map -> upsample blocks -> tanh image."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        c0 = 2 * dims.n_gi_eff
        self.seed_channels = c0
        self.fc = nn.Linear(dims.n_g + dims.n_z, 4 * 4 * c0)
        blocks = []
        c = c0
        for _ in range(_pow2_steps(4, dims.w0)):
            blocks.append(upsample_block(c, c // 2))
            c //= 2
        self.blocks = nn.Sequential(*blocks)
        self.to_image = nn.Sequential(nn.Conv2d(c, 3, 3, stride=1, padding=1), nn.Tanh())

    def forward(self, z: torch.Tensor, c_hat0: torch.Tensor) -> torch.Tensor:
        _check_vector(z, self.dims.n_z, "z")
        _check_vector(c_hat0, self.dims.n_g, "c_hat0")
        if z.shape[0] != c_hat0.shape[0]:
            raise ValueError("z and c_hat0 batch sizes differ")
        h = self.fc(torch.cat([c_hat0, z], dim=1))
        h = h.view(-1, self.seed_channels, 4, 4)
        return self.to_image(self.blocks(h))


class _ConditionalDiscriminator(nn.Module):
    """Downsample to (m_d, m_d, N_di), concat the replicated projected
    condition, 1x1 conv + leaky ReLU, then a full-bottleneck conv to a
    sigmoid probability."""

    def __init__(self, dims: ModelDims, input_side: int):
        super().__init__()
        self.dims = dims
        self.input_side = input_side
        steps = _pow2_steps(dims.m_d, input_side)
        blocks = []
        c_in = 3
        for j in range(steps):
            c_out = max(1, dims.n_di_eff // 2 ** (steps - 1 - j))
            blocks.append(downsample_block(c_in, c_out, norm=(j > 0)))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.cond_proj = nn.Linear(dims.n_g, dims.n_d)
        self.joint = nn.Sequential(
            nn.Conv2d(dims.n_di_eff + dims.n_d, dims.n_di_eff, 1, stride=1, padding=0, bias=False),
            nn.BatchNorm2d(dims.n_di_eff),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Conv2d(dims.n_di_eff, 1, dims.m_d, stride=dims.m_d, padding=0)

    def forward(self, image: torch.Tensor, c_hat: torch.Tensor) -> torch.Tensor:
        _check_image(image, self.input_side, "image")
        _check_vector(c_hat, self.dims.n_g, "c_hat")
        if image.shape[0] != c_hat.shape[0]:
            raise ValueError("image and c_hat batch sizes differ")
        feat = self.blocks(image)
        cond = spatial_replicate(self.cond_proj(c_hat), self.dims.m_d)
        joint = self.joint(torch.cat([feat, cond], dim=1))
        return torch.sigmoid(self.head(joint)).reshape(-1)

    def bottleneck(self, image: torch.Tensor) -> torch.Tensor:
        """Feature map just before the condition concat; exposed for shape tests."""
        return self.blocks(image)


class Stage1Discriminator(_ConditionalDiscriminator):
    def __init__(self, dims: ModelDims):
        super().__init__(dims, input_side=dims.w0)


class Stage2Discriminator(_ConditionalDiscriminator):
    def __init__(self, dims: ModelDims):
        super().__init__(dims, input_side=dims.w)


class Stage2Generator(nn.Module):
    """Downsample s0 to (m_g, m_g, N_gi), fuse the replicated condition,
    run residual blocks, upsample to (w, d) and tanh."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        down_steps = _pow2_steps(dims.m_g, dims.w0)
        c = max(1, dims.n_gi_eff // 2**down_steps)
        encoder: list[nn.Module] = [nn.Conv2d(3, c, 3, stride=1, padding=1), nn.ReLU(inplace=True)]
        for _ in range(down_steps):
            encoder.append(downsample_block(c, c * 2, leaky=False))
            c *= 2
        self.encoder = nn.Sequential(*encoder)
        self.fuse = nn.Sequential(
            nn.Conv2d(c + dims.n_g, dims.n_gi_eff, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(dims.n_gi_eff),
            nn.ReLU(inplace=True),
        )
        self.residual = nn.Sequential(*[ResidualBlock(dims.n_gi_eff) for _ in range(dims.residual_blocks)])
        blocks = []
        c = dims.n_gi_eff
        for _ in range(_pow2_steps(dims.m_g, dims.w)):
            blocks.append(upsample_block(c, max(1, c // 2)))
            c = max(1, c // 2)
        self.blocks = nn.Sequential(*blocks)
        self.to_image = nn.Sequential(nn.Conv2d(c, 3, 3, stride=1, padding=1), nn.Tanh())

    def forward(self, s0: torch.Tensor, c_hat: torch.Tensor) -> torch.Tensor:
        _check_image(s0, self.dims.w0, "s0")
        _check_vector(c_hat, self.dims.n_g, "c_hat")
        if s0.shape[0] != c_hat.shape[0]:
            raise ValueError("s0 and c_hat batch sizes differ")
        feat = self.encoder(s0)
        cond = spatial_replicate(c_hat, self.dims.m_g)
        h = self.fuse(torch.cat([feat, cond], dim=1))
        h = self.residual(h)
        return self.to_image(self.blocks(h))
