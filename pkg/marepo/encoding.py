"""Dynamic positional encoding: camera-aware 2D rays, sinusoidal 3D scene coordinates, and their fusion."""
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from errors import ShapeMismatch
from geometry import CELL_OFFSET, RAY_SCALE, ray_xy


@dataclass(frozen=True)
class EncodingConfig:
    d_model: int
    m: int = 5
    lam: float = RAY_SCALE
    eps: float = CELL_OFFSET

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 4 != 0:
            raise ValueError(f'd_model must be a positive multiple of 4, got {self.d_model}')
        if self.m < 1:
            raise ValueError(f'm must be >= 1, got {self.m}')

    @property
    def raw_channels(self):
        return 3 * (2 * self.m + 1)

    @staticmethod
    def from_config(config):
        return EncodingConfig(config['model_d_model'], config['model_pe3d_bands'])


@dataclass(eq=False)
class SceneCoordinateMap:
    """h x w grid of scene-frame points (meters) with a validity mask."""
    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3 or self.mask.shape != self.coords.shape[:2]:
            raise ShapeMismatch(f'coords {self.coords.shape} and mask {self.mask.shape} are inconsistent')

    @property
    def h(self):
        return self.coords.shape[0]

    @property
    def w(self):
        return self.coords.shape[1]

    @property
    def n_valid(self):
        return int(self.mask.sum())

    def copy(self):
        return SceneCoordinateMap(self.coords.copy(), self.mask.copy())


@dataclass(eq=False)
class TokenGrid:
    """data: (..., h, w, d) tokens, mask: (..., h, w) valid tokens."""
    data: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.data.shape[:-1] != self.mask.shape:
            raise ShapeMismatch(f'data {tuple(self.data.shape)} and mask {tuple(self.mask.shape)} are inconsistent')

    @property
    def h(self):
        return self.data.shape[-3]

    @property
    def w(self):
        return self.data.shape[-2]

    @property
    def d_model(self):
        return self.data.shape[-1]

    def masked(self, mask):
        mask = mask.to(torch.bool)
        return TokenGrid(torch.where(mask.unsqueeze(-1), self.data, torch.zeros_like(self.data)), mask)


def frequency_bands(d_model, dtype=torch.float64):
    k = torch.arange(d_model // 4, dtype=dtype)
    return torch.pow(torch.tensor(10000.0, dtype=dtype), -2.0 * k / d_model)


def encode_rays(x_ray, y_ray, d_model):
    """Sinusoids of the ray components; x_ray broadcasts over columns, y_ray over rows."""
    omega = frequency_bands(d_model, x_ray.dtype)
    x = x_ray.unsqueeze(-1) * omega
    y = y_ray.unsqueeze(-1) * omega
    x, y = torch.broadcast_tensors(x, y)
    channels = torch.stack([torch.sin(x), torch.cos(x), torch.sin(y), torch.cos(y)], dim=-1)
    return channels.flatten(-2, -1)


def grid_rays(intrinsics, h, w, dynamic=True, dtype=torch.float32):
    """Ray components for a batch of intrinsics (..., 4) as (..., 1, w) and (..., h, 1) tensors."""
    intrinsics = torch.as_tensor(intrinsics, dtype=dtype)
    u = torch.arange(w, dtype=dtype).view(1, w)
    v = torch.arange(h, dtype=dtype).view(h, 1)
    if dynamic:
        fx, fy, cx, cy = (intrinsics[..., i, None, None] for i in range(4))
        x_ray = RAY_SCALE * (u - cx - CELL_OFFSET) / fx
        y_ray = RAY_SCALE * (v - cy - CELL_OFFSET) / fy
    else:
        # intrinsics-free substitute for the dynamic-PE ablation
        batch = intrinsics.shape[:-1]
        x_ray = (RAY_SCALE * (u - w / 2) / w).expand(*batch, 1, w)
        y_ray = (RAY_SCALE * (v - h / 2) / h).expand(*batch, h, 1)
    return x_ray, y_ray


def pe2d(K, h, w, cfg, dynamic=True, dtype=torch.float64):
    """Camera-aware 2D embedding for a single Intrinsics; all tokens valid."""
    if dynamic:
        u = torch.arange(w, dtype=dtype).view(1, w)
        v = torch.arange(h, dtype=dtype).view(h, 1)
        x_ray, y_ray = ray_xy(K, u, v)
    else:
        x_ray, y_ray = grid_rays(K.as_tensor(dtype), h, w, dynamic=False, dtype=dtype)
    data = encode_rays(x_ray, y_ray, cfg.d_model)
    return TokenGrid(data, torch.ones(h, w, dtype=torch.bool))


def pe3d_raw(coords, mask, m):
    """[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(m-1) pi p), cos(2^(m-1) pi p)], invalid cells zeroed."""
    coords = torch.as_tensor(coords)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    valid = mask.unsqueeze(-1)
    p = torch.where(valid, coords, torch.zeros_like(coords))
    out = [p]
    for level in range(m):
        freq = (2.0 ** level) * math.pi
        out.append(torch.sin(p * freq))
        out.append(torch.cos(p * freq))
    raw = torch.cat(out, dim=-1)
    return torch.where(valid, raw, torch.zeros_like(raw))


class SceneCoordinateEmbedding(nn.Module):
    """Sinusoidal 3D embedding lifted to d_model channels by a 1x1 convolution."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv2d(cfg.raw_channels, cfg.d_model, kernel_size=1, bias=True)

    def forward(self, coords, mask):
        return pe3d(coords, mask, self.cfg, self.conv)


def pe3d(coords, mask, cfg, conv):
    if conv.in_channels != cfg.raw_channels or conv.out_channels != cfg.d_model or conv.bias is None \
            or conv.kernel_size != (1, 1):
        raise ShapeMismatch(
            f'Expected 1x1 conv {cfg.raw_channels}->{cfg.d_model} with bias, '
            f'got {conv.in_channels}->{conv.out_channels} kernel {conv.kernel_size}')
    mask = torch.as_tensor(mask, dtype=torch.bool)
    raw = pe3d_raw(coords, mask, cfg.m).to(conv.weight.dtype)
    squeeze = raw.ndim == 3
    if squeeze:
        raw = raw.unsqueeze(0)
    out = conv(raw.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
    if squeeze:
        out = out.squeeze(0)
    return TokenGrid(out, mask).masked(mask)


def fuse(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f'Cannot fuse token grids of shape {tuple(a.data.shape)} and {tuple(b.data.shape)}')
    if not torch.equal(a.mask, b.mask):
        raise ShapeMismatch('Cannot fuse token grids with different masks')
    return TokenGrid(a.data + b.data, a.mask)
