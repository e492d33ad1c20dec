"""Region feature extraction: pyramid, coordinate channels, RoIAlign, fusion.

All kernels are plain torch ops so gradients reach the channel-mix and
projection parameters. They run in whatever dtype the feature maps carry;
float64 is used for gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .errors import ShapeMismatch
from .geometry import Box, ImageSize, validate_box

DEFAULT_POOL = 14
DEFAULT_SAMPLES = 2
# output scale of each pyramid level relative to the encoder grid
LEVEL_SCALES = (2.0, 1.0, 0.5, 0.25)
# deepest layer feeds the coarsest level; -2 is the penultimate layer
DEFAULT_SOURCE_LAYERS = (-11, -8, -5, -2)


@dataclass
class LayerStack:
    maps: list[torch.Tensor]
    source_layer_ids: tuple[int, ...] = DEFAULT_SOURCE_LAYERS

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ShapeMismatch(f"layer stack needs exactly 4 maps, got {len(self.maps)}")
        if len(self.source_layer_ids) != 4:
            raise ShapeMismatch("layer stack needs 4 source layer ids")
        shape = tuple(self.maps[0].shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeMismatch(f"feature maps must be C x H x W, got {shape}")
        for m in self.maps[1:]:
            if tuple(m.shape) != shape:
                raise ShapeMismatch(f"layer shapes differ: {shape} vs {tuple(m.shape)}")
        for m in self.maps:
            if not torch.isfinite(m).all():
                raise ShapeMismatch("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.maps[0].shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.maps[0].shape[1], self.maps[0].shape[2]

    def penultimate(self) -> torch.Tensor:
        ids = list(self.source_layer_ids)
        return self.maps[ids.index(-2)] if -2 in ids else self.maps[-1]


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]
    # channel count before coordinate channels were appended
    content_channels: int = field(default=0)

    def sizes(self) -> list[tuple[int, int]]:
        return [(lv.shape[1], lv.shape[2]) for lv in self.levels]


def level_sizes(h: int, w: int) -> list[tuple[int, int]]:
    return [(2 * h, 2 * w), (h, w), (math.ceil(h / 2), math.ceil(w / 2)), (math.ceil(h / 4), math.ceil(w / 4))]


def coord_channels(h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    """``2 x h x w`` cell-centre coordinates in (-1, 1); x first, then y."""
    if h < 1 or w < 1:
        raise ShapeMismatch(f"coordinate grid must be at least 1x1, got {h}x{w}")
    xs = (2.0 * (torch.arange(w, dtype=torch.float64) + 0.5) / w - 1.0).to(dtype)
    ys = (2.0 * (torch.arange(h, dtype=torch.float64) + 0.5) / h - 1.0).to(dtype)
    return torch.stack([xs.expand(h, w), ys[:, None].expand(h, w)])


def resize_matrix(in_size: int, out_size: int, dtype=torch.float64) -> torch.Tensor:
    """``out_size x in_size`` half-pixel bilinear interpolation matrix."""
    m = torch.zeros(out_size, in_size, dtype=torch.float64)
    scale = in_size / out_size
    for o in range(out_size):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), in_size - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m.to(dtype)


def bilinear_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    rh = resize_matrix(h, out_h, x.dtype)
    rw = resize_matrix(w, out_w, x.dtype)
    return rh @ x @ rw.T


def identity_mix(channels: int, dtype=torch.float64):
    return [(torch.eye(channels, dtype=dtype), torch.zeros(channels, dtype=dtype)) for _ in LEVEL_SCALES]


def build_pyramid(stack: LayerStack, mix: Sequence) -> FeaturePyramid:
    """Channel-mix each layer, resample it to its level scale, append coordinates.

    ``mix`` holds one ``(weight, bias)`` pair per level with ``weight`` of
    shape ``C x C``; ``bias`` may be None.
    """
    c = stack.channels
    h, w = stack.grid
    if len(mix) != len(LEVEL_SCALES):
        raise ShapeMismatch(f"need {len(LEVEL_SCALES)} mix entries, got {len(mix)}")
    levels = []
    for fm, (weight, bias), (th, tw) in zip(stack.maps, mix, level_sizes(h, w)):
        if tuple(weight.shape) != (c, c):
            raise ShapeMismatch(f"mix weight must be {c}x{c}, got {tuple(weight.shape)}")
        mixed = torch.einsum("oc,chw->ohw", weight, fm)
        if bias is not None:
            if tuple(bias.shape) != (c,):
                raise ShapeMismatch(f"mix bias must have {c} entries, got {tuple(bias.shape)}")
            mixed = mixed + bias[:, None, None]
        resized = bilinear_resize(mixed, th, tw)
        levels.append(torch.cat([resized, coord_channels(th, tw, resized.dtype)]))
    return FeaturePyramid(levels, content_channels=c)


def _corners(coord: torch.Tensor, size: int):
    """Lower/upper interpolation nodes and weight of the upper node."""
    c = coord.clamp(0.0, size - 1.0)
    lo = c.floor().long()
    hi = (lo + 1).clamp(max=size - 1)
    return lo, hi, c - lo


def _sample_coords(lo: float, hi: float, pool: int, samples: int) -> torch.Tensor:
    bin_size = (hi - lo) / pool
    idx = torch.arange(pool * samples, dtype=torch.float64)
    p = torch.div(idx, samples, rounding_mode="floor")
    k = idx - p * samples
    return lo + p * bin_size + (k + 0.5) * bin_size / samples


def roi_align(fm: torch.Tensor, b: Box, img: ImageSize, pool: int = DEFAULT_POOL,
              samples: int = DEFAULT_SAMPLES) -> torch.Tensor:
    """Pool ``b`` from a ``C x H x W`` map into a ``pool x pool x C`` grid.

    The box is scaled per axis onto the feature grid and shifted by half a
    cell. Each bin averages ``samples x samples`` evenly spaced interior
    points, each bilinearly interpolated with coordinates clamped to the grid.
    """
    if fm.dim() != 3 or fm.numel() == 0:
        raise ShapeMismatch(f"feature map must be a non-empty C x H x W tensor, got {tuple(fm.shape)}")
    if pool < 1 or samples < 1:
        raise ShapeMismatch(f"pool and samples must be >= 1, got {pool}, {samples}")
    b = validate_box(b, img)
    c, h, w = fm.shape
    sx, sy = w / img.width, h / img.height
    xs = _sample_coords(b.x1 * sx - 0.5, b.x2 * sx - 0.5, pool, samples)
    ys = _sample_coords(b.y1 * sy - 0.5, b.y2 * sy - 0.5, pool, samples)

    x0, x1, fx = _corners(xs, w)
    y0, y1, fy = _corners(ys, h)
    fx = fx.to(fm.dtype)[None, None, :]
    fy = fy.to(fm.dtype)[None, :, None]
    top = fm[:, y0[:, None], x0[None, :]] * (1 - fx) + fm[:, y0[:, None], x1[None, :]] * fx
    bottom = fm[:, y1[:, None], x0[None, :]] * (1 - fx) + fm[:, y1[:, None], x1[None, :]] * fx
    vals = top * (1 - fy) + bottom * fy  # C x (P*s) x (P*s)
    pooled = vals.reshape(c, pool, samples, pool, samples).mean(dim=(2, 4))
    return pooled.permute(1, 2, 0)


def fuse_levels(pyr: FeaturePyramid, b: Box, img: ImageSize, pool: int = DEFAULT_POOL,
                samples: int = DEFAULT_SAMPLES) -> torch.Tensor:
    """Mean of the per-level RoIAlign grids, flattened row-major (P, P, C+2)."""
    grids = [roi_align(level, b, img, pool, samples) for level in pyr.levels]
    return torch.stack(grids).mean(dim=0).reshape(-1)


def extract_region(pyr: FeaturePyramid, b: Box, img: ImageSize, proj_weight: torch.Tensor,
                   proj_bias: torch.Tensor | None = None, pool: int = DEFAULT_POOL,
                   samples: int = DEFAULT_SAMPLES) -> torch.Tensor:
    flat = fuse_levels(pyr, b, img, pool, samples)
    if proj_weight.shape[1] != flat.shape[0]:
        raise ShapeMismatch(
            f"projection expects {proj_weight.shape[1]} inputs, fused region has {flat.shape[0]}")
    out = proj_weight @ flat
    return out if proj_bias is None else out + proj_bias


class RegionFeatureExtractor(nn.Module):
    """Trainable part of the region path: per-level channel mix and projection."""

    def __init__(self, channels: int, dim: int, pool: int = DEFAULT_POOL,
                 samples: int = DEFAULT_SAMPLES, generator: torch.Generator | None = None,
                 dtype=torch.float64):
        super().__init__()
        self.channels, self.dim, self.pool, self.samples = channels, dim, pool, samples
        eye = torch.eye(channels, dtype=dtype)
        self.mix_weight = nn.ParameterList(
            [nn.Parameter(eye + 0.1 * torch.randn(channels, channels, generator=generator, dtype=dtype))
             for _ in LEVEL_SCALES])
        self.mix_bias = nn.ParameterList(
            [nn.Parameter(torch.zeros(channels, dtype=dtype)) for _ in LEVEL_SCALES])
        fan_in = pool * pool * (channels + 2)
        self.proj_weight = nn.Parameter(
            torch.randn(dim, fan_in, generator=generator, dtype=dtype) / math.sqrt(fan_in))
        self.proj_bias = nn.Parameter(torch.zeros(dim, dtype=dtype))

    @property
    def flat_size(self) -> int:
        return self.pool * self.pool * (self.channels + 2)

    def pyramid(self, stack: LayerStack) -> FeaturePyramid:
        if stack.channels != self.channels:
            raise ShapeMismatch(f"extractor built for C={self.channels}, stack has C={stack.channels}")
        return build_pyramid(stack, list(zip(self.mix_weight, self.mix_bias)))

    def forward(self, stack: LayerStack, boxes: Sequence[Box], img: ImageSize) -> torch.Tensor:
        pyr = self.pyramid(stack)
        if not boxes:
            return torch.zeros(0, self.dim, dtype=self.proj_weight.dtype)
        return torch.stack([
            extract_region(pyr, b, img, self.proj_weight, self.proj_bias, self.pool, self.samples)
            for b in boxes])
