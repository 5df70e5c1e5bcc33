"""Residual UNet baseline for dense tasks (segmentation and heatmaps)."""

from __future__ import annotations

import torch
from torch import nn

UNET_WIDTHS = (32, 64, 128, 256, 512)


def _norm(ch: int) -> nn.Module:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, ndim: int):
        super().__init__()
        conv = nn.Conv2d if ndim == 2 else nn.Conv3d
        self.body = nn.Sequential(
            conv(in_ch, out_ch, 3, padding=1), _norm(out_ch), nn.GELU(),
            conv(out_ch, out_ch, 3, padding=1), _norm(out_ch),
        )
        self.skip = conv(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


class ResidualUNet(nn.Module):
    """UNet with residual blocks, one level per entry of ``widths``.

    ``ndim=3`` is meant for SAX stacks ``(B, C, H, W, D)``: pooling and
    upsampling act in-plane only, as slices are few and thick.
    """

    def __init__(self, in_chans: int, n_out: int, ndim: int = 2, widths=UNET_WIDTHS):
        super().__init__()
        if ndim not in (2, 3):
            raise ValueError("ndim must be 2 or 3")
        self.ndim, self.widths = ndim, tuple(widths)
        conv = nn.Conv2d if ndim == 2 else nn.Conv3d
        convT = nn.ConvTranspose2d if ndim == 2 else nn.ConvTranspose3d
        stride = (2, 2) if ndim == 2 else (2, 2, 1)
        kernel = 3 if ndim == 2 else (3, 3, 1)
        padding = 1 if ndim == 2 else (1, 1, 0)
        w = self.widths
        self.stem = ResBlock(in_chans, w[0], ndim)
        self.down = nn.ModuleList(
            [nn.Sequential(conv(w[i - 1], w[i], kernel, stride=stride, padding=padding), ResBlock(w[i], w[i], ndim)) for i in range(1, len(w))]
        )
        self.up = nn.ModuleList([convT(w[i], w[i - 1], stride, stride=stride) for i in range(len(w) - 1, 0, -1)])
        self.dec = nn.ModuleList([ResBlock(2 * w[i - 1], w[i - 1], ndim) for i in range(len(w) - 1, 0, -1)])
        self.out = conv(w[0], n_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2 ** (len(self.widths) - 1)
        if any(s % factor for s in x.shape[2:4]):
            raise ValueError(f"in-plane size {tuple(x.shape[2:4])} must be divisible by {factor}")
        skips = [self.stem(x)]
        for d in self.down:
            skips.append(d(skips[-1]))
        y = skips.pop()
        for up, dec in zip(self.up, self.dec):
            y = dec(torch.cat([up(y), skips.pop()], dim=1))
        return self.out(y)


class UNetModel(nn.Module):
    """Same calling convention as the encoder-based dense models."""

    def __init__(self, view: str, n_out: int, volume: bool, widths=UNET_WIDTHS, in_chans: int = 1):
        super().__init__()
        self.view = view
        self.unet = ResidualUNet(in_chans, n_out, 3 if volume else 2, widths)

    def forward(self, image: torch.Tensor, pattern=None) -> torch.Tensor:
        return self.unet(image)

    @torch.no_grad()
    def predict(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward(image).argmax(dim=1)

    @torch.no_grad()
    def heatmaps(self, image: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward(image))
