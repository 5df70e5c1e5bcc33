"""Task heads attached to a pre-trained encoder, and their losses."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import EncoderOutput, MaskPattern, MultiViewEncoder

N_SEG_CLASSES = 4
N_LANDMARKS = 3


# ---------------------------------------------------------------------------
# targets


def gaussian_heatmap(landmark_mm, shape, spacing, sigma: float = 3.0) -> np.ndarray:
    """``exp(-d^2 / (2 sigma^2))`` with ``d`` the pixel distance to the landmark.

    Landmarks are in mm from the grid's low edge (pixel ``i`` centred at
    ``(i + 0.5) * spacing``).
    """
    px = np.asarray(landmark_mm, float) / np.asarray(spacing, float) - 0.5
    for p, n in zip(px, shape):
        if not -0.5 <= p <= n - 0.5:
            raise ValueError(f"landmark {tuple(landmark_mm)} mm lies outside the {tuple(shape)} grid")
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    d2 = sum((g - p) ** 2 for g, p in zip(grids, px))
    return np.exp(-d2 / (2.0 * sigma**2))


def landmark_heatmaps(landmarks_mm, shape, spacing, sigma: float = 3.0) -> np.ndarray:
    return np.stack([gaussian_heatmap(p, shape, spacing, sigma) for p in landmarks_mm])


# ---------------------------------------------------------------------------
# losses


def soft_dice(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Mean over classes of ``(2 sum(pq) + s) / (sum(p) + sum(q) + s)``; inputs ``(B, C, ...)``."""
    dims = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * target).sum(dims)
    denom = probs.sum(dims) + target.sum(dims)
    return ((2 * inter + smooth) / (denom + smooth)).mean()


def dice_ce(logits: torch.Tensor, target: torch.Tensor, activation: str = "softmax") -> torch.Tensor:
    """Soft Dice loss plus cross-entropy, equally weighted.

    ``target`` is either integer labels ``(B, ...)`` or soft labels with the
    same shape as ``logits``. With ``activation="sigmoid"`` every channel is
    an independent binary map (used for heatmaps) and CE is binary.
    """
    if activation == "softmax":
        if target.dtype in (torch.int64, torch.int32, torch.uint8):
            target = F.one_hot(target.long(), logits.shape[1]).movedim(-1, 1).to(logits.dtype)
        probs = logits.softmax(dim=1)
        ce = -(target * logits.log_softmax(dim=1)).sum(1).mean()
    elif activation == "sigmoid":
        target = target.to(logits.dtype)
        probs = torch.sigmoid(logits)
        ce = F.binary_cross_entropy_with_logits(logits, target)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return (1.0 - soft_dice(probs, target)) + ce


def ce_label_smooth(logits: torch.Tensor, labels: torch.Tensor, eps: float = 0.1) -> torch.Tensor:
    """Cross-entropy with label smoothing; a single logit column means binary."""
    if logits.shape[-1] == 1:
        y = labels.to(logits.dtype).reshape(logits.shape)
        return F.binary_cross_entropy_with_logits(logits, y * (1 - eps) + 0.5 * eps)
    return F.cross_entropy(logits, labels.long(), label_smoothing=eps)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


def wing(pred: torch.Tensor, target: torch.Tensor, w: float = 10.0, eps: float = 2.0) -> torch.Tensor:
    """Wing loss: logarithmic near zero, linear beyond ``w``."""
    x = (pred - target).abs()
    c = w - w * np.log1p(w / eps)
    return torch.where(x < w, w * torch.log1p(x / eps), x - c).mean()


# ---------------------------------------------------------------------------
# modules


def _require_full_image(pattern: MaskPattern | None) -> None:
    if pattern is not None and any(np.asarray(m).any() for m in pattern.masks.values()):
        raise ValueError("task heads need unmasked inputs (mask ratio 0)")


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(1, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        y = F.gelu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.gelu(y + self.skip(x))


class UNetRHead(nn.Module):
    """UNETR-style decoder over one view.

    Final and middle transformer tokens are merged at token resolution and
    upsampled with transposed convs, concatenating the conv-stem features at
    8x, 4x and 2x and a full-resolution image embedding on the way.
    """

    def __init__(self, encoder: MultiViewEncoder, view: str, n_out: int, channels=(64, 32, 16, 16)):
        super().__init__()
        cfg = encoder.config
        self.view = view
        self.spec = cfg.view(view)
        E = cfg.embed_dim
        c1, c2 = cfg.conv_channels
        d3, d2, d1, d0 = channels
        self.mid_layer = max(cfg.encoder_depth // 2 - 1, 0)
        # skip features and the mid-layer residual stream are unnormalised and
        # can be large after pre-training; bring them to a common scale
        self.mid_norm = nn.LayerNorm(E)
        self.skip_norms = nn.ModuleList([nn.GroupNorm(c, c) for c in (c1, c2, E)])
        self.merge = nn.Conv2d(2 * E, E, 1)
        self.up3 = nn.ConvTranspose2d(E, d3, 2, stride=2)
        self.dec3 = ConvBlock(d3 + E, d3)
        self.up2 = nn.ConvTranspose2d(d3, d2, 2, stride=2)
        self.dec2 = ConvBlock(d2 + c2, d2)
        self.up1 = nn.ConvTranspose2d(d2, d1, 2, stride=2)
        self.dec1 = ConvBlock(d1 + c1, d1)
        self.up0 = nn.ConvTranspose2d(d1, d0, 2, stride=2)
        self.img = ConvBlock(cfg.in_chans, d0)
        self.dec0 = ConvBlock(2 * d0, d0)
        self.out = nn.Conv2d(d0, n_out, 1)

    def _grid(self, tokens: torch.Tensor) -> torch.Tensor:
        """``(B, N, E)`` in token-grid order -> ``(B*D, E, h, w)``."""
        B, N, E = tokens.shape
        h, w = self.spec.token_grid[:2]
        D = self.spec.depth
        return tokens.reshape(B, h, w, D, E).permute(0, 3, 4, 1, 2).reshape(B * D, E, h, w)

    def forward(self, enc: EncoderOutput, image: torch.Tensor) -> torch.Tensor:
        final = enc.view_tokens(self.view)
        mid = self.mid_norm(enc.view_tokens(self.view, enc.hidden[self.mid_layer])) if enc.hidden else final
        s1, s2, s3 = (n(f) for n, f in zip(self.skip_norms, enc.stage_features[self.view]))
        x = self.merge(torch.cat([self._grid(final), self._grid(mid)], dim=1))
        x = self.dec3(torch.cat([self.up3(x), s3], dim=1))
        x = self.dec2(torch.cat([self.up2(x), s2], dim=1))
        x = self.dec1(torch.cat([self.up1(x), s1], dim=1))
        B = image.shape[0]
        img = image
        if self.spec.is_volume:
            D = self.spec.depth
            img = image.permute(0, 4, 1, 2, 3).reshape(B * D, image.shape[1], *self.spec.input_size[:2])
        x = self.dec0(torch.cat([self.up0(x), self.img(img)], dim=1))
        x = self.out(x)
        if self.spec.is_volume:
            x = x.reshape(B, self.spec.depth, x.shape[1], *x.shape[2:]).permute(0, 2, 3, 4, 1)
        return x


class SegmentationModel(nn.Module):
    """Encoder + UNETR head producing per-class logits at input resolution."""

    def __init__(self, encoder: MultiViewEncoder, view: str, n_out: int = N_SEG_CLASSES, channels=(64, 32, 16, 16)):
        super().__init__()
        self.encoder = encoder
        self.view = view
        self.head = UNetRHead(encoder, view, n_out, channels)

    def forward(self, image: torch.Tensor, pattern: MaskPattern | None = None) -> torch.Tensor:
        _require_full_image(pattern)
        enc = self.encoder({self.view: image})
        return self.head(enc, image)

    @torch.no_grad()
    def predict(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward(image).argmax(dim=1)


class HeatmapModel(SegmentationModel):
    """Three landmark channels; ``heatmaps`` applies the sigmoid."""

    def __init__(self, encoder: MultiViewEncoder, view: str, channels=(64, 32, 16, 16)):
        super().__init__(encoder, view, N_LANDMARKS, channels)

    @torch.no_grad()
    def heatmaps(self, image: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward(image))


def pool_tokens(enc: EncoderOutput) -> torch.Tensor:
    """Mean over every token of every view."""
    return enc.tokens.mean(dim=1)


class LinearHead(nn.Module):
    def __init__(self, in_dim: int, n_out: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, n_out)

    def forward(self, x):
        return self.fc(x)


class LinearModel(nn.Module):
    """Pooled encoder features of one or more frames -> logits or scalars.

    ``n_frames`` frames (e.g. ED and ES) are encoded separately and their
    pooled features concatenated before the linear layer.
    """

    def __init__(self, encoder: MultiViewEncoder, n_out: int, n_frames: int = 1):
        super().__init__()
        self.encoder = encoder
        self.n_frames = n_frames
        self.head = LinearHead(encoder.config.embed_dim * n_frames, n_out)

    def features(self, frames: list[dict[str, torch.Tensor]]) -> torch.Tensor:
        if len(frames) != self.n_frames:
            raise ValueError(f"expected {self.n_frames} frames, got {len(frames)}")
        return torch.cat([pool_tokens(self.encoder(f)) for f in frames], dim=-1)

    def forward(self, frames: list[dict[str, torch.Tensor]], pattern: MaskPattern | None = None) -> torch.Tensor:
        _require_full_image(pattern)
        return self.head(self.features(frames))


class CoordinateModel(LinearModel):
    """Direct regression of the three landmarks (x, y) in mm."""

    def __init__(self, encoder: MultiViewEncoder, n_frames: int = 1):
        super().__init__(encoder, 2 * N_LANDMARKS, n_frames)
