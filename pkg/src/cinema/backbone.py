"""Multi-view convolution-transformer masked autoencoder.

Each view is masked in 16x16 (x1 in depth) patches, encoded by its own
bias-free convolutional stem down to 1/8 resolution, and embedded as one
token per 2x2 feature patch, so every mask patch maps to exactly one token.
Visible tokens from all views are concatenated and passed through a shared
transformer encoder. For reconstruction the intermediate conv features are
pooled onto the token grid and added to the encoded tokens, masked slots are
filled with a learned mask token, and a shared transformer decoder feeds a
per-view linear head that emits one pixel patch per token.

SAX volumes are treated as stacks of 2D slices: the conv stem runs per slice
and the token grid is ``(H/16, W/16, D)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

VIEW_IDS = ("sax", "lax_2c", "lax_3c", "lax_4c")


@dataclass(frozen=True)
class ViewSpec:
    view_id: str
    input_size: tuple[int, ...]  # (H, W) or (H, W, D)
    mask_patch: int = 16
    token_patch: int = 2
    downsample: int = 8

    def __post_init__(self):
        if self.view_id not in VIEW_IDS:
            raise ValueError(f"unknown view {self.view_id!r}")
        if len(self.input_size) not in (2, 3):
            raise ValueError("input_size must be (H, W) or (H, W, D)")
        if self.mask_patch != self.downsample * self.token_patch:
            raise ValueError("mask patch footprint must equal downsample * token_patch")
        for s in self.input_size[:2]:
            if s % self.mask_patch:
                raise ValueError(f"in-plane size {s} is not divisible by {self.mask_patch}")

    @property
    def is_volume(self) -> bool:
        return len(self.input_size) == 3

    @property
    def depth(self) -> int:
        return self.input_size[2] if self.is_volume else 1

    @property
    def token_grid(self) -> tuple[int, ...]:
        h, w = (s // self.mask_patch for s in self.input_size[:2])
        return (h, w, self.depth) if self.is_volume else (h, w)

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.token_grid))


def sax_view(size=(192, 192, 16)) -> ViewSpec:
    return ViewSpec("sax", tuple(size))


def lax_view(view_id: str, size=(256, 256)) -> ViewSpec:
    return ViewSpec(view_id, tuple(size))


@dataclass(frozen=True)
class ModelConfig:
    views: tuple[ViewSpec, ...]
    embed_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 2
    mlp_ratio: float = 4.0
    conv_channels: tuple[int, int] = (16, 32)
    mask_ratio: float = 0.75
    in_chans: int = 1

    def __post_init__(self):
        if self.embed_dim % self.encoder_heads:
            raise ValueError("embed_dim must be divisible by encoder_heads")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError("decoder_dim must be divisible by decoder_heads")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate views")
        for v in self.views:
            if v.downsample != 8:
                raise ValueError("conv stages must downsample exactly 8x (2x per stage)")

    def view(self, view_id: str) -> ViewSpec:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(view_id)

    @property
    def view_ids(self) -> tuple[str, ...]:
        return tuple(v.view_id for v in self.views)

    def with_views(self, view_ids) -> "ModelConfig":
        return dataclasses.replace(self, views=tuple(self.view(v) for v in view_ids))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["views"] = [dataclasses.asdict(v) for v in self.views]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config key(s): {sorted(unknown)}")
        d["views"] = tuple(
            ViewSpec(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()}) for v in d["views"]
        )
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    views = (sax_view((64, 64, 4)),) + tuple(lax_view(v, (64, 64)) for v in VIEW_IDS[1:])
    return ModelConfig(views=views, **overrides)


def base_config(**overrides) -> ModelConfig:
    """ViT-B encoder (768/12/12) with a 512-wide, 8-deep decoder at full image sizes."""
    views = (sax_view(),) + tuple(lax_view(v) for v in VIEW_IDS[1:])
    kw = dict(
        embed_dim=768,
        encoder_depth=12,
        encoder_heads=12,
        decoder_dim=512,
        decoder_depth=8,
        decoder_heads=16,
        conv_channels=(64, 128),
    )
    kw.update(overrides)
    return ModelConfig(views=views, **kw)


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskPattern:
    """Per-view boolean masks over the flattened token grid (True = masked).

    Each entry has shape ``(batch, n_tokens)``.
    """

    masks: dict[str, np.ndarray]
    mask_ratio: float

    def n_masked(self, view: str) -> int:
        return int(self.masks[view][0].sum())

    def visible_index(self, view: str) -> np.ndarray:
        m = self.masks[view]
        return np.stack([np.flatnonzero(~row) for row in m])

    def masked_index(self, view: str) -> np.ndarray:
        m = self.masks[view]
        return np.stack([np.flatnonzero(row) for row in m])


def n_masked_tokens(n_tokens: int, ratio: float) -> int:
    return int(round(ratio * n_tokens))


def sample_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random subset of ``round(ratio * n_tokens)`` masked tokens."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    mask = np.zeros(n_tokens, dtype=bool)
    mask[rng.permutation(n_tokens)[: n_masked_tokens(n_tokens, ratio)]] = True
    return mask


def sample_mask_pattern(config: ModelConfig, batch: int, rng: np.random.Generator, ratio=None) -> MaskPattern:
    ratio = config.mask_ratio if ratio is None else ratio
    masks = {v.view_id: np.stack([sample_mask(v.n_tokens, ratio, rng) for _ in range(batch)]) for v in config.views}
    return MaskPattern(masks, ratio)


def empty_mask_pattern(config: ModelConfig, batch: int) -> MaskPattern:
    return MaskPattern({v.view_id: np.zeros((batch, v.n_tokens), bool) for v in config.views}, 0.0)


def token_mask_grid(mask: np.ndarray | torch.Tensor, spec: ViewSpec) -> torch.Tensor:
    """``(B, n_tokens)`` -> ``(B, *token_grid)`` float tensor."""
    m = torch.as_tensor(np.asarray(mask)) if not isinstance(mask, torch.Tensor) else mask
    return m.reshape((m.shape[0],) + spec.token_grid).float()


def pixel_mask(mask, spec: ViewSpec) -> torch.Tensor:
    """Expand a token mask to input resolution ``(B, H, W[, D])``."""
    g = token_mask_grid(mask, spec)
    p = spec.mask_patch
    g = g.repeat_interleave(p, dim=1).repeat_interleave(p, dim=2)
    return g


def apply_mask(image, mask, spec: ViewSpec):
    """Zero every pixel inside masked patches. ``image`` is ``(B, C, H, W[, D])``."""
    image_t = torch.as_tensor(image)
    pm = pixel_mask(mask, spec).to(image_t.dtype)
    if image_t.shape[0] != pm.shape[0] or tuple(image_t.shape[2:]) != tuple(spec.input_size):
        raise ValueError(f"image shape {tuple(image_t.shape)} does not match view {spec.view_id} {spec.input_size}")
    return image_t * (1 - pm).unsqueeze(1)


# ---------------------------------------------------------------------------
# patch bookkeeping


def patchify(image: torch.Tensor, spec: ViewSpec) -> torch.Tensor:
    """``(B, C, H, W[, D])`` -> ``(B, n_tokens, p*p*C)`` in token-grid order."""
    p = spec.mask_patch
    B, C = image.shape[:2]
    h, w = spec.token_grid[:2]
    d = spec.depth
    x = image if spec.is_volume else image.unsqueeze(-1)
    x = x.reshape(B, C, h, p, w, p, d)
    x = x.permute(0, 2, 4, 6, 3, 5, 1)  # B h w d p p C
    return x.reshape(B, h * w * d, p * p * C)


def unpatchify(patches: torch.Tensor, spec: ViewSpec, channels: int = 1) -> torch.Tensor:
    p = spec.mask_patch
    B = patches.shape[0]
    h, w = spec.token_grid[:2]
    d = spec.depth
    x = patches.reshape(B, h, w, d, p, p, channels)
    x = x.permute(0, 6, 1, 4, 2, 5, 3).reshape(B, channels, h * p, w * p, d)
    return x if spec.is_volume else x.squeeze(-1)


# ---------------------------------------------------------------------------
# positional embeddings


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.einsum("m,d->md", pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_embedding(dim: int, grid: tuple[int, ...]) -> np.ndarray:
    """Fixed per-axis sine-cosine table of shape ``(prod(grid), dim)``.

    Each axis gets an equal even share of the channels; leftover channels
    are zero.
    """
    per_axis = 2 * (dim // (2 * len(grid)))
    coords = np.meshgrid(*[np.arange(g) for g in grid], indexing="ij")
    parts = [sincos_1d(per_axis, c) for c in coords]
    emb = np.concatenate(parts, axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], dim - emb.shape[1]))], axis=1)
    return emb


# ---------------------------------------------------------------------------
# layers


class ChannelNorm(nn.Module):
    """Per-pixel LayerNorm over channels (no spatial mixing), bias-free."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps, bias=False)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class ConvStage(nn.Module):
    """Stride-2 conv, optionally followed by a residual conv; all bias-free.

    Masked locations are re-zeroed after each conv, so no information from
    masked regions propagates across stages.
    """

    def __init__(self, in_ch: int, out_ch: int, pre_norm: bool, residual: bool = True):
        super().__init__()
        self.pre = ChannelNorm(in_ch) if pre_norm else None
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False)
        self.norm = ChannelNorm(out_ch) if residual else None
        self.conv = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False) if residual else None

    def forward(self, x, keep=None):
        if self.pre is not None:
            x = F.gelu(self.pre(x))
        x = self.down(x)
        if keep is not None:
            x = x * keep
        if self.conv is not None:
            x = x + self.conv(F.gelu(self.norm(x)))
            if keep is not None:
                x = x * keep
        return x


class ConvEncoder(nn.Module):
    """Three stride-2 stages: features at 2x, 4x and 8x downsampling.

    The last stage is a single strided conv into ``embed_dim`` channels.
    """

    def __init__(self, in_chans: int, channels: tuple[int, int], embed_dim: int):
        super().__init__()
        c1, c2 = channels
        self.stages = nn.ModuleList(
            [ConvStage(in_chans, c1, pre_norm=False), ConvStage(c1, c2, pre_norm=True), ConvStage(c2, embed_dim, pre_norm=True, residual=False)]
        )
        self.channels = (c1, c2, embed_dim)

    def forward(self, x, mask2d=None):
        """``x``: ``(N, C, H, W)``; ``mask2d``: ``(N, h, w)`` token mask or None."""
        feats = []
        for i, stage in enumerate(self.stages):
            keep = None
            if mask2d is not None:
                factor = 2 ** (2 - i)  # token cell size at this stage's resolution
                keep = 1 - mask2d.repeat_interleave(2 * factor, 1).repeat_interleave(2 * factor, 2)
                keep = keep.unsqueeze(1).to(x.dtype)
            x = stage(x, keep)
            feats.append(x)
        return feats


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn: bool = False):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (C // self.heads) ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def block_param_count(dim: int, mlp_ratio: float) -> int:
    hidden = int(dim * mlp_ratio)
    attn = 3 * dim * dim + 3 * dim + dim * dim + dim
    mlp = dim * hidden + hidden + hidden * dim + dim
    return attn + mlp + 4 * dim


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class TokenBatch:
    """Visible tokens of all views, concatenated in view order."""

    tokens: torch.Tensor  # (B, n_visible, E)
    views: list[str]
    counts: list[int]  # visible tokens per view
    visible_index: dict[str, torch.Tensor]  # view -> (B, n_visible_view) token positions
    masked_index: dict[str, torch.Tensor]
    n_tokens: dict[str, int]

    def __post_init__(self):
        for v in self.views:
            n_vis = self.visible_index[v].shape[1]
            n_msk = self.masked_index[v].shape[1]
            if n_vis + n_msk != self.n_tokens[v]:
                raise ValueError(f"view {v}: visible and masked tokens do not partition the grid")


@dataclass
class EncoderOutput:
    tokens: torch.Tensor  # encoded visible tokens (B, n_visible, E)
    batch: TokenBatch
    stage_features: dict[str, list[torch.Tensor]] = field(default_factory=dict)
    hidden: list[torch.Tensor] = field(default_factory=list)  # per-block outputs

    def view_tokens(self, view: str, source: torch.Tensor | None = None) -> torch.Tensor:
        src = self.tokens if source is None else source
        start = 0
        for v, c in zip(self.batch.views, self.batch.counts):
            if v == view:
                return src[:, start : start + c]
            start += c
        raise KeyError(view)


class MultiViewEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        E = config.embed_dim
        self.conv = nn.ModuleDict(
            {v.view_id: ConvEncoder(config.in_chans, config.conv_channels, E) for v in config.views}
        )
        self.patch_embed = nn.ModuleDict(
            {v.view_id: nn.Conv2d(E, E, kernel_size=2, stride=2) for v in config.views}
        )
        self.view_embed = nn.ParameterDict(
            {v.view_id: nn.Parameter(torch.zeros(1, 1, E)) for v in config.views}
        )
        for v in config.views:
            self.register_buffer(
                f"pos_{v.view_id}", torch.tensor(sincos_embedding(E, v.token_grid), dtype=torch.float32)[None], persistent=False
            )
        self.blocks = nn.ModuleList([Block(E, config.encoder_heads, config.mlp_ratio) for _ in range(config.encoder_depth)])
        self.norm = nn.LayerNorm(E, eps=1e-6) if config.encoder_depth > 0 else nn.Identity()
        self._init_weights()

    def _init_weights(self):
        if self.view_embed and next(iter(self.view_embed.values())).is_meta:
            return
        for p in self.view_embed.values():
            nn.init.normal_(p, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def view_ids(self) -> tuple[str, ...]:
        return tuple(self.conv.keys())

    def drop_views(self, keep) -> None:
        """Remove conv/token branches for views not in ``keep``."""
        keep = list(keep)
        for v in list(self.conv.keys()):
            if v not in keep:
                del self.conv[v]
                del self.patch_embed[v]
                del self.view_embed[v]
                delattr(self, f"pos_{v}")
        self.config = self.config.with_views([v for v in self.config.view_ids if v in keep])

    def _conv_view(self, view: str, image: torch.Tensor, mask) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Run the conv stem; returns stage features and the full token grid ``(B, n_tokens, E)``."""
        spec = self.config.view(view)
        B = image.shape[0]
        x = image
        m2d = None
        if spec.is_volume:
            D = spec.depth
            x = x.permute(0, 4, 1, 2, 3).reshape(B * D, x.shape[1], *spec.input_size[:2])
        if mask is not None:
            g = token_mask_grid(mask, spec).to(image.device)
            m2d = g.permute(0, 3, 1, 2).reshape(-1, *g.shape[1:3]) if spec.is_volume else g
        feats = self.conv[view](x, m2d)
        tok = self.patch_embed[view](feats[-1])  # (N, E, h, w)
        E = tok.shape[1]
        if spec.is_volume:
            h, w, D = spec.token_grid
            tok = tok.reshape(B, D, E, h, w).permute(0, 3, 4, 1, 2).reshape(B, h * w * D, E)
        else:
            tok = tok.flatten(2).transpose(1, 2)
        tok = tok + getattr(self, f"pos_{view}").to(tok.dtype) + self.view_embed[view]
        return feats, tok

    def embed(self, images: dict[str, torch.Tensor], pattern: MaskPattern | None = None):
        views = [v for v in self.view_ids if v in images]
        if not views:
            raise ValueError("no input views match the encoder")
        parts, vis_idx, msk_idx, counts, n_tok, feats_all = [], {}, {}, [], {}, {}
        for v in views:
            mask = None if pattern is None else pattern.masks[v]
            x = images[v]
            if mask is not None:
                x = apply_mask(x, mask, self.config.view(v))
            feats, tok = self._conv_view(v, x, mask)
            feats_all[v] = feats
            B, N, E = tok.shape
            if mask is None:
                vi = torch.arange(N).expand(B, N)
                mi = torch.zeros(B, 0, dtype=torch.long)
            else:
                mt = torch.as_tensor(np.asarray(mask))
                vi = torch.stack([torch.nonzero(~row).flatten() for row in mt])
                mi = torch.stack([torch.nonzero(row).flatten() for row in mt])
            parts.append(torch.gather(tok, 1, vi.unsqueeze(-1).expand(-1, -1, E)))
            vis_idx[v], msk_idx[v] = vi, mi
            counts.append(vi.shape[1])
            n_tok[v] = N
        batch = TokenBatch(torch.cat(parts, dim=1), views, counts, vis_idx, msk_idx, n_tok)
        return batch, feats_all

    def encode(self, batch: TokenBatch, return_hidden: bool = False):
        x = batch.tokens
        hidden = []
        for blk in self.blocks:
            x = blk(x)
            hidden.append(x)
        x = self.norm(x)
        return (x, hidden) if return_hidden else x

    def forward(self, images: dict[str, torch.Tensor], pattern: MaskPattern | None = None) -> EncoderOutput:
        batch, feats = self.embed(images, pattern)
        x, hidden = self.encode(batch, return_hidden=True)
        return EncoderOutput(x, batch, feats, hidden)


class MaskedDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        E, Dd = config.embed_dim, config.decoder_dim
        c1, c2 = config.conv_channels
        self.fuse = nn.ModuleDict(
            {v.view_id: nn.ModuleList([nn.Linear(c1, E), nn.Linear(c2, E)]) for v in config.views}
        )
        self.embed = nn.Linear(E, Dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, Dd))
        self.view_embed = nn.ParameterDict({v.view_id: nn.Parameter(torch.zeros(1, 1, Dd)) for v in config.views})
        for v in config.views:
            self.register_buffer(
                f"pos_{v.view_id}", torch.tensor(sincos_embedding(Dd, v.token_grid), dtype=torch.float32)[None], persistent=False
            )
        self.blocks = nn.ModuleList([Block(Dd, config.decoder_heads, config.mlp_ratio) for _ in range(config.decoder_depth)])
        self.norm = nn.LayerNorm(Dd, eps=1e-6)
        p = config.views[0].mask_patch
        self.head = nn.ModuleDict({v.view_id: nn.Linear(Dd, p * p * config.in_chans) for v in config.views})
        if self.mask_token.is_meta:
            return
        nn.init.normal_(self.mask_token, std=0.02)
        for pv in self.view_embed.values():
            nn.init.normal_(pv, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def _pooled_stage(self, view: str, feats: list[torch.Tensor], B: int) -> torch.Tensor:
        """Stage-1/2 features average-pooled to the token grid, projected and summed: ``(B, n_tokens, E)``."""
        spec = self.config.view(view)
        out = 0
        for i, lin in enumerate(self.fuse[view]):
            f = F.avg_pool2d(feats[i], kernel_size=8 // 2**i)  # 2x -> 16x, 4x -> 16x
            N, C, h, w = f.shape
            if spec.is_volume:
                f = f.reshape(B, spec.depth, C, h, w).permute(0, 3, 4, 1, 2).reshape(B, h * w * spec.depth, C)
            else:
                f = f.flatten(2).transpose(1, 2)
            out = out + lin(f)
        return out

    def forward(self, enc: EncoderOutput) -> dict[str, torch.Tensor]:
        batch = enc.batch
        B = enc.tokens.shape[0]
        seqs, sizes = [], []
        for v in batch.views:
            if v not in self.head:
                raise ValueError(f"decoder has no branch for view {v!r}")
            vis = batch.visible_index[v]
            if len(enc.stage_features.get(v, [])) < 2:
                raise ValueError(f"stage features missing for view {v!r}")
            fused = self._pooled_stage(v, enc.stage_features[v], B)
            E = fused.shape[-1]
            tok = enc.view_tokens(v) + torch.gather(fused, 1, vis.unsqueeze(-1).expand(-1, -1, E))
            tok = self.embed(tok)
            N = batch.n_tokens[v]
            full = self.mask_token.expand(B, N, -1).to(tok.dtype).clone()
            full = full.scatter(1, vis.unsqueeze(-1).expand(-1, -1, tok.shape[-1]), tok)
            full = full + getattr(self, f"pos_{v}").to(tok.dtype) + self.view_embed[v]
            seqs.append(full)
            sizes.append(N)
        x = torch.cat(seqs, dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        out = {}
        for v, part in zip(batch.views, torch.split(x, sizes, dim=1)):
            spec = self.config.view(v)
            out[v] = unpatchify(self.head[v](part), spec, self.config.in_chans)
        return out


class CineMA(nn.Module):
    """Masked autoencoder wrapper: shared encoder plus reconstruction decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = MultiViewEncoder(config)
        self.decoder = MaskedDecoder(config)

    def forward(self, images: dict[str, torch.Tensor], pattern: MaskPattern):
        enc = self.encoder(images, pattern)
        return self.decoder(enc)


# ---------------------------------------------------------------------------
# loss and bookkeeping


def masked_mse(pred: dict, target: dict, pattern: MaskPattern, config: ModelConfig | None = None) -> torch.Tensor:
    """Mean squared error over masked pixels per view, then averaged over views."""
    losses = []
    for v, p in pred.items():
        t = target[v]
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch for view {v}: {tuple(p.shape)} vs {tuple(t.shape)}")
        spec = config.view(v) if config is not None else _spec_from_shape(v, p.shape)
        pm = pixel_mask(pattern.masks[v], spec).to(p.dtype).unsqueeze(1).expand_as(p)
        n = pm.sum()
        if n == 0:
            raise ValueError(f"view {v} has no masked pixels; masked loss is undefined")
        losses.append((((p - t) ** 2) * pm).sum() / n)
    return torch.stack(losses).mean()


def _spec_from_shape(view: str, shape) -> ViewSpec:
    return ViewSpec(view, tuple(shape[2:]))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def param_count(config_or_module) -> int:
    """Exact learnable-parameter count of a config (built on the meta device) or module."""
    if isinstance(config_or_module, nn.Module):
        return count_parameters(config_or_module)
    with torch.device("meta"):
        model = CineMA(config_or_module)
    return count_parameters(model)


def images_to_tensors(images: dict[str, np.ndarray], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """``(B, H, W[, D])`` numpy arrays -> ``(B, 1, H, W[, D])`` tensors."""
    return {v: torch.as_tensor(np.asarray(x), dtype=dtype).unsqueeze(1) for v, x in images.items()}
