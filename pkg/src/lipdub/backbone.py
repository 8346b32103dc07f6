"""Audio-conditioned inpainting U-Net on 2c-channel latents.

Audio tokens are fused at every level plus the bottleneck through
multi-head cross-attention sites. Each site exposes its projection
matrices as a handle so identity-adapter branches can be attached beside
it and ablations can address individual sites. Prediction is one-shot:
a single forward pass, no timestep conditioning or iterative refinement.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericError, ShapeError, StateError


@dataclass(frozen=True)
class BackboneConfig:
    levels: int = 3
    channels: tuple = (32, 64, 128)
    heads: int = 4
    kv_width: int = 384        # audio/identity token width
    inner_width: int = 128     # common attention width d shared by all sites
    latent_channels: int = 8

    def __post_init__(self):
        for ch in self.channels:
            if ch % self.heads:
                raise ShapeError(f"channel width {ch} not divisible by heads {self.heads}")
        if self.inner_width % self.heads:
            raise ShapeError(
                f"inner width {self.inner_width} not divisible by heads {self.heads}")


def multi_head_attention(q, k, v, heads: int):
    """Scaled dot-product attention over already-projected q/k/v:
    (B, N, d) x (B, T, d) -> (B, N, d), per-head scale 1/sqrt(d/heads)."""
    b, n, d = q.shape
    t = k.shape[1]
    dh = d // heads
    q = q.view(b, n, heads, dh).transpose(1, 2)
    k = k.view(b, t, heads, dh).transpose(1, 2)
    v = v.view(b, t, heads, dh).transpose(1, 2)
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    return (attn @ v).transpose(1, 2).reshape(b, n, d)


class CrossAttentionSite(nn.Module):
    """One audio-visual fusion site; the attachable handle for adapters.

    Projections are bias-free matrices: Q from visual tokens, K/V from
    the 384-wide conditioning tokens, all into a common inner width.
    """

    def __init__(self, index: int, query_width: int, kv_width: int = 384,
                 inner_width: int = 128, heads: int = 4):
        super().__init__()
        self.index = index
        self.query_width = query_width
        self.kv_width = kv_width
        self.inner_width = inner_width
        self.heads = heads
        self.to_q = nn.Linear(query_width, inner_width, bias=False)
        self.to_k = nn.Linear(kv_width, inner_width, bias=False)
        self.to_v = nn.Linear(kv_width, inner_width, bias=False)
        self.to_out = nn.Linear(inner_width, query_width, bias=False)
        # AdapterBranch installed by identity_adapter.attach; kept out of the
        # module tree so branch parameters never enter the backbone group
        object.__setattr__(self, "branch", None)

    def forward(self, queries, audio_tokens, identity_tokens=None, lam: float = 0.0):
        """(B, N, query_width) x (B, T, kv_width) -> (B, N, query_width);
        adds lam * identity branch when one is attached."""
        if queries.shape[-1] != self.query_width:
            raise ShapeError(
                f"site {self.index}: query width {queries.shape[-1]} != {self.query_width}")
        if audio_tokens.shape[-1] != self.kv_width:
            raise ShapeError(
                f"site {self.index}: kv width {audio_tokens.shape[-1]} != {self.kv_width}")
        q = self.to_q(queries)
        merged = multi_head_attention(q, self.to_k(audio_tokens),
                                      self.to_v(audio_tokens), self.heads)
        if identity_tokens is not None and lam != 0.0:
            if self.branch is None:
                raise StateError(
                    f"site {self.index}: identity tokens given but no branch attached")
            merged = merged + lam * multi_head_attention(
                q, self.branch.to_k(identity_tokens),
                self.branch.to_v(identity_tokens), self.heads)
        return self.to_out(merged)


def cross_attention(queries: torch.Tensor, keys_values: torch.Tensor,
                    site: CrossAttentionSite) -> torch.Tensor:
    """Host-path attention through a site's matrices (no adapter branch).

    Accepts (N, d) / (T, w) or batched (B, N, d) / (B, T, w).
    """
    squeeze = queries.dim() == 2
    if squeeze:
        queries = queries.unsqueeze(0)
    if keys_values.dim() == 2:
        keys_values = keys_values.unsqueeze(0).expand(queries.shape[0], -1, -1)
    out = site(queries, keys_values)
    return out.squeeze(0) if squeeze else out


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


def sinusoid_positions_2d(h: int, w: int, width: int) -> torch.Tensor:
    """Fixed 2-d positional encoding for row-major flattened (h*w, width)."""
    half = width // 2
    div = torch.exp(torch.arange(0, half, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / half))
    rows = torch.arange(h, dtype=torch.float32).unsqueeze(1) * div
    cols = torch.arange(w, dtype=torch.float32).unsqueeze(1) * div
    row_pe = torch.cat([torch.sin(rows), torch.cos(rows)], dim=1)   # (h, half)
    col_pe = torch.cat([torch.sin(cols), torch.cos(cols)], dim=1)   # (w, half)
    pe = torch.cat([
        row_pe.unsqueeze(1).expand(h, w, half),
        col_pe.unsqueeze(0).expand(h, w, half),
    ], dim=-1)
    return pe.reshape(h * w, width)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        c0, c1, c2 = config.channels
        zc = 2 * config.latent_channels
        self.stem = nn.Conv2d(zc, c0, 3, padding=1)
        self.res0 = ResBlock(c0)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.res1 = ResBlock(c1)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res2 = ResBlock(c2)
        self.mid = ResBlock(c2)
        self.up1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                 nn.Conv2d(c2, c1, 3, padding=1))
        self.merge1 = nn.Conv2d(2 * c1, c1, 1)
        self.dres1 = ResBlock(c1)
        self.up0 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                 nn.Conv2d(c1, c0, 3, padding=1))
        self.merge0 = nn.Conv2d(2 * c0, c0, 1)
        self.dres0 = ResBlock(c0)
        self.head = nn.Sequential(nn.GroupNorm(8, c0), nn.SiLU(),
                                  nn.Conv2d(c0, config.latent_channels, 3, padding=1))
        self.sites = nn.ModuleList([
            CrossAttentionSite(0, c0, config.kv_width, config.inner_width, config.heads),
            CrossAttentionSite(1, c1, config.kv_width, config.inner_width, config.heads),
            CrossAttentionSite(2, c2, config.kv_width, config.inner_width, config.heads),
            CrossAttentionSite(3, c2, config.kv_width, config.inner_width, config.heads),
        ])
        self.adapter_attached = False
        self._pos_cache: dict = {}

    def attention_sites(self) -> list[CrossAttentionSite]:
        return list(self.sites)

    def _positions(self, h: int, w: int, width: int) -> torch.Tensor:
        key = (h, w, width)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoid_positions_2d(h, w, width)
        return self._pos_cache[key]

    def _fuse(self, x, site_index, audio_tokens, identity_tokens, lam, check=True):
        b, ch, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)             # (B, hw, ch) row-major
        pos = self._positions(h, w, ch).to(x.dtype)
        delta = self.sites[site_index](tokens + pos, audio_tokens, identity_tokens, lam)
        x = x + delta.transpose(1, 2).reshape(b, ch, h, w)
        if check and not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations after attention site {site_index}")
        return x

    def forward(self, z: torch.Tensor, audio_tokens: torch.Tensor,
                identity_tokens: torch.Tensor = None, lam: float = 0.0) -> torch.Tensor:
        """z: (B, 2c, h, w); audio_tokens: (B, T, 384) or (T, 384);
        identity_tokens: optional (B, Nq, 384) or (Nq, 384); returns (B, c, h, w)."""
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        zc = 2 * self.config.latent_channels
        if z.shape[1] != zc:
            raise ShapeError(f"expected {zc}-channel latent input, got {z.shape[1]}")
        if audio_tokens.dim() == 2:
            audio_tokens = audio_tokens.unsqueeze(0).expand(z.shape[0], -1, -1)
        if audio_tokens.shape[-1] != self.config.kv_width:
            raise ShapeError(
                f"audio token width {audio_tokens.shape[-1]} != {self.config.kv_width}")
        if identity_tokens is not None:
            if not self.adapter_attached:
                raise StateError("identity tokens passed but no adapter attached")
            if identity_tokens.dim() == 2:
                identity_tokens = identity_tokens.unsqueeze(0).expand(z.shape[0], -1, -1)

        x = self.stem(z)
        x = self.res0(x)
        x = self._fuse(x, 0, audio_tokens, identity_tokens, lam)
        skip0 = x
        x = self.down0(x)
        x = self.res1(x)
        x = self._fuse(x, 1, audio_tokens, identity_tokens, lam)
        skip1 = x
        x = self.down1(x)
        x = self.res2(x)
        x = self._fuse(x, 2, audio_tokens, identity_tokens, lam)
        x = self.mid(x)
        x = self._fuse(x, 3, audio_tokens, identity_tokens, lam)
        x = self.up1(x)
        x = self.dres1(self.merge1(torch.cat([x, skip1], dim=1)))
        x = self.up0(x)
        x = self.dres0(self.merge0(torch.cat([x, skip0], dim=1)))
        out = self.head(x)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite activations in output head")
        return out.squeeze(0) if squeeze else out
