"""Frozen convolutional frame codec: 4x spatial downsampling to an
8-channel latent grid and back. Stands in for a pretrained VQ-VAE; plain
autoencoder, no quantization."""

import numpy as np
import torch
from torch import nn

from .corpus import FrameClip
from .errors import InvalidArgumentError, ShapeError

LATENT_CHANNELS = 8
DOWNSAMPLE = 4


class LatentCodec(nn.Module):
    """Two stride-2 conv blocks + 1x1 channel head; sub-pixel (shuffle)
    decoder with one 3x3 mixing conv, final clamp to [0,1].

    Kernel extents are chosen so lower-half content bleeds at most ~3
    pixels above the seam after a mask -> encode -> decode round trip.
    """

    def __init__(self, channels: int = LATENT_CHANNELS):
        super().__init__()
        self.channels = channels
        self.enc1 = nn.Sequential(nn.Conv2d(3, 48, 3, stride=2, padding=1), nn.SiLU())
        self.enc2 = nn.Sequential(nn.Conv2d(48, 96, 3, stride=2, padding=1), nn.SiLU())
        self.enc_mix = nn.Sequential(nn.Conv2d(96, 96, 1), nn.SiLU())
        self.enc_head = nn.Conv2d(96, channels, 1)
        self.dec_head = nn.Sequential(nn.Conv2d(channels, 96, 1), nn.SiLU())
        self.dec_up1 = nn.Sequential(nn.Conv2d(96, 48 * 4, 1), nn.PixelShuffle(2),
                                     nn.SiLU())
        self.dec_mix = nn.Sequential(nn.Conv2d(48, 48, 3, padding=1), nn.SiLU())
        self.dec_up2 = nn.Sequential(nn.Conv2d(48, 3 * 4, 1), nn.PixelShuffle(2))

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0,1] -> (B, c, H/4, W/4)."""
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W), got {tuple(frames.shape)}")
        if frames.shape[2] % DOWNSAMPLE or frames.shape[3] % DOWNSAMPLE:
            raise ShapeError(f"H,W must be divisible by {DOWNSAMPLE}, got {tuple(frames.shape[2:])}")
        return self.enc_head(self.enc_mix(self.enc2(self.enc1(frames))))

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """(B, c, h, w) -> (B, 3, 4h, 4w) clamped to [0,1]."""
        if latents.dim() != 4 or latents.shape[1] != self.channels:
            raise ShapeError(f"expected (B,{self.channels},h,w), got {tuple(latents.shape)}")
        x = self.dec_head(latents)
        x = self.dec_mix(self.dec_up1(x))
        return torch.clamp(self.dec_up2(x), 0.0, 1.0)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(frames))


def mask_lower_half(frame: np.ndarray) -> np.ndarray:
    """Zero rows H/2..H-1 of an (..., H, W, 3) array; upper half untouched."""
    out = np.array(frame, copy=True)
    h = out.shape[-3]
    out[..., h // 2:, :, :] = 0.0
    return out


def mask_lower_half_t(frames: torch.Tensor) -> torch.Tensor:
    """Tensor variant for (..., C, H, W) layouts."""
    out = frames.clone()
    h = out.shape[-2]
    out[..., h // 2:, :] = 0.0
    return out


def concat_latents(z_reference: torch.Tensor, z_masked: torch.Tensor) -> torch.Tensor:
    """Channel-wise concatenation, reference first."""
    if z_reference.shape[-2:] != z_masked.shape[-2:]:
        raise ShapeError(
            f"spatial mismatch {tuple(z_reference.shape[-2:])} vs {tuple(z_masked.shape[-2:])}")
    return torch.cat([z_reference, z_masked], dim=-3)


def feather_composite(decoded: torch.Tensor, source: torch.Tensor,
                      feather_rows: int = 2) -> torch.Tensor:
    """Paste the decoded lower half into the source frame with a linear
    feather over the first `feather_rows` rows below the seam; the upper
    half stays bit-identical to the source."""
    if decoded.shape != source.shape:
        raise ShapeError(f"shape mismatch {tuple(decoded.shape)} vs {tuple(source.shape)}")
    h = source.shape[-2]
    alpha = torch.zeros(h, dtype=source.dtype)
    alpha[h // 2:] = 1.0
    for i in range(feather_rows):
        alpha[h // 2 + i] = (i + 1) / (feather_rows + 1)
    alpha = alpha.view(h, 1)
    return source * (1 - alpha) + decoded * alpha


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(F, H, W, 3) or (H, W, 3) numpy -> (F, 3, H, W) float32 tensor."""
    arr = np.ascontiguousarray(frames, dtype=np.float32)
    t = torch.from_numpy(arr)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(t: torch.Tensor) -> np.ndarray:
    """(F, 3, H, W) tensor -> (F, H, W, 3) float32 numpy."""
    return t.detach().permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)


def pretrain_codec(clips: list[FrameClip], steps: int = 1200, batch: int = 32,
                   lr: float = 2e-3, seed: int = 0):
    """L1 reconstruction pretraining over all frames; returns the frozen
    codec and the per-step loss history."""
    if not clips:
        raise InvalidArgumentError("empty corpus")
    torch.manual_seed(seed)
    codec = LatentCodec()
    opt = torch.optim.AdamW(codec.parameters(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)

    all_frames = torch.cat([frames_to_tensor(c.frames) for c in clips])
    history = []
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, all_frames.shape[0], size=batch))
        x = all_frames[idx]
        loss = (codec(x) - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))

    codec.requires_grad_(False)
    codec.eval()
    return codec, history
