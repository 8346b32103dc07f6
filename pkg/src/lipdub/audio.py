"""Audio frontend: resampling, log-mel extraction, per-frame windowing, and
the small trainable token encoder that stands in for a frozen speech model."""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError, ShapeError

LOG_FLOOR = 1e-10

# log-mel values live in roughly [-10, 2]; trainable consumers rescale to
# ~[0, 1] so their conv/linear stacks see unit-scale inputs
MEL_SHIFT = 10.0
MEL_SCALE = 12.0


def normalize_mel(window):
    return (window + MEL_SHIFT) / MEL_SCALE


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    tokens_per_frame: int = 26   # T_a
    video_window: int = 5        # T_v
    fps: int = 25
    token_width: int = 384

    @property
    def hop_samples(self) -> int:
        # chosen so T_a mel rows span exactly T_v video frames (123 at defaults)
        return int(round(self.sample_rate * self.video_window /
                         (self.fps * self.tokens_per_frame)))

    @property
    def win_samples(self) -> int:
        return 2 * self.hop_samples


@dataclass
class MelSpectrogram:
    frames: np.ndarray     # M x n_mels float64, log10 magnitude
    hop_samples: int
    sample_rate: int

    @property
    def num_rows(self) -> int:
        return self.frames.shape[0]

    @property
    def hop_seconds(self) -> float:
        return self.hop_samples / self.sample_rate


def resample(signal: np.ndarray, from_rate: int, to_rate: int = 16000) -> np.ndarray:
    """Linear-interpolation resampling; output length = round(n * to/from)."""
    if from_rate <= 0 or to_rate <= 0:
        raise InvalidArgumentError("sample rates must be positive")
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        raise InvalidArgumentError("cannot resample an empty signal")
    if from_rate == to_rate:
        return signal.copy()
    n_out = int(round(signal.size * to_rate / from_rate))
    positions = np.arange(n_out, dtype=np.float64) * from_rate / to_rate
    return np.interp(positions, np.arange(signal.size, dtype=np.float64), signal)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Unit-height triangular filters on the HTK mel scale, 0..sr/2.

    Returns (n_mels, n_fft//2 + 1).
    """
    points_mel = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    points_hz = mel_to_hz(points_mel)
    bin_freqs = np.arange(n_fft // 2 + 1, dtype=np.float64) * sample_rate / n_fft
    fb = np.zeros((n_mels, bin_freqs.size), dtype=np.float64)
    for i in range(n_mels):
        lo, center, hi = points_hz[i], points_hz[i + 1], points_hz[i + 2]
        up = (bin_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_filter_centers(sample_rate: int, n_mels: int) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    points_mel = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(points_mel)[1:-1]


def log_mel(signal: np.ndarray, sample_rate: int, n_mels: int = 80,
            win_samples: int = 246, hop_samples: int = 123) -> MelSpectrogram:
    """Magnitude STFT (Hann, no center padding) -> HTK mel triangles ->
    log10 with floor 1e-10. Row count = floor((n - win)/hop) + 1."""
    signal = np.asarray(signal, dtype=np.float64)
    if win_samples < hop_samples:
        raise InvalidArgumentError("win_samples must be >= hop_samples")
    if signal.size < win_samples:
        raise InvalidArgumentError(
            f"signal of {signal.size} samples shorter than one window ({win_samples})")
    n_rows = (signal.size - win_samples) // hop_samples + 1
    window = np.hanning(win_samples)
    idx = np.arange(win_samples)[None, :] + hop_samples * np.arange(n_rows)[:, None]
    segments = signal[idx] * window[None, :]
    magnitude = np.abs(np.fft.rfft(segments, axis=1))
    fb = mel_filterbank(sample_rate, win_samples, n_mels)
    mel = magnitude @ fb.T
    frames = np.log10(np.maximum(mel, LOG_FLOOR))
    return MelSpectrogram(frames=frames, hop_samples=hop_samples, sample_rate=sample_rate)


def frame_window(mel: MelSpectrogram, video_frame_index: int, fps: int,
                 tokens_per_frame: int = 26) -> np.ndarray:
    """T_a mel rows centered on the row nearest the frame's midpoint time,
    replicate-padded at the edges."""
    mid_time = (video_frame_index + 0.5) / fps
    center = int(round(mid_time / mel.hop_seconds))
    start = center - tokens_per_frame // 2
    rows = np.clip(np.arange(start, start + tokens_per_frame), 0, mel.num_rows - 1)
    return mel.frames[rows]


def sinusoid_positions(length: int, width: int) -> torch.Tensor:
    pe = torch.zeros(length, width)
    pos = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / width))
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class SelfAttentionBlock(nn.Module):
    """Pre-LN transformer encoder block."""

    def __init__(self, width: int, heads: int, ff_width: int):
        super().__init__()
        if width % heads:
            raise InvalidArgumentError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.ln1 = nn.LayerNorm(width, eps=1e-5)
        self.to_q = nn.Linear(width, width)
        self.to_k = nn.Linear(width, width)
        self.to_v = nn.Linear(width, width)
        self.to_out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width, eps=1e-5)
        self.ff = nn.Sequential(nn.Linear(width, ff_width), nn.GELU(),
                                nn.Linear(ff_width, width))

    def forward(self, x):
        h = self.ln1(x)
        b, n, w = h.shape
        d = w // self.heads
        q = self.to_q(h).view(b, n, self.heads, d).transpose(1, 2)
        k = self.to_k(h).view(b, n, self.heads, d).transpose(1, 2)
        v = self.to_v(h).view(b, n, self.heads, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, w)
        x = x + self.to_out(out)
        x = x + self.ff(self.ln2(x))
        return x


class AudioEncoder(nn.Module):
    """Lift 80-d mel rows to 384-d tokens: affine (with fixed input
    rescaling) + sinusoid positions + 2 self-attention blocks + output
    projection. Trained jointly with the backbone, then frozen."""

    def __init__(self, config: AudioConfig = AudioConfig()):
        super().__init__()
        self.config = config
        w = config.token_width
        self.lift = nn.Linear(config.n_mels, w)
        self.register_buffer(
            "positions", sinusoid_positions(config.tokens_per_frame, w),
            persistent=False)
        self.blocks = nn.ModuleList(
            [SelfAttentionBlock(w, heads=4, ff_width=768) for _ in range(2)])
        self.out_proj = nn.Linear(w, w)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        """window: (T_a, 80) or (B, T_a, 80) -> tokens of the same batch shape."""
        squeeze = window.dim() == 2
        if squeeze:
            window = window.unsqueeze(0)
        if window.shape[-2] != self.config.tokens_per_frame:
            raise ShapeError(
                f"expected {self.config.tokens_per_frame} mel rows, got {window.shape[-2]}")
        if window.shape[-1] != self.config.n_mels:
            raise ShapeError(f"expected {self.config.n_mels} mel channels, got {window.shape[-1]}")
        x = self.lift(normalize_mel(window)) + self.positions.to(window.dtype)
        for block in self.blocks:
            x = block(x)
        x = self.out_proj(x)
        return x.squeeze(0) if squeeze else x


def encode_window(encoder: AudioEncoder, window: np.ndarray) -> torch.Tensor:
    """Encode one T_a x 80 mel window to T_a x 384 tokens (no grad)."""
    with torch.no_grad():
        t = torch.as_tensor(np.ascontiguousarray(window), dtype=torch.float32)
        return encoder(t)
