"""Audio-visual synchronization expert: embeds 5-frame lower-half video
windows and 26-row mel windows into a shared 128-d space. Supplies the
lip-sync training loss and backs the sync error metrics."""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .audio import AudioConfig, frame_window, log_mel, normalize_mel
from .corpus import FrameClip
from .errors import InvalidArgumentError, ShapeError

P_SYNC_FLOOR = 1e-7


@dataclass(frozen=True)
class SyncConfig:
    video_window: int = 5     # T_v
    audio_window: int = 26    # T_a
    n_mels: int = 80
    embed_dim: int = 128
    frame_height: int = 64
    frame_width: int = 64


class SyncExpert(nn.Module):
    """Video tower: 3-d convs over stacked lower-half frames; audio tower:
    2-d convs over the mel window; both project to 128."""

    def __init__(self, config: SyncConfig = SyncConfig()):
        super().__init__()
        self.config = config
        self.video_tower = nn.Sequential(
            nn.Conv3d(3, 16, 3, stride=(1, 2, 2), padding=1), nn.SiLU(),
            nn.Conv3d(16, 32, 3, stride=(1, 2, 2), padding=1), nn.SiLU(),
            nn.Conv3d(32, 64, 3, stride=(2, 2, 2), padding=1), nn.SiLU(),
            nn.Conv3d(64, 64, 3, stride=(2, 2, 2), padding=1), nn.SiLU(),
        )
        with torch.no_grad():
            v_flat = self.video_tower(torch.zeros(
                1, 3, config.video_window, config.frame_height // 2,
                config.frame_width)).flatten(1).shape[1]
        self.video_head = nn.Linear(v_flat, config.embed_dim)
        self.audio_tower = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.SiLU(),
        )
        with torch.no_grad():
            a_flat = self.audio_tower(torch.zeros(
                1, 1, config.audio_window, config.n_mels)).flatten(1).shape[1]
        self.audio_head = nn.Linear(a_flat, config.embed_dim)

    def embed_video(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, T_v, H/2, W, 3) lower halves in [0,1] -> (B, 128)."""
        if windows.dim() != 5 or windows.shape[1] != self.config.video_window:
            raise ShapeError(f"expected (B,{self.config.video_window},H/2,W,3), "
                             f"got {tuple(windows.shape)}")
        x = windows.permute(0, 4, 1, 2, 3)  # (B, 3, T_v, H/2, W)
        h = self.video_tower(x)
        return self.video_head(h.flatten(1))

    def embed_audio(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, T_a, 80) mel windows -> (B, 128); inputs are rescaled to
        roughly unit range before the tower."""
        if windows.dim() != 3 or windows.shape[1] != self.config.audio_window:
            raise ShapeError(f"expected (B,{self.config.audio_window},{self.config.n_mels}), "
                             f"got {tuple(windows.shape)}")
        h = self.audio_tower(normalize_mel(windows).unsqueeze(1))
        return self.audio_head(h.flatten(1))

    def embed_pair(self, video_window: torch.Tensor, audio_window: torch.Tensor):
        """Single pair -> (v, s) 128-vectors."""
        v = self.embed_video(video_window.unsqueeze(0))[0]
        s = self.embed_audio(audio_window.unsqueeze(0))[0]
        return v, s


def p_sync(v: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Cosine similarity clamped to [1e-7, 1]; rowwise for batched inputs."""
    v_norm = v.norm(dim=-1)
    s_norm = s.norm(dim=-1)
    if torch.any(v_norm < 1e-12) or torch.any(s_norm < 1e-12):
        raise InvalidArgumentError("zero vector passed to p_sync")
    cos = (v * s).sum(dim=-1) / (v_norm * s_norm)
    return torch.clamp(cos, min=P_SYNC_FLOOR, max=1.0)


def sync_loss(expert: SyncExpert, video_windows: torch.Tensor,
              audio_windows: torch.Tensor) -> torch.Tensor:
    """Mean -log(P_sync) over a batch of aligned window pairs; gradients
    flow through the video tower into the frames."""
    if video_windows.shape[0] == 0:
        raise InvalidArgumentError("empty sync batch")
    if video_windows.shape[0] != audio_windows.shape[0]:
        raise ShapeError(f"batch mismatch {video_windows.shape[0]} vs {audio_windows.shape[0]}")
    v = expert.embed_video(video_windows)
    s = expert.embed_audio(audio_windows)
    return -torch.log(p_sync(v, s)).mean()


def clip_mel(clip: FrameClip, audio_cfg: AudioConfig = AudioConfig()):
    return log_mel(clip.audio, clip.sample_rate, audio_cfg.n_mels,
                   audio_cfg.win_samples, audio_cfg.hop_samples)


def mel_windows_for_clip(clip: FrameClip, audio_cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """(F, T_a, 80) aligned mel windows, one per video frame."""
    mel = clip_mel(clip, audio_cfg)
    return np.stack([frame_window(mel, t, clip.fps, audio_cfg.tokens_per_frame)
                     for t in range(clip.num_frames)])


def lower_half_windows(frames: np.ndarray, t0: int, t_v: int = 5) -> np.ndarray:
    """(T_v, H/2, W, 3) stack of lower halves starting at frame t0."""
    h = frames.shape[1]
    return frames[t0:t0 + t_v, h // 2:]


def sync_audio_index(t0: int, t_v: int = 5) -> int:
    """Frame whose centered mel window spans the video window [t0, t0+t_v)."""
    return t0 + t_v // 2


def train_sync_expert(groups: list[list[FrameClip]], steps: int = 1500,
                      batch: int = 16, lr: float = 1e-3, seed: int = 0,
                      config: SyncConfig = SyncConfig(),
                      audio_cfg: AudioConfig = AudioConfig()):
    """BCE training on aligned vs misaligned window pairs.

    Negatives alternate temporal shifts of |k| in [3,10] frames with
    swapped-clip audio, 1:1 with positives. Returns the frozen expert and
    the loss history.
    """
    clips = [c for g in groups for c in g]
    t_v = config.video_window
    for c in clips:
        if c.num_frames < t_v + 20:
            raise InvalidArgumentError("clips too short for sync training (need >= 2 s)")
    torch.manual_seed(seed)
    expert = SyncExpert(config)
    opt = torch.optim.AdamW(expert.parameters(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)

    mels = [mel_windows_for_clip(c, audio_cfg) for c in clips]
    history = []
    for _ in range(steps):
        vids, auds, labels = [], [], []
        for b in range(batch):
            ci = int(rng.integers(len(clips)))
            frames = clips[ci].frames
            t0 = int(rng.integers(frames.shape[0] - t_v + 1))
            ta = sync_audio_index(t0, t_v)
            positive = b % 2 == 0
            if positive:
                mel_win = mels[ci][ta]
            elif rng.random() < 0.5:
                # temporal shift by k in [3,10] frames, random sign
                k = int(rng.integers(3, 11)) * (1 if rng.random() < 0.5 else -1)
                mel_win = mels[ci][int(np.clip(ta + k, 0, frames.shape[0] - 1))]
            else:
                cj = int(rng.integers(len(clips) - 1))
                cj = cj + 1 if cj >= ci else cj
                mel_win = mels[cj][min(ta, mels[cj].shape[0] - 1)]
            vids.append(torch.as_tensor(lower_half_windows(frames, t0, t_v)))
            auds.append(torch.as_tensor(mel_win, dtype=torch.float32))
            labels.append(1.0 if positive else 0.0)

        v = expert.embed_video(torch.stack(vids))
        s = expert.embed_audio(torch.stack(auds))
        p = p_sync(v, s).clamp(max=1.0 - 1e-7)
        y = torch.tensor(labels)
        loss = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))

    expert.requires_grad_(False)
    expert.eval()
    return expert, history


def alignment_auc(expert: SyncExpert, groups: list[list[FrameClip]],
                  seed: int = 0, pairs_per_clip: int = 8,
                  audio_cfg: AudioConfig = AudioConfig()) -> float:
    """AUC of p_sync separating aligned windows from >=4-frame shifts."""
    rng = np.random.default_rng(seed)
    t_v = expert.config.video_window
    pos_scores, neg_scores = [], []
    with torch.no_grad():
        for g in groups:
            for clip in g:
                mels = mel_windows_for_clip(clip, audio_cfg)
                for _ in range(pairs_per_clip):
                    t0 = int(rng.integers(clip.num_frames - t_v + 1))
                    ta = sync_audio_index(t0, t_v)
                    vid = torch.as_tensor(lower_half_windows(clip.frames, t0, t_v)).unsqueeze(0)
                    v = expert.embed_video(vid)
                    s_pos = expert.embed_audio(
                        torch.as_tensor(mels[ta], dtype=torch.float32).unsqueeze(0))
                    k = int(rng.integers(4, 11)) * (1 if rng.random() < 0.5 else -1)
                    tq = int(np.clip(ta + k, 0, clip.num_frames - 1))
                    s_neg = expert.embed_audio(
                        torch.as_tensor(mels[tq], dtype=torch.float32).unsqueeze(0))
                    pos_scores.append(float(p_sync(v, s_pos)[0]))
                    neg_scores.append(float(p_sync(v, s_neg)[0]))
    pos = np.asarray(pos_scores)
    neg = np.asarray(neg_scores)
    # rank-based AUC with tie correction
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))
