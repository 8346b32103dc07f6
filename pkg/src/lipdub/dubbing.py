"""Inference: re-voice a source clip with a driving audio track.

Per frame: mask the lower half, encode, pair with the latent of the
temporally nearest frame outside a small exclusion window, fuse driving
audio tokens (and identity tokens scaled by lambda when an adapter is
attached), decode, and composite the predicted lower half back with a
2-pixel feather."""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import frame_window
from .checkpoint import group_hash
from .codec import (concat_latents, feather_composite, frames_to_tensor,
                    mask_lower_half_t, tensor_to_frames)
from .corpus import FrameClip, write_clip
from .errors import InvalidArgumentError
from .models import ModelSet
from .sync import clip_mel


@dataclass
class DubRequest:
    source: str                      # source clip directory
    audio: str = None                # driving clip directory (its audio); None = self
    lam: float = 0.25
    num_refs: int = 4
    policy: str = "uniform-random"   # or "first-N"
    seed: int = 0
    out: str = None

    def validate(self):
        if self.lam < 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {self.lam}")
        if self.num_refs < 1:
            raise InvalidArgumentError(f"N must be >= 1, got {self.num_refs}")


def select_references(clip: FrameClip, n: int, policy: str = "uniform-random",
                      seed: int = 0) -> list[int]:
    """Pick N reference frame indices, returned in index order."""
    if n > clip.num_frames:
        raise InvalidArgumentError(f"N={n} exceeds clip length {clip.num_frames}")
    if policy == "first-N":
        return list(range(n))
    if policy == "uniform-random":
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(clip.num_frames, size=n, replace=False))
    raise InvalidArgumentError(f"unknown reference policy '{policy}'")


def nearest_reference_index(t: int, num_frames: int, exclusion: int = 2) -> int:
    """Nearest frame to t with |j - t| > exclusion (ties -> earlier frame);
    the exclusion shrinks for very short clips."""
    for ex in range(min(exclusion, num_frames - 2), -1, -1):
        best = None
        for j in range(num_frames):
            if abs(j - t) > ex:
                if best is None or abs(j - t) < abs(best - t):
                    best = j
        if best is not None:
            return best
    raise InvalidArgumentError("clip too short to pick a reference frame")


def fit_driving_audio(audio: np.ndarray, num_frames: int, fps: int,
                      sample_rate: int):
    """Truncate long audio / replicate-pad short audio to the clip length.

    Returns (audio, note) where note records what was done.
    """
    audio = np.asarray(audio, dtype=np.float32)
    if audio.size == 0:
        raise InvalidArgumentError("driving audio is empty")
    needed = int(round(num_frames * sample_rate / fps))
    if audio.size > needed:
        return audio[:needed], f"truncated {audio.size - needed} samples"
    if audio.size < needed:
        pad = np.full(needed - audio.size, audio[-1], dtype=np.float32)
        return np.concatenate([audio, pad]), f"padded {needed - audio.size} samples"
    return audio, "exact length"


def dub_clip(models: ModelSet, source: FrameClip, driving_audio: np.ndarray,
             lam: float = 0.25, num_refs: int = 4,
             policy: str = "uniform-random", seed: int = 0,
             batch_frames: int = 25):
    """Dub one clip; returns (dubbed FrameClip, meta dict)."""
    models.require("latent_codec", "audio_encoder", "backbone")
    if lam != 0.0:
        models.require("identity_adapter", "identity_embedder")

    start = time.perf_counter()
    F = source.num_frames
    audio, audio_note = fit_driving_audio(
        driving_audio, F, source.fps, source.sample_rate)

    frames_t = frames_to_tensor(source.frames)
    with torch.no_grad():
        mel = clip_mel(
            FrameClip(frames=source.frames, audio=audio, fps=source.fps,
                      sample_rate=source.sample_rate, identity=source.identity,
                      aperture=source.aperture),
            models.audio_cfg)
        windows = np.stack([
            frame_window(mel, t, source.fps, models.audio_cfg.tokens_per_frame)
            for t in range(F)])
        tokens = models.audio_encoder(torch.as_tensor(windows, dtype=torch.float32))

        id_tokens = None
        if lam != 0.0:
            ref_idx = select_references(source, num_refs, policy, seed)
            embs = models.embedder(frames_t[ref_idx])
            id_tokens = models.adapter.tokens(embs.unsqueeze(0))[0]

        lat_plain = models.codec.encode(frames_t)
        lat_masked = models.codec.encode(mask_lower_half_t(frames_t))
        refs = torch.tensor([nearest_reference_index(t, F) for t in range(F)])
        z = concat_latents(lat_plain[refs], lat_masked)

        out_frames = torch.empty_like(frames_t)
        for lo in range(0, F, batch_frames):
            hi = min(lo + batch_frames, F)
            chunk_id = None if id_tokens is None else \
                id_tokens.unsqueeze(0).expand(hi - lo, -1, -1)
            z_hat = models.backbone(z[lo:hi], tokens[lo:hi], chunk_id, lam=lam)
            decoded = models.codec.decode(z_hat)
            out_frames[lo:hi] = feather_composite(decoded, frames_t[lo:hi])

    elapsed = time.perf_counter() - start
    envelope = _rms_envelope(audio, F, source.fps, source.sample_rate)
    dubbed = FrameClip(frames=tensor_to_frames(out_frames), audio=audio,
                       fps=source.fps, sample_rate=source.sample_rate,
                       identity=source.identity, aperture=envelope)
    meta = {
        "lambda": lam,
        "num_refs": num_refs,
        "policy": policy,
        "seed": seed,
        "audio": audio_note,
        "frames_per_second": F / elapsed if elapsed > 0 else float("inf"),
        "model_hashes": {name: group_hash(m) for name, m in models.groups().items()},
    }
    return dubbed, meta


def _rms_envelope(audio: np.ndarray, num_frames: int, fps: int, sample_rate: int):
    bounds = np.round(np.arange(num_frames + 1) * sample_rate / fps).astype(np.int64)
    rms = np.array([np.sqrt(np.mean(audio[bounds[k]:bounds[k + 1]] ** 2))
                    if bounds[k + 1] > bounds[k] else 0.0
                    for k in range(num_frames)])
    top = rms.max()
    return rms / top if top > 0 else rms


def write_dub(dubbed: FrameClip, meta: dict, out_dir) -> None:
    """Write the dubbed clip in corpus layout plus a dub_meta.txt sidecar.

    The aperture field of a dubbed clip stores the driving audio's
    normalized RMS envelope (a diagnostic, not rendered ground truth)."""
    write_clip(dubbed, out_dir)
    lines = [f"lambda={meta['lambda']!r}",
             f"num_refs={meta['num_refs']}",
             f"policy={meta['policy']}",
             f"seed={meta['seed']}",
             f"audio={meta['audio']}",
             f"frames_per_second={meta['frames_per_second']:.2f}"]
    for name, digest in sorted(meta["model_hashes"].items()):
        lines.append(f"hash_{name}={digest}")
    (Path(out_dir) / "dub_meta.txt").write_text("\n".join(lines) + "\n")
