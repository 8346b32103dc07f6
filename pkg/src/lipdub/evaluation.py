"""Metrics backend and experiment reporter: SSIM, PSNR, CSIM, LSE-C/LSE-D,
plus the comparison-table report over preset/sweep grids."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import FrameClip
from .dubbing import dub_clip
from .errors import InvalidArgumentError, ShapeError
from .models import ModelSet
from .sync import SyncExpert, clip_mel, sync_audio_index
from .audio import frame_window

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LSE_OFFSET_RANGE = 15


def _window_means(x: np.ndarray, k: int) -> np.ndarray:
    """Mean of every k x k window (valid positions) via integral images."""
    pad = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    pad[1:, 1:] = np.cumsum(np.cumsum(x, axis=0), axis=1)
    sums = pad[k:, k:] - pad[:-k, k:] - pad[k:, :-k] + pad[:-k, :-k]
    return sums / (k * k)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM with a 7x7 uniform window over valid positions,
    biased (moment) variances, channel-averaged, unit dynamic range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = SSIM_WINDOW
    values = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx = _window_means(x, k)
        my = _window_means(y, k)
        mxx = _window_means(x * x, k)
        myy = _window_means(y * y, k)
        mxy = _window_means(x * y, k)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        smap = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2) /
                ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
        values.append(smap.mean())
    return float(np.mean(values))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for unit-range images; MSE=0 returns the 100 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def csim(source_frames: np.ndarray, dubbed_frames: np.ndarray, embedder) -> float:
    """Mean per-frame cosine between identity embeddings of source and dub."""
    if len(source_frames) == 0:
        raise InvalidArgumentError("empty clip")
    if len(source_frames) != len(dubbed_frames):
        raise ShapeError(f"frame count mismatch {len(source_frames)} vs {len(dubbed_frames)}")
    with torch.no_grad():
        s = embedder(torch.as_tensor(np.ascontiguousarray(source_frames),
                                     dtype=torch.float32).permute(0, 3, 1, 2))
        d = embedder(torch.as_tensor(np.ascontiguousarray(dubbed_frames),
                                     dtype=torch.float32).permute(0, 3, 1, 2))
    return float((s * d).sum(dim=-1).mean())


def lse(clip: FrameClip, expert: SyncExpert, audio_cfg=None) -> tuple:
    """(LSE-C, LSE-D) via an offset sweep of +/-15 frames.

    For every 5-frame window with all offsets in range: Euclidean distance
    between the video embedding and audio embeddings at each offset;
    LSE-D averages the distance at offset 0, confidence is
    median(distances) - min(distances), LSE-C averages confidence.
    """
    from .audio import AudioConfig
    audio_cfg = audio_cfg or AudioConfig()
    t_v = expert.config.video_window
    F = clip.num_frames
    if F < t_v:
        raise InvalidArgumentError(f"clip of {F} frames shorter than one window")

    starts = [t0 for t0 in range(F - t_v + 1)
              if sync_audio_index(t0, t_v) - LSE_OFFSET_RANGE >= 0
              and sync_audio_index(t0, t_v) + LSE_OFFSET_RANGE <= F - 1]
    clamped = False
    if not starts:
        starts = list(range(F - t_v + 1))
        clamped = True

    mel = clip_mel(clip, audio_cfg)
    windows = np.stack([frame_window(mel, t, clip.fps, audio_cfg.tokens_per_frame)
                        for t in range(F)])
    h = clip.frames.shape[1]
    with torch.no_grad():
        audio_emb = expert.embed_audio(torch.as_tensor(windows, dtype=torch.float32))
        vids = torch.as_tensor(np.stack(
            [clip.frames[t0:t0 + t_v, h // 2:] for t0 in starts]))
        video_emb = expert.embed_video(vids)

    confidences, zero_dists = [], []
    for row, t0 in enumerate(starts):
        center = sync_audio_index(t0, t_v)
        offs = np.arange(-LSE_OFFSET_RANGE, LSE_OFFSET_RANGE + 1)
        idx = np.clip(center + offs, 0, F - 1) if clamped else center + offs
        dists = (audio_emb[idx] - video_emb[row]).norm(dim=-1).numpy()
        zero_dists.append(dists[LSE_OFFSET_RANGE])
        confidences.append(float(np.median(dists) - np.min(dists)))
    return float(np.mean(confidences)), float(np.mean(zero_dists))


@dataclass
class ClipMetrics:
    clip_id: str
    ssim: float
    psnr: float
    csim: float
    lse_c: float
    lse_d: float


@dataclass
class MetricReport:
    rows: dict = field(default_factory=dict)       # preset -> [ClipMetrics]
    aggregates: dict = field(default_factory=dict)  # preset -> ClipMetrics(clip_id=ALL)

    def aggregate(self, preset: str) -> "ClipMetrics":
        return self.aggregates[preset]


def evaluate_preset(models: ModelSet, clips: list, clip_ids: list, lam: float,
                    num_refs: int, seed: int = 0, jobs: int = 1) -> list:
    """Dub every clip with its own audio and measure all five metrics.
    Clips are independent; results keep the given clip order."""

    def one(pair):
        clip_id, clip = pair
        dubbed, _ = dub_clip(models, clip, clip.audio, lam=lam,
                             num_refs=num_refs, seed=seed)
        lse_c, lse_d = lse(dubbed, models.sync)
        return ClipMetrics(
            clip_id=clip_id,
            ssim=_clip_ssim(clip.frames, dubbed.frames),
            psnr=psnr(clip.frames, dubbed.frames),
            csim=csim(clip.frames, dubbed.frames, models.embedder),
            lse_c=lse_c,
            lse_d=lse_d,
        )

    pairs = list(zip(clip_ids, clips))
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


def _clip_ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([ssim(fa, fb) for fa, fb in zip(a, b)]))


def _aggregate(preset: str, rows: list) -> ClipMetrics:
    return ClipMetrics(
        clip_id="ALL",
        ssim=float(np.mean([r.ssim for r in rows])),
        psnr=float(np.mean([r.psnr for r in rows])),
        csim=float(np.mean([r.csim for r in rows])),
        lse_c=float(np.mean([r.lse_c for r in rows])),
        lse_d=float(np.mean([r.lse_d for r in rows])),
    )


METRIC_COLUMNS = ("ssim", "psnr", "lse_c", "lse_d", "csim")


def report(preset_rows: dict, out_csv=None, out_txt=None) -> MetricReport:
    """Assemble per-clip rows + ALL aggregates into CSV and a text table.

    preset_rows: preset name -> list[ClipMetrics].
    """
    rep = MetricReport(rows=dict(preset_rows))
    for preset, rows in preset_rows.items():
        rep.aggregates[preset] = _aggregate(preset, rows)

    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["preset", "clip_id", "ssim", "psnr", "csim",
                             "lse_c", "lse_d"])
            for preset, rows in rep.rows.items():
                for r in rows:
                    writer.writerow([preset, r.clip_id, f"{r.ssim:.6f}",
                                     f"{r.psnr:.4f}", f"{r.csim:.6f}",
                                     f"{r.lse_c:.6f}", f"{r.lse_d:.6f}"])
            for preset, agg in rep.aggregates.items():
                writer.writerow([preset, "ALL", f"{agg.ssim:.6f}",
                                 f"{agg.psnr:.4f}", f"{agg.csim:.6f}",
                                 f"{agg.lse_c:.6f}", f"{agg.lse_d:.6f}"])

    table = format_table(rep)
    if out_txt is not None:
        Path(out_txt).write_text(table)
    return rep


def format_table(rep: MetricReport) -> str:
    header = f"{'preset':<22}" + "".join(f"{c.upper():>10}" for c in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    for preset, agg in rep.aggregates.items():
        lines.append(
            f"{preset:<22}{agg.ssim:>10.4f}{agg.psnr:>10.2f}"
            f"{agg.lse_c:>10.4f}{agg.lse_d:>10.4f}{agg.csim:>10.4f}")
    return "\n".join(lines) + "\n"
