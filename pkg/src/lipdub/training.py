"""Phase-structured training: (1) codec, (2) identity embedder, (3) sync
expert, (4) backbone + audio encoder, (5) identity adapter only. Each phase
freezes everything it does not own, asserts zero gradient on the frozen
groups at every step, logs a loss CSV, and checkpoints periodically with
exact-resume state (optimizer moments + rng)."""

import csv
import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch

from .adapter import dropout_identity
from .audio import AudioConfig, frame_window
from .checkpoint import (TrainState, assert_zero_grads, freeze, group_hash,
                         load_checkpoint, save_checkpoint)
from .checkpoint import read_manifest as ckpt_manifest
from .codec import (concat_latents, feather_composite, frames_to_tensor,
                    mask_lower_half_t)
from .corpus import CorpusManifest, FrameClip, load_split, split_identities
from .errors import InvalidArgumentError, NumericError, StateError
from .identity import contrastive_loss
from .losses import LossWeights, breakdown, perceptual_loss, rec_loss, total_loss
from .models import ModelSet, fresh_models, make_adapter
from .sync import clip_mel, p_sync, sync_audio_index, sync_loss
from . import sync as sync_mod

PHASE_ORDER = ("codec", "embedder", "sync", "backbone", "adapter")

# groups each phase trains / requires already trained
PHASE_GROUPS = {
    "codec": ("latent_codec",),
    "embedder": ("identity_embedder",),
    "sync": ("sync_expert",),
    "backbone": ("backbone", "audio_encoder"),
    "adapter": ("identity_adapter",),
}
PHASE_PREREQS = {
    "codec": (),
    "embedder": (),
    "sync": (),
    "backbone": ("latent_codec", "identity_embedder", "sync_expert"),
    "adapter": ("latent_codec", "identity_embedder", "sync_expert",
                "audio_encoder", "backbone"),
}

LAMBDA_SWEEP = (0.0, 0.25, 0.5, 1.0)
REF_SWEEP = (1, 4, 8)


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    steps: int
    batch_size: int
    lr: float
    weight_decay: float = 0.01
    seed: int = 0
    identity_dropout: float = 0.05   # guide-free conditioning dropout, phase 5
    train_lambda: float = 1.0        # branch scale while the adapter learns
    num_refs: int = 4                # N reference faces per example
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 500
    log_every: int = 25
    perceiver: str = "perceiver"     # "linear" for the projection ablation
    preset: str = "default"

    def validate(self):
        if self.phase not in PHASE_ORDER:
            raise InvalidArgumentError(f"unknown phase '{self.phase}'")
        if self.lr <= 0:
            raise InvalidArgumentError(f"lr must be positive, got {self.lr}")
        self.weights.validate()


def desk_default_config(phase: str, seed: int = 0) -> TrainConfig:
    """Desk-scale defaults sized for a single-core CPU budget."""
    table = {
        "codec": dict(steps=1200, batch_size=32, lr=2e-3),
        "embedder": dict(steps=600, batch_size=8, lr=1e-3),
        "sync": dict(steps=1600, batch_size=16, lr=1e-3),
        "backbone": dict(steps=3000, batch_size=8, lr=3e-4),
        "adapter": dict(steps=2000, batch_size=8, lr=1e-4),
    }
    return TrainConfig(phase=phase, seed=seed, **table[phase])


def paper_scale_config(seed: int = 0) -> TrainConfig:
    """The original adapter-training regime: 10,000 steps, batch 2,
    fixed learning rate 1e-5."""
    return TrainConfig(phase="adapter", steps=10000, batch_size=2, lr=1e-5,
                       seed=seed, preset="paper_scale")


def ablation_presets(seed: int = 0) -> dict:
    """Named ablation configurations plus the evaluation sweep grids."""
    base = desk_default_config("adapter", seed)
    return {
        "no_sync": replace(base, weights=LossWeights(w_sync=0.0), preset="no_sync"),
        "linear_projection": replace(base, perceiver="linear", preset="linear_projection"),
        "no_adapter": replace(base, steps=0, preset="no_adapter"),
        "lambda_sweep": LAMBDA_SWEEP,
        "ref_sweep": REF_SWEEP,
    }


@dataclass
class TrainingExample:
    z: torch.Tensor                   # (2c, h, w) concatenated latents
    audio_tokens: torch.Tensor        # (T_a, 384)
    identity_embeddings: torch.Tensor  # (N, 512)
    ground_truth: torch.Tensor        # (3, H, W)
    reference_index: int


def build_training_example(clips: list[FrameClip], clip_index: int, t: int,
                           num_refs: int, rng, models: ModelSet) -> TrainingExample:
    """Assemble one training example from raw clips.

    The reference frame is a uniformly sampled different frame of the same
    clip; the N identity references are frames of the identity's other
    clips (falling back to the same clip when it is the only one).
    """
    clip = clips[clip_index]
    F = clip.num_frames
    if F < 2:
        raise InvalidArgumentError("cannot build an example from a single-frame clip")
    if F <= num_refs:
        raise InvalidArgumentError(f"clip length {F} must exceed N={num_refs}")
    if not (0 <= t < F):
        raise InvalidArgumentError(f"frame index {t} out of range 0..{F - 1}")

    j = int(rng.integers(F - 1))
    ref = j if j < t else j + 1

    frames_t = frames_to_tensor(clip.frames)
    with torch.no_grad():
        z_ref = models.codec.encode(frames_t[ref:ref + 1])
        z_masked = models.codec.encode(mask_lower_half_t(frames_t[t:t + 1]))
        z = concat_latents(z_ref, z_masked)[0]

        mel = clip_mel(clip, models.audio_cfg)
        window = frame_window(mel, t, clip.fps, models.audio_cfg.tokens_per_frame)
        tokens = models.audio_encoder(
            torch.as_tensor(window, dtype=torch.float32))

        pool = [k for k in range(len(clips)) if k != clip_index] or [clip_index]
        embs = []
        for _ in range(num_refs):
            oc = clips[pool[int(rng.integers(len(pool)))]]
            f = int(rng.integers(oc.num_frames))
            embs.append(models.embedder(frames_to_tensor(oc.frames[f]))[0])
        identity_embeddings = torch.stack(embs)

    return TrainingExample(z=z, audio_tokens=tokens,
                           identity_embeddings=identity_embeddings,
                           ground_truth=frames_t[t], reference_index=ref)


class _ClipCache:
    """Stacked precomputed features for every training clip (frozen
    codec/embedder outputs), assembled batch-wise with tensor indexing.
    Assumes the corpus's fixed frames-per-clip."""

    def __init__(self, groups: list[list[FrameClip]], models: ModelSet,
                 with_id_emb: bool):
        flat = [clip for group in groups for clip in group]
        lengths = {c.num_frames for c in flat}
        if len(lengths) != 1:
            raise InvalidArgumentError("training clips must share one frame count")
        self.F = lengths.pop()
        lat_plain, lat_masked, mel, frames, id_emb = [], [], [], [], []
        gt_f2, gt_f3 = [], []
        identity_of = []
        h = flat[0].frames.shape[1]
        for gi, group in enumerate(groups):
            for clip in group:
                frames_t = frames_to_tensor(clip.frames)
                with torch.no_grad():
                    lat_plain.append(models.codec.encode(frames_t))
                    lat_masked.append(models.codec.encode(mask_lower_half_t(frames_t)))
                    f2, f3 = models.embedder.features(frames_t[:, :, h // 2:])
                    gt_f2.append(f2)
                    gt_f3.append(f3)
                    if with_id_emb:
                        id_emb.append(models.embedder(frames_t))
                mel.append(torch.as_tensor(
                    sync_mod.mel_windows_for_clip(clip, models.audio_cfg),
                    dtype=torch.float32))
                frames.append(frames_t)
                identity_of.append(gi)
        self.lat_plain = torch.stack(lat_plain)    # (C, F, c, h, w)
        self.lat_masked = torch.stack(lat_masked)
        self.mel = torch.stack(mel)                # (C, F, T_a, 80)
        self.frames = torch.stack(frames)          # (C, F, 3, H, W)
        self.gt_f2 = torch.stack(gt_f2)            # frozen perceptual features
        self.gt_f3 = torch.stack(gt_f3)
        self.id_emb = torch.stack(id_emb) if with_id_emb else None
        identity_of = np.asarray(identity_of)
        # same-identity reference pools (other clips; self if the only one)
        self.pools = []
        for k in range(len(flat)):
            same = np.flatnonzero(identity_of == identity_of[k])
            pool = same[same != k]
            self.pools.append(pool if pool.size else np.array([k]))
        self.num_clips = len(flat)

    def sample_windows(self, rng, batch: int, t_v: int, num_refs: int,
                       with_identity: bool):
        """Stacked tensors for a batch of t_v-frame windows."""
        F = self.F
        ks = rng.integers(0, self.num_clips, size=batch)
        t0s = rng.integers(0, F - t_v + 1, size=batch)
        j = rng.integers(0, F - t_v, size=batch)
        refs = np.where(j < t0s, j, j + t_v)

        ks_t = torch.from_numpy(ks)
        idx = torch.from_numpy(t0s[:, None] + np.arange(t_v)[None, :])
        z_masked = self.lat_masked[ks_t[:, None], idx]          # (B, t_v, c, h, w)
        z_ref = self.lat_plain[ks_t, torch.from_numpy(refs)]
        z = torch.cat([z_ref.unsqueeze(1).expand_as(z_masked), z_masked], dim=2)

        ref_embs = None
        if with_identity:
            oc = np.stack([self.pools[k][rng.integers(0, len(self.pools[k]),
                                                      size=num_refs)]
                           for k in ks])
            fs = rng.integers(0, F, size=(batch, num_refs))
            ref_embs = self.id_emb[torch.from_numpy(oc), torch.from_numpy(fs)]

        return SimpleNamespace(
            z=z,
            mel=self.mel[ks_t[:, None], idx],
            gt=self.frames[ks_t[:, None], idx],
            gt_f2=self.gt_f2[ks_t[:, None], idx],
            gt_f3=self.gt_f3[ks_t[:, None], idx],
            sync_audio=self.mel[ks_t, torch.from_numpy(t0s) + t_v // 2],
            ref_embs=ref_embs,
        )


def _optimizer_moments(opt, named_params) -> dict:
    moments = {}
    for name, p in named_params:
        state = opt.state.get(p)
        if not state:
            continue
        moments[f"{name}.step"] = np.asarray(float(state["step"]), dtype=np.float32)
        moments[f"{name}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
        moments[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(np.float32)
    return moments


def _restore_optimizer(opt, named_params, moments: dict) -> None:
    for name, p in named_params:
        key = f"{name}.step"
        if key not in moments:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(moments[key])),
            "exp_avg": torch.from_numpy(moments[f"{name}.exp_avg"].copy()).view_as(p),
            "exp_avg_sq": torch.from_numpy(moments[f"{name}.exp_avg_sq"].copy()).view_as(p),
        }


def _rng_blobs(rng, torch_state: bool = True) -> dict:
    blobs = {"data": json.dumps(rng.bit_generator.state).encode()}
    if torch_state:
        blobs["torch"] = torch.get_rng_state().numpy().tobytes()
    return blobs


def _restore_rng(blobs: dict):
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(blobs["data"].decode())
    if "torch" in blobs:
        torch.set_rng_state(torch.from_numpy(
            np.frombuffer(blobs["torch"], dtype=np.uint8).copy()))
    return rng


class PhaseRunner:
    """One training phase: data sampling, step function, freeze contract,
    logging, periodic checkpoints, exact resume."""

    def __init__(self, config: TrainConfig, manifest: CorpusManifest,
                 ckpt_dir, eval_identities: int = 4, init_from=None):
        config.validate()
        self.config = config
        self.ckpt_dir = Path(ckpt_dir)
        self.manifest = manifest
        train_ids, _ = split_identities(manifest, eval_identities)
        self.groups_clips = load_split(manifest, train_ids)
        self.models = self._build_models(init_from)
        self.trainable = PHASE_GROUPS[config.phase]
        self.frozen_groups = {name: module for name, module in
                              self.models.groups().items()
                              if name not in self.trainable}
        for name, module in self.models.groups().items():
            if name in self.trainable:
                module.requires_grad_(True)
                module.train()
            else:
                freeze(module)
        self.named_params = [
            (f"{name}.{pname}", p)
            for name in self.trainable
            for pname, p in self.models.groups()[name].named_parameters()
        ]
        self.opt = torch.optim.AdamW([p for _, p in self.named_params],
                                     lr=config.lr, weight_decay=config.weight_decay)
        phase_index = PHASE_ORDER.index(config.phase)
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(phase_index,)))
        self.start_step = 0
        self._cache = None
        self._frame_pool = None

    def _build_models(self, init_from) -> ModelSet:
        cfg = self.config
        models = fresh_models(seed=cfg.seed)
        prereqs = set(PHASE_PREREQS[cfg.phase])
        source = Path(init_from) if init_from else self.ckpt_dir
        try:
            entries, _ = ckpt_manifest(source)
            bundle_groups = {g for g, *_ in entries}
        except StateError:
            bundle_groups = set()
        missing = prereqs - bundle_groups
        if missing:
            raise StateError(
                f"phase '{cfg.phase}' is missing prerequisite checkpoint "
                f"group '{sorted(missing)[0]}' (looked in {source})")
        # carry forward every already-trained group, not just the prereqs
        wanted = {name: module for name, module in models.groups().items()
                  if name in bundle_groups and name not in PHASE_GROUPS[cfg.phase]}
        if wanted:
            load_checkpoint(source, wanted)
        self.active_groups = set(wanted) | set(PHASE_GROUPS[cfg.phase])
        if cfg.phase == "adapter":
            # attach after loading so branches copy the trained host K/V
            models.adapter = make_adapter(models.backbone, cfg.perceiver)
        return models

    # ---- data -------------------------------------------------------------

    def _windows(self, with_identity: bool):
        if self._cache is None:
            self._cache = _ClipCache(self.groups_clips, self.models, with_identity)
        return self._cache

    def _frames_pool(self):
        if self._frame_pool is None:
            self._frame_pool = torch.cat(
                [frames_to_tensor(c.frames) for g in self.groups_clips for c in g])
        return self._frame_pool

    # ---- per-phase steps ---------------------------------------------------

    def _step_codec(self):
        pool = self._frames_pool()
        idx = torch.from_numpy(self.rng.integers(0, pool.shape[0],
                                                 size=self.config.batch_size))
        x = pool[idx]
        loss = (self.models.codec(x) - x).abs().mean()
        return loss, breakdown(loss, 0.0, 0.0, self.config.weights)

    def _step_embedder(self):
        n_ids = len(self.groups_clips)
        ids = self.rng.choice(n_ids, size=min(self.config.batch_size, n_ids),
                              replace=False)
        batch, labels = [], []
        for ident in ids:
            clips = self.groups_clips[int(ident)]
            for _ in range(2):
                c = int(self.rng.integers(len(clips)))
                f = int(self.rng.integers(clips[c].num_frames))
                batch.append(frames_to_tensor(clips[c].frames[f])[0])
                labels.append(int(ident))
        emb = self.models.embedder(torch.stack(batch))
        loss = contrastive_loss(emb, torch.tensor(labels))
        return loss, breakdown(loss, 0.0, 0.0, self.config.weights)

    def _step_sync(self):
        cache = self._windows(with_identity=False)
        t_v = self.models.sync.config.video_window
        F = cache.F
        vids, auds, labels = [], [], []
        for b in range(self.config.batch_size):
            k = int(self.rng.integers(cache.num_clips))
            t0 = int(self.rng.integers(F - t_v + 1))
            ta = sync_audio_index(t0, t_v)
            positive = b % 2 == 0
            if positive:
                mel_win = cache.mel[k, ta]
            elif self.rng.random() < 0.5:
                shift = int(self.rng.integers(3, 11)) * (1 if self.rng.random() < 0.5 else -1)
                mel_win = cache.mel[k, int(np.clip(ta + shift, 0, F - 1))]
            else:
                kj = int(self.rng.integers(cache.num_clips - 1))
                kj = kj + 1 if kj >= k else kj
                mel_win = cache.mel[kj, ta]
            h = cache.frames.shape[-2]
            vids.append(cache.frames[k, t0:t0 + t_v, :, h // 2:].permute(0, 2, 3, 1))
            auds.append(mel_win)
            labels.append(1.0 if positive else 0.0)
        v = self.models.sync.embed_video(torch.stack(vids))
        s = self.models.sync.embed_audio(torch.stack(auds))
        p = p_sync(v, s).clamp(max=1.0 - 1e-7)
        y = torch.tensor(labels)
        loss = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
        return loss, breakdown(loss, 0.0, 0.0, self.config.weights)

    def _step_generator(self, with_identity: bool):
        cfg = self.config
        models = self.models
        t_v = models.sync.config.video_window
        cache = self._windows(with_identity)
        batch = cache.sample_windows(self.rng, cfg.batch_size, t_v,
                                     cfg.num_refs, with_identity)
        b = cfg.batch_size
        z = batch.z.flatten(0, 1)
        mel = batch.mel.flatten(0, 1)
        gt = batch.gt.flatten(0, 1)

        if with_identity:
            with torch.no_grad():
                tokens = models.audio_encoder(mel)
            id_tokens = models.adapter.tokens(batch.ref_embs)
            id_tokens = dropout_identity(id_tokens, cfg.identity_dropout, self.rng)
            id_tokens = id_tokens.unsqueeze(1).expand(-1, t_v, -1, -1).flatten(0, 1)
            z_hat = models.backbone(z, tokens, id_tokens, lam=cfg.train_lambda)
        else:
            tokens = models.audio_encoder(mel)
            z_hat = models.backbone(z, tokens)

        decoded = models.codec.decode(z_hat)
        comp = feather_composite(decoded, gt)
        l_rec = rec_loss(comp, gt)
        h = comp.shape[-2]
        # perceptual term against the cached frozen GT features
        fd2, fd3 = models.embedder.features(comp[:, :, h // 2:])
        l_p = 0.5 * (((fd2 - batch.gt_f2.flatten(0, 1)) ** 2).mean()
                     + ((fd3 - batch.gt_f3.flatten(0, 1)) ** 2).mean())
        video_windows = comp.view(b, t_v, 3, h, -1).permute(0, 1, 3, 4, 2)[:, :, h // 2:]
        if cfg.weights.w_sync > 0:
            l_sync = sync_loss(models.sync, video_windows, batch.sync_audio)
        else:
            with torch.no_grad():
                l_sync = sync_loss(models.sync, video_windows, batch.sync_audio)
        loss = total_loss(l_rec, l_p, l_sync, cfg.weights)
        return loss, breakdown(l_rec, l_p, l_sync, cfg.weights)

    # ---- loop ----------------------------------------------------------------

    def _step(self):
        phase = self.config.phase
        if phase == "codec":
            return self._step_codec()
        if phase == "embedder":
            return self._step_embedder()
        if phase == "sync":
            return self._step_sync()
        if phase == "backbone":
            return self._step_generator(with_identity=False)
        return self._step_generator(with_identity=True)

    def _save(self, directory, step: int):
        state = TrainState(step=step,
                           rng_blobs=_rng_blobs(self.rng),
                           moments=_optimizer_moments(self.opt, self.named_params))
        groups = {name: module for name, module in self.models.groups().items()
                  if name in self.active_groups}
        frozen = tuple(name for name in groups if name not in PHASE_GROUPS[self.config.phase])
        save_checkpoint(directory, groups, frozen=frozen, state=state)

    def resume(self, source=None):
        """Load this phase's checkpoint (weights + moments + rng); `source`
        may point at a periodic snapshot, else the phase root is used."""
        groups = {name: module for name, module in self.models.groups().items()
                  if name in self.active_groups}
        state, _ = load_checkpoint(source or self.ckpt_dir, groups)
        _restore_optimizer(self.opt, self.named_params, state.moments)
        self.rng = _restore_rng(state.rng_blobs)
        self.start_step = state.step
        return self

    def run(self) -> ModelSet:
        cfg = self.config
        log_path = self.ckpt_dir / f"train_log_{cfg.phase}.csv"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if self.start_step > 0 and log_path.exists() else "w"
        periodic_root = self.ckpt_dir / "periodic"
        with open(log_path, mode, newline="") as logf:
            writer = csv.writer(logf)
            if mode == "w":
                writer.writerow(["step", "l_rec", "l_p", "l_sync", "total"])
            for step in range(self.start_step, cfg.steps):
                loss, bd = self._step()
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at step {step}: rec={bd.l_rec} "
                        f"p={bd.l_p} sync={bd.l_sync}")
                self.opt.zero_grad(set_to_none=True)
                loss.backward()
                for gname, module in self.frozen_groups.items():
                    assert_zero_grads(module, gname)
                self.opt.step()
                if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
                    writer.writerow([step + 1, f"{bd.l_rec:.6f}", f"{bd.l_p:.6f}",
                                     f"{bd.l_sync:.6f}", f"{bd.total:.6f}"])
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                        and (step + 1) < cfg.steps:
                    self._save(periodic_root / f"step_{step + 1:06d}", step + 1)
                    _prune_periodic(periodic_root, keep=2)
        for name in self.trainable:
            freeze(self.models.groups()[name])
        self._save(self.ckpt_dir, cfg.steps)
        return self.models


def _prune_periodic(periodic_root: Path, keep: int) -> None:
    if not periodic_root.exists():
        return
    snaps = sorted(d for d in periodic_root.iterdir() if d.is_dir())
    for stale in snaps[:-keep]:
        shutil.rmtree(stale)


def run_phase(config: TrainConfig, manifest: CorpusManifest, ckpt_dir,
              eval_identities: int = 4, init_from=None,
              resume: bool = False) -> ModelSet:
    """Train one phase into ckpt_dir; prerequisites are loaded from
    `init_from` (or ckpt_dir itself). Raises StateError naming any missing
    prerequisite group."""
    runner = PhaseRunner(config, manifest, ckpt_dir, eval_identities, init_from)
    if resume:
        runner.resume()
    return runner.run()


def frozen_group_hashes(models: ModelSet, exclude=("identity_adapter",)) -> dict:
    return {name: group_hash(module) for name, module in models.groups().items()
            if name not in exclude}
