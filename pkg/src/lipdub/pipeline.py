"""End-to-end orchestration: corpus -> five training phases -> ablation
adapter variants. Idempotent per stage so interrupted runs can continue."""

from pathlib import Path
from types import SimpleNamespace

import torch

from .checkpoint import read_manifest as ckpt_manifest
from .config import RunConfig, write_run_stamp
from .corpus import RenderParams, make_manifest, read_manifest, write_corpus
from .errors import StateError
from .training import PHASE_GROUPS, PHASE_ORDER, run_phase


def ensure_corpus(config: RunConfig, corpus_dir, jobs: int = 1):
    """Generate the corpus unless its manifest already exists."""
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.txt"
    if manifest_path.exists():
        return read_manifest(manifest_path)
    sec = config.values["corpus"]
    manifest = make_manifest(
        corpus_dir, sec["identities"], sec["clips_per_identity"],
        seed=config.get("run", "seed"),
        render=RenderParams(height=sec["height"], width=sec["width"],
                            fps=sec["fps"], sample_rate=sec["sample_rate"],
                            frames=sec["frames"]))
    write_corpus(manifest, jobs=jobs)
    return manifest


def _bundle_groups(ckpt_dir) -> set:
    try:
        entries, _ = ckpt_manifest(ckpt_dir)
    except StateError:
        return set()
    return {g for g, *_ in entries}


def run_full_pipeline(run_dir, config: RunConfig = None,
                      presets: tuple = ("no_sync",), progress=None):
    """Train every phase plus the requested ablation adapters under run_dir.

    Returns a namespace with the corpus manifest and checkpoint paths.
    Already-completed stages (detected from checkpoint groups) are skipped.
    """
    config = config or RunConfig.load()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(config.get("run", "threads"))
    say = progress or (lambda msg: None)

    manifest = ensure_corpus(config, run_dir / "corpus",
                             jobs=config.get("run", "jobs"))
    say(f"corpus ready: {len(manifest.identities)} identities x "
        f"{manifest.clips_per_identity} clips")

    ckpt_dir = run_dir / "ckpt"
    eval_ids = config.get("corpus", "eval_identities")
    for phase in PHASE_ORDER:
        if set(PHASE_GROUPS[phase]) <= _bundle_groups(ckpt_dir):
            say(f"phase {phase}: already trained, skipping")
            continue
        say(f"phase {phase}: training")
        run_phase(config.train_config(phase), manifest, ckpt_dir,
                  eval_identities=eval_ids)
    write_run_stamp(ckpt_dir, config,
                    {"corpus_manifest": run_dir / "corpus" / "manifest.txt"})

    preset_dirs = {}
    for preset in presets:
        pdir = run_dir / f"ckpt_{preset}"
        preset_dirs[preset] = pdir
        if "identity_adapter" in _bundle_groups(pdir):
            say(f"preset {preset}: already trained, skipping")
            continue
        say(f"preset {preset}: training adapter variant")
        run_phase(config.train_config("adapter", preset=preset), manifest,
                  pdir, eval_identities=eval_ids, init_from=ckpt_dir)
        write_run_stamp(pdir, config,
                        {"corpus_manifest": run_dir / "corpus" / "manifest.txt"})

    return SimpleNamespace(manifest=manifest, ckpt_dir=ckpt_dir,
                           preset_dirs=preset_dirs, run_dir=run_dir)
