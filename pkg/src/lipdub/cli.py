"""Command-line entry point: corpus generation, phase training, dubbing,
evaluation grids, and the full pipeline."""

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, write_run_stamp
from .corpus import load_split, read_clip, read_manifest, split_identities
from .dubbing import dub_clip, write_dub
from .errors import (FormatError, InvalidArgumentError, LipdubError,
                     NumericError, ShapeError, StateError)
from .evaluation import evaluate_preset, report
from .models import load_model_set
from .pipeline import ensure_corpus, run_full_pipeline
from .training import LAMBDA_SWEEP, PHASE_ORDER, REF_SWEEP, paper_scale_config, run_phase

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STATE = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipdub",
        description="Identity-conditioned audio-driven lip-sync inpainting "
                    "on a synthetic talking-avatar corpus.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply otherwise)")
    common.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="override a resolved config value")

    p = sub.add_parser("gen-corpus", parents=[common],
                       help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--identities", type=int, help="number of identities (default 12)")
    p.add_argument("--clips-per-id", type=int, help="clips per identity (default 4)")
    p.add_argument("--seed", type=int, help="corpus seed (default from config)")
    p.add_argument("--jobs", type=int, help="parallel clip workers (default 1)")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing corpus")

    p = sub.add_parser("train", parents=[common], help="train one phase")
    p.add_argument("--phase", required=True, choices=PHASE_ORDER)
    p.add_argument("--corpus", required=True, help="corpus root")
    p.add_argument("--ckpt-dir", required=True, help="checkpoint bundle directory")
    p.add_argument("--preset", default="default",
                   choices=["default", "no_sync", "linear_projection", "paper_scale"],
                   help="named training preset (adapter phase)")
    p.add_argument("--init-from", help="bundle supplying prerequisite groups")
    p.add_argument("--resume", action="store_true",
                   help="continue from this phase's checkpoint")

    p = sub.add_parser("dub", parents=[common], help="dub a clip with driving audio")
    p.add_argument("--source", required=True, help="source clip directory")
    p.add_argument("--audio", help="driving clip directory or audio.bin "
                                    "(default: the source clip's own audio)")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--lambda", dest="lam", type=float,
                   help="identity branch scale (default 0.25)")
    p.add_argument("--refs", type=int, help="reference face count N (default 4)")
    p.add_argument("--policy", default="uniform-random",
                   choices=["uniform-random", "first-N"])
    p.add_argument("--seed", type=int, help="reference selection seed")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="run a metric report grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--split", default="eval", choices=["eval", "train"])
    p.add_argument("--grid", default="default",
                   choices=["default", "lambda-sweep", "ref-sweep"])
    p.add_argument("--row-prefix", default="", help="prefix for report row names")
    p.add_argument("--jobs", type=int, help="parallel clip evaluation workers")
    p.add_argument("--out", required=True, help="report output directory")

    p = sub.add_parser("pipeline", parents=[common],
                       help="corpus + all phases + ablation adapters")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--presets", default="no_sync",
                   help="comma-separated adapter presets to also train")
    return parser


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set)


def cmd_gen_corpus(args) -> int:
    config = _config(args)
    if args.seed is not None:
        config.set("run", "seed", args.seed)
    if args.identities is not None:
        config.set("corpus", "identities", args.identities)
    if args.clips_per_id is not None:
        config.set("corpus", "clips_per_identity", args.clips_per_id)
    out = Path(args.out)
    if (out / "manifest.txt").exists() and not args.force:
        raise StateError(f"corpus already exists at {out} (use --force to regenerate)")
    if args.force and (out / "manifest.txt").exists():
        (out / "manifest.txt").unlink()
    jobs = args.jobs if args.jobs is not None else config.get("run", "jobs")
    manifest = ensure_corpus(config, out, jobs=jobs)
    write_run_stamp(out, config)
    n_id = len(manifest.identities)
    print(f"wrote {n_id} identities x {manifest.clips_per_identity} clips "
          f"= {n_id * manifest.clips_per_identity} clips under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    manifest = read_manifest(Path(args.corpus) / "manifest.txt")
    if args.preset == "paper_scale":
        train_cfg = paper_scale_config(seed=config.get("run", "seed"))
    else:
        train_cfg = config.train_config(args.phase, preset=args.preset)
    import torch
    torch.set_num_threads(config.get("run", "threads"))
    run_phase(train_cfg, manifest, args.ckpt_dir,
              eval_identities=config.get("corpus", "eval_identities"),
              init_from=args.init_from, resume=args.resume)
    write_run_stamp(args.ckpt_dir, config,
                    {"corpus_manifest": Path(args.corpus) / "manifest.txt"})
    print(f"phase {args.phase} ({args.preset}) finished: {train_cfg.steps} steps "
          f"-> {args.ckpt_dir}")
    return EXIT_OK


def _load_audio(path) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        return read_clip(path).audio
    if path.is_file() and path.suffix == ".bin":
        return _read_audio_bin(path)
    raise InvalidArgumentError(f"cannot read driving audio from {path}")


def _read_audio_bin(path) -> np.ndarray:
    import struct
    data = Path(path).read_bytes()
    if data[:4] != b"UAVA":
        raise FormatError(f"bad audio magic {data[:4]!r}", path=path)
    (count,) = struct.unpack("<I", data[4:8])
    return np.frombuffer(data, dtype="<f4", offset=8, count=count).copy()


def cmd_dub(args) -> int:
    config = _config(args)
    source = Path(args.source)
    if not source.is_dir():
        raise InvalidArgumentError(f"source clip directory not found: {source}")
    out = Path(args.out)
    if (out / "dub_meta.txt").exists() and not args.force:
        raise StateError(f"dub output already exists at {out} (use --force)")
    models = load_model_set(args.ckpt_dir, seed=config.get("run", "seed"))
    clip = read_clip(source)
    audio = _load_audio(args.audio) if args.audio else clip.audio
    lam = args.lam if args.lam is not None else config.get("adapter", "infer_lambda")
    refs = args.refs if args.refs is not None else config.get("adapter", "num_refs")
    seed = args.seed if args.seed is not None else config.get("run", "seed")
    dubbed, meta = dub_clip(models, clip, audio, lam=lam, num_refs=refs,
                            policy=args.policy, seed=seed)
    write_dub(dubbed, meta, out)
    write_run_stamp(out, config)
    print(f"dubbed {dubbed.num_frames} frames at "
          f"{meta['frames_per_second']:.1f} frames/s (lambda={lam}, N={refs}) -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args)
    manifest = read_manifest(Path(args.corpus) / "manifest.txt")
    train_ids, eval_ids = split_identities(
        manifest, config.get("corpus", "eval_identities"))
    ids = eval_ids if args.split == "eval" else train_ids
    groups = load_split(manifest, ids)
    clips = [c for g in groups for c in g]
    clip_ids = [f"identity_{i:04d}/clip_{j:04d}"
                for i in ids for j in range(manifest.clips_per_identity)]
    models = load_model_set(args.ckpt_dir, seed=config.get("run", "seed"))
    lam = config.get("adapter", "infer_lambda")
    refs = config.get("adapter", "num_refs")
    seed = config.get("run", "seed")
    jobs = args.jobs if args.jobs is not None else config.get("run", "jobs")

    prefix = args.row_prefix + ("_" if args.row_prefix else "")
    if args.grid == "default":
        rows = {f"{prefix}default": (lam, refs)}
        if models.adapter is not None:
            rows[f"{prefix}no_adapter"] = (0.0, refs)
    elif args.grid == "lambda-sweep":
        rows = {f"{prefix}lambda_{v:g}": (v, refs) for v in LAMBDA_SWEEP}
    else:
        rows = {f"{prefix}refs_{n}": (lam, n) for n in REF_SWEEP}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name, (row_lam, row_refs) in rows.items():
        results[name] = evaluate_preset(models, clips, clip_ids, row_lam,
                                        row_refs, seed=seed, jobs=jobs)
    rep = report(results, out_csv=out / "report.csv", out_txt=out / "report.txt")
    write_run_stamp(out, config,
                    {"corpus_manifest": Path(args.corpus) / "manifest.txt",
                     "checkpoint_manifest": Path(args.ckpt_dir) / "manifest.txt"})
    from .evaluation import format_table
    print(format_table(rep), end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = _config(args)
    presets = tuple(p for p in args.presets.split(",") if p)
    result = run_full_pipeline(args.run_dir, config, presets=presets,
                               progress=lambda msg: print(msg, flush=True))
    print(f"pipeline complete under {result.run_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-corpus": cmd_gen_corpus,
        "train": cmd_train,
        "dub": cmd_dub,
        "eval": cmd_eval,
        "pipeline": cmd_pipeline,
    }
    try:
        return handlers[args.command](args)
    except (InvalidArgumentError, FormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LipdubError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE


if __name__ == "__main__":
    sys.exit(main())
