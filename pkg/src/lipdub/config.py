"""Run configuration: INI-style sections + key=value with CLI overrides.

Every run resolves its full configuration (file values over defaults,
flag overrides over both) and writes the resolved copy beside its outputs
so a run is reproducible from the artifacts alone."""

import configparser
import hashlib
from pathlib import Path

from .errors import InvalidArgumentError
from .losses import LossWeights
from .training import TrainConfig

DEFAULTS = {
    "run": {
        "seed": 7,
        "threads": 1,
        "jobs": 1,
    },
    "corpus": {
        "identities": 12,
        "clips_per_identity": 4,
        "eval_identities": 4,
        "height": 64,
        "width": 64,
        "fps": 25,
        "sample_rate": 16000,
        "frames": 50,
    },
    "audio": {
        "n_mels": 80,
        "tokens_per_frame": 26,
        "video_window": 5,
        "token_width": 384,
    },
    "losses": {
        "w_rec": 1.0,
        "w_p": 0.05,
        "w_sync": 0.3,
    },
    "adapter": {
        "infer_lambda": 0.25,
        "num_refs": 4,
        "train_lambda": 1.0,
        "identity_dropout": 0.05,
        "perceiver": "perceiver",
    },
    "train_codec": {"steps": 1200, "batch_size": 32, "lr": 2e-3,
                    "weight_decay": 0.01, "checkpoint_every": 500},
    "train_embedder": {"steps": 600, "batch_size": 8, "lr": 1e-3,
                       "weight_decay": 0.01, "checkpoint_every": 500},
    "train_sync": {"steps": 1600, "batch_size": 16, "lr": 1e-3,
                   "weight_decay": 0.01, "checkpoint_every": 500},
    "train_backbone": {"steps": 3000, "batch_size": 8, "lr": 3e-4,
                       "weight_decay": 0.01, "checkpoint_every": 500},
    "train_adapter": {"steps": 2000, "batch_size": 8, "lr": 1e-4,
                      "weight_decay": 0.01, "checkpoint_every": 500},
}


class RunConfig:
    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        """Defaults <- config file <- `section.key=value` override strings."""
        values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(path)
            if not read:
                raise InvalidArgumentError(f"config file not found: {path}")
            for section in parser.sections():
                if section not in values:
                    raise InvalidArgumentError(f"unknown config section [{section}]")
                for key, raw in parser.items(section):
                    values[section][key] = _coerce(section, key, raw)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise InvalidArgumentError(
                    f"override must look like section.key=value, got '{item}'")
            dotted, raw = item.split("=", 1)
            section, key = dotted.split(".", 1)
            values.setdefault(section, {})
            values[section][key] = _coerce(section, key, raw)
        return cls(values)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        self.values[section][key] = value

    def weights(self) -> LossWeights:
        sec = self.values["losses"]
        return LossWeights(w_rec=sec["w_rec"], w_p=sec["w_p"], w_sync=sec["w_sync"])

    def train_config(self, phase: str, preset: str = "default") -> TrainConfig:
        sec = self.values[f"train_{phase}"]
        weights = self.weights()
        perceiver = self.values["adapter"]["perceiver"]
        if preset == "no_sync":
            weights = LossWeights(w_rec=weights.w_rec, w_p=weights.w_p, w_sync=0.0)
        elif preset == "linear_projection":
            perceiver = "linear"
        return TrainConfig(
            phase=phase,
            steps=sec["steps"],
            batch_size=sec["batch_size"],
            lr=sec["lr"],
            weight_decay=sec["weight_decay"],
            seed=self.values["run"]["seed"],
            identity_dropout=self.values["adapter"]["identity_dropout"],
            train_lambda=self.values["adapter"]["train_lambda"],
            num_refs=self.values["adapter"]["num_refs"],
            weights=weights,
            checkpoint_every=sec["checkpoint_every"],
            perceiver=perceiver,
            preset=preset,
        )

    def render_text(self) -> str:
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.render_text())


def _coerce(section: str, key: str, raw: str):
    raw = raw.strip()
    template = DEFAULTS.get(section, {}).get(key)
    if template is None:
        # unknown key: keep as string
        return raw
    kind = type(template)
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError as exc:
        raise InvalidArgumentError(
            f"bad value for {section}.{key}: {raw!r} ({exc})") from exc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_run_stamp(out_dir, config: RunConfig, inputs: dict = ()) -> None:
    """Drop resolved.cfg and input hashes into an output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.write_resolved(out_dir / "resolved.cfg")
    if inputs:
        lines = [f"{name}={file_sha256(p)}" for name, p in sorted(dict(inputs).items())
                 if Path(p).exists()]
        (out_dir / "input_hashes.txt").write_text("\n".join(lines) + "\n")
