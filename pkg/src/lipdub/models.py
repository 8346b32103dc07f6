"""Model-set container: every parameter group of the pipeline under its
checkpoint group name, plus constructors."""

from dataclasses import dataclass, field

import torch

from .adapter import IdentityAdapter, IdentityPerceiver, LinearIdentityProjector, PerceiverConfig, attach
from .audio import AudioConfig, AudioEncoder
from .backbone import Backbone, BackboneConfig
from .codec import LatentCodec
from .errors import StateError
from .identity import IdentityEmbedder
from .sync import SyncConfig, SyncExpert

GROUPS = ("latent_codec", "identity_embedder", "sync_expert",
          "audio_encoder", "backbone", "identity_adapter")


@dataclass
class ModelSet:
    codec: LatentCodec = None
    embedder: IdentityEmbedder = None
    sync: SyncExpert = None
    audio_encoder: AudioEncoder = None
    backbone: Backbone = None
    adapter: IdentityAdapter = None
    audio_cfg: AudioConfig = field(default_factory=AudioConfig)

    def groups(self) -> dict:
        """Checkpoint-group name -> module, for the groups that exist."""
        mapping = {
            "latent_codec": self.codec,
            "identity_embedder": self.embedder,
            "sync_expert": self.sync,
            "audio_encoder": self.audio_encoder,
            "backbone": self.backbone,
            "identity_adapter": self.adapter,
        }
        return {k: v for k, v in mapping.items() if v is not None}

    def require(self, *names: str) -> None:
        present = self.groups()
        for name in names:
            if name not in present:
                raise StateError(f"missing model group '{name}'")


def fresh_models(seed: int = 0, with_adapter: bool = False,
                 perceiver_kind: str = "perceiver",
                 share_id_kv: bool = False) -> ModelSet:
    """Construct every group with deterministic initialization."""
    torch.manual_seed(seed)
    models = ModelSet(
        codec=LatentCodec(),
        embedder=IdentityEmbedder(),
        sync=SyncExpert(SyncConfig()),
        audio_encoder=AudioEncoder(),
        backbone=Backbone(BackboneConfig()),
    )
    if with_adapter:
        models.adapter = make_adapter(models.backbone, perceiver_kind, share_id_kv)
    return models


def make_adapter(backbone: Backbone, perceiver_kind: str = "perceiver",
                 share_id_kv: bool = False) -> IdentityAdapter:
    if perceiver_kind == "perceiver":
        perceiver = IdentityPerceiver(PerceiverConfig())
    elif perceiver_kind == "linear":
        perceiver = LinearIdentityProjector(PerceiverConfig())
    else:
        raise StateError(f"unknown perceiver kind '{perceiver_kind}'")
    return attach(backbone, perceiver, share_id_kv_across_sites=share_id_kv)


def load_model_set(ckpt_dir, seed: int = 0) -> ModelSet:
    """Reconstruct a ModelSet from a checkpoint bundle, loading exactly the
    groups present (adapter kind inferred from its tensor names)."""
    from .checkpoint import freeze, load_checkpoint, read_manifest

    entries, _ = read_manifest(ckpt_dir)
    bundle_groups = {g for g, *_ in entries}
    models = fresh_models(seed=seed)
    if "identity_adapter" in bundle_groups:
        tensors = {t for g, t, *_ in entries if g == "identity_adapter"}
        kind = "linear" if any(t.startswith("perceiver.proj.") for t in tensors) \
            else "perceiver"
        models.adapter = make_adapter(models.backbone, kind)
    wanted = {name: module for name, module in models.groups().items()
              if name in bundle_groups}
    load_checkpoint(ckpt_dir, wanted)
    for name in list(models.groups()):
        if name not in bundle_groups:
            setattr(models, _FIELD_BY_GROUP[name], None)
    for module in models.groups().values():
        freeze(module)
    return models


_FIELD_BY_GROUP = {
    "latent_codec": "codec",
    "identity_embedder": "embedder",
    "sync_expert": "sync",
    "audio_encoder": "audio_encoder",
    "backbone": "backbone",
    "identity_adapter": "adapter",
}
