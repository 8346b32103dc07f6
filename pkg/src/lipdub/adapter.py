"""Identity conditioning: a perceiver-style resampler that turns 512-d
face embeddings into a short sequence of 384-wide identity tokens, plus
decoupled cross-attention branches attached beside every audio fusion
site of the backbone."""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Backbone, CrossAttentionSite, multi_head_attention
from .errors import InvalidArgumentError, ShapeError, StateError
from .identity import EMBED_DIM, aggregate_references


@dataclass(frozen=True)
class PerceiverConfig:
    num_tokens: int = 4    # N_q
    width: int = 384
    depth: int = 3         # L
    heads: int = 4
    ff_width: int = 768
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidArgumentError(f"depth must be >= 1, got {self.depth}")
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")


class _CrossBlock(nn.Module):
    """Pre-LN cross-attention with residual."""

    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.ln_q = nn.LayerNorm(width, eps=1e-5)
        self.ln_kv = nn.LayerNorm(width, eps=1e-5)
        self.to_q = nn.Linear(width, width)
        self.to_k = nn.Linear(width, width)
        self.to_v = nn.Linear(width, width)
        self.to_out = nn.Linear(width, width)

    def forward(self, tokens, memory):
        q = self.to_q(self.ln_q(tokens))
        k = self.to_k(self.ln_kv(memory))
        v = self.to_v(self.ln_kv(memory))
        return tokens + self.to_out(multi_head_attention(q, k, v, self.heads))


class _DecoderBlock(nn.Module):
    """Pre-LN self-attention + feed-forward with residuals."""

    def __init__(self, width, heads, ff_width):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width, eps=1e-5)
        self.to_q = nn.Linear(width, width)
        self.to_k = nn.Linear(width, width)
        self.to_v = nn.Linear(width, width)
        self.to_out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width, eps=1e-5)
        self.ff = nn.Sequential(nn.Linear(width, ff_width), nn.GELU(),
                                nn.Linear(ff_width, width))

    def forward(self, tokens):
        h = self.ln1(tokens)
        tokens = tokens + self.to_out(multi_head_attention(
            self.to_q(h), self.to_k(h), self.to_v(h), self.heads))
        return tokens + self.ff(self.ln2(tokens))


class IdentityPerceiver(nn.Module):
    """Resample identity embeddings into N_q x 384 identity tokens.

    The (renormalized) mean of the reference embeddings seeds the query
    tokens through a linear projection; the per-reference embeddings,
    projected row-wise to token width, serve as cross-attention memory.
    Each of the L rounds applies cross-attention to the memory followed by
    a transformer decoder layer.
    """

    def __init__(self, config: PerceiverConfig = PerceiverConfig()):
        super().__init__()
        self.config = config
        self.seed_proj = nn.Linear(config.embed_dim, config.num_tokens * config.width)
        self.mem_proj = nn.Linear(config.embed_dim, config.width)
        self.cross = nn.ModuleList(
            [_CrossBlock(config.width, config.heads) for _ in range(config.depth)])
        self.decode = nn.ModuleList(
            [_DecoderBlock(config.width, config.heads, config.ff_width)
             for _ in range(config.depth)])

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(512,), (N,512) or (B,N,512) -> (N_q,384) or (B,N_q,384)."""
        emb = embeddings if torch.is_tensor(embeddings) else torch.as_tensor(
            embeddings, dtype=torch.float32)
        squeeze = emb.dim() < 3
        if emb.dim() == 1:
            emb = emb.unsqueeze(0)
        if emb.dim() == 2:
            emb = emb.unsqueeze(0)
        if emb.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"expected embeddings of width {self.config.embed_dim}, "
                             f"got {emb.shape[-1]}")
        if torch.any(emb.norm(dim=-1) < 1e-8):
            raise InvalidArgumentError("zero-norm identity embedding")

        cfg = self.config
        pooled = aggregate_references(emb)
        tokens = self.seed_proj(pooled).view(-1, cfg.num_tokens, cfg.width)
        memory = self.mem_proj(emb)
        for cross, decode in zip(self.cross, self.decode):
            tokens = cross(tokens, memory)
            tokens = decode(tokens)
        return tokens.squeeze(0) if squeeze else tokens


class LinearIdentityProjector(nn.Module):
    """Ablation stand-in: a single affine map from the aggregated embedding
    to the identity tokens."""

    def __init__(self, config: PerceiverConfig = PerceiverConfig()):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(config.embed_dim, config.num_tokens * config.width)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        emb = embeddings if torch.is_tensor(embeddings) else torch.as_tensor(
            embeddings, dtype=torch.float32)
        squeeze = emb.dim() < 3
        if emb.dim() == 1:
            emb = emb.unsqueeze(0)
        if emb.dim() == 2:
            emb = emb.unsqueeze(0)
        if torch.any(emb.norm(dim=-1) < 1e-8):
            raise InvalidArgumentError("zero-norm identity embedding")
        pooled = aggregate_references(emb)
        tokens = self.proj(pooled).view(-1, self.config.num_tokens, self.config.width)
        return tokens.squeeze(0) if squeeze else tokens


class AdapterBranch(nn.Module):
    """Per-site K/V pair over identity tokens, initialized from the host
    site's audio K/V so the branch starts as a copy."""

    def __init__(self, site: CrossAttentionSite):
        super().__init__()
        self.site_index = site.index
        self.to_k = nn.Linear(site.kv_width, site.inner_width, bias=False)
        self.to_v = nn.Linear(site.kv_width, site.inner_width, bias=False)
        with torch.no_grad():
            self.to_k.weight.copy_(site.to_k.weight)
            self.to_v.weight.copy_(site.to_v.weight)


class IdentityAdapter(nn.Module):
    """Perceiver/projector plus one branch per backbone attention site;
    the only parameter group written by adapter training."""

    def __init__(self, perceiver: nn.Module, branches: list[AdapterBranch]):
        super().__init__()
        self.perceiver = perceiver
        self.branches = nn.ModuleList(branches)

    def tokens(self, embeddings) -> torch.Tensor:
        return self.perceiver(embeddings)


def attach(backbone: Backbone, perceiver: nn.Module,
           share_id_kv_across_sites: bool = False) -> IdentityAdapter:
    """Create one branch per attention site (K/V copied from the host) and
    install them; with sharing enabled, all sites use one branch."""
    if backbone.adapter_attached:
        raise StateError("adapter already attached to this backbone")
    sites = backbone.attention_sites()
    if share_id_kv_across_sites:
        shared = AdapterBranch(sites[0])
        branches = [shared]
        for site in sites:
            object.__setattr__(site, "branch", shared)
    else:
        branches = [AdapterBranch(site) for site in sites]
        for site, branch in zip(sites, branches):
            object.__setattr__(site, "branch", branch)
    backbone.adapter_attached = True
    return IdentityAdapter(perceiver, branches)


def detach(backbone: Backbone) -> None:
    """Remove branches; the forward path is bit-identical to never-attached."""
    if not backbone.adapter_attached:
        raise StateError("no adapter attached")
    for site in backbone.attention_sites():
        object.__setattr__(site, "branch", None)
    backbone.adapter_attached = False


def decoupled_attention(queries: torch.Tensor, audio_tokens: torch.Tensor,
                        identity_tokens: torch.Tensor, site: CrossAttentionSite,
                        lam: float) -> torch.Tensor:
    """Audio attention plus lam-scaled identity attention with the shared
    query projection: out_proj(Attn(Q, K_a, V_a) + lam * Attn(Q, K_id, V_id))."""
    if site.branch is None:
        raise StateError(f"site {site.index} has no adapter branch attached")
    squeeze = queries.dim() == 2
    if squeeze:
        queries = queries.unsqueeze(0)
    if audio_tokens.dim() == 2:
        audio_tokens = audio_tokens.unsqueeze(0).expand(queries.shape[0], -1, -1)
    if identity_tokens.dim() == 2:
        identity_tokens = identity_tokens.unsqueeze(0).expand(queries.shape[0], -1, -1)
    if identity_tokens.shape[-1] != site.kv_width:
        raise ShapeError(
            f"identity token width {identity_tokens.shape[-1]} != {site.kv_width}")
    out = site(queries, audio_tokens, identity_tokens, lam)
    return out.squeeze(0) if squeeze else out


def dropout_identity(tokens: torch.Tensor, p: float = 0.05, rng=None,
                     training: bool = True) -> torch.Tensor:
    """With probability p replace a sample's identity tokens with zeros
    (the unconditional input); pass-through in eval mode."""
    if not (0.0 <= p < 1.0):
        raise InvalidArgumentError(f"dropout probability must be in [0,1), got {p}")
    if not training or p == 0.0:
        return tokens
    if rng is None:
        raise InvalidArgumentError("training-mode dropout needs an rng")
    if tokens.dim() == 2:
        return torch.zeros_like(tokens) if rng.random() < p else tokens
    keep = torch.as_tensor(
        [0.0 if rng.random() < p else 1.0 for _ in range(tokens.shape[0])],
        dtype=tokens.dtype)
    return tokens * keep.view(-1, 1, 1)
