"""Identity embeddings: a small trainable face encoder (stand-in for a
pretrained recognizer), an analytic oracle embedding for tests, and
reference aggregation."""

import numpy as np
import torch
from torch import nn

from .corpus import FrameClip, IdentitySpec
from .errors import InvalidArgumentError, ShapeError

EMBED_DIM = 512
_ORACLE_SEED = 0x1DEA


class IdentityEmbedder(nn.Module):
    """4 strided conv stages -> global average pool -> 512-d unit vector.

    Capacity is deliberately small (<100k parameters) so identity
    information stays a bottleneck. Stages 2 and 3 double as the frozen
    feature extractor for the perceptual loss.
    """

    def __init__(self):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Conv2d(3, 12, 3, stride=2, padding=1), nn.SiLU())
        self.stage2 = nn.Sequential(nn.Conv2d(12, 24, 3, stride=2, padding=1), nn.SiLU())
        self.stage3 = nn.Sequential(nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.SiLU())
        self.stage4 = nn.Sequential(nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.SiLU())
        self.head = nn.Linear(64, EMBED_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 3, H, W) in [0,1] -> (B, 512) unit-norm."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W), got {tuple(x.shape)}")
        h = self.stage4(self.stage3(self.stage2(self.stage1(x))))
        pooled = h.mean(dim=(2, 3))
        emb = self.head(pooled)
        return emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Conv stage 2 and 3 feature maps (perceptual-loss extractor)."""
        h1 = self.stage1(x)
        h2 = self.stage2(h1)
        h3 = self.stage3(h2)
        return [h2, h3]


def embed_face(embedder: IdentityEmbedder, frame: np.ndarray) -> np.ndarray:
    """Embed one H x W x 3 frame in [0,1] to a unit-norm 512 vector."""
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ShapeError(f"expected HxWx3 frame, got {frame.shape}")
    with torch.no_grad():
        t = torch.as_tensor(np.ascontiguousarray(frame), dtype=torch.float32)
        out = embedder(t.permute(2, 0, 1).unsqueeze(0))
    return out[0].numpy()


def embed_frames(embedder: IdentityEmbedder, frames: np.ndarray) -> torch.Tensor:
    """Embed F x H x W x 3 frames -> (F, 512) without grad."""
    with torch.no_grad():
        t = torch.as_tensor(np.ascontiguousarray(frames), dtype=torch.float32)
        return embedder(t.permute(0, 3, 1, 2))


def oracle_embedding(identity: IdentitySpec) -> np.ndarray:
    """Deterministic fixed random projection of the spec's field vector;
    distinct specs map to distinct unit vectors."""
    identity.validate()
    rng = np.random.default_rng(_ORACLE_SEED)
    projection = rng.standard_normal((EMBED_DIM, 6))
    features = identity.field_vector()
    vec = projection @ features + 0.05 * rng.standard_normal(EMBED_DIM)
    return vec / np.linalg.norm(vec)


def aggregate_references(embeddings) -> torch.Tensor:
    """Mean of unit-norm reference embeddings, L2-renormalized.

    Accepts (512,), (N,512) or (B,N,512); reduces over the N axis.
    """
    emb = torch.as_tensor(embeddings, dtype=torch.float32) \
        if not torch.is_tensor(embeddings) else embeddings
    if emb.dim() == 1:
        emb = emb.unsqueeze(0)
    if emb.shape[0] == 0 or emb.shape[-2] == 0:
        raise InvalidArgumentError("need at least one reference embedding")
    if emb.shape[-1] != EMBED_DIM:
        raise ShapeError(f"expected width {EMBED_DIM}, got {emb.shape[-1]}")
    mean = emb.mean(dim=-2)
    norm = mean.norm(dim=-1, keepdim=True)
    if torch.any(norm < 1e-12):
        raise InvalidArgumentError("reference embeddings average to a zero vector")
    return mean / norm


def contrastive_loss(embeddings: torch.Tensor, identity_ids: torch.Tensor,
                     margin: float = 0.2) -> torch.Tensor:
    """Pull same-identity pairs toward cosine 1, push different-identity
    pairs below `margin` cosine."""
    cos = embeddings @ embeddings.T
    same = identity_ids[:, None] == identity_ids[None, :]
    off_diag = ~torch.eye(len(embeddings), dtype=torch.bool)
    pos = (1.0 - cos)[same & off_diag]
    neg = torch.clamp(cos - margin, min=0.0)[(~same) & off_diag]
    pos_term = pos.mean() if pos.numel() else cos.new_zeros(())
    neg_term = neg.mean() if neg.numel() else cos.new_zeros(())
    return pos_term + neg_term


def train_embedder(groups: list[list[FrameClip]], steps: int = 600,
                   batch_identities: int = 8, margin: float = 0.2,
                   lr: float = 1e-3, seed: int = 0):
    """Train the embedder contrastively on per-identity clip groups and
    return (frozen embedder, loss history)."""
    if len(groups) < 2:
        raise InvalidArgumentError(f"need >= 2 identities, got {len(groups)}")
    torch.manual_seed(seed)
    embedder = IdentityEmbedder()
    opt = torch.optim.AdamW(embedder.parameters(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)

    # keep frames as tensors once; groups are small at desk scale
    tensors = [[torch.as_tensor(c.frames).permute(0, 3, 1, 2) for c in clips]
               for clips in groups]

    history = []
    for _ in range(steps):
        ids = rng.choice(len(groups), size=min(batch_identities, len(groups)),
                         replace=False)
        batch, labels = [], []
        for ident in ids:
            for _ in range(2):
                clips = tensors[ident]
                c = int(rng.integers(len(clips)))
                f = int(rng.integers(clips[c].shape[0]))
                batch.append(clips[c][f])
                labels.append(int(ident))
        x = torch.stack(batch)
        emb = embedder(x)
        loss = contrastive_loss(emb, torch.tensor(labels), margin=margin)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))

    embedder.requires_grad_(False)
    embedder.eval()
    return embedder, history
