import numpy as np
import pytest
import torch

from lipdub import corpus, identity
from lipdub.errors import InvalidArgumentError, ShapeError


def test_embed_face_unit_norm_and_deterministic():
    emb = identity.IdentityEmbedder()
    frame = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
    v1 = identity.embed_face(emb, frame)
    v2 = identity.embed_face(emb, frame)
    assert np.linalg.norm(v1) == pytest.approx(1.0, abs=1e-6)
    assert np.array_equal(v1, v2)


def test_embed_face_shape_error():
    emb = identity.IdentityEmbedder()
    with pytest.raises(ShapeError):
        identity.embed_face(emb, np.zeros((64, 64)))
    with pytest.raises(ShapeError):
        emb(torch.zeros(2, 64, 64))


def test_embedder_capacity_bounded():
    emb = identity.IdentityEmbedder()
    assert sum(p.numel() for p in emb.parameters()) < 100_000


def test_oracle_embedding_deterministic_and_distinct():
    a, b = corpus.sample_identities(2, seed=3)
    ea1 = identity.oracle_embedding(a)
    ea2 = identity.oracle_embedding(a)
    assert np.array_equal(ea1, ea2)
    assert np.linalg.norm(ea1) == pytest.approx(1.0, abs=1e-9)

    flipped = corpus.IdentitySpec(a.face_hue, a.face_aspect, a.eye_spacing,
                                  a.lip_saturation, not a.mustache, a.blemish_seed)
    ef = identity.oracle_embedding(flipped)
    assert float(ea1 @ ef) < 1.0


def test_oracle_cosine_symmetric():
    a, b = corpus.sample_identities(2, seed=3)
    ea, eb = identity.oracle_embedding(a), identity.oracle_embedding(b)
    assert float(ea @ eb) == pytest.approx(float(eb @ ea), abs=0)


def test_aggregate_single_is_identity():
    v = torch.randn(512)
    v = v / v.norm()
    out = identity.aggregate_references(v.unsqueeze(0))
    assert torch.allclose(out, v, atol=1e-6)


def test_aggregate_duplicates_idempotent():
    v = torch.randn(512)
    v = v / v.norm()
    out = identity.aggregate_references(torch.stack([v, v]))
    assert torch.allclose(out, v, atol=1e-6)


def test_aggregate_orthogonal_pair_analytic():
    e1 = torch.zeros(512); e1[0] = 1.0
    e2 = torch.zeros(512); e2[1] = 1.0
    out = identity.aggregate_references(torch.stack([e1, e2]))
    expected = (e1 + e2) / np.sqrt(2.0)
    assert torch.allclose(out, expected, atol=1e-6)


def test_aggregate_empty_rejected():
    with pytest.raises(InvalidArgumentError):
        identity.aggregate_references(torch.zeros(0, 512))


def test_aggregate_permutation_invariant():
    rows = torch.randn(5, 512)
    rows = rows / rows.norm(dim=1, keepdim=True)
    perm = rows[torch.tensor([3, 1, 4, 0, 2])]
    assert torch.allclose(identity.aggregate_references(rows),
                          identity.aggregate_references(perm), atol=1e-6)


def test_contrastive_margin_zero_floor():
    # orthogonal negatives and collapsed positives attain the 0 lower bound
    e1 = torch.zeros(4, 8)
    e1[0, 0] = e1[1, 0] = 1.0
    e1[2, 1] = e1[3, 1] = 1.0
    loss = identity.contrastive_loss(e1, torch.tensor([0, 0, 1, 1]), margin=0.0)
    assert float(loss) == pytest.approx(0.0, abs=1e-7)
    # any positive-cosine negative pair is penalized at margin 0
    e2 = torch.eye(2)
    mixed = torch.stack([e2[0], (e2[0] + e2[1]) / np.sqrt(2)])
    loss2 = identity.contrastive_loss(mixed, torch.tensor([0, 1]), margin=0.0)
    assert float(loss2) > 0.0


@pytest.mark.slow
def test_train_embedder_contract(tiny_groups):
    train_groups = tiny_groups[:6]
    held_out = tiny_groups[6:]
    embedder, history = identity.train_embedder(train_groups, steps=400, seed=0)
    early = float(np.mean(history[:20]))
    late = float(np.mean(history[-20:]))
    assert late <= 0.5 * early  # >=50% reduction on the training objective

    # held-out identities: intra-identity cosine high and above inter-identity
    embs = [identity.embed_frames(embedder, g[0].frames[::7]) for g in held_out]
    intra, inter = [], []
    for a in range(len(embs)):
        for b in range(len(embs)):
            cos = float((embs[a] @ embs[b].T).mean())
            (intra if a == b else inter).append(cos)
    assert np.mean(intra) >= 0.8
    assert np.mean(intra) > np.mean(inter)
    assert all(not p.requires_grad for p in embedder.parameters())


def test_train_embedder_needs_two_identities(tiny_groups):
    with pytest.raises(InvalidArgumentError):
        identity.train_embedder(tiny_groups[:1], steps=1)
