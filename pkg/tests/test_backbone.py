import math

import numpy as np
import pytest
import torch

from lipdub import audio
from lipdub.backbone import (Backbone, BackboneConfig, CrossAttentionSite,
                             cross_attention, sinusoid_positions_2d)
from lipdub.errors import NumericError, ShapeError, StateError


def test_config_validation():
    with pytest.raises(ShapeError):
        BackboneConfig(channels=(30, 64, 128))
    with pytest.raises(ShapeError):
        BackboneConfig(inner_width=130)


def test_single_token_attention_ignores_query():
    torch.manual_seed(0)
    site = CrossAttentionSite(0, query_width=32)
    kv = torch.randn(1, 384)
    out1 = cross_attention(torch.randn(5, 32), kv, site)
    out2 = cross_attention(torch.randn(5, 32) * 3, kv, site)
    assert torch.allclose(out1, out2, atol=1e-6)
    expected = site.to_out(site.to_v(kv))
    assert torch.allclose(out1[0], expected[0], atol=1e-6)


def _loop_attention(queries, keys_values, site):
    """O(n^2) per-head loop oracle for the site's attention."""
    q = (queries.double() @ site.to_q.weight.double().T).numpy()
    k = (keys_values.double() @ site.to_k.weight.double().T).numpy()
    v = (keys_values.double() @ site.to_v.weight.double().T).numpy()
    heads, d = site.heads, site.inner_width
    dh = d // heads
    n, t = q.shape[0], k.shape[0]
    merged = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = np.empty(t)
            for j in range(t):
                scores[j] = float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            for j in range(t):
                merged[i, sl] += w[j] * v[j, sl]
    return merged @ site.to_out.weight.double().numpy().T


@pytest.mark.parametrize("seed", range(3))
def test_cross_attention_matches_loop_oracle(seed):
    torch.manual_seed(seed)
    site = CrossAttentionSite(0, query_width=32).double()
    queries = torch.randn(2, 32, dtype=torch.float64)
    kv = torch.randn(2, 384, dtype=torch.float64)
    fast = cross_attention(queries, kv, site).detach().numpy()
    slow = _loop_attention(queries, kv, site)
    assert np.max(np.abs(fast - slow)) <= 1e-6


def test_cross_attention_gradient_matches_finite_differences():
    torch.manual_seed(3)
    site = CrossAttentionSite(0, query_width=16, inner_width=16, heads=4).double()
    q = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
    kv = torch.randn(5, 384, dtype=torch.float64)
    cross_attention(q, kv, site).sum().backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(10):
        i, j = int(rng.integers(3)), int(rng.integers(16))
        with torch.no_grad():
            qp = q.detach().clone(); qp[i, j] += eps
            qm = q.detach().clone(); qm[i, j] -= eps
            fd = float((cross_attention(qp, kv, site).sum()
                        - cross_attention(qm, kv, site).sum()) / (2 * eps))
        an = float(q.grad[i, j])
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-12) <= 1e-4


def test_site_width_checks():
    site = CrossAttentionSite(0, query_width=32)
    with pytest.raises(ShapeError):
        site(torch.randn(1, 4, 16), torch.randn(1, 26, 384))
    with pytest.raises(ShapeError):
        site(torch.randn(1, 4, 32), torch.randn(1, 26, 100))


@pytest.fixture(scope="module")
def bb():
    torch.manual_seed(1)
    return Backbone()


def test_forward_shape_and_determinism(bb):
    z = torch.randn(2, 16, 16, 16)
    tokens = torch.randn(26, 384)
    out1 = bb(z, tokens)
    out2 = bb(z, tokens)
    assert out1.shape == (2, 8, 16, 16)
    assert torch.equal(out1, out2)
    single = bb(z[0], tokens)
    assert single.shape == (8, 16, 16)


def test_zeroed_output_projections_make_forward_audio_independent():
    torch.manual_seed(2)
    model = Backbone()
    with torch.no_grad():
        for site in model.attention_sites():
            site.to_out.weight.zero_()
    z = torch.randn(1, 16, 16, 16)
    a = model(z, torch.randn(26, 384))
    b = model(z, torch.randn(26, 384) * 5)
    assert torch.equal(a, b)


def test_identity_tokens_without_adapter_rejected(bb):
    with pytest.raises(StateError):
        bb(torch.randn(1, 16, 16, 16), torch.randn(26, 384),
           torch.randn(4, 384), lam=0.5)


def test_shape_errors(bb):
    with pytest.raises(ShapeError):
        bb(torch.randn(1, 8, 16, 16), torch.randn(26, 384))
    with pytest.raises(ShapeError):
        bb(torch.randn(1, 16, 16, 16), torch.randn(26, 100))


def test_nan_input_raises_numeric_error_naming_site(bb):
    z = torch.full((1, 16, 16, 16), float("nan"))
    with pytest.raises(NumericError) as err:
        bb(z, torch.randn(26, 384))
    assert "site 0" in str(err.value)


def test_mel_row_permutation_changes_output(bb):
    # position information flows: permuting mel rows changes the encoded
    # tokens (sinusoid positions), which changes the fused output
    torch.manual_seed(5)
    enc = audio.AudioEncoder()
    window = torch.randn(26, 80)
    perm = window[torch.randperm(26, generator=torch.Generator().manual_seed(0))]
    with torch.no_grad():
        t1, t2 = enc(window), enc(perm)
    z = torch.randn(1, 16, 16, 16)
    out1, out2 = bb(z, t1), bb(z, t2)
    assert float((out1 - out2).abs().mean()) > 0


def test_positions_2d_shape_and_range():
    pe = sinusoid_positions_2d(16, 16, 32)
    assert pe.shape == (256, 32)
    assert float(pe.abs().max()) <= 1.0
    assert not torch.equal(pe[0], pe[17])  # distinct positions differ
