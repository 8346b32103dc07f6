import numpy as np
import pytest
import torch

from lipdub import audio
from lipdub.errors import InvalidArgumentError, ShapeError


def test_resample_identity_when_rates_equal():
    x = np.sin(np.linspace(0, 10, 400))
    assert np.array_equal(audio.resample(x, 8000, 8000), x)


def test_resample_constant_doubles_length():
    x = np.full(1000, 0.37)
    y = audio.resample(x, 8000, 16000)
    assert y.shape == (2000,)
    assert np.allclose(y, 0.37)


def test_resample_preserves_dominant_frequency():
    # DFT oracle: the strongest bin of the resampled sine still sits at 440 Hz
    n = 8000
    t = np.arange(n) / 8000.0
    x = np.sin(2 * np.pi * 440.0 * t)
    y = audio.resample(x, 8000, 16000)
    spectrum = np.abs(np.fft.rfft(y))
    peak_hz = np.argmax(spectrum) * 16000.0 / y.size
    assert abs(peak_hz - 440.0) < 16000.0 / y.size + 1e-9


def test_resample_empty_rejected():
    with pytest.raises(InvalidArgumentError):
        audio.resample(np.array([]), 8000, 16000)


def test_log_mel_zero_signal_hits_log_floor():
    mel = audio.log_mel(np.zeros(4000), 16000, 80, 246, 123)
    assert np.all(mel.frames == -10.0)


def test_log_mel_row_count_invariant():
    for n, win, hop in ((4000, 246, 123), (16000, 1024, 512), (5000, 400, 100)):
        mel = audio.log_mel(np.random.default_rng(0).normal(size=n), 16000, 80, win, hop)
        assert mel.num_rows == (n - win) // hop + 1


def test_log_mel_80_channels():
    mel = audio.log_mel(np.ones(2000), 16000, 80, 246, 123)
    assert mel.frames.shape[1] == 80


def test_log_mel_sine_argmax_matches_filter_center_oracle():
    # oracle: the filter whose center frequency is nearest 440 Hz
    t = np.arange(16000) / 16000.0
    signal = np.sin(2 * np.pi * 440.0 * t)
    mel = audio.log_mel(signal, 16000, 80, 1024, 512)
    centers = audio.mel_filter_centers(16000, 80)
    expected_bin = int(np.argmin(np.abs(centers - 440.0)))
    argmax_bins = np.argmax(mel.frames, axis=1)
    assert np.all(argmax_bins == expected_bin)


def test_log_mel_shift_property():
    rng = np.random.default_rng(4)
    signal = rng.normal(size=6000)
    hop, win, k = 123, 246, 3
    base = audio.log_mel(signal, 16000, 80, win, hop)
    delayed = audio.log_mel(np.concatenate([np.zeros(k * hop), signal]), 16000, 80, win, hop)
    assert np.array_equal(delayed.frames[k:base.num_rows + k], base.frames)


def test_log_mel_too_short_rejected():
    with pytest.raises(InvalidArgumentError):
        audio.log_mel(np.zeros(100), 16000, 80, 246, 123)
    with pytest.raises(InvalidArgumentError):
        audio.log_mel(np.zeros(1000), 16000, 80, 100, 200)


def test_default_hop_pairs_26_tokens_with_5_frames():
    cfg = audio.AudioConfig()
    assert cfg.hop_samples == 123
    assert cfg.win_samples == 246
    assert cfg.hop_samples == round(16000 * 5 / (25 * 26))


def _mel_fixture(frames=50):
    signal = np.random.default_rng(8).normal(size=frames * 640)
    return audio.log_mel(signal, 16000, 80, 246, 123)


def test_frame_window_left_edge_replicated():
    mel = _mel_fixture()
    window = audio.frame_window(mel, 0, 25, 26)
    center = int(round((0.5 / 25) / mel.hop_seconds))
    pad = 13 - center
    assert pad > 0
    for row in range(pad):
        assert np.array_equal(window[row], mel.frames[0])


def test_frame_window_center_row_definition():
    mel = _mel_fixture()
    t = 25
    window = audio.frame_window(mel, t, 25, 26)
    center = int(round(((t + 0.5) / 25) / mel.hop_seconds))
    assert np.array_equal(window[13], mel.frames[center])


def test_adjacent_frame_windows_overlap_by_index_arithmetic():
    # oracle: overlap = T_a - (center(t+1) - center(t))
    mel = _mel_fixture()
    t = 20
    w1 = audio.frame_window(mel, t, 25, 26)
    w2 = audio.frame_window(mel, t + 1, 25, 26)
    c1 = int(round(((t + 0.5) / 25) / mel.hop_seconds))
    c2 = int(round(((t + 1.5) / 25) / mel.hop_seconds))
    shift = c2 - c1
    overlap = 26 - shift
    assert np.array_equal(w1[shift:], w2[:overlap])


def test_encoder_output_shape():
    enc = audio.AudioEncoder()
    tokens = enc(torch.randn(26, 80))
    assert tokens.shape == (26, 384)
    batched = enc(torch.randn(3, 26, 80))
    assert batched.shape == (3, 26, 384)


def test_encoder_zero_weights_zero_tokens():
    enc = audio.AudioEncoder()
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    out = enc(torch.randn(26, 80))
    assert torch.all(out == 0.0)


def test_encoder_wrong_rows_rejected():
    enc = audio.AudioEncoder()
    with pytest.raises(ShapeError):
        enc(torch.randn(25, 80))
    with pytest.raises(ShapeError):
        enc(torch.randn(26, 79))


def test_encoder_finite_and_deterministic():
    torch.manual_seed(0)
    enc = audio.AudioEncoder()
    x = torch.randn(26, 80) * 10
    a, b = enc(x), enc(x)
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


def test_encoder_gradient_matches_finite_differences():
    torch.manual_seed(1)
    enc = audio.AudioEncoder().double()
    x = torch.randn(26, 80, dtype=torch.float64, requires_grad=True)
    enc(x).mean().backward()
    grad = x.grad.clone()
    rng = np.random.default_rng(2)
    eps = 1e-6
    for _ in range(8):
        i, j = int(rng.integers(26)), int(rng.integers(80))
        with torch.no_grad():
            xp = x.detach().clone(); xp[i, j] += eps
            xm = x.detach().clone(); xm[i, j] -= eps
            fd = (enc(xp).mean() - enc(xm).mean()) / (2 * eps)
        rel = abs(float(fd) - float(grad[i, j])) / max(abs(float(fd)), abs(float(grad[i, j])), 1e-12)
        assert rel <= 1e-4
