import hashlib

import numpy as np
import pytest

from lipdub import corpus
from lipdub.errors import FormatError, InvalidArgumentError


def test_synth_audio_length_arithmetic():
    signal, envelope = corpus.synth_audio(0, 1.0, 16000)
    assert signal.shape == (16000,)
    assert envelope.shape == (25,)  # fps * duration
    assert 0.0 <= envelope.min() and envelope.max() <= 1.0


def test_synth_audio_silent_envelope_zero():
    signal, envelope = corpus.synth_audio(3, 1.0, 16000, silent=True)
    assert np.all(signal == 0.0)
    assert np.all(envelope == 0.0)


def test_synth_audio_envelope_matches_windowed_rms_oracle():
    # oracle: per-frame RMS computed sample by sample
    signal, envelope = corpus.synth_audio(7, 2.0, 16000, fps=25)
    spf = 16000 // 25
    oracle = []
    for k in range(50):
        acc = 0.0
        for s in signal[k * spf:(k + 1) * spf]:
            acc += float(s) * float(s)
        oracle.append((acc / spf) ** 0.5)
    assert int(np.argmax(envelope)) == int(np.argmax(oracle))


def test_synth_audio_deterministic():
    a1, e1 = corpus.synth_audio(9, 1.5, 16000)
    a2, e2 = corpus.synth_audio(9, 1.5, 16000)
    assert np.array_equal(a1, a2) and np.array_equal(e1, e2)


def test_synth_audio_invalid_args():
    with pytest.raises(InvalidArgumentError):
        corpus.synth_audio(0, 0.0, 16000)
    with pytest.raises(InvalidArgumentError):
        corpus.synth_audio(0, 1.0, 44100)


@pytest.fixture(scope="module")
def spec():
    return corpus.sample_identities(2, seed=5)[0]


def test_render_constant_envelope_constant_frames(spec):
    clip = corpus.render_clip(spec, np.zeros(6))
    for k in range(1, 6):
        assert np.array_equal(clip.frames[k], clip.frames[0])


def test_render_open_mouth_taller(spec):
    clip = corpus.render_clip(spec, np.array([0.0, 1.0]))
    rows0 = corpus.mouth_open_pixels(clip.frames[0])
    rows1 = corpus.mouth_open_pixels(clip.frames[1])
    assert rows1 > rows0 == 0


def test_mustache_difference_confined_to_lower_half(spec):
    with_m = corpus.IdentitySpec(spec.face_hue, spec.face_aspect, spec.eye_spacing,
                                 spec.lip_saturation, True, spec.blemish_seed)
    without_m = corpus.IdentitySpec(spec.face_hue, spec.face_aspect, spec.eye_spacing,
                                    spec.lip_saturation, False, spec.blemish_seed)
    env = np.linspace(0, 1, 4)
    a = corpus.render_clip(with_m, env).frames
    b = corpus.render_clip(without_m, env).frames
    diff_mask = np.any(a != b, axis=-1)  # (F, H, W) pixel-diff oracle
    assert diff_mask.any()
    assert not diff_mask[:, :32].any()


def test_render_too_small_rejected(spec):
    with pytest.raises(InvalidArgumentError):
        corpus.render_clip(spec, np.zeros(2), corpus.RenderParams(height=16, width=16))


def test_aperture_is_rendered_fraction(spec):
    env = np.linspace(0, 1, 20)
    clip = corpus.render_clip(spec, env)
    amax = corpus.aperture_max_px(64)
    assert np.array_equal(clip.aperture, np.round(amax * env) / amax)


def test_aperture_pixel_count_pearson_exactly_one(spec):
    _, env = corpus.synth_audio(21, 2.0)
    clip = corpus.render_clip(spec, env)
    counts = np.array([corpus.mouth_open_pixels(f) for f in clip.frames], dtype=float)
    assert counts.std() > 0
    r = np.corrcoef(clip.aperture, counts)[0, 1]
    assert r == pytest.approx(1.0, abs=1e-12)


def test_upper_half_independent_of_envelope(spec):
    a = corpus.render_clip(spec, np.zeros(3)).frames
    b = corpus.render_clip(spec, np.ones(3)).frames
    assert np.array_equal(a[:, :32], b[:, :32])
    assert not np.array_equal(a[:, 32:], b[:, 32:])


def test_clip_roundtrip_bit_identical(tmp_path, spec):
    clip = corpus.synth_clip(spec, seed=3)
    corpus.write_clip(clip, tmp_path / "c")
    back = corpus.read_clip(tmp_path / "c")
    assert np.array_equal(back.frames, clip.frames)
    assert np.array_equal(back.audio, clip.audio)
    assert np.array_equal(back.aperture, clip.aperture)
    assert back.identity == clip.identity
    assert back.fps == clip.fps and back.sample_rate == clip.sample_rate


def test_truncated_frames_named_byte_counts(tmp_path, spec):
    clip = corpus.synth_clip(spec, seed=3)
    corpus.write_clip(clip, tmp_path / "c")
    path = tmp_path / "c" / "frames.bin"
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(FormatError) as err:
        corpus.read_clip(tmp_path / "c")
    assert str(len(data)) in str(err.value) and str(len(data) - 100) in str(err.value)
    assert "frames.bin" in str(err.value)


def test_corrupt_magic_names_path(tmp_path, spec):
    clip = corpus.synth_clip(spec, seed=3)
    corpus.write_clip(clip, tmp_path / "c")
    path = tmp_path / "c" / "audio.bin"
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as err:
        corpus.read_clip(tmp_path / "c")
    assert "audio.bin" in str(err.value)


def test_corpus_layout_counts(tmp_path):
    manifest = corpus.make_manifest(tmp_path / "corp", 2, 3, seed=1)
    corpus.write_corpus(manifest)
    dirs = sorted(p for p in (tmp_path / "corp").rglob("clip_*") if p.is_dir())
    assert len(dirs) == 6
    for d in dirs:
        assert (d / "frames.bin").exists()
        assert (d / "audio.bin").exists()
        assert (d / "meta.txt").exists()


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_corpus_regeneration_bit_identical(tmp_path):
    m1 = corpus.make_manifest(tmp_path / "a", 2, 2, seed=9)
    m2 = corpus.make_manifest(tmp_path / "b", 2, 2, seed=9)
    corpus.write_corpus(m1)
    corpus.write_corpus(m2)
    assert m1.identities == m2.identities
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_manifest_roundtrip(tmp_path):
    manifest = corpus.make_manifest(tmp_path / "c", 3, 2, seed=4)
    corpus.write_corpus(manifest)
    back = corpus.read_manifest(tmp_path / "c" / "manifest.txt")
    assert back.identities == manifest.identities
    assert back.seed == manifest.seed
    assert back.render == manifest.render


def test_identities_distinct_and_in_range():
    specs = corpus.sample_identities(12, seed=7)
    for s in specs:
        s.validate()
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            assert corpus.specs_distinct(a, b)


def test_split_by_identity():
    manifest = corpus.CorpusManifest(root=".", identities=corpus.sample_identities(12, 0),
                                     clips_per_identity=4, seed=0)
    train, held = corpus.split_identities(manifest, eval_identities=4)
    assert len(train) == 8 and len(held) == 4
    assert set(train).isdisjoint(held)
    with pytest.raises(InvalidArgumentError):
        corpus.split_identities(manifest, eval_identities=12)
