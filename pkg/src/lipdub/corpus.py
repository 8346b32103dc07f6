"""Procedural synthetic talking-avatar corpus.

Every clip is rendered from an IdentitySpec plus a per-frame mouth envelope
derived from procedurally synthesized audio, so audio/mouth alignment and
identity attributes are known exactly. Identity cues live in both face
halves (hue everywhere, mustache/lip color in the lower half) so that
identity retention inside the inpainted region is measurable.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

FRAMES_MAGIC = b"UAVF"
AUDIO_MAGIC = b"UAVA"

# distinctness tolerances between two identity specs
HUE_TOL = 0.05
RATIO_TOL = 0.03


@dataclass(frozen=True)
class IdentitySpec:
    """Ground-truth appearance parameters of one synthetic speaker."""

    face_hue: float          # [0, 1)
    face_aspect: float       # [0.7, 1.3]
    eye_spacing: float       # fraction of width, [0.2, 0.4]
    lip_saturation: float    # [0, 1]
    mustache: bool
    blemish_seed: int

    def validate(self):
        if not (0.0 <= self.face_hue < 1.0):
            raise InvalidArgumentError(f"face_hue out of [0,1): {self.face_hue}")
        if not (0.7 <= self.face_aspect <= 1.3):
            raise InvalidArgumentError(f"face_aspect out of [0.7,1.3]: {self.face_aspect}")
        if not (0.2 <= self.eye_spacing <= 0.4):
            raise InvalidArgumentError(f"eye_spacing out of [0.2,0.4]: {self.eye_spacing}")
        if not (0.0 <= self.lip_saturation <= 1.0):
            raise InvalidArgumentError(f"lip_saturation out of [0,1]: {self.lip_saturation}")

    def field_vector(self) -> np.ndarray:
        """Numeric summary used by the oracle embedding."""
        return np.array(
            [
                self.face_hue,
                self.face_aspect,
                self.eye_spacing,
                self.lip_saturation,
                1.0 if self.mustache else 0.0,
                (self.blemish_seed % 9973) / 9973.0,
            ],
            dtype=np.float64,
        )


def specs_distinct(a: IdentitySpec, b: IdentitySpec) -> bool:
    """True iff the specs differ in at least one field beyond tolerance."""
    if abs(a.face_hue - b.face_hue) >= HUE_TOL:
        return True
    if abs(a.face_aspect - b.face_aspect) >= RATIO_TOL:
        return True
    if abs(a.eye_spacing - b.eye_spacing) >= RATIO_TOL:
        return True
    if abs(a.lip_saturation - b.lip_saturation) >= RATIO_TOL:
        return True
    if a.mustache != b.mustache:
        return True
    if a.blemish_seed != b.blemish_seed:
        return True
    return False


@dataclass(frozen=True)
class RenderParams:
    height: int = 64
    width: int = 64
    fps: int = 25
    sample_rate: int = 16000
    frames: int = 50  # 2 s clips at the defaults


@dataclass
class FrameClip:
    """A fixed-fps RGB frame sequence with aligned mono PCM audio."""

    frames: np.ndarray     # F x H x W x 3 float32 in [0,1]
    audio: np.ndarray      # float32 in [-1,1]
    fps: int
    sample_rate: int
    identity: IdentitySpec
    aperture: np.ndarray   # F float64 in [0,1], rendered mouth-opening fraction

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class CorpusManifest:
    root: str
    identities: list[IdentitySpec]
    clips_per_identity: int
    seed: int
    render: RenderParams = field(default_factory=RenderParams)


def _hsv_to_rgb(h, s, v):
    h = (h % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ][i % 6]


def synth_audio(seed: int, duration: float, sample_rate: int = 16000,
                fps: int = 25, silent: bool = False):
    """Synthesize a burst-structured PCM signal and its per-frame envelope.

    The signal is a sum of 2-5 sinusoid bursts, each with a trapezoidal
    amplitude envelope. The returned envelope is the per-video-frame RMS of
    the rendered signal, normalized to [0,1] (all zeros for silence).
    """
    if duration <= 0:
        raise InvalidArgumentError(f"duration must be positive, got {duration}")
    if sample_rate not in (8000, 16000):
        raise InvalidArgumentError(f"sample_rate must be 8000 or 16000, got {sample_rate}")

    rng = np.random.default_rng(seed)
    n_samples = int(round(duration * sample_rate))
    n_frames = int(round(duration * fps))
    t = np.arange(n_samples, dtype=np.float64) / sample_rate

    signal = np.zeros(n_samples, dtype=np.float64)
    n_bursts = int(rng.integers(2, 6))
    for _ in range(n_bursts):
        freq = rng.uniform(90.0, 600.0)
        start = rng.uniform(0.0, max(duration - 0.15, 1e-3))
        length = rng.uniform(0.12, 0.40)
        amp = 0.0 if silent else rng.uniform(0.3, 1.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        # trapezoid: 25% attack, 50% sustain, 25% release
        rel = (t - start) / length
        env = np.clip(np.minimum(rel / 0.25, (1.0 - rel) / 0.25), 0.0, 1.0)
        signal += amp * env * np.sin(2 * np.pi * freq * (t - start) + phase)

    peak = np.max(np.abs(signal))
    if peak > 0.9:
        signal *= 0.9 / peak

    bounds = np.round(np.arange(n_frames + 1) * sample_rate / fps).astype(np.int64)
    rms = np.empty(n_frames, dtype=np.float64)
    for k in range(n_frames):
        seg = signal[bounds[k]:bounds[k + 1]]
        rms[k] = np.sqrt(np.mean(seg * seg)) if seg.size else 0.0
    top = rms.max()
    envelope = rms / top if top > 0 else np.zeros_like(rms)
    return signal.astype(np.float32), envelope


def _ellipse_mask(h, w, cy, cx, ry, rx):
    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    return ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0


def _ellipse_coverage(h, w, cy, cx, ry, rx, soft=1.2):
    """Anti-aliased fill: 1 inside, 0 outside, ~soft-pixel edge ramp."""
    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    q = np.sqrt(((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2)
    return np.clip((1.0 - q) * min(ry, rx) / soft + 0.5, 0.0, 1.0)


def _paint(img, alpha, color):
    img += alpha[:, :, None] * (np.asarray(color, dtype=np.float64) - img)


def aperture_max_px(height: int) -> int:
    """Maximum mouth half-opening in pixels for a given frame height."""
    return max(3, int(round(0.09 * height)))


# the mouth interior is the only near-black color in the lower half
_OPENING_COLOR = (0.05, 0.03, 0.03)
_OPENING_THRESHOLD = 0.08


def render_clip(identity: IdentitySpec, envelope: np.ndarray,
                params: RenderParams = RenderParams(),
                audio: np.ndarray | None = None) -> FrameClip:
    """Rasterize one clip. Frame k's mouth half-opening in pixels is
    round(aperture_max_px * envelope[k]); the aperture field stores the
    actually-rendered fraction so that aperture <-> open-pixel count is
    exactly linear."""
    H, W = params.height, params.width
    if H < 32 or W < 32:
        raise InvalidArgumentError(f"frame size {H}x{W} too small, mouth would be sub-pixel")
    envelope = np.asarray(envelope, dtype=np.float64)
    if envelope.min() < 0.0 or envelope.max() > 1.0:
        raise InvalidArgumentError("envelope values must be within [0,1]")
    identity.validate()

    amax = aperture_max_px(H)
    open_px = np.round(amax * envelope).astype(np.int64)
    aperture = open_px / amax

    face_rgb = _hsv_to_rgb(identity.face_hue, 0.5, 0.82)
    lip_rgb = _hsv_to_rgb(0.97, 0.35 + 0.6 * identity.lip_saturation, 0.55)

    base = np.full((H, W, 3), 0.10, dtype=np.float64)
    cy_face, cx = 0.52 * H, 0.5 * W
    _paint(base, _ellipse_coverage(H, W, cy_face, cx, 0.44 * H,
                                   0.34 * W * identity.face_aspect), face_rgb)

    eye_dx = identity.eye_spacing * W / 2.0
    for side in (-1.0, 1.0):
        _paint(base, _ellipse_coverage(H, W, 0.34 * H, cx + side * eye_dx,
                                       0.045 * H, 0.05 * W), (0.08, 0.07, 0.07))

    # blemishes stay in the lower half so they are identity cues the
    # inpainted region must reproduce
    brng = np.random.default_rng(identity.blemish_seed)
    blemish_rgb = tuple(c * 0.55 for c in face_rgb)
    for _ in range(3):
        by = brng.uniform(0.55 * H, 0.92 * H)
        bx = brng.uniform(0.28 * W, 0.72 * W)
        _paint(base, _ellipse_coverage(H, W, by, bx, 0.022 * H, 0.022 * W),
               blemish_rgb)

    if identity.mustache:
        r0, r1 = int(round(0.615 * H)), int(round(0.665 * H))
        c0, c1 = int(round(cx - 0.16 * W)), int(round(cx + 0.16 * W))
        base[r0:r1, c0:c1] = (0.15, 0.08, 0.04)

    cy_mouth = int(round(0.78 * H))
    mouth_w = int(round(0.17 * W))
    F = envelope.shape[0]
    frames = np.empty((F, H, W, 3), dtype=np.float32)
    for k in range(F):
        img = base.copy()
        h_k = int(open_px[k])
        _paint(img, _ellipse_coverage(H, W, cy_mouth, cx, 0.05 * H + h_k,
                                      0.20 * W), lip_rgb)
        if h_k > 0:
            c0, c1 = int(round(cx)) - mouth_w, int(round(cx)) + mouth_w
            img[cy_mouth - h_k:cy_mouth + h_k, c0:c1] = _OPENING_COLOR
        frames[k] = img.astype(np.float32)

    if audio is None:
        audio = np.zeros(int(round(F * params.sample_rate / params.fps)), dtype=np.float32)
    return FrameClip(frames=frames, audio=np.asarray(audio, dtype=np.float32),
                     fps=params.fps, sample_rate=params.sample_rate,
                     identity=identity, aperture=aperture)


def mouth_open_pixels(frame: np.ndarray) -> int:
    """Count mouth-interior pixels in the lower half (sync ground truth)."""
    lower = frame[frame.shape[0] // 2:]
    return int(np.sum(np.all(lower < _OPENING_THRESHOLD, axis=-1)))


def synth_clip(identity: IdentitySpec, seed: int,
               params: RenderParams = RenderParams()) -> FrameClip:
    """Synthesize audio for `params.frames` frames and render the clip."""
    duration = params.frames / params.fps
    audio, envelope = synth_audio(seed, duration, params.sample_rate, params.fps)
    return render_clip(identity, envelope, params, audio=audio)


def sample_identities(n: int, seed: int) -> list[IdentitySpec]:
    """Draw n pairwise-distinct identity specs deterministically from seed.

    Identities come in twin pairs sharing every upper-half cue (hue, aspect,
    eye spacing) and differing only in lower-half cues (mustache, lip
    saturation, blemishes), so that telling identities apart requires the
    very region the inpainting rewrites.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    specs: list[IdentitySpec] = []
    attempts = 0
    while len(specs) < n:
        if len(specs) % 2 == 0:
            cand = IdentitySpec(
                face_hue=float(rng.uniform(0.0, 1.0)),
                face_aspect=float(rng.uniform(0.7, 1.3)),
                eye_spacing=float(rng.uniform(0.2, 0.4)),
                lip_saturation=float(rng.uniform(0.0, 1.0)),
                mustache=bool(rng.integers(0, 2)),
                blemish_seed=int(rng.integers(0, 2**31 - 1)),
            )
        else:
            prev = specs[-1]
            lip = prev.lip_saturation + (0.4 if prev.lip_saturation <= 0.5 else -0.4) \
                * float(rng.uniform(0.8, 1.2))
            cand = IdentitySpec(
                face_hue=prev.face_hue,
                face_aspect=prev.face_aspect,
                eye_spacing=prev.eye_spacing,
                lip_saturation=float(np.clip(lip, 0.0, 1.0)),
                mustache=not prev.mustache,
                blemish_seed=int(rng.integers(0, 2**31 - 1)),
            )
        attempts += 1
        if attempts > 1000 * n:
            raise InvalidArgumentError(f"could not sample {n} distinct identities")
        if all(specs_distinct(cand, s) for s in specs):
            specs.append(cand)
    return specs


def make_manifest(root, n_identities: int, clips_per_identity: int, seed: int,
                  render: RenderParams = RenderParams()) -> CorpusManifest:
    return CorpusManifest(
        root=str(root),
        identities=sample_identities(n_identities, seed),
        clips_per_identity=clips_per_identity,
        seed=seed,
        render=render,
    )


def clip_seed(manifest_seed: int, identity_index: int, clip_index: int) -> int:
    ss = np.random.SeedSequence(entropy=manifest_seed,
                                spawn_key=(2, identity_index, clip_index))
    return int(ss.generate_state(1)[0])


def clip_dir(root, identity_index: int, clip_index: int) -> Path:
    return Path(root) / f"identity_{identity_index:04d}" / f"clip_{clip_index:04d}"


def write_clip(clip: FrameClip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    F, H, W, _ = clip.frames.shape

    with open(directory / "frames.bin", "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<III", F, H, W))
        f.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())

    with open(directory / "audio.bin", "wb") as f:
        f.write(AUDIO_MAGIC)
        f.write(struct.pack("<I", clip.audio.shape[0]))
        f.write(np.ascontiguousarray(clip.audio, dtype="<f4").tobytes())

    ident = clip.identity
    lines = [
        f"face_hue={ident.face_hue!r}",
        f"face_aspect={ident.face_aspect!r}",
        f"eye_spacing={ident.eye_spacing!r}",
        f"lip_saturation={ident.lip_saturation!r}",
        f"mustache={int(ident.mustache)}",
        f"blemish_seed={ident.blemish_seed}",
        f"fps={clip.fps}",
        f"sample_rate={clip.sample_rate}",
        "aperture=" + ",".join(repr(float(a)) for a in clip.aperture),
    ]
    (directory / "meta.txt").write_text("\n".join(lines) + "\n")


def read_clip(directory) -> FrameClip:
    directory = Path(directory)
    fpath = directory / "frames.bin"
    data = fpath.read_bytes()
    if data[:4] != FRAMES_MAGIC:
        raise FormatError(f"bad frames magic {data[:4]!r}", path=fpath)
    F, H, W = struct.unpack("<III", data[4:16])
    expected = 16 + F * H * W * 3 * 4
    if len(data) != expected:
        raise FormatError(
            f"frames.bin expected {expected} bytes, found {len(data)}", path=fpath)
    frames = np.frombuffer(data, dtype="<f4", offset=16).reshape(F, H, W, 3).copy()

    apath = directory / "audio.bin"
    adata = apath.read_bytes()
    if adata[:4] != AUDIO_MAGIC:
        raise FormatError(f"bad audio magic {adata[:4]!r}", path=apath)
    (count,) = struct.unpack("<I", adata[4:8])
    if len(adata) != 8 + count * 4:
        raise FormatError(
            f"audio.bin expected {8 + count * 4} bytes, found {len(adata)}", path=apath)
    audio = np.frombuffer(adata, dtype="<f4", offset=8).copy()

    meta = {}
    for line in (directory / "meta.txt").read_text().splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            meta[key] = value
    identity = IdentitySpec(
        face_hue=float(meta["face_hue"]),
        face_aspect=float(meta["face_aspect"]),
        eye_spacing=float(meta["eye_spacing"]),
        lip_saturation=float(meta["lip_saturation"]),
        mustache=bool(int(meta["mustache"])),
        blemish_seed=int(meta["blemish_seed"]),
    )
    aperture = np.array([float(x) for x in meta["aperture"].split(",")], dtype=np.float64)
    return FrameClip(frames=frames, audio=audio, fps=int(meta["fps"]),
                     sample_rate=int(meta["sample_rate"]),
                     identity=identity, aperture=aperture)


def _make_and_write(manifest: CorpusManifest, i: int, j: int) -> None:
    clip = synth_clip(manifest.identities[i],
                      clip_seed(manifest.seed, i, j), manifest.render)
    write_clip(clip, clip_dir(manifest.root, i, j))


def write_corpus(manifest: CorpusManifest, jobs: int = 1) -> Path:
    """Write every clip plus the manifest file; returns the corpus root."""
    root = Path(manifest.root)
    root.mkdir(parents=True, exist_ok=True)
    tasks = [(i, j) for i in range(len(manifest.identities))
             for j in range(manifest.clips_per_identity)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(lambda ij: _make_and_write(manifest, *ij), tasks))
    else:
        for i, j in tasks:
            _make_and_write(manifest, i, j)
    write_manifest(manifest, root / "manifest.txt")
    return root


def write_manifest(manifest: CorpusManifest, path) -> None:
    r = manifest.render
    lines = [
        f"seed={manifest.seed}",
        f"clips_per_identity={manifest.clips_per_identity}",
        f"height={r.height}", f"width={r.width}",
        f"fps={r.fps}", f"sample_rate={r.sample_rate}", f"frames={r.frames}",
    ]
    for idx, s in enumerate(manifest.identities):
        lines.append(
            f"identity_{idx:04d}={s.face_hue!r},{s.face_aspect!r},{s.eye_spacing!r},"
            f"{s.lip_saturation!r},{int(s.mustache)},{s.blemish_seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    meta, identities = {}, []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, value = line.split("=", 1)
        if key.startswith("identity_"):
            hue, aspect, eye, lip, mus, blem = value.split(",")
            identities.append(IdentitySpec(
                face_hue=float(hue), face_aspect=float(aspect),
                eye_spacing=float(eye), lip_saturation=float(lip),
                mustache=bool(int(mus)), blemish_seed=int(blem)))
        else:
            meta[key] = value
    render = RenderParams(height=int(meta["height"]), width=int(meta["width"]),
                          fps=int(meta["fps"]), sample_rate=int(meta["sample_rate"]),
                          frames=int(meta["frames"]))
    return CorpusManifest(root=str(path.parent), identities=identities,
                          clips_per_identity=int(meta["clips_per_identity"]),
                          seed=int(meta["seed"]), render=render)


def split_identities(manifest: CorpusManifest, eval_identities: int = 4):
    """Train/held-out split by identity (the last `eval_identities` are held out)."""
    n = len(manifest.identities)
    if eval_identities >= n:
        raise InvalidArgumentError(
            f"eval_identities={eval_identities} must be < total identities {n}")
    cut = n - eval_identities
    return list(range(cut)), list(range(cut, n))


def load_split(manifest: CorpusManifest, identity_indices) -> list[list[FrameClip]]:
    """Load clips grouped per identity for the given identity indices."""
    groups = []
    for i in identity_indices:
        groups.append([read_clip(clip_dir(manifest.root, i, j))
                       for j in range(manifest.clips_per_identity)])
    return groups
