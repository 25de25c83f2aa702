"""Deterministic parametric face renderer and synthetic clip generator.

Supplies images, analytic landmarks, and an audio-proxy track (the
per-frame mouth-openness series), standing in for real video data,
landmark detection, and a speech encoder.

Canonical geometry lives in a 32-unit frame and scales linearly with the
requested image size. The landmark layout is fixed: indices 0-3 are the
corners of the eye band, 4-7 the corners of the mouth box, 8-9 the head
top and chin. Feature boxes are painted hard-edged at pixel centers so
that a landmark bounding box dilated by one pixel equals the painted
region dilated by one pixel exactly; only the head ellipse is
antialiased.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .video import frame_name, read_ppm, write_ppm

CANON_SIZE = 32.0

# eye band: x span and vertical center; aperture half-height 0.5 + 1.5*e
EYE_X0, EYE_X1, EYE_CY = 7.0, 25.0, 11.0
# the two dark pupils inside the band
PUPIL_SPANS = ((8.0, 12.0), (20.0, 24.0))
# mouth box: x span and vertical center; aperture half-height 0.5 + 1.5*m
MOUTH_X0, MOUTH_X1, MOUTH_CY = 12.0, 20.0, 23.0
# head ellipse
HEAD_CX, HEAD_CY, HEAD_RX, HEAD_RY = 16.0, 16.0, 10.5, 13.0
# face-outline landmarks (head top, chin)
OUTLINE_PTS = ((16.0, 3.0), (16.0, 29.0))

EYE_IDX = slice(0, 4)
MOUTH_IDX = slice(4, 8)
OUTLINE_IDX = slice(8, 10)
N_LANDMARKS = 10

BG_COLOR = np.array([0.12, 0.12, 0.14])
PUPIL_COLOR = np.array([0.06, 0.06, 0.06])
MOUTH_COLOR = np.array([0.93, 0.89, 0.85])

AUDIO_WINDOW = 4  # audio tokens per frame


def eye_half_height(eye_open):
    return 0.5 + 1.5 * eye_open


def mouth_half_height(mouth_open):
    return 0.5 + 1.5 * mouth_open


def skin_color(hue):
    phase = 2.0 * np.pi * hue
    return 0.45 + 0.22 * np.sin(phase + np.array([0.0, 2.094, 4.189]))


@dataclass(frozen=True)
class FaceParams:
    """Pose and expression of one rendered face."""

    eye_open: float = 1.0
    mouth_open: float = 1.0
    rotation_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    hue: float = 0.1
    scale: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.eye_open <= 1.0 and 0.0 <= self.mouth_open <= 1.0):
            raise ContractError("eye_open/mouth_open must lie in [0, 1]")
        if not -45.0 <= self.rotation_deg <= 45.0:
            raise ContractError(f"rotation {self.rotation_deg} outside [-45, 45] degrees")
        if not 0.0 <= self.hue < 1.0:
            raise ContractError(f"hue {self.hue} outside [0, 1)")
        if not 0.8 <= self.scale <= 1.2:
            raise ContractError(f"scale {self.scale} outside [0.8, 1.2]")


CANONICAL_PARAMS = FaceParams()


def similarity_matrix(params, size):
    """2x3 map from canonical coordinates (scaled to ``size``) to the frame."""
    k = size / CANON_SIZE
    cx, cy = HEAD_CX * k, HEAD_CY * k
    phi = np.deg2rad(params.rotation_deg)
    c, s = np.cos(phi) * params.scale, np.sin(phi) * params.scale
    # T(center + t) . R(phi) . S(scale) . T(-center)
    return np.array([
        [c, -s, cx + params.tx - c * cx + s * cy],
        [s, c, cy + params.ty - s * cx - c * cy],
    ])


def canonical_landmarks(params, size):
    """Landmarks in the canonical (untransformed) frame, scaled to ``size``."""
    ae = eye_half_height(params.eye_open)
    am = mouth_half_height(params.mouth_open)
    pts = [
        (EYE_X0, EYE_CY - ae), (EYE_X1, EYE_CY - ae),
        (EYE_X0, EYE_CY + ae), (EYE_X1, EYE_CY + ae),
        (MOUTH_X0, MOUTH_CY - am), (MOUTH_X1, MOUTH_CY - am),
        (MOUTH_X0, MOUTH_CY + am), (MOUTH_X1, MOUTH_CY + am),
        OUTLINE_PTS[0], OUTLINE_PTS[1],
    ]
    return np.array(pts) * (size / CANON_SIZE)


def apply_affine_points(matrix, pts):
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ matrix[:, :2].T + matrix[:, 2]


def render(params, size=32):
    """Render one face; returns (image (3, size, size) in [0,1], landmarks (10, 2)).

    Deterministic. Landmarks are the exact similarity images of the
    canonical layout, so downstream mask/affine estimators can be tested
    against closed forms.
    """
    k = size / CANON_SIZE
    m = similarity_matrix(params, size)
    lms = apply_affine_points(m, canonical_landmarks(params, size))

    # inverse-map pixel centers into canonical coordinates
    a = m[:, :2]
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    ainv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    xs, ys = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    qx = ainv[0, 0] * (xs - m[0, 2]) + ainv[0, 1] * (ys - m[1, 2])
    qy = ainv[1, 0] * (xs - m[0, 2]) + ainv[1, 1] * (ys - m[1, 2])

    img = np.empty((3, size, size))
    img[:] = BG_COLOR[:, None, None]

    # antialiased head ellipse
    d = np.sqrt(((qx - HEAD_CX * k) / (HEAD_RX * k)) ** 2 + ((qy - HEAD_CY * k) / (HEAD_RY * k)) ** 2)
    cov = np.clip((1.0 - d) * 6.0, 0.0, 1.0)
    skin = skin_color(params.hue)
    img = img * (1.0 - cov) + skin[:, None, None] * cov

    def paint(x0, x1, ycen, hh, color):
        inside = (qx >= x0 * k) & (qx <= x1 * k) & (np.abs(qy - ycen * k) <= hh * k)
        img[:, inside] = color[:, None]

    ae = eye_half_height(params.eye_open)
    am = mouth_half_height(params.mouth_open)
    paint(EYE_X0, EYE_X1, EYE_CY, ae, skin * 0.75)  # eyelid band
    for px0, px1 in PUPIL_SPANS:
        paint(px0, px1, EYE_CY, ae, PUPIL_COLOR)
    paint(MOUTH_X0, MOUTH_X1, MOUTH_CY, am, MOUTH_COLOR)
    return img, lms


@dataclass
class ClipSample:
    """One synthetic clip: frames, per-frame params/landmarks, audio proxy."""

    frames: np.ndarray            # (F, 3, H, W)
    params: list                  # FaceParams per frame
    landmarks: np.ndarray         # (F, N_LANDMARKS, 2)
    audio_track: np.ndarray       # (F,), equals mouth_open per frame
    size: int
    profile: str = ""

    def __post_init__(self):
        if len(self.params) != len(self.frames):
            raise ContractError("params/frames length mismatch")
        if not np.array_equal(self.audio_track, np.array([p.mouth_open for p in self.params])):
            raise ContractError("audio_track must equal the mouth_open series")

    @property
    def n_frames(self):
        return len(self.frames)


PROFILES = ("talking", "silent", "moving", "static")


def _smooth_curve(rng, n, lo, hi):
    """Smooth pseudo-periodic curve through [lo, hi]."""
    freq = rng.uniform(1.0, 2.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n) / max(n, 1)
    base = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * t + phase)
    return lo + (hi - lo) * base


def make_clip(seed, n_frames, profile="talking", size=32, hue=None):
    """Deterministically generate one clip for the named motion profile.

    talking: mouth follows a smooth openness curve; eye openness is
             strongly correlated with the mouth; pose is static.
    silent:  mouth stays shut, eyes vary, pose static, audio all zero.
    moving:  fixed expression, in-plane rotation/translation walk.
    static:  everything frozen at a seed-drawn identity.
    """
    if n_frames < 1:
        raise ContractError("n_frames must be >= 1")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    rng = np.random.default_rng(seed)
    drawn_hue = rng.uniform(0.0, 1.0)
    hue = drawn_hue if hue is None else float(hue)

    rot = np.zeros(n_frames)
    txs = np.zeros(n_frames)
    tys = np.zeros(n_frames)
    if profile == "talking":
        # eye openness is a deterministic function of mouth openness, so the
        # facial regions are strongly coherent (the regime where mouth motion
        # becomes predictable from the eyes)
        mouth = _smooth_curve(rng, n_frames, 0.0, 1.0)
        eye = np.clip(0.1 + 0.8 * mouth, 0.0, 1.0)
    elif profile == "silent":
        mouth = np.zeros(n_frames)
        eye = _smooth_curve(rng, n_frames, 0.05, 0.95)
    elif profile == "moving":
        mouth = np.full(n_frames, round(rng.uniform(0.2, 0.8), 6))
        eye = np.full(n_frames, round(rng.uniform(0.4, 0.9), 6))
        steps = rng.normal(0.0, 3.0, n_frames)
        rot = np.clip(np.cumsum(steps) - steps[0], -12.0, 12.0)
        txs = np.clip(np.cumsum(rng.normal(0.0, 0.6, n_frames)), -2.0, 2.0)
        tys = np.clip(np.cumsum(rng.normal(0.0, 0.6, n_frames)), -2.0, 2.0)
    else:  # static
        mouth = np.full(n_frames, round(rng.uniform(0.0, 1.0), 6))
        eye = np.full(n_frames, round(rng.uniform(0.2, 1.0), 6))

    frames, params, lms = [], [], []
    for i in range(n_frames):
        p = FaceParams(
            eye_open=float(eye[i]), mouth_open=float(mouth[i]),
            rotation_deg=float(rot[i]), tx=float(txs[i]), ty=float(tys[i]),
            hue=float(hue),
        )
        img, lm = render(p, size)
        frames.append(img)
        params.append(p)
        lms.append(lm)
    return ClipSample(
        frames=np.stack(frames), params=params, landmarks=np.stack(lms),
        audio_track=np.array([p.mouth_open for p in params]), size=size,
        profile=profile,
    )


# ---- audio proxy encoder -----------------------------------------------------


def audio_projection(d_audio, seed):
    """Frozen projection (U, P): U random directions, P sinusoidal slots."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((AUDIO_WINDOW, d_audio)) / np.sqrt(d_audio)
    slots = np.arange(AUDIO_WINDOW)[:, None]
    dims = np.arange(d_audio)[None, :]
    angle = slots / (10000.0 ** (2.0 * (dims // 2) / d_audio))
    p = np.where(dims % 2 == 0, np.sin(angle), np.cos(angle))
    return u, p


def audio_embed(track, d_audio, seed):
    """Expand a scalar-per-frame track to (F, AUDIO_WINDOW, d_audio) tokens.

    Affine in the scalar with fixed seeded directions plus sinusoidal slot
    channels, so distinct scalars map to distinct tokens. Frozen: never
    trained, a pure function of (track, d_audio, seed).
    """
    if d_audio < 4:
        raise ContractError(f"d_audio must be >= 4, got {d_audio}")
    track = np.asarray(track, dtype=np.float64)
    u, p = audio_projection(d_audio, seed)
    return track[:, None, None] * u[None] + p[None]


# ---- clip / corpus disk round trip -------------------------------------------


def save_clip(clip, out_dir):
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        write_ppm(os.path.join(frames_dir, frame_name(i)), frame)
    meta = {
        "size": clip.size,
        "profile": clip.profile,
        "layout": {"eye": [0, 1, 2, 3], "mouth": [4, 5, 6, 7], "outline": [8, 9]},
        "frames": [[[float(x), float(y)] for x, y in lm] for lm in clip.landmarks],
    }
    with open(os.path.join(out_dir, "landmarks.json"), "w") as f:
        json.dump(meta, f)
        f.write("\n")
    with open(os.path.join(out_dir, "audio.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        for v in clip.audio_track:
            writer.writerow([repr(float(v))])
    with open(os.path.join(out_dir, "params.json"), "w") as f:
        json.dump([{k: getattr(p, k) for k in FaceParams.__dataclass_fields__} for p in clip.params], f)
        f.write("\n")


def load_clip(clip_dir):
    with open(os.path.join(clip_dir, "landmarks.json")) as f:
        meta = json.load(f)
    lms = np.array(meta["frames"], dtype=np.float64)
    frames = np.stack([
        read_ppm(os.path.join(clip_dir, "frames", frame_name(i)))
        for i in range(len(lms))
    ])
    audio = read_audio_csv(os.path.join(clip_dir, "audio.csv"))
    with open(os.path.join(clip_dir, "params.json")) as f:
        params = [FaceParams(**d) for d in json.load(f)]
    return ClipSample(
        frames=frames, params=params, landmarks=lms, audio_track=audio,
        size=meta["size"], profile=meta.get("profile", ""),
    )


def read_audio_csv(path):
    with open(path, newline="") as f:
        return np.array([float(row[0]) for row in csv.reader(f) if row], dtype=np.float64)


def generate_corpus(n_clips, n_frames, profiles, seed, size=32, hue_pool=None):
    """Deterministic list of clips; profile cycles through ``profiles``.

    ``hue_pool`` restricts clip identities to a fixed hue list (cycled),
    which keeps small training runs from spending capacity on identity
    variety.
    """
    if n_clips < 1:
        raise ContractError("n_clips must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_clips)
    clips = []
    for i in range(n_clips):
        hue = None if hue_pool is None else hue_pool[i % len(hue_pool)]
        clips.append(make_clip(children[i], n_frames, profiles[i % len(profiles)], size, hue=hue))
    return clips


def save_corpus(clips, out_dir, seed=None, fps=8):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, clip in enumerate(clips):
        rel = os.path.join("clips", f"clip_{i:04d}")
        save_clip(clip, os.path.join(out_dir, rel))
        entries.append({"id": i, "dir": rel, "profile": clip.profile})
    manifest = {
        "seed": seed, "fps": fps, "n_clips": len(clips),
        "n_frames": int(clips[0].n_frames), "size": int(clips[0].size),
        "clips": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_corpus(corpus_dir):
    with open(os.path.join(corpus_dir, "manifest.json")) as f:
        manifest = json.load(f)
    return [load_clip(os.path.join(corpus_dir, e["dir"])) for e in manifest["clips"]]
