"""Facial region masks, face-dropout driving composition, masked MSE loss.

Region masks are axis-aligned rectangles: the bounding box of a region's
landmarks dilated by one pixel, rasterized at pixel centers. When the
dilated eye and mouth boxes touch, the dilation is clipped at the
midline between the tight boxes; overlapping tight boxes cannot be
separated and raise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, GeometryError, ShapeError
from .synthface import EYE_IDX, MOUTH_IDX


@dataclass(frozen=True)
class DrivingSelection:
    """Nonempty subset of {eye, mouth} used as the visual driving signal."""

    regions: frozenset

    def __post_init__(self):
        if not self.regions:
            raise ContractError("driving selection must be nonempty")
        if not self.regions <= {"eye", "mouth"}:
            raise ContractError(f"unknown regions {self.regions - {'eye', 'mouth'}}")

    @property
    def mouth_driven(self):
        return "mouth" in self.regions

    @classmethod
    def of(cls, *regions):
        return cls(frozenset(regions))


EYE_ONLY = DrivingSelection.of("eye")
MOUTH_ONLY = DrivingSelection.of("mouth")
EYE_AND_MOUTH = DrivingSelection.of("eye", "mouth")


@dataclass
class RegionMaskSet:
    """Eye/mouth binary masks at pixel and token resolution for one frame."""

    eye: np.ndarray          # (H, W) of {0.0, 1.0}
    mouth: np.ndarray        # (H, W) of {0.0, 1.0}
    token_eye: np.ndarray    # (T,) bool, token grid row-major
    token_mouth: np.ndarray  # (T,) bool
    patch: int

    def __post_init__(self):
        if self.eye.shape != self.mouth.shape:
            raise ShapeError("eye/mouth mask shapes differ")
        if np.any((self.eye > 0) & (self.mouth > 0)):
            raise GeometryError("eye and mouth masks overlap")

    def union(self, sel):
        out = np.zeros_like(self.eye)
        if "eye" in sel.regions:
            out = np.maximum(out, self.eye)
        if "mouth" in sel.regions:
            out = np.maximum(out, self.mouth)
        return out


def _tight_box(points):
    pts = np.asarray(points, dtype=np.float64)
    return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def _rasterize_box(box, h, w):
    """Pixels whose centers fall inside the box (inclusive bounds)."""
    x0, y0, x1, y1 = box
    mask = np.zeros((h, w))
    r0, r1 = int(np.ceil(y0)), int(np.floor(y1))
    c0, c1 = int(np.ceil(x0)), int(np.floor(x1))
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, h - 1), min(c1, w - 1)
    if r0 <= r1 and c0 <= c1:
        mask[r0 : r1 + 1, c0 : c1 + 1] = 1.0
    return mask


def _boxes_overlap(a, b):
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


def _separate(eye_dil, mouth_dil, eye_tight, mouth_tight):
    """Clip dilated boxes at the midline between the tight boxes."""
    # prefer the vertical axis (eyes above mouth), fall back to horizontal
    for axis in (1, 0):
        lo_t, hi_t = (eye_tight, mouth_tight) if eye_tight[axis] <= mouth_tight[axis] else (mouth_tight, eye_tight)
        if lo_t[axis + 2] < hi_t[axis]:  # tight boxes disjoint along this axis
            mid = 0.5 * (lo_t[axis + 2] + hi_t[axis])
            lo_d, hi_d = (eye_dil, mouth_dil) if lo_t is eye_tight else (mouth_dil, eye_dil)
            lo_d = list(lo_d)
            hi_d = list(hi_d)
            lo_d[axis + 2] = min(lo_d[axis + 2], mid - 0.5)
            hi_d[axis] = max(hi_d[axis], mid + 0.5)
            if lo_t is eye_tight:
                return tuple(lo_d), tuple(hi_d)
            return tuple(hi_d), tuple(lo_d)
    raise GeometryError("eye and mouth landmark boxes overlap; regions cannot be separated")


def pool_to_tokens(pixel_mask, patch):
    """Token bit is 1 iff any pixel of its patch is 1."""
    h, w = pixel_mask.shape
    if h % patch or w % patch:
        raise ShapeError(f"mask {pixel_mask.shape} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    blocks = pixel_mask.reshape(gh, patch, gw, patch)
    return (blocks.max(axis=(1, 3)) > 0).reshape(-1)


def region_masks_from_landmarks(landmarks, image_size, patch=2):
    """Build eye/mouth rectangle masks (1-pixel dilation) from landmarks.

    ``landmarks`` follows the synthface canonical index layout. The
    dilation is clipped at the midline between regions if the dilated
    boxes would otherwise overlap.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    h = w = int(image_size)
    eye_tight = _tight_box(landmarks[EYE_IDX])
    mouth_tight = _tight_box(landmarks[MOUTH_IDX])
    eye_dil = (eye_tight[0] - 1, eye_tight[1] - 1, eye_tight[2] + 1, eye_tight[3] + 1)
    mouth_dil = (mouth_tight[0] - 1, mouth_tight[1] - 1, mouth_tight[2] + 1, mouth_tight[3] + 1)
    if _boxes_overlap(eye_dil, mouth_dil):
        eye_dil, mouth_dil = _separate(eye_dil, mouth_dil, eye_tight, mouth_tight)
    eye = _rasterize_box(eye_dil, h, w)
    mouth = _rasterize_box(mouth_dil, h, w)
    if np.any((eye > 0) & (mouth > 0)):
        raise GeometryError("region masks still overlap after midline clipping")
    return RegionMaskSet(
        eye=eye, mouth=mouth,
        token_eye=pool_to_tokens(eye, patch), token_mouth=pool_to_tokens(mouth, patch),
        patch=patch,
    )


def compose_driving(image, mask_set, sel):
    """Visual driving frame: selected region union times the source image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != mask_set.eye.shape:
        raise ShapeError(f"image {image.shape} does not match masks {mask_set.eye.shape}")
    return image * mask_set.union(sel)


def masked_mse(pred, target, loss_mask):
    """Mean squared error restricted to mask==1 positions.

    Differentiable in ``pred``; the gradient is exactly zero wherever the
    mask is zero. ``target`` and ``loss_mask`` are treated as constants.
    """
    target = target if isinstance(target, T.Tensor) else T.Tensor(np.asarray(target))
    mask = loss_mask.data if isinstance(loss_mask, T.Tensor) else np.asarray(loss_mask, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"masked_mse shapes differ: {pred.shape}, {target.shape}, {mask.shape}")
    total = float(mask.sum())
    if total == 0.0:
        raise ContractError("loss mask selects no positions; mean undefined")
    diff = T.sub(pred, target)
    weighted = T.mul(T.mul(diff, diff), T.Tensor._wrap(mask))
    return T.mul(T.tsum(weighted), 1.0 / total)


def sample_dropout(rng, stage_id, mixed=False):
    """Draw the face-dropout selection for one training sample.

    Stage 1 draws uniformly over {eye}, {mouth}, {eye, mouth}; so does the
    face-dropout visual branch of later stages. Mixed-modality samples in
    stages 2/3 always isolate the eye region so audio keeps ownership of
    the mouth.
    """
    from .errors import ConfigError

    if stage_id not in (1, 2, 3):
        raise ConfigError(f"unknown stage id {stage_id}")
    if stage_id >= 2 and mixed:
        return EYE_ONLY
    choice = rng.integers(0, 3)
    return (EYE_ONLY, MOUTH_ONLY, EYE_AND_MOUTH)[choice]


def loss_mask_for(sel, audio_present, mask_set):
    """Pixel loss mask: full image when the mouth is supervised (driven
    visually or owned by audio), otherwise everything outside the mouth."""
    h, w = mask_set.eye.shape
    if audio_present or (sel is not None and sel.mouth_driven):
        return np.ones((h, w))
    return 1.0 - mask_set.mouth


def save_mask_fixture(path, mask_set):
    """Serialize the pixel masks in the tensor archive format."""
    from .archive import save_archive

    save_archive(path, {"mask/eye": mask_set.eye, "mask/mouth": mask_set.mouth},
                 {"meta": {"patch": mask_set.patch}})


def load_mask_fixture(path):
    """Load pixel masks saved by save_mask_fixture and re-pool the tokens."""
    from .archive import load_archive

    arrays, extra = load_archive(path)
    patch = extra["meta"]["patch"]
    eye, mouth = arrays["mask/eye"], arrays["mask/mouth"]
    return RegionMaskSet(eye=eye, mouth=mouth, token_eye=pool_to_tokens(eye, patch),
                         token_mouth=pool_to_tokens(mouth, patch), patch=patch)
