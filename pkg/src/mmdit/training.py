"""Three-stage modality-decoupling schedule, batch construction, train loop.

Stage 1 trains on visual-only samples with face dropout; stage 2 mixes
face-dropout visual (10 %), audio-only (20 %) and mixed (70 %) samples;
stage 3 keeps the stage-2 mix but updates only the temporal parameters.
Batches are homogeneous in modality; a stage-3 batch is one ordered clip
so temporal attention sees a real frame axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import synthface
from .diffusion import TrainBatch, training_loss
from .errors import ConfigError, ContractError, TrainingAbort
from .masks import compose_driving, loss_mask_for, region_masks_from_landmarks, sample_dropout
from .optim import AdamW
from .pipeline import roles_from_masks
from .retarget import warp_image

MODALITY_KINDS = ("visual_dropout", "audio_only", "mixed")

STAGE_MIXES = {
    1: {"visual_dropout": 1.0, "audio_only": 0.0, "mixed": 0.0},
    2: {"visual_dropout": 0.10, "audio_only": 0.20, "mixed": 0.70},
    3: {"visual_dropout": 0.10, "audio_only": 0.20, "mixed": 0.70},
}
STAGE_STEPS = {1: 2000, 2: 2000, 3: 1000}


@dataclass(frozen=True)
class StagePlan:
    stage_id: int
    modality_mix: dict
    trainable: str               # "main" or "temporal"
    use_masked_attention: bool
    use_masked_loss: bool
    steps: int
    lr: float
    warmup: int = 100
    batch_size: int = 4
    augment: bool = True

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ConfigError(f"unknown stage id {self.stage_id}")
        if set(self.modality_mix) - set(MODALITY_KINDS):
            raise ConfigError(f"unknown modality kinds in mix: {self.modality_mix}")
        weights = [self.modality_mix.get(k, 0.0) for k in MODALITY_KINDS]
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"modality mix must be nonnegative and sum to 1: {self.modality_mix}")
        if self.steps <= 0 or self.lr <= 0 or self.batch_size < 1 or self.warmup < 0:
            raise ConfigError("steps/lr/batch_size/warmup out of range")


def make_stage_plan(stage_id, overrides=None, ablate_ma_ml=False):
    """Stage plan with schedule defaults; overrides supply desk-scale
    step counts, learning rate, batch size, or an explicit mix."""
    if stage_id not in (1, 2, 3):
        raise ConfigError(f"unknown stage id {stage_id}")
    overrides = dict(overrides or {})
    allowed = {"steps", "lr", "warmup", "batch_size", "augment", "modality_mix"}
    unknown = set(overrides) - allowed
    if unknown:
        raise ConfigError(f"unknown stage overrides {sorted(unknown)}")
    return StagePlan(
        stage_id=stage_id,
        modality_mix=overrides.get("modality_mix", STAGE_MIXES[stage_id]),
        trainable="temporal" if stage_id == 3 else "main",
        use_masked_attention=not ablate_ma_ml,
        use_masked_loss=not ablate_ma_ml,
        steps=int(overrides.get("steps", STAGE_STEPS[stage_id])),
        lr=float(overrides.get("lr", 1e-5)),
        warmup=int(overrides.get("warmup", 100)),
        batch_size=int(overrides.get("batch_size", 4)),
        augment=bool(overrides.get("augment", True)),
    )


def draw_modality(rng, plan):
    r = rng.random()
    acc = 0.0
    for kind in MODALITY_KINDS:
        acc += plan.modality_mix.get(kind, 0.0)
        if r < acc:
            return kind
    return MODALITY_KINDS[-1]


# ---- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    resample: float = 1.0   # down-up resampling factor in [0.5, 1]
    crop: int = 0           # crop inset in pixels, <= 2
    crop_ox: int = 0
    crop_oy: int = 0
    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def neutral(cls):
        return cls()

    @classmethod
    def draw(cls, rng):
        crop = int(rng.integers(0, 3))
        return cls(
            resample=float(rng.uniform(0.5, 1.0)),
            crop=crop,
            crop_ox=int(rng.integers(0, crop + 1)),
            crop_oy=int(rng.integers(0, crop + 1)),
            gain=tuple(rng.uniform(0.8, 1.2, 3)),
            bias=tuple(rng.uniform(-0.1, 0.1, 3)),
        )


def _resize(img, out_size):
    h = img.shape[-1]
    s = out_size / h
    return warp_image(img, np.array([[s, 0.0, 0.0], [0.0, s, 0.0]]), (out_size, out_size))


def apply_augment(image, params):
    """Deterministic augmentation; neutral parameters return the input."""
    img = np.asarray(image, dtype=np.float64)
    h = img.shape[-1]
    low = int(round(h * params.resample))
    if low != h and low >= 4:
        img = _resize(_resize(img, low), h)
    if params.crop > 0:
        ox, oy, k = params.crop_ox, params.crop_oy, params.crop
        img = _resize(img[..., oy : oy + h - k, ox : ox + h - k], h)
    gain = np.asarray(params.gain)[:, None, None]
    bias = np.asarray(params.bias)[:, None, None]
    if np.any(gain != 1.0) or np.any(bias != 0.0):
        img = img * gain + bias
    return np.clip(img, 0.0, 1.0)


def augment_driving(image, rng):
    """Resolution/size/color jitter for driving frames."""
    return apply_augment(image, AugmentParams.draw(rng))


# ---- batch construction --------------------------------------------------------


def _one_sample(clip, gt_idx, ref_idx, modality, plan, rng, cfg):
    gt = clip.frames[gt_idx]
    ref = clip.frames[ref_idx]
    mask_set = region_masks_from_landmarks(clip.landmarks[gt_idx], cfg.image_size, cfg.patch)
    if modality == "audio_only":
        sel = None
        driven = np.zeros_like(gt)
    else:
        sel = sample_dropout(rng, plan.stage_id, mixed=(modality == "mixed"))
        driven = compose_driving(gt, mask_set, sel)
        if plan.augment:
            driven = augment_driving(driven, rng)
    audio_present = modality in ("audio_only", "mixed")
    if plan.use_masked_loss:
        pix_mask = loss_mask_for(sel, audio_present, mask_set)
    else:
        pix_mask = np.ones_like(mask_set.eye)
    loss_mask = np.broadcast_to(pix_mask, gt.shape).copy()
    mouth_driven = bool(sel.mouth_driven) if sel is not None else False
    return ref, gt, driven, roles_from_masks(mask_set, cfg), mouth_driven, loss_mask


def build_batch(clips, plan, rng, cfg):
    """Draw one homogeneous-modality batch from the clip corpus.

    Stages 1-2 stack ``batch_size`` independent single frames; stage 3
    uses one whole clip in frame order so the temporal axis is real.
    """
    modality = draw_modality(rng, plan)
    temporal = plan.stage_id == 3
    if temporal:
        clip = clips[rng.integers(0, len(clips))]
        ref_idx = int(rng.integers(0, clip.n_frames))
        indices = [(clip, i, ref_idx) for i in range(clip.n_frames)]
    else:
        indices = []
        for _ in range(plan.batch_size):
            clip = clips[rng.integers(0, len(clips))]
            gt_idx = int(rng.integers(0, clip.n_frames))
            ref_idx = int(rng.integers(0, clip.n_frames))
            indices.append((clip, gt_idx, ref_idx))

    refs, gts, drivens, roles, mouths, lmasks, audio_rows = [], [], [], [], [], [], []
    audio_present = modality in ("audio_only", "mixed")
    for clip, gt_idx, ref_idx in indices:
        r, g, d, ro, md, lm = _one_sample(clip, gt_idx, ref_idx, modality, plan, rng, cfg)
        refs.append(r)
        gts.append(g)
        drivens.append(d)
        roles.append(ro)
        mouths.append(md)
        lmasks.append(lm)
        if audio_present:
            tokens = synthface.audio_embed(clip.audio_track, cfg.d_audio, cfg.audio_embed_seed)
            audio_rows.append(tokens[gt_idx])
    return TrainBatch(
        ref=np.stack(refs), gt=np.stack(gts), driven=np.stack(drivens),
        audio_tokens=np.stack(audio_rows) if audio_present else None,
        audio_scale=1.0 if audio_present else 0.0,
        roles=roles if plan.use_masked_attention else None,
        mouth_driven=np.array(mouths, dtype=bool),
        loss_mask=np.stack(lmasks), modality=modality, temporal=temporal,
    )


# ---- parameter freezing and the step -------------------------------------------


def trainable_params(model, plan):
    """Select the stage's trainable set and sync requires_grad flags."""
    temporal_names = model.temporal_param_names()
    params = model.named_params()
    if plan.trainable == "temporal":
        chosen = {n: p for n, p in params.items() if n in temporal_names}
    else:
        chosen = {n: p for n, p in params.items() if n not in temporal_names}
    if not chosen:
        raise ConfigError(f"stage {plan.stage_id}: no trainable parameters "
                          "(add the temporal layers before stage 3)")
    for name, p in params.items():
        p.requires_grad = name in chosen
    return chosen


def train_step(model, optimizer, batch, plan, schedule, rng):
    """One optimization step; frozen parameters are untouched bit for bit."""
    loss = training_loss(model, batch, schedule, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingAbort(f"non-finite loss on a {batch.modality} batch",
                            modality=batch.modality)
    loss.backward()
    optimizer.step()
    optimizer.zero_grad()
    return value


def run_stage(model, clips, plan, schedule, seed, log_file=None,
              checkpoint_path=None, checkpoint_every=0, save_fn=None):
    """Run one stage; returns the per-step loss history."""
    rng = np.random.default_rng(seed)
    model.masked_attention = plan.use_masked_attention
    params = trainable_params(model, plan)
    optimizer = AdamW(params, lr=plan.lr, warmup=plan.warmup, weight_decay=0.01)
    losses = []
    for step in range(plan.steps):
        batch = build_batch(clips, plan, rng, model.cfg)
        try:
            value = train_step(model, optimizer, batch, plan, schedule, rng)
        except TrainingAbort as abort:
            abort.step = step
            abort.seed = seed
            raise
        losses.append(value)
        if log_file is not None:
            log_file.write(json.dumps({
                "step": step, "stage": plan.stage_id, "modality": batch.modality,
                "loss": value, "lr": optimizer.current_lr(),
            }) + "\n")
        if checkpoint_every and checkpoint_path and (step + 1) % checkpoint_every == 0:
            (save_fn or model.save)(checkpoint_path, {"stage": plan.stage_id, "step": step + 1,
                                                      "seed": seed})
    return losses


# ---- evaluation metrics ----------------------------------------------------------


def leakage_metric(frames, mouth_mask):
    """Mean temporal variance of mouth-region pixels across frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[:, None]
    if frames.shape[0] < 2:
        raise ContractError(f"leakage metric needs >= 2 frames, got {frames.shape[0]}")
    mask = np.asarray(mouth_mask) > 0
    if not mask.any():
        raise ContractError("mouth mask selects no pixels")
    var = frames.var(axis=0)          # (C, H, W), population variance
    return float(var[:, mask].mean())


def mouth_openness_series(frames, mouth_mask):
    """Per-frame mean intensity over the mouth region (openness proxy)."""
    mask = np.asarray(mouth_mask) > 0
    return np.asarray(frames)[:, :, mask].mean(axis=(1, 2))
