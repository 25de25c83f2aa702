"""Model bundle (denoiser + reference + driven encoder), checkpoints, and the
end-to-end animation entry point."""

from __future__ import annotations

import numpy as np

from . import diffusion, retarget, synthface
from . import tensor as T
from .archive import load_archive, save_archive
from .attention import TokenRoleMap
from .errors import ConfigError
from .masks import DrivingSelection, compose_driving, region_masks_from_landmarks
from .model import DenoisingTransformer, DrivenEncoder, ModelConfig, ReferenceTransformer, dit_forward

MODALITIES = ("A", "V", "A+V")


class AnimationModel:
    """Everything needed to turn (reference, driving, audio) into frames."""

    def __init__(self, cfg, denoiser, reference, driven):
        self.cfg = cfg
        self.denoiser = denoiser
        self.reference = reference
        self.driven = driven
        self.has_audio = False
        self.has_temporal = False
        # models trained without the region rules (the ablated variant)
        # use plain attention at inference too
        self.masked_attention = True

    @classmethod
    def build(cls, cfg, seed):
        ss = np.random.SeedSequence(seed).spawn(3)
        rngs = [np.random.default_rng(s) for s in ss]
        return cls(
            cfg,
            denoiser=DenoisingTransformer(cfg, rngs[0]),
            reference=ReferenceTransformer(cfg, rngs[1]),
            driven=DrivenEncoder(cfg, rngs[2]),
        )

    def add_audio_layers(self, seed):
        rng = np.random.default_rng(seed)
        for block in self.denoiser.blocks:
            block.enable_audio(rng)
        self.has_audio = True

    def add_temporal_layers(self, seed):
        rng = np.random.default_rng(seed)
        for i, block in enumerate(self.denoiser.blocks):
            if not self.cfg.temporal_on_odd or i % 2 == 1:
                block.enable_temporal(rng)
        self.has_temporal = True

    def named_params(self):
        out = {}
        for prefix, part in (("denoiser", self.denoiser), ("reference", self.reference),
                             ("driven", self.driven)):
            for name, p in part.named_params().items():
                out[f"{prefix}/{name}"] = p
        return out

    def temporal_param_names(self):
        return {n for n in self.named_params() if ".temporal." in n or ".ln_t." in n}

    def audio_param_names(self):
        return {n for n in self.named_params() if ".audio." in n or ".ln_a." in n}

    # ---- checkpoints ----------------------------------------------------

    def save(self, path, meta=None):
        arrays = {f"params/{k}": v.data for k, v in self.named_params().items()}
        config = dict(self.cfg.to_dict(), has_audio=self.has_audio,
                      has_temporal=self.has_temporal, masked_attention=self.masked_attention)
        save_archive(path, arrays, {"config": config, "meta": meta or {}})

    @classmethod
    def load(cls, path, expect_config=None):
        arrays, extra = load_archive(path)
        config = dict(extra["config"])
        has_audio = config.pop("has_audio")
        has_temporal = config.pop("has_temporal")
        masked_attention = config.pop("masked_attention", True)
        cfg = ModelConfig(**config)
        if expect_config is not None and cfg != expect_config:
            raise ConfigError(f"{path}: checkpoint config differs from the expected config")
        model = cls.build(cfg, seed=0)
        model.masked_attention = masked_attention
        if has_audio:
            model.add_audio_layers(0)
        if has_temporal:
            model.add_temporal_layers(0)
        params = model.named_params()
        stored = {k[len("params/"):] for k in arrays if k.startswith("params/")}
        if stored != set(params):
            missing = sorted(set(params) - stored)[:4]
            surplus = sorted(stored - set(params))[:4]
            raise ConfigError(f"{path}: parameter names differ (missing {missing}, surplus {surplus})")
        for name, p in params.items():
            arr = arrays[f"params/{name}"]
            if arr.shape != p.data.shape:
                raise ConfigError(f"{path}: shape of {name} is {arr.shape}, expected {p.data.shape}")
            p.data = arr
        return model, extra.get("meta", {})

    # ---- forward helpers -------------------------------------------------

    def predict_eps(self, x_t, t, motion, audio, ref_feats, roles, mouth_driven,
                    audio_scale):
        return dit_forward(
            self.denoiser, x_t, t, motion, audio, ref_feats, roles, mouth_driven,
            audio_scale, temporal_active=self.has_temporal)


def roles_from_masks(mask_set, cfg):
    return TokenRoleMap(
        n_latent=cfg.n_tokens, n_reference=cfg.n_tokens,
        eye=mask_set.token_eye, mouth=mask_set.token_mouth,
    )


def build_visual_conditions(frames, landmarks, cfg, drive_regions):
    """Region-masked driving frames plus per-frame token roles."""
    sel = DrivingSelection.of(*drive_regions)
    driven = []
    roles = []
    for frame, lm in zip(frames, landmarks):
        mask_set = region_masks_from_landmarks(lm, cfg.image_size, cfg.patch)
        driven.append(compose_driving(frame, mask_set, sel))
        roles.append(roles_from_masks(mask_set, cfg))
    return np.stack(driven), roles, sel


def animate(model, ref_frame, ref_landmarks, modality, driving_frames=None,
            driving_landmarks=None, audio_track=None, drive_regions=None,
            alpha=1.0, rescale_mode="identity_anchored", audio_scale=1.0,
            steps=50, mode="deterministic", seed=0, schedule=None):
    """Generate a video; returns (frames (F, C, H, W) in [0, 1], info dict).

    Modality A needs an audio track (the visual condition is zeroed and
    token roles come from the reference landmarks); V needs a driving
    clip; A+V needs both. ``alpha`` rescales the driving motion before
    region masking; at alpha == 1 the warp round trip is the identity and
    is skipped to avoid pointless resampling loss.
    """
    cfg = model.cfg
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}, got {modality!r}")
    wants_visual = modality in ("V", "A+V")
    wants_audio = modality in ("A", "A+V")
    if wants_visual and (driving_frames is None or driving_landmarks is None):
        raise ConfigError(f"modality {modality} requires a driving clip (frames + landmarks)")
    if wants_audio and audio_track is None:
        raise ConfigError(f"modality {modality} requires an audio track")
    if wants_audio and not model.has_audio:
        raise ConfigError("checkpoint has no audio attention layers; train stage 2 first")

    if drive_regions is None:
        drive_regions = ("eye",) if modality == "A+V" else ("eye", "mouth")

    if wants_visual:
        n_frames = len(driving_frames)
        frames = np.asarray(driving_frames, dtype=np.float64)
        lms = np.asarray(driving_landmarks, dtype=np.float64)
        if alpha != 1.0:
            warped = [retarget.retarget_frame(frames[i], lms[0], lms[i], alpha, rescale_mode)
                      for i in range(n_frames)]
            frames = np.stack([w[0] for w in warped])
            lms = np.stack([w[1] for w in warped])
        driven, roles, sel = build_visual_conditions(frames, lms, cfg, drive_regions)
        mouth_driven = sel.mouth_driven
    else:
        n_frames = len(audio_track)
        driven = np.zeros((n_frames, cfg.channels, cfg.image_size, cfg.image_size))
        mask_set = region_masks_from_landmarks(ref_landmarks, cfg.image_size, cfg.patch)
        roles = [roles_from_masks(mask_set, cfg)] * n_frames
        mouth_driven = False

    if wants_audio:
        if len(audio_track) != n_frames:
            raise ConfigError(f"audio track length {len(audio_track)} != frame count {n_frames}")
        audio_np = synthface.audio_embed(audio_track, cfg.d_audio, cfg.audio_embed_seed)
    else:
        audio_np = None
        audio_scale = 0.0

    if not model.masked_attention:
        roles = None

    schedule = schedule or diffusion.NoiseSchedule.linear()
    with T.no_grad():
        motion = model.driven(T.Tensor._wrap(driven)).data
        ref_feats = [f.data for f in model.reference(T.Tensor._wrap(np.asarray(ref_frame)))]

        def predict(x, tau):
            out = model.predict_eps(
                T.Tensor._wrap(x), np.full(n_frames, tau), T.Tensor._wrap(motion),
                None if audio_np is None else T.Tensor._wrap(audio_np),
                [T.Tensor._wrap(f) for f in ref_feats], roles, mouth_driven, audio_scale)
            return out.data

        frames_out = diffusion.sample(
            predict, (n_frames, cfg.channels, cfg.image_size, cfg.image_size),
            schedule, steps, mode=mode, seed=seed)
    info = {
        "modality": modality, "frames": n_frames, "steps": steps, "mode": mode,
        "seed": seed, "alpha": alpha, "audio_scale": audio_scale,
        "drive_regions": list(drive_regions), "config_hash": cfg.config_hash(),
    }
    return frames_out, info
