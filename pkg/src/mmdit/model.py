"""Mixed-modal denoising transformer, reference transformer, driven encoder.

Architecture sketch (per denoiser block):
  x += spatial_attention(mod(ln1(x)); keys/values gain reference tokens in
       the last ``ref_inject_last`` blocks, with the mouth/eye exclusion
       bias when no mouth drive is present)
  x += audio_scale * audio_cross_attention(ln_a(x), audio)   [if enabled]
  x += mlp(mod(ln2(x)))
  x += temporal_attention(ln_t(x)) across the frame axis      [odd blocks,
       if enabled]

Motion features from the driven encoder live on the token grid; they are
nearest-upsampled to the latent resolution and enter through a separate
zero-initialized channel group of the conv-in, so a zero motion input
reproduces the motion-free forward bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AudioAttentionParams, _attend, exclusion_bias
from .errors import ConfigError, ShapeError
from .layers import Conv2d, LayerNorm, Linear, conv2d, init_normal, init_zeros, \
    pos_embed_2d, sinusoidal_embedding, upsample_nearest


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch: int = 2
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 8
    ref_inject_last: int = 4
    temporal_on_odd: bool = True
    motion_channels: int = 4
    frames: int = 8
    channels: int = 3
    d_audio: int = 16
    mlp_ratio: int = 4
    audio_embed_seed: int = 101
    neg_inf: float = -1e9

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.patch not in (1, 2, 4):
            raise ConfigError(f"patch must be 1, 2 or 4, got {self.patch}")
        if self.n_blocks % 2:
            raise ConfigError(f"n_blocks must be even, got {self.n_blocks}")
        if self.ref_inject_last > self.n_blocks:
            raise ConfigError("ref_inject_last exceeds n_blocks")
        if self.d_model % self.n_heads or self.d_model // self.n_heads < 4:
            raise ConfigError("d_model/n_heads must be an integer >= 4")
        if self.motion_channels < 1 or self.frames < 1:
            raise ConfigError("motion_channels and frames must be >= 1")

    @property
    def grid(self):
        return self.image_size // self.patch

    @property
    def n_tokens(self):
        return self.grid * self.grid

    @property
    def attention(self):
        return AttentionConfig(self.d_model, self.n_heads, self.neg_inf)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def conv_in_expand(pretrained_w, motion_channels):
    """Append zero-filled input-channel slices for the motion group.

    The original channel slices are copied verbatim, so a forward pass
    whose motion channels are zero matches the unexpanded forward.
    """
    pretrained_w = np.asarray(pretrained_w, dtype=np.float64)
    o, c, kh, kw = pretrained_w.shape
    out = np.zeros((o, c + motion_channels, kh, kw))
    out[:, :c] = pretrained_w
    return out


def _prefix(params, prefix):
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Mlp:
    def __init__(self, d, ratio, rng):
        self.fc1 = Linear(d, d * ratio, rng)
        self.fc2 = Linear(d * ratio, d, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))

    def named_params(self):
        return {**_prefix(self.fc1.named_params(), "fc1"), **_prefix(self.fc2.named_params(), "fc2")}


class Block:
    """One transformer block; audio/temporal sublayers are attached later."""

    def __init__(self, cfg, rng):
        d = cfg.d_model
        self.cfg = cfg
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.mod = Linear(d, 4 * d, zero_init=True)  # shift1, scale1, shift2, scale2
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_out = Linear(d, d, rng)
        self.mlp = Mlp(d, cfg.mlp_ratio, rng)
        self.audio = None
        self.ln_a = None
        self.temporal = None
        self.ln_t = None

    def enable_audio(self, rng):
        d, da = self.cfg.d_model, self.cfg.d_audio
        self.ln_a = LayerNorm(d)
        self.audio = AudioAttentionParams(
            w_q=init_normal(rng, (d, d), 1.0 / np.sqrt(d)),
            w_k=init_normal(rng, (da, d), 1.0 / np.sqrt(da)),
            w_v=init_normal(rng, (da, d), 1.0 / np.sqrt(da)),
            w_out=init_zeros((d, d)),
        )

    def enable_temporal(self, rng):
        d = self.cfg.d_model
        self.ln_t = LayerNorm(d)
        self.temporal = {
            "w_q": init_normal(rng, (d, d), 1.0 / np.sqrt(d)),
            "w_k": init_normal(rng, (d, d), 1.0 / np.sqrt(d)),
            "w_v": init_normal(rng, (d, d), 1.0 / np.sqrt(d)),
            "w_out": init_zeros((d, d)),
        }

    def _modulated(self, ln, x, shift, scale):
        h = ln(x)
        return T.broadcast_add(T.broadcast_mul(h, T.add(scale, 1.0)), shift)

    def modulation(self, temb):
        """Per-block timestep modulation: four (B, 1, d) shift/scale tensors."""
        d = self.cfg.d_model
        b = temb.shape[0]
        t_mod = self.mod(temb)
        return tuple(
            T.reshape(T.slice_axis(t_mod, 1, i * d, (i + 1) * d), (b, 1, d))
            for i in range(4)
        )

    def __call__(self, x, temb, ref=None, attn_bias=None, audio=None, audio_scale=1.0,
                 temporal_active=False):
        d = self.cfg.d_model
        acfg = self.cfg.attention
        shift1, scale1, shift2, scale2 = self.modulation(temb)

        h = self._modulated(self.ln1, x, shift1, scale1)
        kv_src = h if ref is None else T.concat([h, ref], axis=1)
        q, k, v = self.w_q(h), self.w_k(kv_src), self.w_v(kv_src)
        bias = None
        if attn_bias is not None:
            bias = attn_bias if attn_bias.shape[-1] == kv_src.shape[1] else attn_bias[..., : kv_src.shape[1]]
        x = T.add(x, self.w_out(_attend(q, k, v, acfg, bias=bias)))

        if self.audio is not None and audio is not None and audio_scale != 0.0:
            ha = self.ln_a(x)
            qa = T.matmul(ha, self.audio.w_q)
            ka = T.matmul(audio, self.audio.w_k)
            va = T.matmul(audio, self.audio.w_v)
            attended = T.matmul(_attend(qa, ka, va, acfg), self.audio.w_out)
            x = T.add(x, T.mul(attended, float(audio_scale)))

        x = T.add(x, self.mlp(self._modulated(self.ln2, x, shift2, scale2)))

        if temporal_active and self.temporal is not None:
            f, tok, _ = x.shape
            ht = T.transpose(self.ln_t(x), (1, 0, 2))  # (T, F, d)
            fpe = T.Tensor._wrap(sinusoidal_embedding(np.arange(f), d).data[None])
            ht = T.broadcast_add(ht, fpe)
            qt = T.matmul(ht, self.temporal["w_q"])
            kt = T.matmul(ht, self.temporal["w_k"])
            vt = T.matmul(ht, self.temporal["w_v"])
            out = T.matmul(_attend(qt, kt, vt, acfg), self.temporal["w_out"])
            x = T.add(x, T.transpose(out, (1, 0, 2)))
        return x

    def named_params(self):
        out = {}
        for name in ("ln1", "ln2", "mod", "w_q", "w_k", "w_v", "w_out", "mlp"):
            out.update(_prefix(getattr(self, name).named_params(), name))
        if self.audio is not None:
            out.update(_prefix(self.audio.named(), "audio"))
            out.update(_prefix(self.ln_a.named_params(), "ln_a"))
        if self.temporal is not None:
            out.update(_prefix(self.temporal, "temporal"))
            out.update(_prefix(self.ln_t.named_params(), "ln_t"))
        return out


class DrivenEncoder:
    """Four-conv motion feature stack; output lands on the token grid.

    Strides are arranged so the total downsampling equals the patch size,
    which keeps the stack translation-covariant: shifting the input by one
    patch shifts the features by one grid cell (away from borders). The
    last two layers are 1x1 so the receptive field stays local: motion
    features must not couple distant facial regions, or they would carry
    eye information into mouth cells underneath the attention masking.
    """

    STRIDES = {1: (1, 1, 1, 1), 2: (1, 2, 1, 1), 4: (2, 2, 1, 1)}
    KERNELS = (3, 3, 1, 1)

    def __init__(self, cfg, rng, hidden=16):
        strides = self.STRIDES[cfg.patch]
        chans = [cfg.channels, hidden, hidden, hidden, cfg.motion_channels]
        self.convs = [
            Conv2d(chans[i], chans[i + 1], kernel=self.KERNELS[i], stride=strides[i],
                   padding=self.KERNELS[i] // 2, rng=rng)
            for i in range(4)
        ]
        self.cfg = cfg

    def __call__(self, frames):
        if frames.shape[-1] != self.cfg.image_size:
            raise ShapeError(f"driving frame size {frames.shape} != {self.cfg.image_size}")
        x = frames
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < 3:
                x = T.gelu(x)
        return x

    def named_params(self):
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(_prefix(conv.named_params(), f"conv{i}"))
        return out


class _TransformerCore:
    """Shared machinery of the denoising and reference transformers."""

    def __init__(self, cfg, rng, in_channels):
        d = cfg.d_model
        self.cfg = cfg
        self.conv_in = Conv2d(in_channels, d, kernel=cfg.patch, stride=cfg.patch, rng=rng)
        self.pos = pos_embed_2d(cfg.grid, cfg.grid, d)
        self.t_fc1 = Linear(d, d, rng)
        self.t_fc2 = Linear(d, d, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_blocks)]

    def time_modulation(self, t):
        emb = sinusoidal_embedding(t, self.cfg.d_model)
        return self.t_fc2(T.gelu(self.t_fc1(emb)))

    def tokens_from(self, x):
        b = x.shape[0]
        feat = self.conv_in(x)  # (B, d, g, g)
        tokens = T.transpose(T.reshape(feat, (b, self.cfg.d_model, self.cfg.n_tokens)), (0, 2, 1))
        return T.broadcast_add(tokens, T.Tensor._wrap(self.pos[None]))

    def core_params(self):
        out = {}
        out.update(_prefix(self.conv_in.named_params(), "conv_in"))
        out.update(_prefix(self.t_fc1.named_params(), "t_fc1"))
        out.update(_prefix(self.t_fc2.named_params(), "t_fc2"))
        for i, block in enumerate(self.blocks):
            out.update(_prefix(block.named_params(), f"blocks.{i}"))
        return out


class ReferenceTransformer(_TransformerCore):
    """Weight-separate encoder of the reference image.

    Returns, for each of the last ``ref_inject_last`` blocks, the
    modulated-normed hidden state its own attention sees, which the
    denoiser appends to its key/value tokens.
    """

    def __init__(self, cfg, rng):
        super().__init__(cfg, rng, cfg.channels)

    def __call__(self, ref):
        squeeze = ref.ndim == 3
        if squeeze:
            ref = T.reshape(ref, (1,) + tuple(ref.shape))
        b = ref.shape[0]
        x = self.tokens_from(ref)
        t_emb = self.time_modulation(np.zeros(b))
        first_injected = self.cfg.n_blocks - self.cfg.ref_inject_last
        feats = []
        for i, block in enumerate(self.blocks):
            if i >= first_injected:
                shift1, scale1, _, _ = block.modulation(t_emb)
                feats.append(block._modulated(block.ln1, x, shift1, scale1))
            x = block(x, t_emb)
        if squeeze:
            feats = [T.reshape(f, tuple(f.shape[1:])) for f in feats]
        return feats

    def named_params(self):
        return self.core_params()


class DenoisingTransformer(_TransformerCore):
    def __init__(self, cfg, rng):
        super().__init__(cfg, rng, cfg.channels)
        d = cfg.d_model
        # motion channel group of the conv-in: zero-init, summed with the
        # base group so zero motion input reproduces the base forward bitwise
        self.conv_in_motion = Conv2d(cfg.motion_channels, d, kernel=cfg.patch,
                                     stride=cfg.patch, bias=False, zero_init=True)
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.patch * cfg.patch * cfg.channels, zero_init=True)

    def expanded_conv_in_weight(self):
        """Joint (d, channels + motion_channels, p, p) view of the conv-in."""
        return np.concatenate([self.conv_in.w.data, self.conv_in_motion.w.data], axis=1)

    def __call__(self, noisy, t, motion=None, ref_feats=None, attn_bias=None,
                 audio=None, audio_scale=1.0, temporal_active=False,
                 probe_token_delta=None, return_block_outputs=False):
        cfg = self.cfg
        b = noisy.shape[0]
        if noisy.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"latent shape {noisy.shape} != config {cfg.image_size}")
        tokens = self.tokens_from(noisy)
        if motion is not None:
            if motion.shape[-2:] != (cfg.grid, cfg.grid):
                raise ShapeError(f"motion features {motion.shape} not on the {cfg.grid} grid")
            up = upsample_nearest(motion, cfg.patch)
            mfeat = conv2d(up, self.conv_in_motion.w, cfg.patch, 0)
            mtok = T.transpose(T.reshape(mfeat, (b, cfg.d_model, cfg.n_tokens)), (0, 2, 1))
            tokens = T.add(tokens, mtok)
        if probe_token_delta is not None:
            tokens = T.add(tokens, T.Tensor._wrap(np.asarray(probe_token_delta, dtype=np.float64)))

        t_mod = self.time_modulation(t)
        first_injected = cfg.n_blocks - cfg.ref_inject_last
        x = tokens
        block_outputs = []
        for i, block in enumerate(self.blocks):
            ref = None
            if ref_feats is not None and i >= first_injected:
                ref = ref_feats[i - first_injected]
                if ref.ndim == 2:
                    ref = T.broadcast_mul(
                        T.reshape(ref, (1,) + tuple(ref.shape)),
                        T.Tensor._wrap(np.ones((b, 1, 1))),
                    )
            x = block(x, t_mod, ref=ref, attn_bias=attn_bias, audio=audio,
                      audio_scale=audio_scale,
                      temporal_active=temporal_active and (i % 2 == 1 if cfg.temporal_on_odd else True))
            if return_block_outputs:
                block_outputs.append(x)

        out = self.head(self.ln_f(x))  # (B, T, p*p*C)
        g, p, c = cfg.grid, cfg.patch, cfg.channels
        out = T.reshape(out, (b, g, g, c, p, p))
        out = T.reshape(T.transpose(out, (0, 3, 1, 4, 2, 5)), (b, c, cfg.image_size, cfg.image_size))
        if return_block_outputs:
            return out, block_outputs
        return out

    def named_params(self):
        out = self.core_params()
        out.update(_prefix(self.conv_in_motion.named_params(), "conv_in_motion"))
        out.update(_prefix(self.ln_f.named_params(), "ln_f"))
        out.update(_prefix(self.head.named_params(), "head"))
        return out


def build_attention_bias(roles_per_frame, mouth_driven, cfg):
    """Stack per-frame exclusion biases into (F, T, T+Tr), or None if inactive.

    ``mouth_driven`` may be a scalar or one flag per frame.
    """
    if roles_per_frame is None:
        return None
    f = len(roles_per_frame)
    flags = np.broadcast_to(np.asarray(mouth_driven, dtype=bool), (f,))
    biases = [exclusion_bias(r, bool(flags[i]), cfg.neg_inf) for i, r in enumerate(roles_per_frame)]
    if all(b is None for b in biases):
        return None
    n_q = roles_per_frame[0].n_latent
    n_k = roles_per_frame[0].n_keys
    stack = np.zeros((f, n_q, n_k))
    for i, b in enumerate(biases):
        if b is not None:
            stack[i] = b
    return stack


def dit_forward(denoiser, noisy, t, motion, audio, ref_feats, roles, mouth_driven,
                audio_scale, temporal_active=False, **debug):
    """Full denoiser forward; ``roles`` is a per-frame list or None."""
    bias = build_attention_bias(roles, mouth_driven, denoiser.cfg)
    return denoiser(noisy, t, motion=motion, ref_feats=ref_feats, attn_bias=bias,
                    audio=audio, audio_scale=audio_scale,
                    temporal_active=temporal_active, **debug)
