"""Multi-head attention, region-masked spatial attention, audio cross-attention.

The region rule: when no mouth drive is present, query tokens inside the
mouth region attend to everything except eye-region latent key tokens.
Reference-role key tokens are never excluded. Exclusion is additive
(a large negative bias before softmax), which the gather-oracle tests
bound against physical row removal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    neg_inf: float = -1e9

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_head < 4:
            raise ContractError(f"d_head {self.d_head} < 4")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TokenRoleMap:
    """Key-token roles (latent then reference) plus latent region flags.

    Pixel-level region masks are disjoint, but pooling to a coarse token
    grid may flag a boundary token as both: such a token is excluded as a
    key (eye side) and protected as a query (mouth side) independently.
    """

    n_latent: int
    n_reference: int
    eye: np.ndarray    # (n_latent,) bool
    mouth: np.ndarray  # (n_latent,) bool

    def __post_init__(self):
        if self.eye.shape != (self.n_latent,) or self.mouth.shape != (self.n_latent,):
            raise ShapeError("region flags must cover exactly the latent tokens")

    @property
    def n_keys(self):
        return self.n_latent + self.n_reference


def _split_heads(x, cfg):
    # (..., T, d) -> (..., h, T, dh)
    lead = x.shape[:-2]
    t = x.shape[-2]
    x = T.reshape(x, lead + (t, cfg.n_heads, cfg.d_head))
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, perm)


def _merge_heads(x, cfg):
    # (..., h, T, dh) -> (..., T, d)
    lead = x.shape[:-3]
    t = x.shape[-2]
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.reshape(T.transpose(x, perm), lead + (t, cfg.d_model))


def _attend(q, k, v, cfg, bias=None):
    """Core scaled dot-product over already-projected q/k/v of width d_model."""
    qh = _split_heads(q, cfg)
    kh = _split_heads(k, cfg)
    vh = _split_heads(v, cfg)
    scores = T.mul(T.matmul(qh, T.swap_last2(kh)), 1.0 / np.sqrt(cfg.d_head))
    if bias is not None:
        # (Tq, Tk) or (B, Tq, Tk) bias broadcast over heads
        b = bias[..., None, :, :] * np.ones((cfg.n_heads, 1, 1))
        if b.shape != scores.shape:
            b = np.broadcast_to(b, scores.shape).copy()
        scores = T.add(scores, T.Tensor._wrap(b))
    ctx = T.matmul(T.softmax(scores, axis=-1), vh)
    return _merge_heads(ctx, cfg)


def mhsa(q, k, v, cfg, w_out, b_out=None):
    """Multi-head attention over projected q/k/v, heads merged then output-projected."""
    if q.shape[-1] != cfg.d_model or k.shape[-1] != cfg.d_model or v.shape[-1] != cfg.d_model:
        raise ShapeError(
            f"q/k/v width must equal d_model={cfg.d_model}; got {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    out = T.matmul(_attend(q, k, v, cfg), w_out)
    if b_out is not None:
        out = T.broadcast_add(out, T.reshape(b_out, (1,) * (out.ndim - 1) + (cfg.d_model,)))
    return out


def exclusion_bias(roles, mouth_driven, neg_inf=-1e9):
    """(Tq, Tk) additive bias, or None when no exclusion applies.

    Mouth-region queries get ``neg_inf`` on eye-region latent keys unless
    the mouth is itself driven. Raises when some mouth query would be
    left with no attendable key at all.
    """
    if mouth_driven or not roles.mouth.any() or not roles.eye.any():
        return None
    included = int((~roles.eye).sum()) + roles.n_reference
    if included == 0:
        raise ContractError("every key is eye-flagged and no reference keys exist; "
                            "mouth queries would attend nothing")
    bias = np.zeros((roles.n_latent, roles.n_keys))
    bias[np.ix_(roles.mouth, np.concatenate([roles.eye, np.zeros(roles.n_reference, bool)]))] = neg_inf
    return bias


def masked_spatial_attention(q, k, v, roles, mouth_driven, cfg, w_out, b_out=None):
    """Spatial attention with the mouth/eye exclusion rule.

    With ``mouth_driven`` true this is exactly ``mhsa`` (same code path,
    no bias). Queries cover the latent tokens; keys/values cover latent
    plus reference tokens in that order.
    """
    if q.shape[-2] != roles.n_latent:
        raise ShapeError(f"query count {q.shape[-2]} != latent tokens {roles.n_latent}")
    if k.shape[-2] != roles.n_keys:
        raise ShapeError(f"key count {k.shape[-2]} != latent+reference tokens {roles.n_keys}")
    bias = exclusion_bias(roles, mouth_driven, cfg.neg_inf)
    if bias is None:
        return mhsa(q, k, v, cfg, w_out, b_out)
    out = T.matmul(_attend(q, k, v, cfg, bias=bias), w_out)
    if b_out is not None:
        out = T.broadcast_add(out, T.reshape(b_out, (1,) * (out.ndim - 1) + (cfg.d_model,)))
    return out


@dataclass
class AudioAttentionParams:
    """Projection weights of one audio cross-attention layer."""

    w_q: T.Tensor   # (d_model, d_model)
    w_k: T.Tensor   # (d_audio, d_model)
    w_v: T.Tensor   # (d_audio, d_model)
    w_out: T.Tensor  # (d_model, d_model)

    def named(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_out": self.w_out}


def audio_cross_attention(f, audio, audio_scale, params, cfg):
    """Residual audio injection: f + audio_scale * MHAA(f -> audio).

    ``audio_scale == 0`` returns ``f`` itself (bitwise identity), so a
    zeroed scale makes the output provably independent of the track.
    """
    if audio_scale < 0:
        raise ContractError(f"audio_scale must be >= 0, got {audio_scale}")
    if audio_scale == 0.0:
        return f
    if audio.shape[-2] < 1:
        raise ShapeError("audio must provide at least one token")
    if audio.shape[-1] != params.w_k.shape[0]:
        raise ShapeError(
            f"audio width {audio.shape[-1]} does not match projection {params.w_k.shape}")
    q = T.matmul(f, params.w_q)
    k = T.matmul(audio, params.w_k)
    v = T.matmul(audio, params.w_v)
    attended = T.matmul(_attend(q, k, v, cfg), params.w_out)
    return T.add(f, T.mul(attended, float(audio_scale)))


def gather_attention_oracle(q, k, v, roles, mouth_driven, cfg, w_out):
    """Reference semantics: physically drop excluded key/value rows per query.

    Plain numpy, no autodiff; used to bound the additive-bias
    implementation.
    """
    qd, kd, vd = q.data, k.data, v.data
    excluded = np.zeros((roles.n_latent, roles.n_keys), dtype=bool)
    bias = exclusion_bias(roles, mouth_driven, cfg.neg_inf)
    if bias is not None:
        excluded = bias < 0
    out = np.zeros((roles.n_latent, cfg.d_model))
    for i in range(roles.n_latent):
        keep = ~excluded[i]
        for h in range(cfg.n_heads):
            sl = slice(h * cfg.d_head, (h + 1) * cfg.d_head)
            scores = kd[keep, sl] @ qd[i, sl] / np.sqrt(cfg.d_head)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = w @ vd[keep, sl]
    return out @ w_out.data
