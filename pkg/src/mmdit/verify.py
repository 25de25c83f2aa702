"""Runnable property suites behind the ``verify`` CLI command.

Each check returns (name, passed, detail). Suites are fast (seconds);
they cover the differentiation oracle, the attention exclusion rules,
and the warp algebra.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, AudioAttentionParams, TokenRoleMap,
                        audio_cross_attention, gather_attention_oracle, masked_spatial_attention,
                        mhsa)
from .diffusion import NoiseSchedule
from .errors import DegeneracyError
from .layers import LayerNorm, conv2d
from .masks import masked_mse
from .retarget import decompose, estimate_affine, polar_angle, rescale, retarget_frame, warp_image
from .synthface import render, FaceParams

GRAD_TOL = 1e-4
SEEDS = (0, 1, 2)


def _gradcheck_many(fn_builder):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fn, x = fn_builder(rng)
        worst = max(worst, T.grad_check(fn, x))
    return worst


def _op_checks():
    def matmul_case(rng):
        b = T.Tensor(rng.standard_normal((5, 4)))
        w = T.Tensor(rng.standard_normal((6, 4)))
        return (lambda x: T.tsum(T.mul(T.matmul(x, b), w)), T.Tensor(rng.standard_normal((6, 5))))

    def softmax_case(rng):
        w = T.Tensor(rng.standard_normal((3, 7)))
        return (lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), w)), T.Tensor(rng.standard_normal((3, 7))))

    def gelu_case(rng):
        w = T.Tensor(rng.standard_normal(8))
        return (lambda x: T.tsum(T.mul(T.gelu(x), w)), T.Tensor(rng.standard_normal(8)))

    def rsqrt_case(rng):
        w = T.Tensor(rng.standard_normal(6))
        return (lambda x: T.tsum(T.mul(T.rsqrt(x), w)), T.Tensor(rng.uniform(0.5, 2.0, 6)))

    def tanh_exp_log_case(rng):
        w = T.Tensor(rng.standard_normal(6))
        return (lambda x: T.tsum(T.mul(T.tanh(T.exp(T.log(x))), w)), T.Tensor(rng.uniform(0.5, 2.0, 6)))

    def layernorm_case(rng):
        ln = LayerNorm(8)
        w = T.Tensor(rng.standard_normal((2, 8)))
        return (lambda x: T.tsum(T.mul(ln(x), w)), T.Tensor(rng.standard_normal((2, 8))))

    def conv_case(rng):
        w = T.Tensor(rng.standard_normal((3, 2, 3, 3)))
        v = T.Tensor(rng.standard_normal((1, 3, 4, 4)))
        return (lambda x: T.tsum(T.mul(conv2d(x, w, stride=2, padding=1), v)),
                T.Tensor(rng.standard_normal((1, 2, 8, 8))))

    def patchify_case(rng):
        w = T.Tensor(rng.standard_normal((5, 2, 2, 2)))
        v = T.Tensor(rng.standard_normal((1, 5, 3, 3)))
        return (lambda x: T.tsum(T.mul(conv2d(x, w, stride=2, padding=0), v)),
                T.Tensor(rng.standard_normal((1, 2, 6, 6))))

    def masked_mse_case(rng):
        target = rng.standard_normal((4, 4))
        mask = (rng.random((4, 4)) > 0.4).astype(float)
        mask[0, 0] = 1.0
        return (lambda x: masked_mse(x, target, mask), T.Tensor(rng.standard_normal((4, 4))))

    def elementwise_mix_case(rng):
        a = T.Tensor(rng.uniform(0.5, 1.5, (2, 4)))
        s = T.Tensor(rng.uniform(0.5, 1.5, (1, 4)))

        def f(x):
            y = T.div(T.mul(T.add(x, 0.5), a), T.add(T.power(a, 2.0), 1.0))
            y = T.broadcast_add(T.broadcast_mul(y, s), T.neg(s))
            return T.tsum(T.sub(y, a))

        return (f, T.Tensor(rng.uniform(0.5, 1.5, (2, 4))))

    def shape_ops_case(rng):
        w = T.Tensor(rng.standard_normal((8, 3)))
        s = T.Tensor(rng.standard_normal((2, 3)))

        def f(x):
            y = T.transpose(T.reshape(x, (2, 2, 2)), (1, 0, 2))
            y = T.concat([y, y], axis=2)
            y = T.slice_axis(T.reshape(y, (2, 8)), 1, 0, 8)
            return T.tsum(T.mul(T.matmul(y, w), s))

        return (f, T.Tensor(rng.standard_normal((8,))))

    def upsample_case(rng):
        from .layers import upsample_nearest

        v = T.Tensor(rng.standard_normal((1, 2, 4, 4)))
        return (lambda x: T.tsum(T.mul(upsample_nearest(x, 2), v)),
                T.Tensor(rng.standard_normal((1, 2, 2, 2))))

    def mhsa_case(rng):
        cfg = AttentionConfig(8, 2)
        k = T.Tensor(rng.standard_normal((5, 8)))
        v = T.Tensor(rng.standard_normal((5, 8)))
        w = T.Tensor(rng.standard_normal((8, 8)))
        s = T.Tensor(rng.standard_normal((5, 8)))
        return (lambda x: T.tsum(T.mul(mhsa(x, k, v, cfg, w), s)), T.Tensor(rng.standard_normal((5, 8))))

    def masked_attn_case(rng):
        cfg = AttentionConfig(8, 2)
        roles = TokenRoleMap(5, 2, eye=np.array([1, 0, 0, 0, 0], bool),
                             mouth=np.array([0, 0, 1, 1, 0], bool))
        k = T.Tensor(rng.standard_normal((7, 8)))
        v = T.Tensor(rng.standard_normal((7, 8)))
        w = T.Tensor(rng.standard_normal((8, 8)))
        s = T.Tensor(rng.standard_normal((5, 8)))
        return (lambda x: T.tsum(T.mul(masked_spatial_attention(x, k, v, roles, False, cfg, w), s)),
                T.Tensor(rng.standard_normal((5, 8))))

    def audio_case(rng):
        cfg = AttentionConfig(8, 2)
        params = AudioAttentionParams(
            *(T.Tensor(rng.standard_normal(s)) for s in [(8, 8), (6, 8), (6, 8), (8, 8)]))
        audio = T.Tensor(rng.standard_normal((4, 6)))
        s = T.Tensor(rng.standard_normal((5, 8)))
        return (lambda x: T.tsum(T.mul(audio_cross_attention(x, audio, 0.7, params, cfg), s)),
                T.Tensor(rng.standard_normal((5, 8))))

    return {
        "matmul": matmul_case, "softmax": softmax_case, "gelu": gelu_case,
        "rsqrt": rsqrt_case, "tanh_exp_log": tanh_exp_log_case,
        "elementwise_mix": elementwise_mix_case, "shape_ops": shape_ops_case,
        "upsample_nearest": upsample_case,
        "layer_norm": layernorm_case, "conv2d": conv_case, "conv2d_patchify": patchify_case,
        "masked_mse": masked_mse_case, "mhsa": mhsa_case,
        "masked_spatial_attention": masked_attn_case, "audio_cross_attention": audio_case,
    }


def suite_grad():
    results = []
    for name, builder in _op_checks().items():
        err = _gradcheck_many(builder)
        results.append((f"grad/{name}", err < GRAD_TOL, f"max rel err {err:.3e}"))
    return results


def suite_attention():
    results = []
    cfg = AttentionConfig(16, 4)
    worst_gather = 0.0
    worst_excl = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 13))
        n_ref = int(rng.integers(0, 5))
        eye = rng.random(n) < 0.3
        mouth = (~eye) & (rng.random(n) < 0.3)
        if not eye.any():
            eye[0] = True
            mouth[0] = False
        if not mouth.any():
            mouth[np.flatnonzero(~eye)[0]] = True
        if n_ref == 0 and eye.all():
            eye[-1] = False
        roles = TokenRoleMap(n, n_ref, eye=eye, mouth=mouth)
        q = T.Tensor(rng.standard_normal((n, 16)))
        k = T.Tensor(rng.standard_normal((n + n_ref, 16)))
        v = T.Tensor(rng.standard_normal((n + n_ref, 16)))
        w = T.Tensor(rng.standard_normal((16, 16)))
        out = masked_spatial_attention(q, k, v, roles, False, cfg, w)
        oracle = gather_attention_oracle(q, k, v, roles, False, cfg, w)
        worst_gather = max(worst_gather, float(np.abs(out.data - oracle).max()))

        kp, vp = k.numpy(), v.numpy()
        kp[np.flatnonzero(eye)] += rng.uniform(-1e3, 1e3)
        vp[np.flatnonzero(eye)] += rng.uniform(-1e3, 1e3)
        out_p = masked_spatial_attention(q, T.Tensor(kp), T.Tensor(vp), roles, False, cfg, w)
        worst_excl = max(worst_excl, float(np.abs(out_p.data[mouth] - out.data[mouth]).max()))
    results.append(("attention/gather_oracle", worst_gather < 1e-6, f"max abs err {worst_gather:.3e}"))
    results.append(("attention/exclusion_invariance", worst_excl < 1e-5, f"max abs err {worst_excl:.3e}"))

    rng = np.random.default_rng(3)
    n, n_ref = 6, 2
    roles = TokenRoleMap(n, n_ref, eye=np.array([1, 0, 0, 0, 0, 0], bool),
                         mouth=np.array([0, 0, 1, 0, 0, 0], bool))
    q = T.Tensor(rng.standard_normal((n, 16)))
    k = T.Tensor(rng.standard_normal((n + n_ref, 16)))
    v = T.Tensor(rng.standard_normal((n + n_ref, 16)))
    w = T.Tensor(rng.standard_normal((16, 16)))
    same = np.array_equal(masked_spatial_attention(q, k, v, roles, True, cfg, w).data,
                          mhsa(q, k, v, cfg, w).data)
    results.append(("attention/mouth_driven_bitwise", same, "mouth-driven branch equals mhsa"))

    params = AudioAttentionParams(
        *(T.Tensor(rng.standard_normal(s)) for s in [(16, 16), (6, 16), (6, 16), (16, 16)]))
    f = T.Tensor(rng.standard_normal((n, 16)))
    audio = T.Tensor(rng.standard_normal((4, 6)))
    ident = audio_cross_attention(f, audio, 0.0, params, cfg) is f
    results.append(("attention/audio_scale_zero_identity", ident, "scale 0 returns the input"))
    return results


def suite_retarget():
    results = []
    worst = 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.standard_normal((2, 3))
        if min(np.hypot(*m[0, :2]), np.hypot(*m[1, :2])) < 1e-3:
            continue
        wt = decompose(m)
        worst = max(worst, float(np.abs(wt.reconstruct() - m).max()))
    results.append(("retarget/decompose_reconstruct", worst < 1e-12, f"max abs err {worst:.3e}"))

    _, k0 = render(FaceParams(), 32)
    _, k1 = render(FaceParams(rotation_deg=25.0, tx=2.0, ty=-1.0, scale=1.1), 32)
    wt = estimate_affine(k0, k1)
    err1 = max(np.abs(rescale(wt, 1.0, "literal").matrix - wt.matrix).max(),
               np.abs(rescale(wt, 1.0, "identity_anchored").matrix - wt.matrix).max())
    results.append(("retarget/alpha1_reconstruction", err1 < 1e-12, f"max abs err {err1:.3e}"))

    phi = polar_angle(wt.matrix)
    worst_sweep = 0.0
    for alpha in (0.0, 0.25, 0.5, 1.0, 1.5):
        scaled = rescale(wt, alpha, "identity_anchored")
        worst_sweep = max(worst_sweep, abs(polar_angle(scaled.matrix) - alpha * phi))
    results.append(("retarget/anchored_angle_sweep", worst_sweep < 1e-6, f"max angle err {worst_sweep:.3e}"))

    try:
        rescale(np.array([[1.0, 0, 0], [0, 1.0, 0]]), 0.0, "literal")
        results.append(("retarget/literal_alpha0_degeneracy", False, "no error raised"))
    except DegeneracyError:
        results.append(("retarget/literal_alpha0_degeneracy", True, "degeneracy raised"))

    frame, _ = render(FaceParams(rotation_deg=25.0, tx=2.0, ty=-1.0, scale=1.1), 32)
    out, kps = retarget_frame(frame, k0, k1, 1.0)
    lm_err = float(np.abs(kps - k1).max())
    px_err = float(np.abs(out - frame).mean())
    results.append(("retarget/alpha1_landmarks", lm_err < 1e-6, f"max landmark err {lm_err:.3e}"))
    results.append(("retarget/alpha1_pixel_roundtrip", px_err < 0.02, f"mean abs err {px_err:.4f}"))

    hot = np.zeros((1, 32, 32))
    hot[0, 20, 12] = 1.0
    m = np.array([[np.cos(0.3), -np.sin(0.3), 2.0], [np.sin(0.3), np.cos(0.3), -1.0]])
    moved = warp_image(hot, m)
    ys, xs = np.mgrid[0:32, 0:32]
    cx = float((moved[0] * xs).sum() / moved[0].sum())
    cy = float((moved[0] * ys).sum() / moved[0].sum())
    tx, ty = m[:, :2] @ [12.0, 20.0] + m[:, 2]
    cent_err = float(np.hypot(cx - tx, cy - ty))
    results.append(("retarget/warp_centroid_agrees", cent_err < 0.5, f"centroid err {cent_err:.3f} px"))
    return results


def suite_schedule():
    sched = NoiseSchedule.linear()
    ab = sched.alpha_bars
    rec = float(np.abs(ab[1:] - ab[:-1] * sched.alphas[1:]).max())
    mono = bool(np.all(np.diff(ab) < 0))
    return [
        ("schedule/alpha_bar_recurrence", rec < 1e-15, f"max abs err {rec:.2e}"),
        ("schedule/monotone", mono, "alpha_bar strictly decreasing"),
    ]


SUITES = {
    "grad": suite_grad,
    "attention": suite_attention,
    "retarget": suite_retarget,
    "schedule": suite_schedule,
}


def run_suites(names):
    if "all" in names:
        names = list(SUITES)
    results = []
    for name in names:
        results.extend(SUITES[name]())
    return results
