"""Visual amplitude adjustment: landmark affine fits, rotation/scale/translation
decomposition, alpha-rescaling, and the inverse-warp-then-reapply frame pipeline.

Two rescale modes ship:

``literal``
    Row-angle scaling applied verbatim: row angles arctan2(b, a) and
    arctan2(d, c) are multiplied by alpha, row norms kept, translation
    scaled by alpha. Degenerates as alpha -> 0 (both row directions
    collapse onto (1, 0)); the degeneracy raises.

``identity_anchored`` (default)
    A single polar rotation angle phi = arctan2(c - b, a + d) is scaled,
    so alpha = 0 anchors at [diag(lambda) | 0] and the measured rotation
    is exactly alpha * phi for similarity transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, GeometryError

RESCALE_MODES = ("literal", "identity_anchored")


@dataclass(frozen=True)
class WarpTransform:
    """2x3 affine plus its rotation/scale/translation decomposition."""

    matrix: np.ndarray   # (2, 3)
    theta_x: float       # arctan2(b, a)
    theta_y: float       # arctan2(d, c)
    lam_x: float         # hypot(a, b)
    lam_y: float         # hypot(c, d)
    translation: np.ndarray  # (tx, ty)

    @classmethod
    def from_matrix(cls, matrix):
        return decompose(matrix)

    def reconstruct(self):
        """Rebuild the 2x3 matrix from the decomposition (identity map)."""
        return np.array([
            [self.lam_x * np.cos(self.theta_x), self.lam_x * np.sin(self.theta_x), self.translation[0]],
            [self.lam_y * np.cos(self.theta_y), self.lam_y * np.sin(self.theta_y), self.translation[1]],
        ])


def decompose(matrix):
    """Row-polar decomposition of a 2x3 affine."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (2, 3):
        raise GeometryError(f"expected a 2x3 matrix, got {m.shape}")
    a, b, tx = m[0]
    c, d, ty = m[1]
    lam_x = float(np.hypot(a, b))
    lam_y = float(np.hypot(c, d))
    if lam_x < 1e-9 or lam_y < 1e-9:
        raise GeometryError(f"degenerate row norms ({lam_x:.2e}, {lam_y:.2e})")
    return WarpTransform(
        matrix=m.copy(),
        theta_x=float(np.arctan2(b, a)),
        theta_y=float(np.arctan2(d, c)),
        lam_x=lam_x, lam_y=lam_y,
        translation=np.array([tx, ty]),
    )


def estimate_affine(kp_src, kp_dst):
    """Least-squares 2x3 affine sending kp_src to kp_dst."""
    src = np.asarray(kp_src, dtype=np.float64)
    dst = np.asarray(kp_dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise GeometryError(f"point lists must both be (N, 2); got {src.shape}, {dst.shape}")
    if len(src) < 3:
        raise GeometryError(f"need >= 3 correspondences, got {len(src)}")
    design = np.concatenate([src, np.ones((len(src), 1))], axis=1)
    if np.linalg.matrix_rank(design) < 3:
        raise GeometryError("source landmarks are collinear; affine fit is underdetermined")
    sol, _, _, _ = np.linalg.lstsq(design, dst, rcond=None)
    return decompose(sol.T)


def polar_angle(matrix):
    """Rotation angle of the polar factor of the 2x2 block."""
    m = np.asarray(matrix, dtype=np.float64)
    return float(np.arctan2(m[1, 0] - m[0, 1], m[0, 0] + m[1, 1]))


def rescale(matrix, alpha, mode="identity_anchored"):
    """Scale the rotation and translation of a warp by alpha."""
    if alpha < 0:
        raise GeometryError(f"alpha must be >= 0, got {alpha}")
    if mode not in RESCALE_MODES:
        raise GeometryError(f"unknown rescale mode {mode!r}; choose from {RESCALE_MODES}")
    wt = matrix if isinstance(matrix, WarpTransform) else decompose(matrix)
    t = alpha * wt.translation
    if mode == "literal":
        ax, ay = alpha * wt.theta_x, alpha * wt.theta_y
        m = np.array([
            [wt.lam_x * np.cos(ax), wt.lam_x * np.sin(ax), t[0]],
            [wt.lam_y * np.cos(ay), wt.lam_y * np.sin(ay), t[1]],
        ])
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if abs(det) < 1e-9:
            raise DegeneracyError(
                f"literal mode: rows become parallel at alpha={alpha} "
                f"(|det|={abs(det):.2e}); use identity_anchored")
        return decompose(m)
    phi = polar_angle(wt.matrix)
    ca, sa = np.cos(alpha * phi), np.sin(alpha * phi)
    rot = np.array([[ca, -sa], [sa, ca]])
    block = rot @ np.diag([wt.lam_x, wt.lam_y])
    return decompose(np.concatenate([block, t[:, None]], axis=1))


def invert_affine(matrix):
    m = np.asarray(matrix, dtype=np.float64)
    a = m[:, :2]
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) < 1e-12:
        raise GeometryError(f"affine is not invertible (det={det:.2e})")
    ainv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    return np.concatenate([ainv, (-ainv @ m[:, 2])[:, None]], axis=1)


def compose_affine(outer, inner):
    """outer . inner as a 2x3 matrix."""
    o = np.asarray(outer, dtype=np.float64)
    i = np.asarray(inner, dtype=np.float64)
    return np.concatenate([o[:, :2] @ i[:, :2], (o[:, :2] @ i[:, 2] + o[:, 2])[:, None]], axis=1)


def apply_affine(matrix, points):
    pts = np.asarray(points, dtype=np.float64)
    return pts @ np.asarray(matrix)[:, :2].T + np.asarray(matrix)[:, 2]


def warp_image(image, matrix, out_size=None):
    """Move image content by the affine: out(q) = img(M^-1 q).

    Bilinear sampling with border replication; a feature at point p lands
    at matrix @ p.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    oh, ow = (h, w) if out_size is None else out_size
    inv = invert_affine(matrix)
    xs, ys = np.meshgrid(np.arange(ow, dtype=np.float64), np.arange(oh, dtype=np.float64))
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    flat = img.reshape(-1, h, w)
    out = ((flat[:, y0, x0] * (1 - fx) + flat[:, y0, x1] * fx) * (1 - fy)
           + (flat[:, y1, x0] * (1 - fx) + flat[:, y1, x1] * fx) * fy)
    return out.reshape(img.shape[:-2] + (oh, ow))


def retarget_frame(frame, kp_first, kp_frame, alpha, mode="identity_anchored"):
    """Inverse-warp a frame to the first-frame pose, then apply the
    alpha-rescaled warp. Returns (retargeted frame, retargeted landmarks)."""
    wt = estimate_affine(kp_first, kp_frame)
    minv = invert_affine(wt.matrix)
    scaled = rescale(wt, alpha, mode)
    unwarped = warp_image(frame, minv)
    out = warp_image(unwarped, scaled.matrix)
    new_kp = apply_affine(compose_affine(scaled.matrix, minv), kp_frame)
    return out, new_kp
