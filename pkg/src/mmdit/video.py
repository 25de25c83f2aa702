"""PPM frame I/O and frame-directory videos (codec-free, bit-exact)."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ContractError


def write_ppm(path, img):
    """Write a (3, H, W) float image in [0, 1] as binary P6, maxval 255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"write_ppm expects (3, H, W), got {img.shape}")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Read a binary P6 file back to a (3, H, W) float image in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ContractError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def frame_name(i):
    return f"frame_{i:04d}.ppm"


def write_video_dir(out_dir, frames, fps, seed, config_hash):
    """Frames (F, 3, H, W) in [0,1] -> out_dir/frames/*.ppm + index.json."""
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(os.path.join(frames_dir, frame_name(i)), frame)
    index = {"fps": fps, "frames": len(frames), "seed": seed, "config_hash": config_hash}
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return index


def read_video_dir(out_dir):
    with open(os.path.join(out_dir, "index.json")) as f:
        index = json.load(f)
    frames = [
        read_ppm(os.path.join(out_dir, "frames", frame_name(i)))
        for i in range(index["frames"])
    ]
    return np.stack(frames), index
