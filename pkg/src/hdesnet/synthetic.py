"""Synthetic geometric scenes with known depth and person masks.

Each frame is a tilted back wall, a few box obstacles and one "person"
(an ellipse body plus a disc head) standing in front.  A band of pixels
has zero depth to mimic sensor dropouts.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model_io import save_labels, save_pgm16, save_ppm


@dataclass
class Scene:
    rgb: np.ndarray     # (h, w, 3) uint8
    depth: np.ndarray   # (h, w) metres, millimetre-quantized, 0 = ignored
    labels: np.ndarray  # (h, w) uint8, 1 = person


def make_scene(rng: np.random.Generator, h: int = 64, w: int = 64) -> Scene:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    wall = rng.uniform(3.0, 5.0) + rng.uniform(-1, 1) * (xx / w - 0.5) + rng.uniform(-0.5, 0.5) * (yy / h)
    depth = wall.copy()
    color = np.empty((h, w, 3))
    color[:] = rng.uniform(60, 120, 3)

    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        bh, bw = rng.integers(6, h // 2), rng.integers(6, w // 2)
        box = (yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw)
        d = rng.uniform(2.0, 3.5)
        closer = box & (d < depth)
        depth[closer] = d
        color[closer] = rng.uniform(80, 200, 3)

    cy, cx = rng.uniform(0.45, 0.7) * h, rng.uniform(0.3, 0.7) * w
    ry, rx = rng.uniform(0.15, 0.25) * h, rng.uniform(0.07, 0.12) * w
    body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    hr = 0.6 * rx
    head = (yy - (cy - ry - hr * 0.8)) ** 2 + (xx - cx) ** 2 <= hr ** 2
    person = body | head
    d_person = rng.uniform(1.2, 2.0)
    depth[person] = d_person + 0.05 * ((xx[person] - cx) / rx) ** 2
    color[person] = rng.uniform(150, 255, 3)

    # shade by depth so the image carries some depth cue
    rgb = np.clip(color * (1.2 - 0.1 * depth[..., None]) + rng.normal(0, 3, color.shape), 0, 255)

    depth = np.rint(depth * 1000) / 1000
    band = rng.integers(0, h - 4)
    depth[band:band + 3, : w // 3] = 0.0
    return Scene(rgb.astype(np.uint8), depth, person.astype(np.uint8))


def write_dataset(root, n_frames: int = 10, seed: int = 0, h: int = 64, w: int = 64) -> list[str]:
    """Write ``root/{rgb,depth,mask}/frame_XXX.{ppm,pgm}``; returns the frame ids."""
    root = Path(root)
    for sub in ("rgb", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n_frames):
        s = make_scene(rng, h, w)
        fid = f"frame_{i:03d}"
        save_ppm(s.rgb, root / "rgb" / f"{fid}.ppm")
        save_pgm16(s.depth, root / "depth" / f"{fid}.pgm")
        save_labels(s.labels, root / "mask" / f"{fid}.pgm")
        ids.append(fid)
    return ids


def write_perfect_predictions(dataset_root, out_root) -> None:
    """Copy ground truth into a predictions directory (pred == gt)."""
    src, dst = Path(dataset_root), Path(out_root)
    for sub in ("depth", "mask"):
        (dst / sub).mkdir(parents=True, exist_ok=True)
        for p in sorted((src / sub).glob("*.pgm")):
            (dst / sub / p.name).write_bytes(p.read_bytes())
