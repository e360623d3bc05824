"""Class-token attention heatmaps.

For each layer the class-token attention row (averaged over heads, class
column dropped) is reshaped to the patch grid, upscaled nearest neighbor,
pushed through a blue-to-red colormap and alpha-blended over the input.
Colors are min-max normalized per map; the raw row values and normalization
bounds go into a sidecar metadata file.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import autograd as ag
from . import data as dp
from . import vit
from .imageio import write_image


def class_attention_maps(model: vit.VitModel, image: np.ndarray,
                         per_head: bool = False) -> list[np.ndarray]:
    """Raw per-layer class-token attention over patches.

    Returns (grid, grid) arrays (head-averaged) or (heads, grid, grid) when
    per_head is set. Values are post-softmax weights, so each map sums to the
    class-token row mass over patches: 1 minus the class-to-class weight.
    """
    g = model.cfg.grid
    with ag.no_grad():
        _, stack = vit.encode(model, dp.normalize(image))
    maps = []
    for attn in stack:
        rows = attn.data[:, 0, 1:]              # (heads, N): class-token row
        if per_head:
            maps.append(rows.reshape(model.cfg.heads, g, g).copy())
        else:
            maps.append(rows.mean(axis=0).reshape(g, g).copy())
    return maps


def upscale_nearest(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def colormap_blue_red(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] scalars to a blue (low) to red (high) RGB ramp."""
    t = np.clip(values, 0.0, 1.0)
    return np.stack([t, 0.12 * np.ones_like(t), 1.0 - t], axis=-1)


def overlay(image: np.ndarray, heat_rgb: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    return (1.0 - alpha) * image + alpha * heat_rgb


def render_attention(model: vit.VitModel, image: np.ndarray, out_dir: str,
                     fmt: str = "png", per_head: bool = False,
                     alpha: float = 0.5) -> dict:
    """Write one heatmap per layer (per head with per_head) plus metadata.

    Returns the metadata dict: file names and per-map normalization bounds.
    """
    if image.shape[0] != model.cfg.image_size or image.shape[1] != model.cfg.image_size:
        raise ag.ShapeError(f"image shape {image.shape} does not match model "
                            f"image_size {model.cfg.image_size}")
    os.makedirs(out_dir, exist_ok=True)
    factor = model.cfg.patch_size
    maps = class_attention_maps(model, image, per_head=per_head)

    meta = {"normalization": "per-map min-max", "alpha": alpha,
            "head_aggregation": "per-head" if per_head else "mean", "maps": []}

    def write_one(grid: np.ndarray, name: str) -> None:
        lo, hi = float(grid.min()), float(grid.max())
        span = hi - lo if hi > lo else 1.0
        heat = colormap_blue_red(upscale_nearest((grid - lo) / span, factor))
        path = os.path.join(out_dir, f"{name}.{fmt}")
        write_image(path, overlay(image, heat, alpha))
        meta["maps"].append({"file": os.path.basename(path), "min": lo, "max": hi,
                             "patch_mass": float(grid.sum())})

    for layer, grid in enumerate(maps):
        if per_head:
            for h in range(grid.shape[0]):
                write_one(grid[h], f"attn_layer{layer}_head{h}")
        else:
            write_one(grid, f"attn_layer{layer}")

    with open(os.path.join(out_dir, "attn_meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return meta


def band_attention_stats(maps: list[np.ndarray], band: np.ndarray,
                         patch_size: int) -> list[tuple[float, float]]:
    """Per layer: (mean attention inside the pixel band, mean outside).

    The band mask is given in pixel space and reduced to patch space; a patch
    counts as inside when at least half its pixels are."""
    stats = []
    for grid in maps:
        g = grid.shape[-1]
        pix = band.reshape(g, patch_size, g, patch_size).mean(axis=(1, 3))
        inside = pix >= 0.5
        stats.append((float(grid[inside].mean()), float(grid[~inside].mean())))
    return stats
