"""Mask-overlay PNGs: one grayscale map slice with zone contours on top."""

from pathlib import Path

import numpy as np
from PIL import Image

from .core import MapKind
from .evalkit import boundary

ZONE_COLORS = {"pg": (255, 64, 64), "cz": (64, 255, 64), "pz": (64, 128, 255)}


def overlay_slice(image, mask=None, z=0, scale=4, vmin=None, vmax=None):
    """RGB uint8 array of one slice with PG/CZ/PZ contours drawn in colour."""
    img = np.asarray(image, dtype=np.float64)
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    gray = np.zeros_like(img) if hi <= lo else np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    gray = np.round(gray * 255.0).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    if mask is not None:
        for zone in ("pg", "cz", "pz"):
            plane = mask.zone(zone)[z]
            if scale > 1:
                plane = plane.repeat(scale, axis=0).repeat(scale, axis=1)
            edge = boundary(plane)
            rgb[edge] = ZONE_COLORS[zone]
    return rgb


def overlay(case, mask, out_dir, kind=MapKind.MAG, scale=4):
    """Write ``<case_id>_z<k>.png`` for every slice; returns the paths.

    The map is windowed to its volume-wide min/max so slices share one
    grey scale. ``mask`` may be None for a grayscale-only rendering.
    """
    kind = MapKind.parse(kind)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol = case.maps[kind].values
    vmin, vmax = float(vol.min()), float(vol.max())
    paths = []
    for z in range(vol.shape[0]):
        rgb = overlay_slice(vol[z], mask, z, scale, vmin, vmax)
        path = out_dir / f"{case.case_id}_z{z:02d}.png"
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
        paths.append(path)
    return paths
