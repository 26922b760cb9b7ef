"""Portable graymap / pixmap export for masks, CAM heatmaps and overlays."""
from pathlib import Path

import numpy as np
from PIL import Image


def _to_uint8(values: np.ndarray):
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def write_pgm(values: np.ndarray, path, scale=1):
    """2-D array in [0, 1] as a binary PGM (P5); `scale` enlarges by nearest neighbour."""
    img = Image.fromarray(_to_uint8(values))
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.Resampling.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PPM")
    return path


def write_ppm(rgb: np.ndarray, path):
    """(H, W, 3) uint8 array as a binary PPM (P6)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PPM")
    return path


def mask_image(mask, path, scale=8):
    """A spatial BinaryMask (or 0/1 array) as black/white PGM."""
    values = mask.spatial if hasattr(mask, "spatial") else np.asarray(mask)
    if values is None:
        values = np.asarray(mask.channel_bits)[None, :]
    if values.ndim == 3:
        values = values[0]
    return write_pgm(values.astype(np.float64), path, scale=scale)


def heat_colors(heat: np.ndarray):
    """Blue-to-red ramp for a [0, 1] map; returns (H, W, 3) uint8."""
    h = np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * h - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * h - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * h - 1.0), 0.0, 1.0)
    return _to_uint8(np.stack([r, g, b], axis=-1))


def image_to_rgb(image_chw: np.ndarray):
    """CIFAR channel-planar uint8 image to (H, W, 3)."""
    return np.ascontiguousarray(np.transpose(np.asarray(image_chw, dtype=np.uint8), (1, 2, 0)))


def overlay(image_chw: np.ndarray, heat: np.ndarray, alpha=0.5):
    """Upsample a CAM to the image size and blend it over the image."""
    rgb = image_to_rgb(image_chw)
    h, w = rgb.shape[:2]
    colored = Image.fromarray(heat_colors(heat)).resize((w, h), Image.Resampling.BILINEAR)
    blended = Image.blend(Image.fromarray(rgb), colored, alpha)
    return np.asarray(blended)


def write_cam(cam, path, image_chw=None, scale=4):
    """CAM heatmap as PGM, plus an overlay PPM next to it when the source image is given."""
    path = Path(path)
    written = [write_pgm(cam.heat, path.with_suffix(".pgm"), scale=scale)]
    if image_chw is not None:
        written.append(write_ppm(overlay(image_chw, cam.heat), path.with_name(path.stem + "_overlay.ppm")))
    return written
