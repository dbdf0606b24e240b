import logging
from pathlib import Path

import numpy as np
from PIL import Image

from hgg_avatar.utils.errors import DimensionMismatch
from hgg_avatar.utils.splat_utils import RenderedImage

logger = logging.getLogger(__name__)


def to_rgba8(image: RenderedImage) -> np.ndarray:
    """H x W x 4 uint8, values rounded from [0, 1]."""
    rgba = np.concatenate([image.rgb, image.alpha[..., None]], axis=-1)
    return np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: RenderedImage, path) -> None:
    Image.fromarray(to_rgba8(image)).save(path, format="PNG")


def load_png(path) -> RenderedImage:
    with Image.open(path) as img:
        rgba = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
    return RenderedImage(rgb=rgba[..., :3], alpha=rgba[..., 3])


def save_raw_f32(image: RenderedImage, path) -> None:
    """Planar little-endian float32 dump: R, G, B then alpha planes of H x W."""
    planes = np.concatenate([np.moveaxis(image.rgb, -1, 0), image.alpha[None]], axis=0)
    Path(path).write_bytes(planes.astype("<f4").tobytes())


def load_raw_f32(path, height: int, width: int) -> RenderedImage:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != 4 * height * width:
        raise DimensionMismatch(f"{path}: {data.size} values, expected 4 x {height} x {width}")
    planes = data.reshape(4, height, width).astype(np.float64)
    return RenderedImage(rgb=np.moveaxis(planes[:3], 0, -1), alpha=planes[3])


def save_sequence(images, out_dir, prefix: str = "frame") -> list:
    """Write images as prefix_0000.png, prefix_0001.png, ... and return the paths."""
    out_dir = Path(out_dir)
    paths = []
    for i, image in enumerate(images):
        path = out_dir / f"{prefix}_{i:04d}.png"
        save_png(image, path)
        paths.append(path)
    logger.info(f"wrote {len(paths)} images to {out_dir}")
    return paths
