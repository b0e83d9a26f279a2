from pathlib import Path
from typing import Union
import numpy as np
from PIL import Image, UnidentifiedImageError
from utils.errors import DatasetError

PathLike = Union[str, Path]


def write_pgm(path: PathLike, pixels: np.ndarray) -> None:
    """Binary 8-bit grayscale (P5)"""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("PGM needs a 2D grid, got shape {}".format(pixels.shape))
    _save(path, Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="L"))


def write_ppm(path: PathLike, pixels: np.ndarray) -> None:
    """Binary 8-bit RGB (P6) from a (rows, cols, 3) grid"""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("PPM needs a (rows, cols, 3) grid, got shape {}".format(pixels.shape))
    _save(path, Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="RGB"))


def _save(path: PathLike, image: Image.Image) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PPM")


def read_netpbm(path: PathLike) -> np.ndarray:
    """Read an 8-bit grayscale or RGB netpbm file as (rows, cols) or (rows, cols, 3)"""
    try:
        with Image.open(path) as image:
            if image.format != "PPM" or image.mode not in ("L", "RGB"):
                raise DatasetError("not an 8-bit PGM/PPM (format {}, mode {})".format(image.format, image.mode),
                                   path)
            return np.array(image)
    except FileNotFoundError:
        raise DatasetError("missing file", path) from None
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError("unreadable image ({})".format(e), path) from None
