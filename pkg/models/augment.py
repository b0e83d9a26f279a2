import math
from dataclasses import dataclass
from typing import Tuple
import numpy as np
from scipy.ndimage import affine_transform
from utils.errors import InvalidParameterError, ShapeError
from utils.rng import RngStream

ANGLE_RANGE = (-180.0, 180.0)
SCALE_RANGE = (0.5, 1.5)
FLIP_PROBABILITY = 0.5


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the paired augmentation.

    Attributes:
        hflip (bool): Mirror columns.
        vflip (bool): Mirror rows.
        angle (float): Rotation about the grid center, degrees.
        scale (float): Zoom about the grid center; < 1 shrinks and zero-pads.
    """
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not ANGLE_RANGE[0] <= self.angle <= ANGLE_RANGE[1]:
            raise InvalidParameterError("angle {} outside {}".format(self.angle, ANGLE_RANGE))
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise InvalidParameterError("scale {} outside {}".format(self.scale, SCALE_RANGE))

    @property
    def is_rigid_flip(self) -> bool:
        return self.angle == 0.0 and self.scale == 1.0


def sample_params(rng: RngStream) -> AugmentParams:
    """Draw flips ~ Bernoulli(0.5), angle ~ U[-180, 180], scale ~ U[0.5, 1.5] from the stream's start"""
    gen = rng.generator()
    hflip = bool(gen.random() < FLIP_PROBABILITY)
    vflip = bool(gen.random() < FLIP_PROBABILITY)
    angle = float(gen.uniform(*ANGLE_RANGE))
    scale = float(gen.uniform(*SCALE_RANGE))
    return AugmentParams(hflip=hflip, vflip=vflip, angle=angle, scale=scale)


def affine_map(shape: Tuple[int, int], p: AugmentParams) -> Tuple[np.ndarray, np.ndarray]:
    """(matrix, offset) taking output coordinates to input coordinates.

    Forward order is flips, then rotation, then scale, all about the grid center;
    the returned map is its inverse, as scipy.ndimage.affine_transform expects.
    """
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    flips = np.diag([-1.0 if p.vflip else 1.0, -1.0 if p.hflip else 1.0])
    theta = math.radians(p.angle)
    inverse_rotation = np.array([[math.cos(theta), math.sin(theta)],
                                 [-math.sin(theta), math.cos(theta)]])
    matrix = flips @ inverse_rotation / p.scale
    offset = center - matrix @ center
    return matrix, offset


def transform_grid(grid: np.ndarray, p: AugmentParams, order: int) -> np.ndarray:
    """Resample one 2D grid under p; order 1 is bilinear, order 0 nearest. Outside is 0."""
    grid = np.asarray(grid)
    if p.is_rigid_flip:
        out = grid
        if p.vflip:
            out = out[::-1, :]
        if p.hflip:
            out = out[:, ::-1]
        return np.array(out, copy=True)
    matrix, offset = affine_map(grid.shape, p)
    return affine_transform(grid, matrix, offset=offset, output_shape=grid.shape, output=grid.dtype,
                            order=order, mode="constant", cval=0.0)


def apply(image: np.ndarray, mask: np.ndarray, p: AugmentParams) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the same geometric transform to an image (bilinear) and its mask (nearest)"""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ShapeError("image {} and mask {} differ in shape".format(image.shape, mask.shape))
    if image.ndim != 2:
        raise ShapeError("augmentation expects 2D grids, got {}".format(image.shape))
    return transform_grid(image, p, order=1), transform_grid(mask, p, order=0)
