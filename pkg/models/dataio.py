"""Paired slice datasets: types, SEGB loading, preprocessing and synthetic generation."""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from database.segb import DTYPE_IMAGE, DTYPE_MASK, read_slice_file, write_slice_file
from models.nnprims import bilinear_matrix
from utils.errors import ConfigurationError, DatasetError, InvalidParameterError
from utils.logging_utils import log_event
from utils.rng import RngStream

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MIN_SIDE = 8
DEFAULT_MU = -500.0
DEFAULT_SIGMA = 500.0
SPLITS = ("train", "val", "test")


class ExperimentKind(Enum):
    LUNG_SEGMENTATION = "lung-segmentation"
    LESION_SEGMENTATION_A = "lesion-segmentation-a"
    LESION_SEGMENTATION_B = "lesion-segmentation-b"

    @property
    def slug(self) -> str:
        return self.value

    @property
    def needs_lung_mask(self) -> bool:
        return self is not ExperimentKind.LESION_SEGMENTATION_A

    @classmethod
    def parse(cls, text: str) -> "ExperimentKind":
        for kind in cls:
            if text in (kind.value, kind.name, kind.name.lower()):
                return kind
        raise ConfigurationError("unknown experiment {!r}; choose from {}".format(
            text, ", ".join(k.value for k in cls)))


@dataclass(frozen=True)
class Slice:
    """One image with its target mask and optional lung mask.

    Attributes:
        image (np.ndarray): 2D float grid (HU before normalization).
        target_mask (np.ndarray): 2D uint8 grid in {0, 1}.
        lung_mask (Optional[np.ndarray]): 2D uint8 grid in {0, 1}, same shape.
        volume_id (str): Source volume.
        slice_index (int): Position inside the volume.
    """
    image: np.ndarray
    target_mask: np.ndarray
    lung_mask: Optional[np.ndarray] = None
    volume_id: str = ""
    slice_index: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape

    @property
    def key(self) -> Tuple[str, int]:
        return (self.volume_id, self.slice_index)

    def validate(self, source: Optional[str] = None) -> "Slice":
        """Check shape and binarity invariants, raising DatasetError naming `source`"""
        if self.image.ndim != 2:
            raise DatasetError("image must be 2D, got shape {}".format(self.image.shape), source)
        rows, cols = self.image.shape
        if rows < MIN_SIDE or cols < MIN_SIDE:
            raise DatasetError("slice {}x{} is smaller than {}x{}".format(rows, cols, MIN_SIDE, MIN_SIDE), source)
        masks = [("target_mask", self.target_mask)]
        if self.lung_mask is not None:
            masks.append(("lung_mask", self.lung_mask))
        for name, mask in masks:
            if mask.shape != self.image.shape:
                raise DatasetError("{} shape {} does not match image shape {}".format(
                    name, mask.shape, self.image.shape), source)
            if not _is_binary(mask):
                raise DatasetError("{} is not binary (values {})".format(
                    name, sorted(np.unique(mask).tolist())[:8]), source)
        if self.slice_index < 0:
            raise DatasetError("negative slice_index {}".format(self.slice_index), source)
        return self


@dataclass(frozen=True)
class Dataset:
    """Train/val/test splits of slices plus their normalization constants"""
    train: Tuple[Slice, ...]
    val: Tuple[Slice, ...]
    test: Tuple[Slice, ...]
    mu: float = DEFAULT_MU
    sigma: float = DEFAULT_SIGMA
    name: str = "dataset"
    source: Optional[str] = field(default=None, compare=False)

    def split(self, name: str) -> Tuple[Slice, ...]:
        if name not in SPLITS:
            raise ConfigurationError("unknown split {!r}".format(name))
        return getattr(self, name)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.train[0].shape

    def validate(self) -> "Dataset":
        for split_name in SPLITS:
            slices = self.split(split_name)
            if not slices:
                raise DatasetError("empty split: {}".format(split_name), self.source)
            shapes = {s.shape for s in slices}
            if len(shapes) > 1:
                raise DatasetError("split {} mixes shapes {}".format(split_name, sorted(shapes)), self.source)
        train_keys = {s.key for s in self.train}
        val_keys = {s.key for s in self.val}
        test_keys = {s.key for s in self.test}
        overlap = (train_keys & val_keys) | (test_keys & (train_keys | val_keys))
        if overlap:
            raise DatasetError("splits share slices {}".format(sorted(overlap)[:3]), self.source)
        if self.sigma <= 0:
            raise DatasetError("normalization sigma must be positive", self.source)
        return self

    def check_experiment(self, experiment: ExperimentKind) -> None:
        if not experiment.needs_lung_mask:
            return
        for split_name in SPLITS:
            for s in self.split(split_name):
                if s.lung_mask is None:
                    raise ConfigurationError("{} needs lung masks; slice {}/{} of {} has none".format(
                        experiment.slug, s.volume_id, s.slice_index, self.name))


@dataclass(frozen=True)
class SyntheticSpec:
    n_slices: int
    shape: Tuple[int, int] = (64, 64)
    seed: int = 0
    balanced: bool = False


# Preprocessing

def normalize(slice_: Slice, mu: float, sigma: float) -> Slice:
    """image' = (image - mu) / sigma in float64; masks and metadata untouched"""
    if not sigma > 0:
        raise InvalidParameterError("sigma must be > 0, got {}".format(sigma))
    image = (np.asarray(slice_.image, dtype=np.float64) - mu) / sigma
    return replace(slice_, image=image)


def merge_positive_classes(mask: np.ndarray) -> np.ndarray:
    """Collapse integer labels {0..K} to a binary uint8 mask"""
    return (np.asarray(mask) > 0).astype(np.uint8)


def resize(image: np.ndarray, target: Tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resample a 2D grid to `target`.

    `nearest` picks source index floor(i * n_in / n_out) and preserves the value set;
    `bilinear` uses half-pixel centers and is exact on constants.
    """
    rows, cols = int(target[0]), int(target[1])
    if rows < 1 or cols < 1:
        raise InvalidParameterError("target dims must be >= 1, got {}".format(target))
    image = np.asarray(image)
    if image.ndim != 2:
        raise InvalidParameterError("resize expects a 2D grid, got shape {}".format(image.shape))
    if image.shape == (rows, cols):
        return image.copy()
    if mode == "nearest":
        r_index = (np.arange(rows) * image.shape[0]) // rows
        c_index = (np.arange(cols) * image.shape[1]) // cols
        return image[np.ix_(r_index, c_index)].copy()
    if mode == "bilinear":
        out = bilinear_matrix(image.shape[0], rows) @ image.astype(np.float64) @ bilinear_matrix(image.shape[1], cols).T
        return out.astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64)
    raise InvalidParameterError("unknown resize mode {!r}".format(mode))


def resize_slice(slice_: Slice, target: Tuple[int, int]) -> Slice:
    return replace(
        slice_,
        image=resize(slice_.image, target, "bilinear"),
        target_mask=resize(slice_.target_mask, target, "nearest"),
        lung_mask=None if slice_.lung_mask is None else resize(slice_.lung_mask, target, "nearest"),
    )


def apply_lung_gate(slice_: Slice) -> Slice:
    """Zero the image outside the lung mask"""
    if slice_.lung_mask is None:
        raise ConfigurationError("slice {}/{} has no lung mask to gate with".format(
            slice_.volume_id, slice_.slice_index))
    return replace(slice_, image=slice_.image * slice_.lung_mask)


def select_target(slice_: Slice, experiment: ExperimentKind) -> Tuple[np.ndarray, np.ndarray]:
    """Input image and target mask for an experiment, both fresh copies"""
    if experiment is ExperimentKind.LUNG_SEGMENTATION:
        if slice_.lung_mask is None:
            raise ConfigurationError("lung segmentation needs a lung mask on slice {}/{}".format(
                slice_.volume_id, slice_.slice_index))
        return np.array(slice_.image, copy=True), np.array(slice_.lung_mask, copy=True)
    if experiment is ExperimentKind.LESION_SEGMENTATION_B:
        gated = apply_lung_gate(slice_)
        return np.array(gated.image, copy=True), np.array(slice_.target_mask, copy=True)
    return np.array(slice_.image, copy=True), np.array(slice_.target_mask, copy=True)


# Loading and writing

def load_dataset(manifest_path: PathLike) -> Dataset:
    """Read a dataset manifest and every SEGB file it references.

    Paths in the manifest are relative to the manifest's directory. An optional
    "resize": [rows, cols] entry resamples every slice on load.

    Raises:
        DatasetError: Missing or malformed files, invalid slices, empty or overlapping splits.
    """
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
    except FileNotFoundError:
        raise DatasetError("missing manifest", manifest_path) from None
    except json.JSONDecodeError as e:
        raise DatasetError("malformed manifest ({})".format(e), manifest_path) from None

    base = manifest_path.parent
    normalization = manifest.get("normalization", {})
    target_shape = manifest.get("resize")
    splits = manifest.get("splits")
    if not isinstance(splits, dict):
        raise DatasetError("manifest has no splits", manifest_path)

    loaded: Dict[str, List[Slice]] = {}
    for split_name in SPLITS:
        entries = splits.get(split_name) or []
        if not entries:
            raise DatasetError("empty split: {}".format(split_name), manifest_path)
        slices = []
        for entry in entries:
            s = _load_entry(base, entry, manifest_path)
            if target_shape:
                s = resize_slice(s, tuple(target_shape))
            slices.append(s)
        loaded[split_name] = slices

    dataset = Dataset(
        train=tuple(loaded["train"]), val=tuple(loaded["val"]), test=tuple(loaded["test"]),
        mu=float(normalization.get("mu", DEFAULT_MU)), sigma=float(normalization.get("sigma", DEFAULT_SIGMA)),
        name=str(manifest.get("name", manifest_path.parent.name)), source=str(manifest_path),
    ).validate()
    log_event(logger, "dataset_loaded", name=dataset.name, train=len(dataset.train),
              val=len(dataset.val), test=len(dataset.test), shape=list(dataset.shape))
    return dataset


def _load_entry(base: Path, entry: Dict, manifest_path: Path) -> Slice:
    try:
        image_path = base / entry["image"]
        mask_path = base / entry["target_mask"]
        volume_id = str(entry["volume_id"])
        slice_index = int(entry["slice_index"])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError("malformed slice entry {!r} ({})".format(entry, e), manifest_path) from None
    image = read_slice_file(image_path, DTYPE_IMAGE)
    mask = read_slice_file(mask_path, DTYPE_MASK)
    lung = None
    if entry.get("lung_mask"):
        lung_path = base / entry["lung_mask"]
        lung = read_slice_file(lung_path, DTYPE_MASK)
        Slice(image, lung, None, volume_id, slice_index).validate(str(lung_path))
    return Slice(image, mask, lung, volume_id, slice_index).validate(str(mask_path))


def write_dataset(dataset: Dataset, out_dir: PathLike) -> Path:
    """Write every slice as SEGB files plus a manifest.json; returns the manifest path"""
    out_dir = Path(out_dir)
    splits = {}
    for split_name in SPLITS:
        folder = out_dir / split_name
        folder.mkdir(parents=True, exist_ok=True)
        entries = []
        for position, s in enumerate(dataset.split(split_name)):
            stem = "{:04d}".format(position)
            entry = {"image": "{}/{}_image.segb".format(split_name, stem),
                     "target_mask": "{}/{}_mask.segb".format(split_name, stem)}
            write_slice_file(out_dir / entry["image"], s.image, DTYPE_IMAGE)
            write_slice_file(out_dir / entry["target_mask"], s.target_mask, DTYPE_MASK)
            if s.lung_mask is not None:
                entry["lung_mask"] = "{}/{}_lung.segb".format(split_name, stem)
                write_slice_file(out_dir / entry["lung_mask"], s.lung_mask, DTYPE_MASK)
            entry["volume_id"] = s.volume_id
            entry["slice_index"] = s.slice_index
            entries.append(entry)
        splits[split_name] = entries
    manifest = {"name": dataset.name, "normalization": {"mu": dataset.mu, "sigma": dataset.sigma}, "splits": splits}
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8", newline="") as handle:
        json.dump(manifest, handle, indent=2)
        handle.write("\n")
    return path


# Synthetic data

BODY_HU = 40.0
LUNG_HU = -850.0
LESION_HU = -300.0
AIR_HU = -1000.0
NOISE_HU = 20.0
EMPTY_SLICE_RATE = 0.25


def split_sizes(n_slices: int) -> Tuple[int, int, int]:
    """(train, val, test): a fifth held out for test, then 80/20 train/val"""
    n_test = max(1, n_slices // 5)
    rest = n_slices - n_test
    n_val = max(1, int(round(0.2 * rest)))
    return rest - n_val, n_val, n_test


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic chest-like phantom slices.

    Each slice is a soft-tissue body ellipse holding two air-filled lung ellipses; lesion
    blobs with labels 1..3 sit inside the lungs and are merged to one class. About a
    quarter of the slices carry no lesion. `balanced` makes lesions large.

    Raises:
        InvalidParameterError: Fewer than 3 slices or a side below 8 pixels.
    """
    if spec.n_slices < 3:
        raise InvalidParameterError("n_slices must be >= 3 (one per split), got {}".format(spec.n_slices))
    rows, cols = _as_shape(spec.shape)
    if rows < MIN_SIDE or cols < MIN_SIDE:
        raise InvalidParameterError("shape must be at least {}x{}".format(MIN_SIDE, MIN_SIDE))

    root = RngStream(spec.seed)
    slices = [_phantom(root.split(i).generator(), rows, cols, spec.balanced) for i in range(spec.n_slices)]
    n_train, n_val, _ = split_sizes(spec.n_slices)
    groups = {"train": slices[:n_train], "val": slices[n_train:n_train + n_val], "test": slices[n_train + n_val:]}
    splits = {}
    for split_name, members in groups.items():
        splits[split_name] = tuple(
            Slice(image, lesion, lung, "{}-{}".format(split_name, i // 4), i % 4).validate()
            for i, (image, lesion, lung) in enumerate(members))
    return Dataset(name="synthetic-{}".format(spec.seed), **splits).validate()


def _as_shape(shape) -> Tuple[int, int]:
    if isinstance(shape, int):
        return shape, shape
    rows, cols = shape
    return int(rows), int(cols)


def _phantom(gen: np.random.Generator, rows: int, cols: int, balanced: bool):
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, rows), np.linspace(-1.0, 1.0, cols), indexing="ij")

    def ellipse(cy, cx, ry, rx):
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    jitter = lambda: gen.uniform(-0.05, 0.05)
    body = ellipse(jitter(), jitter(), 0.85 + jitter(), 0.92 + jitter())
    lung_ry, lung_rx = 0.5 + jitter(), 0.26 + jitter() / 2
    lungs = (ellipse(jitter(), -0.4 + jitter(), lung_ry, lung_rx)
             | ellipse(jitter(), 0.4 + jitter(), lung_ry, lung_rx)) & body

    labels = np.zeros((rows, cols), dtype=np.int64)
    lung_pixels = np.argwhere(lungs)
    if gen.random() >= EMPTY_SLICE_RATE and len(lung_pixels):
        radius_range = (0.12, 0.22) if balanced else (0.03, 0.08)
        for _ in range(int(gen.integers(1, 4))):
            cy_i, cx_i = lung_pixels[gen.integers(len(lung_pixels))]
            radius = gen.uniform(*radius_range)
            blob = ellipse(yy[cy_i, cx_i], xx[cy_i, cx_i], radius * gen.uniform(0.7, 1.3), radius)
            labels[blob & lungs] = int(gen.integers(1, 4))
    lesion = merge_positive_classes(labels) * lungs

    image = np.full((rows, cols), AIR_HU, dtype=np.float64)
    image[body] = BODY_HU
    image[lungs] = LUNG_HU
    image[lesion.astype(bool)] = LESION_HU + 40.0 * (labels[lesion.astype(bool)] - 2)
    image += gen.normal(0.0, NOISE_HU, size=image.shape)
    return image.astype(np.float32), lesion.astype(np.uint8), lungs.astype(np.uint8)


def _is_binary(mask: np.ndarray) -> bool:
    values = np.unique(mask)
    return bool(np.all((values == 0) | (values == 1)))


def describe_experiment_slices(slices: Sequence[Slice], experiment: ExperimentKind) -> Dict[str, float]:
    """Mean target coverage, used in dataset summaries"""
    if not slices:
        return {"slices": 0, "coverage": math.nan}
    coverage = [float(select_target(s, experiment)[1].mean()) for s in slices]
    return {"slices": len(slices), "coverage": float(np.mean(coverage))}
