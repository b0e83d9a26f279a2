"""Analysis artifacts derived from finished runs: histograms, correlation, key/value
summaries, weight grids, voxel stacks and a few plot-ready CSVs."""
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import numpy as np
from database.images import write_pgm, write_ppm
from database.operations import write_csv
from database.segb import write_volume_file
from models.dataio import Slice
from models.metrics import AggregateRow, MetricsRecord, aggregate
from models.nnprims import ParamStore
from utils.errors import ConfigurationError, InvalidParameterError, ShapeError, UndefinedCorrelationError

PathLike = Union[str, Path]

DEFAULT_BINS = 100
WEIGHT_CLIP = (-0.4, 0.4)
SCATTER_HEADER = ["params_millions", "dice"]


@dataclass
class Histogram:
    bin_edges: np.ndarray
    frequencies: np.ndarray
    source: str

    def rows(self) -> List[List[str]]:
        return [["{:.6f}".format(lo), "{:.6f}".format(hi), "{:.10f}".format(f)]
                for lo, hi, f in zip(self.bin_edges[:-1], self.bin_edges[1:], self.frequencies)]


def compute_histogram(slices: Sequence[Slice], source: str = "images", n_bins: int = DEFAULT_BINS,
                      value_range: Optional[Tuple[float, float]] = None) -> Histogram:
    """Pooled pixel histogram over slices, frequencies normalized to sum 1.

    source "images" uses slice images as given (normalize first for normalized
    intensities); "masks" uses target masks. The range defaults to the observed min/max.
    """
    if not slices:
        raise InvalidParameterError("histogram needs at least one slice")
    if n_bins < 1:
        raise InvalidParameterError("n_bins must be >= 1")
    if source == "images":
        values = np.concatenate([np.asarray(s.image, dtype=np.float64).ravel() for s in slices])
    elif source == "masks":
        values = np.concatenate([np.asarray(s.target_mask, dtype=np.float64).ravel() for s in slices])
    else:
        raise InvalidParameterError("source must be images or masks, got {!r}".format(source))
    if value_range is None:
        value_range = (float(values.min()), float(values.max()))
    counts, edges = np.histogram(values, bins=n_bins, range=value_range)
    return Histogram(bin_edges=edges, frequencies=counts / counts.sum(), source=source)


def write_histogram(histogram: Histogram, path: PathLike) -> None:
    write_csv(path, histogram.rows(), ["bin_left", "bin_right", "frequency"])


@dataclass
class Correlation:
    points: List[Tuple[float, float]]
    pearson_r: float
    n: int

    @property
    def note(self) -> str:
        return "pearson r={:.4f} over n={} cells; no significance test".format(self.pearson_r, self.n)


def dice_vs_params(records: Iterable[MetricsRecord]) -> Correlation:
    """Pearson correlation between parameter count and Dice over ok records.

    Raises:
        InvalidParameterError: Fewer than 3 ok records.
        UndefinedCorrelationError: Either coordinate has zero variance.
    """
    points = [(r.params_millions, r.dice) for r in records if r.ok]
    if len(points) < 3:
        raise InvalidParameterError("correlation needs at least 3 ok records, got {}".format(len(points)))
    data = np.array(points, dtype=np.float64)
    if np.ptp(data[:, 0]) == 0 or np.ptp(data[:, 1]) == 0:
        raise UndefinedCorrelationError("zero variance in {}".format(
            "params" if np.ptp(data[:, 0]) == 0 else "dice"))
    r = float(np.corrcoef(data[:, 0], data[:, 1])[0, 1])
    return Correlation(points=points, pearson_r=r, n=len(points))


def write_scatter(correlation: Correlation, path: PathLike) -> None:
    write_csv(path, (["{:.6f}".format(p), "{:.2f}".format(d)] for p, d in correlation.points), SCATTER_HEADER)


# Key/value summary

@dataclass
class KeyAggregates:
    """The groupings the key/value summary is built from"""
    by_experiment_init: List[AggregateRow]
    by_experiment_architecture_init: List[AggregateRow]
    by_init: List[AggregateRow]
    by_encoder: List[AggregateRow]


def key_aggregates(records: Sequence[MetricsRecord]) -> KeyAggregates:
    random_ok = [r for r in records if r.ok and r.weight_init == "random"]
    return KeyAggregates(
        by_experiment_init=aggregate(records, ("experiment", "weight_init")),
        by_experiment_architecture_init=aggregate(records, ("experiment", "architecture", "weight_init")),
        by_init=aggregate(records, "weight_init"),
        by_encoder=aggregate(random_ok or records, "encoder"),
    )


def best_cells(records: Sequence[MetricsRecord]) -> "OrderedDict[Tuple[str, str], MetricsRecord]":
    """Highest-Dice ok record per (experiment, init); ties keep the earlier record"""
    best: "OrderedDict[Tuple[str, str], MetricsRecord]" = OrderedDict()
    for record in records:
        if not record.ok:
            continue
        key = (record.experiment, record.weight_init)
        if key not in best or record.dice > best[key].dice:
            best[key] = record
    return best


def _slug(name: str) -> str:
    return name.lower().replace(" ", "-")


def _value(v: float) -> str:
    return "{:.10f}".format(v)


def keys_values(aggregates: KeyAggregates, best: Dict[Tuple[str, str], MetricsRecord],
                extras: Optional[Dict[str, object]] = None) -> List[Tuple[str, str]]:
    """Ordered (key, value) pairs; Dice statistics are percentages"""
    pairs: List[Tuple[str, str]] = []
    for row in aggregates.by_experiment_init:
        experiment, init = row.key
        pairs.extend(_stat_keys("{}-{}".format(experiment, init), row))
        for arch_row in aggregates.by_experiment_architecture_init:
            exp2, architecture, init2 = arch_row.key
            if (exp2, init2) == (experiment, init):
                pairs.extend(_stat_keys("{}-{}-{}".format(experiment, _slug(architecture), init), arch_row))
        winner = best.get((experiment, init))
        if winner is not None:
            pairs.append(("{}-architecture-{}-index-max".format(experiment, init), winner.architecture))
            pairs.append(("{}-encoder-{}-index-max".format(experiment, init), winner.encoder))
    for row in aggregates.by_init:
        pairs.append(("{}-mean".format(row.key[0]), _value(row.mean["dice"])))
        pairs.append(("{}-std".format(row.key[0]), _value(row.std["dice"])))
    if aggregates.by_encoder:
        ranked = sorted(aggregates.by_encoder, key=lambda r: -r.mean["dice"])
        pairs.append(("encoder-best", ranked[0].key[0]))
        pairs.append(("encoder-worst", ranked[-1].key[0]))
    for key, value in (extras or {}).items():
        pairs.append((key, str(value)))
    return pairs


def _stat_keys(prefix: str, row: AggregateRow) -> List[Tuple[str, str]]:
    return [(prefix + "-mean", _value(row.mean["dice"])),
            (prefix + "-std", _value(row.std["dice"])),
            (prefix + "-max", _value(row.summary["dice"].maximum))]


def emit_keys_values(aggregates: KeyAggregates, best: Dict[Tuple[str, str], MetricsRecord], path: PathLike,
                     extras: Optional[Dict[str, object]] = None) -> List[Tuple[str, str]]:
    """Write the two-column key,value CSV (no header)"""
    pairs = keys_values(aggregates, best, extras)
    write_csv(path, pairs)
    return pairs


# Weight grid

def weight_grid(store: ParamStore, layer_name: str, clip: Tuple[float, float] = WEIGHT_CLIP) -> np.ndarray:
    """uint8 mosaic with one tile per output filter of a 4D weight.

    A tile lays the filter's input channels side by side; values are clipped to `clip`
    and mapped linearly onto 0..255. Tiles are separated by one black pixel.
    """
    name = layer_name if layer_name in store else layer_name + ".weight"
    if name not in store:
        raise ConfigurationError("no layer named {!r}".format(layer_name))
    weights = store[name].value
    if weights.ndim != 4:
        raise ShapeError("{} is not a 4D convolution weight (shape {})".format(name, weights.shape))
    lo, hi = clip
    if not hi > lo:
        raise InvalidParameterError("clip range must be increasing")
    out_channels, in_channels, kh, kw = weights.shape
    scaled = np.floor((np.clip(weights.astype(np.float64), lo, hi) - lo) / (hi - lo) * 255.0 + 0.5)
    tiles = scaled.transpose(0, 2, 1, 3).reshape(out_channels, kh, in_channels * kw).astype(np.uint8)
    grid_cols = int(math.ceil(math.sqrt(out_channels)))
    grid_rows = int(math.ceil(out_channels / grid_cols))
    tile_h, tile_w = kh, in_channels * kw
    mosaic = np.zeros((grid_rows * (tile_h + 1) - 1, grid_cols * (tile_w + 1) - 1), dtype=np.uint8)
    for o in range(out_channels):
        r, c = divmod(o, grid_cols)
        mosaic[r * (tile_h + 1):r * (tile_h + 1) + tile_h, c * (tile_w + 1):c * (tile_w + 1) + tile_w] = tiles[o]
    return mosaic


def dump_weight_grid(store: ParamStore, layer_name: str, path: PathLike,
                     clip: Tuple[float, float] = WEIGHT_CLIP) -> np.ndarray:
    mosaic = weight_grid(store, layer_name, clip)
    write_pgm(path, mosaic)
    return mosaic


# Volumes and overlays

def stack_volume(masks: Sequence[np.ndarray], slice_indices: Sequence[int], path: Optional[PathLike] = None) -> np.ndarray:
    """Stack predicted masks along z by slice index and optionally write SEGB-3D.

    Raises:
        InvalidParameterError: No masks, or indices not contiguous.
        ShapeError: Masks differ in shape.
    """
    if not len(masks):
        raise InvalidParameterError("no masks to stack")
    if len(masks) != len(slice_indices):
        raise InvalidParameterError("{} masks for {} slice indices".format(len(masks), len(slice_indices)))
    order = np.argsort(np.asarray(slice_indices), kind="stable")
    indices = [int(slice_indices[i]) for i in order]
    if indices != list(range(indices[0], indices[0] + len(indices))):
        raise InvalidParameterError("slice indices are not contiguous: {}".format(indices))
    shapes = {np.asarray(m).shape for m in masks}
    if len(shapes) != 1:
        raise ShapeError("masks differ in shape: {}".format(sorted(shapes)))
    volume = np.stack([np.asarray(masks[i]) for i in order]).astype(np.uint8)
    if path is not None:
        write_volume_file(path, volume)
    return volume


def overlay(image: np.ndarray, prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """RGB grid: image in gray, true positives green, false positives/negatives red"""
    image = np.asarray(image, dtype=np.float64)
    span = np.ptp(image)
    gray = np.zeros_like(image) if span == 0 else (image - image.min()) / span
    rgb = np.repeat(np.floor(gray * 255.0 + 0.5)[..., None], 3, axis=2).astype(np.uint8)
    pred = np.asarray(prediction).astype(bool)
    truth = np.asarray(target).astype(bool)
    rgb[pred & truth] = (0, 255, 0)
    rgb[pred ^ truth] = (255, 0, 0)
    return rgb


def write_overlay(path: PathLike, image: np.ndarray, prediction: np.ndarray, target: np.ndarray) -> None:
    write_ppm(path, overlay(image, prediction, target))


# Supplementary CSVs

LESION_A = "lesion-segmentation-a"
LESION_B = "lesion-segmentation-b"


def lesion_gating_difference(records: Sequence[MetricsRecord]) -> List[List[str]]:
    """Dice of lesion B minus lesion A for each (architecture, encoder, init) present in both"""
    a = {(r.architecture, r.encoder, r.weight_init): r.dice for r in records if r.ok and r.experiment == LESION_A}
    rows = []
    for r in records:
        key = (r.architecture, r.encoder, r.weight_init)
        if r.ok and r.experiment == LESION_B and key in a:
            rows.append([*key, "{:.2f}".format(a[key]), "{:.2f}".format(r.dice), "{:.2f}".format(r.dice - a[key])])
    return rows


def write_lesion_difference(records: Sequence[MetricsRecord], path: PathLike) -> int:
    rows = lesion_gating_difference(records)
    write_csv(path, rows, ["architecture", "encoder", "weight_init", "dice_a", "dice_b", "difference"])
    return len(rows)


def loss_curves(logs: Sequence[Tuple[MetricsRecord, Sequence[Dict[str, str]]]]) -> List[List[str]]:
    """Mean/std of train and validation loss per (experiment, architecture, epoch).

    `logs` pairs each cell's record with its epoch-log rows.
    """
    grouped: "OrderedDict[Tuple[str, str, int], List[Tuple[float, float]]]" = OrderedDict()
    for record, rows in logs:
        for row in rows:
            key = (record.experiment, record.architecture, int(row["epoch"]))
            grouped.setdefault(key, []).append((float(row["train_loss"]), float(row["val_loss"])))
    out = []
    for (experiment, architecture, epoch), values in sorted(grouped.items(), key=lambda kv: kv[0]):
        data = np.array(values)
        std = data.std(axis=0, ddof=1) if len(data) > 1 else np.zeros(2)
        out.append([experiment, architecture, str(epoch), "{:.8f}".format(data[:, 0].mean()),
                    "{:.8f}".format(std[0]), "{:.8f}".format(data[:, 1].mean()), "{:.8f}".format(std[1])])
    return out


def write_loss_curves(logs, path: PathLike) -> int:
    rows = loss_curves(logs)
    write_csv(path, rows, ["experiment", "architecture", "epoch", "train_mean", "train_std", "val_mean", "val_std"])
    return len(rows)
