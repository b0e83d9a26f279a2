import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from controllers.dataset import DatasetController
from database.operations import RunManifest, RunStore
from models.architectures import load_model
from models.dataio import Dataset, ExperimentKind, normalize
from models.metrics import GROUP_FIELDS, METRIC_NAMES, AggregateRow, MetricsRecord, aggregate, binarize
from models.report import (compute_histogram, dice_vs_params, dump_weight_grid, stack_volume, write_histogram,
                           write_loss_curves, write_lesion_difference, write_overlay, write_scatter)
from models.training import prepare_split, predict
from utils.errors import InvalidParameterError, UndefinedCorrelationError
from utils.logging_utils import log_event

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SORTABLE = METRIC_NAMES + ("params_millions", "train_s_per_batch", "val_s_per_batch") + GROUP_FIELDS
OVERLAYS_PER_CELL = 4


class ReportController:
    """Builds analysis artifacts from a finished run directory"""

    def __init__(self, dataset_controller: Optional[DatasetController] = None):
        self.datasets = dataset_controller or DatasetController()

    def load_records(self, run_dir: PathLike) -> List[MetricsRecord]:
        return [MetricsRecord.from_row(row) for row in RunStore(run_dir).read_metrics()]

    def aggregates(self, records: Sequence[MetricsRecord],
                   group_by: Union[str, Sequence[str]] = ("experiment", "weight_init")) -> List[AggregateRow]:
        return aggregate(records, group_by)

    def sort_records(self, records: Sequence[MetricsRecord], sort_by: str,
                     ascending: bool = True) -> List[MetricsRecord]:
        """Sort records on a metric or label column.

        Args:
            records (Sequence[MetricsRecord]): Records to sort.
            sort_by (str): Column name, e.g. "dice" or "architecture".
            ascending (bool, optional): Sort order. Defaults to True.

        Returns:
            List[MetricsRecord]: Sorted copy; failed records keep their relative order at the end.
        """
        if sort_by not in SORTABLE:
            raise InvalidParameterError("cannot sort by {!r}".format(sort_by))
        ok = sorted((r for r in records if r.ok), key=lambda r: getattr(r, sort_by), reverse=not ascending)
        return ok + [r for r in records if not r.ok]

    def filter_records(self, records: Sequence[MetricsRecord], filter_by: str, value: str) -> List[MetricsRecord]:
        if filter_by not in GROUP_FIELDS + ("status",):
            raise InvalidParameterError("cannot filter by {!r}".format(filter_by))
        return [r for r in records if getattr(r, filter_by) == value]

    def generate(self, run_dir: PathLike, histograms: bool = True, scatter: bool = True, weights: bool = True,
                 volumes: bool = False, overlays: bool = False, weight_layer: Optional[str] = None
                 ) -> Dict[str, List[Path]]:
        """Write the selected artifacts under <run>/report/.

        Always writes the lesion gating difference and loss-curve CSVs. Cells whose
        checkpoints are missing are skipped with a warning.

        Returns:
            Dict[str, List[Path]]: Artifact kind -> files written.

        Raises:
            ConfigurationError: run_dir is not a finished run.
        """
        store = RunStore(run_dir)
        manifest = store.read_manifest()
        records = self.load_records(run_dir)
        out = store.report_dir()
        written: Dict[str, List[Path]] = OrderedDict()

        if histograms:
            written["histograms"] = self._histograms(manifest, out)
        if scatter:
            written["scatter"] = self._scatter(records, out)
        if weights:
            written["weights"] = self._weights(store, manifest, records, out, weight_layer)
        if volumes or overlays:
            written.update(self._predictions(store, manifest, records, out, volumes, overlays))

        path = out / "lesion_gating_difference.csv"
        write_lesion_difference(records, path)
        written["lesion_difference"] = [path]
        logs = []
        for entry, record in zip(manifest.matrix, records):
            if record.ok and store.epoch_log_path(entry["cell_id"]).is_file():
                logs.append((record, store.read_epoch_log(entry["cell_id"])))
        path = out / "loss_curves.csv"
        write_loss_curves(logs, path)
        written["loss_curves"] = [path]

        log_event(logger, "report_written", run=str(run_dir), **{k: len(v) for k, v in written.items()})
        return written

    def _histograms(self, manifest: RunManifest, out: Path) -> List[Path]:
        paths = []
        for experiment, dataset_path in manifest.dataset_paths.items():
            dataset = self.datasets.load(dataset_path)
            normalized = [normalize(s, dataset.mu, dataset.sigma) for s in dataset.train]
            for source, slices in (("images", normalized), ("masks", dataset.train)):
                path = out / "histogram-{}-{}.csv".format(experiment, source)
                write_histogram(compute_histogram(slices, source), path)
                paths.append(path)
        return paths

    def _scatter(self, records: Sequence[MetricsRecord], out: Path) -> List[Path]:
        try:
            correlation = dice_vs_params(records)
        except (InvalidParameterError, UndefinedCorrelationError) as e:
            log_event(logger, "scatter_skipped", level=logging.WARNING, reason=str(e))
            return []
        path = out / "dice_vs_params.csv"
        write_scatter(correlation, path)
        note = out / "dice_vs_params.txt"
        note.write_text(correlation.note + "\n", encoding="utf-8")
        log_event(logger, "correlation", pearson_r=correlation.pearson_r, n=correlation.n)
        return [path, note]

    def _weights(self, store: RunStore, manifest: RunManifest, records: Sequence[MetricsRecord], out: Path,
                 layer: Optional[str]) -> List[Path]:
        paths = []
        for entry, record in zip(manifest.matrix, records):
            checkpoint = store.checkpoint_path(entry["cell_id"])
            if not record.ok or not checkpoint.is_file():
                continue
            _, params, _ = load_model(checkpoint)
            name = layer or next(n for n in params.names() if params[n].value.ndim == 4)
            path = out / "weights" / "{}.pgm".format(entry["cell_id"])
            dump_weight_grid(params, name, path)
            paths.append(path)
        return paths

    def _predictions(self, store: RunStore, manifest: RunManifest, records: Sequence[MetricsRecord], out: Path,
                     volumes: bool, overlays: bool) -> Dict[str, List[Path]]:
        """Test-set predictions of the best ok cell per experiment as voxel stacks and overlays"""
        written: Dict[str, List[Path]] = {"volumes": [], "overlays": []}
        best: Dict[str, Tuple[Dict, MetricsRecord]] = OrderedDict()
        for entry, record in zip(manifest.matrix, records):
            if record.ok and store.checkpoint_path(entry["cell_id"]).is_file():
                if record.experiment not in best or record.dice > best[record.experiment][1].dice:
                    best[record.experiment] = (entry, record)
        for experiment, (entry, _) in best.items():
            dataset = self.datasets.load(manifest.dataset_paths[experiment])
            model, _, _ = load_model(store.checkpoint_path(entry["cell_id"]))
            kind = ExperimentKind.parse(experiment)
            images, targets = prepare_split(dataset.test, kind, dataset.mu, dataset.sigma)
            masks = binarize(predict(model, images, batch_size=4))
            if volumes:
                written["volumes"].extend(self._volumes(dataset, masks, out, entry["cell_id"]))
            if overlays:
                for i in range(min(OVERLAYS_PER_CELL, len(images))):
                    path = out / "overlays" / "{}-{:03d}.ppm".format(entry["cell_id"], i)
                    write_overlay(path, images[i], masks[i], targets[i])
                    written["overlays"].append(path)
        return written

    def _volumes(self, dataset: Dataset, masks: np.ndarray, out: Path, cell: str) -> List[Path]:
        by_volume: Dict[str, List[int]] = OrderedDict()
        for i, s in enumerate(dataset.test):
            by_volume.setdefault(s.volume_id, []).append(i)
        paths = []
        for volume_id, members in by_volume.items():
            path = out / "volumes" / "{}-{}.segb".format(cell, volume_id)
            try:
                stack_volume([masks[i] for i in members], [dataset.test[i].slice_index for i in members], path)
            except InvalidParameterError as e:
                log_event(logger, "volume_skipped", level=logging.WARNING, volume=volume_id, reason=str(e))
                continue
            paths.append(path)
        return paths

