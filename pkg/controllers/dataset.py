import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
from database.operations import tree_digest
from models.dataio import (Dataset, ExperimentKind, SyntheticSpec, describe_experiment_slices, generate_synthetic,
                           load_dataset, write_dataset)
from utils.errors import ConfigurationError
from utils.logging_utils import log_event

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DatasetController:
    """Creates, loads and summarizes paired slice datasets on disk"""

    def generate(self, n_slices: int, shape: Tuple[int, int], seed: int, balanced: bool,
                 out_dir: PathLike) -> Path:
        """Generate a synthetic dataset and write it as SEGB files plus manifest.

        Args:
            n_slices (int): Total slices over all splits (>= 3).
            shape (Tuple[int, int]): Slice rows and cols.
            seed (int): Generator seed; equal seeds give byte-identical directories.
            balanced (bool): Large lesions instead of small ones.
            out_dir (PathLike): Destination directory.

        Returns:
            Path: The written manifest.
        """
        dataset = generate_synthetic(SyntheticSpec(n_slices=n_slices, shape=shape, seed=seed, balanced=balanced))
        manifest = write_dataset(dataset, out_dir)
        log_event(logger, "synthetic_generated", out=str(out_dir), slices=n_slices, seed=seed,
                  train=len(dataset.train), val=len(dataset.val), test=len(dataset.test))
        return manifest

    def load(self, manifest_path: PathLike) -> Dataset:
        return load_dataset(manifest_path)

    def digest(self, manifest_path: PathLike) -> str:
        """Content digest of the directory holding a dataset manifest"""
        return tree_digest(Path(manifest_path).parent)

    def summary(self, dataset: Dataset) -> Dict[str, Any]:
        """Split sizes and mean target coverage per experiment"""
        info: Dict[str, Any] = {"name": dataset.name, "shape": list(dataset.shape),
                                "train": len(dataset.train), "val": len(dataset.val), "test": len(dataset.test)}
        for experiment in ExperimentKind:
            try:
                dataset.check_experiment(experiment)
            except ConfigurationError:
                continue
            info[experiment.slug + "-coverage"] = describe_experiment_slices(dataset.train, experiment)["coverage"]
        return info

    def resolve_manifest(self, path: PathLike) -> Optional[Path]:
        """Accept a manifest file or a directory containing manifest.json"""
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return path if path.is_file() else None
