import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
from controllers.dataset import DatasetController
from database.operations import RunManifest, RunStore, config_digest
from models.architectures import (DEFAULT_WIDTH_SCALE, Architecture, EncoderFamily, ModelConfig, WeightInit,
                                  load_model)
from models.dataio import Dataset, ExperimentKind
from models.metrics import MetricsRecord
from models.nnprims import count_params
from models.report import best_cells, emit_keys_values, key_aggregates
from models.training import TrainConfig, cell_id, evaluate_slices, pretrain_encoder, record_labels, run_benchmark
from utils import TOOL_VERSION
from utils.errors import ConfigurationError
from utils.logging_utils import log_event, utc_timestamp
from utils.rng import RngStream
from utils.validators import BenchmarkConfigValidator

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEED_ENV = "SEGBENCH_SEED"
PRETRAIN_STREAM = 1_000_000
PRETRAIN_DIR = "pretrained"
SYNTHETIC_DIR = "data"
BASE_KEY = "_base"


@dataclass
class BenchmarkResult:
    records: List[MetricsRecord]
    manifest: RunManifest
    run_dir: Path

    @property
    def failed(self) -> int:
        return sum(1 for r in self.records if not r.ok)

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


class BenchmarkController:
    """Drives benchmark runs, checkpoint evaluation and encoder pretraining"""

    def __init__(self, dataset_controller: Optional[DatasetController] = None):
        self.datasets = dataset_controller or DatasetController()
        self.validator = BenchmarkConfigValidator()

    # Configuration

    def load_config(self, path: PathLike) -> Dict[str, Any]:
        """Read and validate a benchmark config.

        Raises:
            ConfigurationError: Missing file, invalid JSON, or a schema violation.
        """
        try:
            with open(path, "r", encoding="utf-8") as handle:
                config = json.load(handle)
        except FileNotFoundError:
            raise ConfigurationError("config file not found: {}".format(path)) from None
        except json.JSONDecodeError as e:
            raise ConfigurationError("{}: invalid JSON ({})".format(path, e)) from None
        return self.validate(config)

    def validate(self, config: Dict[str, Any]) -> Dict[str, Any]:
        is_valid, message = self.validator.validate_config(config)
        if not is_valid:
            raise ConfigurationError(message)
        return config

    def resolve_seed(self, config: Dict[str, Any]) -> Tuple[int, str]:
        """Global seed, with SEGBENCH_SEED taking precedence over the config"""
        value = os.environ.get(SEED_ENV)
        if value is not None and value.strip():
            try:
                seed = int(value)
            except ValueError:
                raise ConfigurationError("{} must be an integer, got {!r}".format(SEED_ENV, value)) from None
            log_event(logger, "seed_override", source=SEED_ENV, seed=seed, config_seed=config.get("seed", 0))
            return seed, "env"
        return int(config.get("seed", 0)), "config"

    def train_config(self, config: Dict[str, Any], seed: int, strict_repro: bool) -> TrainConfig:
        settings = dict(config.get("train", {}))
        settings["seed"] = seed
        settings["strict_repro"] = bool(strict_repro or settings.get("strict_repro", False))
        return TrainConfig.from_dict(settings)

    def resolve_datasets(self, config: Dict[str, Any], base: Path, out_dir: Path) -> Dict[str, str]:
        """experiment slug -> manifest path, generating synthetic data when requested"""
        if config.get("synthetic"):
            spec = config["synthetic"]
            shape = spec.get("shape", 64)
            shape = (shape, shape) if isinstance(shape, int) else tuple(shape)
            manifest = self.datasets.generate(spec["n_slices"], shape, int(spec.get("seed", 0)),
                                              bool(spec.get("balanced", False)), out_dir / SYNTHETIC_DIR)
            return {e: str(manifest) for e in config["experiments"]}
        if config.get("dataset"):
            paths = {e: config["dataset"] for e in config["experiments"]}
        else:
            paths = {e: config["datasets"][e] for e in config["experiments"]}
        resolved = {}
        for experiment, raw in paths.items():
            manifest = self.datasets.resolve_manifest(base / raw)
            if manifest is None:
                raise ConfigurationError("dataset for {} not found: {}".format(experiment, base / raw))
            resolved[experiment] = str(manifest.resolve())
        return resolved

    def encoder_specs(self, config: Dict[str, Any]) -> List[Tuple[EncoderFamily, float]]:
        default_width = float(config.get("width_scale", DEFAULT_WIDTH_SCALE))
        specs = []
        for entry in config["encoders"]:
            if isinstance(entry, dict):
                specs.append((EncoderFamily.parse(entry["family"]), float(entry.get("width_scale", default_width))))
            else:
                specs.append((EncoderFamily.parse(entry), default_width))
        return specs

    def expand_matrix(self, config: Dict[str, Any], warmstart_paths: Dict[Tuple[EncoderFamily, float], str]
                      ) -> List[ModelConfig]:
        """Cells in experiment, architecture, encoder, init order"""
        matrix = []
        for experiment in config["experiments"]:
            for architecture in config["architectures"]:
                for family, width in self.encoder_specs(config):
                    for init in config["inits"]:
                        if init["kind"] == "warmstart":
                            weight_init = WeightInit("warmstart", int(init.get("seed", 0)),
                                                     warmstart_paths[(family, width)])
                        else:
                            weight_init = WeightInit("random", int(init.get("seed", 0)))
                        matrix.append(ModelConfig.create(ExperimentKind.parse(experiment),
                                                         Architecture.parse(architecture), family, width,
                                                         weight_init).validate())
        return matrix

    def warmstart_checkpoints(self, config: Dict[str, Any], base: Path, out_dir: Path, cfg: TrainConfig,
                              dataset_paths: Dict[str, str]) -> Dict[Tuple[EncoderFamily, float], str]:
        """Checkpoint per encoder for the warm-start arm, pretraining where none is configured"""
        warm = [i for i in config["inits"] if i["kind"] == "warmstart"]
        if not warm:
            return {}
        template = warm[0].get("checkpoint")
        paths = {}
        for k, (family, width) in enumerate(self.encoder_specs(config)):
            if (family, width) in paths:
                continue
            if template:
                path = base / template.format(encoder=family.value, width_scale="{:g}".format(width))
                if not path.is_file():
                    raise ConfigurationError("warm-start checkpoint not found: {}".format(path))
            else:
                path = out_dir / PRETRAIN_DIR / "{}-w{:g}.ckpt".format(family.value, width)
                self.pretrain_into(config, cfg, dataset_paths, family, width, path, k)
            paths[(family, width)] = str(path.resolve())
        return paths

    def pretrain_into(self, config: Dict[str, Any], cfg: TrainConfig, dataset_paths: Dict[str, str],
                      family: EncoderFamily, width: float, path: Path, index: int) -> Path:
        settings = config.get("pretrain", {})
        experiment = settings.get("experiment", config["experiments"][0])
        source = dataset_paths.get(experiment) or next(iter(dataset_paths.values()))
        pretrain_cfg = TrainConfig.from_dict({**cfg.to_dict(), **{k: v for k, v in settings.items()
                                                                  if k in ("epochs", "batch_size", "lr")}})
        dataset = self.datasets.load(source)
        model_config = ModelConfig.create(ExperimentKind.parse(experiment), Architecture.UNET, family, width)
        pretrain_encoder(dataset, model_config, pretrain_cfg, path, RngStream(cfg.seed, [PRETRAIN_STREAM, index]))
        return path

    # Commands

    def run(self, out_dir: PathLike, config_path: Optional[PathLike] = None,
            manifest_path: Optional[PathLike] = None, jobs: int = 1, strict_repro: bool = False) -> BenchmarkResult:
        """Run a benchmark from a config, or re-run one from a previous run manifest.

        Writes metrics.csv, keys-values.csv, per-cell checkpoints and epoch logs and the run
        manifest under out_dir.

        Raises:
            ConfigurationError: Invalid config/manifest or unusable datasets.
        """
        out_dir = Path(out_dir)
        if manifest_path is not None:
            previous = RunStore(Path(manifest_path).parent if Path(manifest_path).is_file()
                                else manifest_path).read_manifest()
            config = self.validate({k: v for k, v in previous.config.items() if k != BASE_KEY})
            if config_digest(config) != previous.config_digest:
                raise ConfigurationError("run manifest config does not match its recorded digest")
            seed, seed_source = previous.seed, previous.seed_source
            strict_repro = strict_repro or previous.strict_repro
            base = Path(previous.config.get(BASE_KEY, "."))
        elif config_path is not None:
            config = self.load_config(config_path)
            seed, seed_source = self.resolve_seed(config)
            base = Path(config_path).resolve().parent
            previous = None
        else:
            raise ConfigurationError("either a config or a run manifest is required")

        cfg = self.train_config(config, seed, strict_repro)
        store = RunStore(out_dir)
        store.create()
        dataset_paths = self.resolve_datasets(config, base, out_dir)
        digests = {e: self.datasets.digest(p) for e, p in dataset_paths.items()}
        if previous is not None and not config.get("synthetic"):
            changed = [e for e, d in digests.items() if previous.dataset_digests.get(e) != d]
            if changed:
                raise ConfigurationError("dataset content changed since the recorded run: {}".format(changed[0]))

        datasets: Dict[ExperimentKind, Dataset] = {}
        loaded: Dict[str, Dataset] = {}
        for experiment, path in dataset_paths.items():
            if path not in loaded:
                loaded[path] = self.datasets.load(path)
            kind = ExperimentKind.parse(experiment)
            loaded[path].check_experiment(kind)
            datasets[kind] = loaded[path]

        warmstart = self.warmstart_checkpoints(config, base, out_dir, cfg, dataset_paths)
        matrix = self.expand_matrix(config, warmstart)
        embedded = dict(config, **{BASE_KEY: str(base)})
        manifest = RunManifest(
            config=embedded, config_digest=config_digest(config), dataset_paths=dataset_paths,
            dataset_digests=digests,
            matrix=[{"index": i, "cell_id": cell_id(i, m), "model_config": m.to_dict()} for i, m in enumerate(matrix)],
            seed=seed, seed_source=seed_source, tool_version=TOOL_VERSION, strict_repro=cfg.strict_repro,
            jobs=jobs, started_at=utc_timestamp(),
            pretrain={"{}-w{:g}".format(f.value, w): p for (f, w), p in warmstart.items()},
        )
        store.write_manifest(manifest)
        log_event(logger, "run_started", out=str(out_dir), cells=len(matrix), seed=seed, jobs=jobs,
                  strict_repro=cfg.strict_repro)

        records = run_benchmark(matrix, datasets, cfg, jobs=jobs, out_dir=out_dir)
        store.write_metrics(r.to_row() for r in records)
        if any(r.ok for r in records):
            first = datasets[matrix[0].experiment]
            extras = {"num_slices_test": len(first.test), "num_epochs": cfg.epochs, "batch_size": cfg.batch_size}
            emit_keys_values(key_aggregates(records), best_cells(records), store.keys_values_path, extras)
        else:
            log_event(logger, "keys_values_skipped", level=logging.WARNING, reason="no ok records")

        manifest.finished_at = utc_timestamp()
        manifest.cells_failed = sum(1 for r in records if not r.ok)
        store.write_manifest(manifest)
        result = BenchmarkResult(records, manifest, out_dir)
        log_event(logger, "run_finished", out=str(out_dir), failed=result.failed, exit_code=result.exit_code)
        return result

    def evaluate(self, checkpoint: PathLike, dataset_path: PathLike, experiment: Optional[str] = None,
                 split: str = "test", threshold: float = 0.5, empty_rule: str = "lenient") -> MetricsRecord:
        """Score a saved checkpoint on one split without training; timings are reported as 0"""
        model, store, saved = load_model(checkpoint)
        manifest = self.datasets.resolve_manifest(dataset_path)
        if manifest is None:
            raise ConfigurationError("dataset not found: {}".format(dataset_path))
        dataset = self.datasets.load(manifest)
        kind = ExperimentKind.parse(experiment) if experiment else model.config.experiment
        dataset.check_experiment(kind)
        cfg = TrainConfig(threshold=threshold, empty_rule=empty_rule, batch_size=4).validate()
        sens, spec, dice = evaluate_slices(model, dataset.split(split), kind, dataset.mu, dataset.sigma, cfg)
        labels = record_labels(model.config)
        labels["experiment"] = kind.slug
        record = MetricsRecord.from_fractions(labels, sens, spec, dice, count_params(store), 0.0, 0.0)
        log_event(logger, "checkpoint_evaluated", checkpoint=str(checkpoint), split=split, dice=record.dice,
                  epoch=saved.epoch)
        return record

    def pretrain(self, dataset_path: PathLike, experiment: str, family: str, width_scale: float,
                 out_path: PathLike, settings: Optional[Dict[str, Any]] = None, seed: int = 0) -> Path:
        """Train a Unet on one dataset and save its encoder as a warm-start checkpoint"""
        manifest = self.datasets.resolve_manifest(dataset_path)
        if manifest is None:
            raise ConfigurationError("dataset not found: {}".format(dataset_path))
        is_valid, message = self.validator.validate_config({
            "experiments": [experiment], "architectures": ["unet"], "encoders": [family],
            "inits": [{"kind": "random"}], "dataset": str(manifest), "train": settings or {}})
        if not is_valid:
            raise ConfigurationError(message)
        cfg = TrainConfig.from_dict({**(settings or {}), "seed": seed})
        dataset = self.datasets.load(manifest)
        config = ModelConfig.create(ExperimentKind.parse(experiment), Architecture.UNET,
                                    EncoderFamily.parse(family), width_scale)
        pretrain_encoder(dataset, config, cfg, out_path, RngStream(seed, [PRETRAIN_STREAM]))
        return Path(out_path)


def failed_cells(result: BenchmarkResult) -> List[str]:
    return ["{}: {}".format(entry["cell_id"], record.error)
            for entry, record in zip(result.manifest.matrix, result.records) if not record.ok]
