import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union
from utils.errors import ConfigurationError
from utils.logging_utils import log_event

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METRICS_HEADER = ["experiment", "architecture", "encoder", "weight_init", "sens", "spec", "dice",
                  "params_millions", "train_s_per_batch", "val_s_per_batch", "status"]
EPOCH_LOG_HEADER = ["epoch", "train_loss", "val_loss", "train_s", "val_s"]

MANIFEST_FILE = "run_manifest.json"
METRICS_FILE = "metrics.csv"
KEYS_VALUES_FILE = "keys-values.csv"
CELLS_DIR = "runs"
REPORT_DIR = "report"
CHECKPOINT_FILE = "best.ckpt"
EPOCH_LOG_FILE = "epoch_log.csv"


def file_digest(path: PathLike) -> str:
    """sha256 of a file's bytes"""
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def tree_digest(root: PathLike) -> str:
    """sha256 over every file below root, keyed by relative path in sorted order"""
    root = Path(root)
    sha = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        sha.update(path.relative_to(root).as_posix().encode("utf-8"))
        sha.update(b"\0")
        sha.update(file_digest(path).encode("ascii"))
    return sha.hexdigest()


def write_csv(path: PathLike, rows: Iterable[Sequence[Any]], header: Optional[Sequence[str]] = None) -> None:
    """Write rows with '\\n' line endings so files are byte-identical across platforms"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if header is not None:
        writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(buffer.getvalue())


def read_csv(path: PathLike, header: Optional[Sequence[str]] = None) -> List[Dict[str, str]]:
    """Read a headed CSV into dicts; checks the header when one is expected"""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if header is not None and list(reader.fieldnames or []) != list(header):
            raise ConfigurationError("{}: unexpected header {}".format(path, reader.fieldnames))
        return [dict(row) for row in reader]


@dataclass
class RunManifest:
    """Everything needed to re-execute a benchmark run.

    Attributes:
        config (Dict): The benchmark configuration as run (seed override applied).
        config_digest (str): sha256 of the canonical JSON of `config`.
        dataset_paths (Dict[str, str]): experiment -> dataset manifest path.
        dataset_digests (Dict[str, str]): experiment -> content digest of the dataset directory.
        matrix (List[Dict]): Cell enumeration in run order.
        seed (int): Global seed actually used.
        seed_source (str): "config" or "env".
        tool_version (str): Harness version.
    """
    config: Dict[str, Any]
    config_digest: str
    dataset_paths: Dict[str, str]
    dataset_digests: Dict[str, str]
    matrix: List[Dict[str, Any]]
    seed: int
    seed_source: str = "config"
    tool_version: str = ""
    strict_repro: bool = False
    jobs: int = 1
    started_at: str = ""
    finished_at: str = ""
    cells_failed: int = 0
    pretrain: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        try:
            return cls(**known)
        except TypeError as e:
            raise ConfigurationError("invalid run manifest: {}".format(e)) from None


def config_digest(config: Dict[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RunStore:
    """Owns the on-disk layout of one benchmark run directory.

        <root>/run_manifest.json
        <root>/metrics.csv
        <root>/keys-values.csv
        <root>/runs/<cell-id>/best.ckpt
        <root>/runs/<cell-id>/epoch_log.csv
        <root>/report/...
    """

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def exists(self) -> bool:
        return (self.root / MANIFEST_FILE).is_file()

    def create(self) -> None:
        (self.root / CELLS_DIR).mkdir(parents=True, exist_ok=True)

    def cell_dir(self, cell_id: str) -> Path:
        return self.root / CELLS_DIR / cell_id

    def checkpoint_path(self, cell_id: str) -> Path:
        return self.cell_dir(cell_id) / CHECKPOINT_FILE

    def epoch_log_path(self, cell_id: str) -> Path:
        return self.cell_dir(cell_id) / EPOCH_LOG_FILE

    def report_dir(self) -> Path:
        path = self.root / REPORT_DIR
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def metrics_path(self) -> Path:
        return self.root / METRICS_FILE

    @property
    def keys_values_path(self) -> Path:
        return self.root / KEYS_VALUES_FILE

    def write_manifest(self, manifest: RunManifest) -> Path:
        path = self.root / MANIFEST_FILE
        self.root.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            json.dump(manifest.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")
        return path

    def read_manifest(self) -> RunManifest:
        """Load the run manifest.

        Raises:
            ConfigurationError: The directory holds no readable manifest.
        """
        path = self.root / MANIFEST_FILE
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return RunManifest.from_dict(json.load(handle))
        except FileNotFoundError:
            raise ConfigurationError("{}: not a run directory (no {})".format(self.root, MANIFEST_FILE)) from None
        except json.JSONDecodeError as e:
            raise ConfigurationError("{}: malformed manifest ({})".format(path, e)) from None

    def write_metrics(self, rows: Iterable[Sequence[str]]) -> Path:
        write_csv(self.metrics_path, rows, METRICS_HEADER)
        log_event(logger, "metrics_written", path=str(self.metrics_path))
        return self.metrics_path

    def read_metrics(self) -> List[Dict[str, str]]:
        if not self.metrics_path.is_file():
            raise ConfigurationError("{}: run has no {}".format(self.root, METRICS_FILE))
        return read_csv(self.metrics_path, METRICS_HEADER)

    def write_epoch_log(self, cell_id: str, rows: Iterable[Sequence[Any]]) -> Path:
        path = self.epoch_log_path(cell_id)
        write_csv(path, rows, EPOCH_LOG_HEADER)
        return path

    def read_epoch_log(self, cell_id: str) -> List[Dict[str, str]]:
        path = self.epoch_log_path(cell_id)
        if not path.is_file():
            return []
        return read_csv(path, EPOCH_LOG_HEADER)
