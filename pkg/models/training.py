"""Soft Dice loss, optimizers, and the per-cell training loop with model selection."""
import logging
import math
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from database.operations import RunStore
from models import nnprims as nn
from models.architectures import (Architecture, ModelConfig, SegmentationModel, build, load_warmstart,
                                  save_checkpoint)
from models.augment import apply as augment_pair
from models.augment import sample_params
from models.dataio import Dataset, ExperimentKind, Slice, normalize, select_target
from models.metrics import EmptyRule, MetricsRecord, evaluate_predictions
from models.nnprims import ParamStore, Tensor, count_params, init_random
from utils.errors import InvalidParameterError, SegbenchError, ShapeError, TrainingDivergedError
from utils.logging_utils import log_event
from utils.rng import RngStream

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ModelFactory = Callable[..., Tuple[SegmentationModel, ParamStore]]

# split indices of a cell's RngStream
INIT_STREAM = 0
SHUFFLE_STREAM = 1
AUGMENT_STREAM = 2
DROPOUT_STREAM = 3


@dataclass
class TrainConfig:
    """Optimization and evaluation settings shared by every cell of a run"""
    epochs: int = 100
    batch_size: int = 2
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    loss_eps: float = 1e-5
    threshold: float = 0.5
    metric_eps: float = 1e-5
    empty_rule: str = EmptyRule.LENIENT.value
    optimizer: str = "adam"
    augment: bool = True
    strict_repro: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidParameterError("epochs and batch_size must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise InvalidParameterError("beta1 and beta2 must lie in (0, 1)")
        if min(self.adam_eps, self.loss_eps, self.metric_eps) <= 0:
            raise InvalidParameterError("all eps values must be > 0")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidParameterError("threshold must lie in (0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise InvalidParameterError("lr must be > 0 and weight_decay >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidParameterError("optimizer must be adam or sgd")
        EmptyRule.parse(self.empty_rule)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidParameterError("unknown train settings: {}".format(", ".join(unknown)))
        return cls(**data).validate()


@dataclass
class EpochLogEntry:
    epoch: int
    train_loss: float
    val_loss: float
    train_s: float
    val_s: float

    def to_row(self) -> List[str]:
        return [str(self.epoch), "{:.8f}".format(self.train_loss), "{:.8f}".format(self.val_loss),
                "{:.6f}".format(self.train_s), "{:.6f}".format(self.val_s)]


@dataclass
class RunState:
    """Model-selection state of one cell"""
    best_val_loss: float = math.inf
    best_epoch: int = 0
    best_checkpoint: Optional[Path] = None
    best_state: Optional["OrderedDict[str, np.ndarray]"] = field(default=None, repr=False)
    epoch_log: List[EpochLogEntry] = field(default_factory=list)

    def observe(self, entry: EpochLogEntry, store: ParamStore) -> bool:
        """Log an epoch; keep a snapshot when validation loss strictly improves"""
        if self.epoch_log and entry.epoch <= self.epoch_log[-1].epoch:
            raise ValueError("epoch log must be strictly increasing")
        self.epoch_log.append(entry)
        if entry.val_loss < self.best_val_loss:
            self.best_val_loss = entry.val_loss
            self.best_epoch = entry.epoch
            self.best_state = store.state()
            return True
        return False


# Loss

def soft_dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = 1e-5) -> float:
    """1 - 2 sum(Y*P) / (sum(Y^2) + sum(P^2) + eps) for one 2D prediction"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("prediction {} and target {} differ in shape".format(pred.shape, target.shape))
    intersection = np.sum(target * pred)
    denominator = np.sum(target * target) + np.sum(pred * pred) + eps
    return float(1.0 - 2.0 * intersection / denominator)


def soft_dice_batch_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Mean over the batch of per-sample Soft Dice losses, differentiable in pred"""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError("prediction {} and target {} differ in shape".format(pred.shape, target.shape))
    axes = tuple(range(1, pred.data.ndim))
    p = pred.data
    intersection = np.sum(target * p, axis=axes)
    denominator = np.sum(target * target, axis=axes) + np.sum(p * p, axis=axes) + eps
    losses = 1.0 - 2.0 * intersection / denominator
    out = np.array(losses.mean(), dtype=pred.dtype)
    batch = p.shape[0]
    shape = (batch,) + (1,) * (p.ndim - 1)

    def backward(g):
        d = denominator.reshape(shape)
        i = intersection.reshape(shape)
        return (g * (-2.0 * target * d + 4.0 * i * p) / (d * d) / batch,)
    return nn.make_op(out, (pred,), backward, "soft_dice_batch_loss")


# Optimizers

def adam_step(store: ParamStore, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update of every entry; increments store.step_count"""
    nn.require_gradients(store)
    store.step_count += 1
    t = store.step_count
    correction1 = 1.0 - cfg.beta1 ** t
    correction2 = 1.0 - cfg.beta2 ** t
    for entry in store.entries.values():
        g = entry.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * entry.value
        entry.adam_m *= cfg.beta1
        entry.adam_m += (1.0 - cfg.beta1) * g
        entry.adam_v *= cfg.beta2
        entry.adam_v += (1.0 - cfg.beta2) * (g * g)
        m_hat = entry.adam_m / correction1
        v_hat = entry.adam_v / correction2
        entry.value -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(entry.value.dtype)


def sgd_step(store: ParamStore, cfg: TrainConfig) -> None:
    """w <- w - lr * dL/dw"""
    nn.require_gradients(store)
    store.step_count += 1
    for entry in store.entries.values():
        g = entry.grad if not cfg.weight_decay else entry.grad + cfg.weight_decay * entry.value
        entry.value -= (cfg.lr * g).astype(entry.value.dtype)


OPTIMIZERS = {"adam": adam_step, "sgd": sgd_step}


# Data pipeline

def prepare_split(slices: Sequence[Slice], experiment: ExperimentKind, mu: float,
                  sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Normalize, then select input/target per experiment (lung gating happens here)"""
    images, targets = [], []
    for s in slices:
        image, target = select_target(normalize(s, mu, sigma), experiment)
        images.append(image)
        targets.append(target)
    return np.stack(images), np.stack(targets)


def batches(n: int, batch_size: int, order: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Index batches over n items; the last partial batch is kept"""
    order = np.arange(n) if order is None else order
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def predict(model: SegmentationModel, images: np.ndarray, batch_size: int) -> np.ndarray:
    """Eval-mode probabilities for (N, H, W) images"""
    outputs = [model.predict(images[index]) for index in batches(len(images), batch_size)]
    return np.concatenate(outputs, axis=0)


def evaluate_slices(model: SegmentationModel, slices: Sequence[Slice], experiment: ExperimentKind,
                    mu: float, sigma: float, cfg: TrainConfig) -> Tuple[float, float, float]:
    """Per-slice averaged (sens, spec, dice) fractions of a model on slices"""
    images, targets = prepare_split(slices, experiment, mu, sigma)
    preds = predict(model, images, cfg.batch_size)
    return evaluate_predictions(list(preds), list(targets), cfg.threshold, cfg.metric_eps, cfg.empty_rule)


def record_labels(config: ModelConfig) -> Dict[str, str]:
    return {"experiment": config.experiment.slug, "architecture": config.architecture.display_name,
            "encoder": config.encoder.family.value, "weight_init": config.weight_init.kind}


# Cell training

class CellRunner:
    """Trains one benchmark cell and evaluates its best-validation snapshot on test.

    Epochs shuffle the training slices with the cell's stream, optionally augment each
    slice, take one optimizer step per batch, then compute the mean Soft Dice loss over
    the whole validation split. The snapshot with strictly lowest validation loss wins,
    so ties keep the earliest epoch.
    """

    def __init__(self, dataset: Dataset, config: ModelConfig, cfg: TrainConfig, rng: RngStream,
                 out_dir: Optional[PathLike] = None, model_factory: ModelFactory = build):
        self.dataset = dataset
        self.config = config
        self.cfg = cfg.validate()
        self.rng = rng
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model_factory = model_factory
        self.model: Optional[SegmentationModel] = None
        self.store: Optional[ParamStore] = None
        self.step = OPTIMIZERS[cfg.optimizer]
        self.train_images = self.train_targets = None
        self.val_images = self.val_targets = None
        self.test_predictions: Optional[np.ndarray] = None
        self._train_seconds: List[float] = []
        self._val_seconds: List[float] = []

    def setup(self) -> None:
        self.dataset.check_experiment(self.config.experiment)
        self.model, self.store = self.model_factory(self.config, input_shape=self.dataset.shape)
        init_random(self.store, self.rng.split(INIT_STREAM).split(self.config.weight_init.seed))
        if self.config.weight_init.kind == "warmstart":
            load_warmstart(self.store, self.config.weight_init.checkpoint, strict=False)
        mu, sigma = self.dataset.mu, self.dataset.sigma
        self.train_images, self.train_targets = prepare_split(self.dataset.train, self.config.experiment, mu, sigma)
        self.val_images, self.val_targets = prepare_split(self.dataset.val, self.config.experiment, mu, sigma)

    def _batch(self, images: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dtype = self.store.dtype
        return images[:, None].astype(dtype), targets[:, None].astype(dtype)

    def train_epoch(self, epoch: int) -> Tuple[float, float]:
        """One pass over the training split; returns (mean batch loss, seconds per batch)"""
        n = len(self.train_images)
        order = self.rng.split(SHUFFLE_STREAM).split(epoch).generator().permutation(n)
        augment_stream = self.rng.split(AUGMENT_STREAM).split(epoch)
        dropout = self.rng.split(DROPOUT_STREAM).split(epoch).generator()
        losses = []
        seconds = 0.0
        for index in batches(n, self.cfg.batch_size, order):
            images, targets = self.train_images[index], self.train_targets[index]
            if self.cfg.augment:
                pairs = [augment_pair(images[k], targets[k], sample_params(augment_stream.split(int(position))))
                         for k, position in enumerate(index)]
                images = np.stack([p[0] for p in pairs])
                targets = np.stack([p[1] for p in pairs])
            x, y = self._batch(images, targets)
            start = time.perf_counter()
            self.store.zero_grad()
            loss = soft_dice_batch_loss(self.model(x, training=True, rng=dropout), y, self.cfg.loss_eps)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError("non-finite training loss", epoch)
            loss.backward()
            self.step(self.store, self.cfg)
            seconds += time.perf_counter() - start
            losses.append(loss.item())
        per_batch = seconds / len(losses)
        self._train_seconds.append(per_batch)
        return float(np.mean(losses)), per_batch

    def validate_epoch(self, epoch: int) -> Tuple[float, float]:
        """Mean Soft Dice loss over the full validation split; returns (loss, seconds per batch)"""
        losses = []
        seconds = 0.0
        groups = batches(len(self.val_images), self.cfg.batch_size)
        for index in groups:
            x, y = self._batch(self.val_images[index], self.val_targets[index])
            start = time.perf_counter()
            pred = self.model(x, training=False)
            seconds += time.perf_counter() - start
            losses.extend(soft_dice_loss(p[0], t[0], self.cfg.loss_eps) for p, t in zip(pred.data, y))
        per_batch = seconds / len(groups)
        self._val_seconds.append(per_batch)
        return float(np.mean(losses)), per_batch

    def fit(self) -> RunState:
        """All epochs with model selection; leaves the best snapshot loaded in the store"""
        if self.store is None:
            self.setup()
        state = RunState()
        for epoch in range(1, self.cfg.epochs + 1):
            train_loss, train_s = self.train_epoch(epoch)
            val_loss, val_s = self.validate_epoch(epoch)
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise TrainingDivergedError("non-finite loss (train {}, val {})".format(train_loss, val_loss), epoch)
            if self.cfg.strict_repro:
                train_s = val_s = 0.0
            improved = state.observe(EpochLogEntry(epoch, train_loss, val_loss, train_s, val_s), self.store)
            log_event(logger, "epoch_done", level=logging.DEBUG, cell=self.config.slug, epoch=epoch,
                      train_loss=train_loss, val_loss=val_loss, improved=improved)
        self.store.load_state(state.best_state)
        if self.out_dir is not None:
            path = self.out_dir / "best.ckpt"
            save_checkpoint(path, self.store, self.config, state.best_epoch, state.best_val_loss)
            state.best_checkpoint = path
        return state

    def evaluate_test(self) -> Tuple[float, float, float]:
        mu, sigma = self.dataset.mu, self.dataset.sigma
        images, targets = prepare_split(self.dataset.test, self.config.experiment, mu, sigma)
        self.test_predictions = predict(self.model, images, self.cfg.batch_size)
        return evaluate_predictions(list(self.test_predictions), list(targets), self.cfg.threshold,
                                    self.cfg.metric_eps, self.cfg.empty_rule)

    def run(self) -> Tuple[RunState, MetricsRecord]:
        state = self.fit()
        sens, spec, dice = self.evaluate_test()
        train_s = 0.0 if self.cfg.strict_repro else float(np.mean(self._train_seconds))
        val_s = 0.0 if self.cfg.strict_repro else float(np.mean(self._val_seconds))
        record = MetricsRecord.from_fractions(record_labels(self.config), sens, spec, dice,
                                              count_params(self.store), train_s, val_s)
        log_event(logger, "cell_done", cell=self.config.slug, best_epoch=state.best_epoch,
                  best_val_loss=state.best_val_loss, dice=record.dice)
        return state, record


def run_experiment_cell(dataset: Dataset, model_config: ModelConfig, cfg: TrainConfig, rng: RngStream,
                        out_dir: Optional[PathLike] = None,
                        model_factory: ModelFactory = build) -> Tuple[RunState, MetricsRecord]:
    """Train, select on validation and test one cell"""
    return CellRunner(dataset, model_config, cfg, rng, out_dir, model_factory).run()


# Benchmark matrix

def cell_id(index: int, config: ModelConfig) -> str:
    return "{:03d}-{}".format(index, config.slug)


@dataclass
class CellTask:
    index: int
    config: ModelConfig
    dataset: Dataset
    cfg: TrainConfig
    out_dir: Optional[str]
    model_factory: ModelFactory = build


@dataclass
class CellOutcome:
    index: int
    record: MetricsRecord
    best_epoch: int = 0
    epochs_logged: int = 0


def _run_cell(task: CellTask) -> CellOutcome:
    """Worker entry: failures become failed records instead of propagating"""
    name = cell_id(task.index, task.config)
    rng = RngStream(task.cfg.seed, [task.index])
    store = RunStore(task.out_dir) if task.out_dir else None
    cell_dir = store.cell_dir(name) if store else None
    try:
        runner = CellRunner(task.dataset, task.config, task.cfg, rng, cell_dir, task.model_factory)
        state, record = runner.run()
    except Exception as e:
        expected = isinstance(e, (SegbenchError, FloatingPointError, ValueError))
        message = str(e) if expected else "{}: {}".format(type(e).__name__, e)
        log_event(logger, "cell_failed", level=logging.ERROR, exc_info=None if expected else e, cell=name,
                  error=message, error_type=type(e).__name__)
        return CellOutcome(task.index, MetricsRecord.failed(record_labels(task.config), message))
    if store is not None:
        store.write_epoch_log(name, (entry.to_row() for entry in state.epoch_log))
    return CellOutcome(task.index, record, state.best_epoch, len(state.epoch_log))


def run_benchmark(matrix: Sequence[ModelConfig], datasets: Dict[ExperimentKind, Dataset], cfg: TrainConfig,
                  jobs: int = 1, out_dir: Optional[PathLike] = None,
                  model_factory: ModelFactory = build) -> List[MetricsRecord]:
    """Run every cell; records come back in matrix order whatever the execution order.

    Each cell draws from RngStream(cfg.seed, [cell index]) only, so serial and parallel
    runs produce identical records (timings aside).
    """
    if not matrix:
        raise InvalidParameterError("benchmark matrix is empty")
    cfg.validate()
    tasks = []
    for index, config in enumerate(matrix):
        if config.experiment not in datasets:
            raise InvalidParameterError("no dataset for experiment {}".format(config.experiment.slug))
        tasks.append(CellTask(index, config, datasets[config.experiment], cfg,
                              None if out_dir is None else str(out_dir), model_factory))
    log_event(logger, "benchmark_started", cells=len(tasks), jobs=jobs)
    if jobs <= 1:
        outcomes = [_run_cell(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, tasks))
    outcomes.sort(key=lambda o: o.index)
    failed = sum(1 for o in outcomes if not o.record.ok)
    log_event(logger, "benchmark_done", cells=len(outcomes), failed=failed)
    return [o.record for o in outcomes]


# Encoder pretraining

def pretrain_encoder(dataset: Dataset, config: ModelConfig, cfg: TrainConfig, path: PathLike,
                     rng: Optional[RngStream] = None) -> RunState:
    """Train a Unet on `config`'s experiment and save only its encoder tensors.

    The checkpoint feeds the warm-start arm: loading it non-strictly fills every
    encoder.* entry of any architecture sharing the encoder family and width.
    """
    unet = ModelConfig.create(config.experiment, Architecture.UNET, config.encoder.family,
                              config.encoder.width_scale)
    runner = CellRunner(dataset, unet, cfg, rng or RngStream(cfg.seed, [0]))
    state = runner.fit()
    save_checkpoint(path, runner.store, unet, state.best_epoch, state.best_val_loss, prefix="encoder.")
    log_event(logger, "encoder_pretrained", path=str(path), family=config.encoder.family.value,
              best_epoch=state.best_epoch, best_val_loss=state.best_val_loss)
    return state
