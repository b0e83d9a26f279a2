from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import numpy as np
from utils.errors import InvalidParameterError, ShapeError

EPS = 1e-5
DEFAULT_THRESHOLD = 0.5
METRIC_NAMES = ("sens", "spec", "dice")
GROUP_FIELDS = ("experiment", "architecture", "encoder", "weight_init")
STATUS_OK = "ok"
STATUS_FAILED = "failed"


class EmptyRule(Enum):
    """What happens to a slice whose prediction has no positives.

    LENIENT: TP + FP = 0 sets all three metrics to 1.
    STRICT: the override needs FN = 0 as well, i.e. the target is empty too.
    """
    LENIENT = "lenient"
    STRICT = "strict"

    @classmethod
    def parse(cls, value: Union[str, "EmptyRule"]) -> "EmptyRule":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise InvalidParameterError("empty_rule must be lenient or strict, got {!r}".format(value)) from None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def binarize(pred: np.ndarray, tau: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where pred >= tau, else 0"""
    if not 0.0 < tau < 1.0:
        raise InvalidParameterError("threshold must be in (0, 1), got {}".format(tau))
    return (np.asarray(pred) >= tau).astype(np.uint8)


def confusion(pred_bin: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    """Pixel counts of a binary prediction against a binary target"""
    pred_bin = np.asarray(pred_bin)
    target = np.asarray(target)
    if pred_bin.shape != target.shape:
        raise ShapeError("prediction {} and target {} differ in shape".format(pred_bin.shape, target.shape))
    for name, grid in (("prediction", pred_bin), ("target", target)):
        if not np.all((grid == 0) | (grid == 1)):
            raise InvalidParameterError("{} is not binary".format(name))
    pred = pred_bin.astype(bool)
    truth = target.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp=tp, tn=int(pred.size) - tp - fp - fn, fp=fp, fn=fn)


def hard_metrics(c: ConfusionCounts, eps: float = EPS,
                 empty_rule: Union[str, EmptyRule] = EmptyRule.LENIENT) -> Tuple[float, float, float]:
    """(sensitivity, specificity, dice) as fractions.

    sens = TP/(TP+FN+eps), spec = TN/(TN+FP+eps), dice = 2TP/(2TP+FP+FN+eps), with the
    empty-prediction override decided by `empty_rule`.
    """
    rule = EmptyRule.parse(empty_rule)
    if c.tp + c.fp == 0 and (rule is EmptyRule.LENIENT or c.fn == 0):
        return 1.0, 1.0, 1.0
    sens = _ratio(c.tp, c.tp + c.fn + eps)
    spec = _ratio(c.tn, c.tn + c.fp + eps)
    dice = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn + eps)
    return sens, spec, dice


def _ratio(numerator: float, denominator: float) -> float:
    return float(numerator) / denominator if denominator else 0.0


def evaluate_predictions(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                         tau: float = DEFAULT_THRESHOLD, eps: float = EPS,
                         empty_rule: Union[str, EmptyRule] = EmptyRule.LENIENT) -> Tuple[float, float, float]:
    """Per-slice hard metrics averaged uniformly over slices (fractions)"""
    if len(preds) != len(targets):
        raise ShapeError("{} predictions for {} targets".format(len(preds), len(targets)))
    if not len(preds):
        raise InvalidParameterError("no slices to evaluate")
    per_slice = np.array([hard_metrics(confusion(binarize(p, tau), t), eps, empty_rule)
                          for p, t in zip(preds, targets)])
    sens, spec, dice = per_slice.mean(axis=0)
    return float(sens), float(spec), float(dice)


@dataclass
class MetricsRecord:
    """One per-cell result row: hard metrics in percent, size and timings"""
    experiment: str
    architecture: str
    encoder: str
    weight_init: str
    sens: float = 0.0
    spec: float = 0.0
    dice: float = 0.0
    params_millions: float = 0.0
    train_s_per_batch: float = 0.0
    val_s_per_batch: float = 0.0
    status: str = STATUS_OK
    error: Optional[str] = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    @classmethod
    def from_fractions(cls, labels: Dict[str, str], sens: float, spec: float, dice: float, params: int,
                       train_s: float, val_s: float) -> "MetricsRecord":
        return cls(sens=100.0 * sens, spec=100.0 * spec, dice=100.0 * dice,
                   params_millions=params / 1e6, train_s_per_batch=train_s, val_s_per_batch=val_s, **labels)

    @classmethod
    def failed(cls, labels: Dict[str, str], error: str) -> "MetricsRecord":
        return cls(status=STATUS_FAILED, error=error, **labels)

    def get(self, name: str) -> float:
        return float(getattr(self, name))

    def label(self, name: str) -> str:
        if name not in GROUP_FIELDS:
            raise InvalidParameterError("cannot group by {!r}".format(name))
        return getattr(self, name)

    def to_row(self) -> List[str]:
        """CSV cells: percentages to 2 decimals, params and timings to 6"""
        return [self.experiment, self.architecture, self.encoder, self.weight_init,
                "{:.2f}".format(self.sens), "{:.2f}".format(self.spec), "{:.2f}".format(self.dice),
                "{:.6f}".format(self.params_millions), "{:.6f}".format(self.train_s_per_batch),
                "{:.6f}".format(self.val_s_per_batch), self.status]

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "MetricsRecord":
        return cls(
            experiment=row["experiment"], architecture=row["architecture"], encoder=row["encoder"],
            weight_init=row["weight_init"], sens=float(row["sens"]), spec=float(row["spec"]),
            dice=float(row["dice"]), params_millions=float(row["params_millions"]),
            train_s_per_batch=float(row["train_s_per_batch"]), val_s_per_batch=float(row["val_s_per_batch"]),
            status=row["status"],
        )


@dataclass(frozen=True)
class FiveNumberSummary:
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "FiveNumberSummary":
        q = np.percentile(np.asarray(values, dtype=np.float64), [0, 25, 50, 75, 100])
        return cls(*(float(v) for v in q))


@dataclass
class AggregateRow:
    """Mean and sample standard deviation of one group of ok records"""
    group_by: Tuple[str, ...]
    key: Tuple[str, ...]
    n: int
    mean: Dict[str, float]
    std: Dict[str, float]
    summary: Dict[str, FiveNumberSummary]
    single: bool = False

    @property
    def label(self) -> str:
        return "/".join(self.key)


def aggregate(records: Iterable[MetricsRecord], group_by: Union[str, Sequence[str]],
              metrics: Sequence[str] = METRIC_NAMES + ("params_millions",)) -> List[AggregateRow]:
    """Group ok records and compute mean, sample std (n-1) and five-number summaries.

    Groups appear in order of first occurrence. A group of one has std 0 and is flagged `single`.

    Raises:
        InvalidParameterError: Unknown group field, or no ok records at all.
    """
    fields = (group_by,) if isinstance(group_by, str) else tuple(group_by)
    for name in fields:
        if name not in GROUP_FIELDS:
            raise InvalidParameterError("cannot group by {!r}; choose from {}".format(name, ", ".join(GROUP_FIELDS)))
    groups: "OrderedDict[Tuple[str, ...], List[MetricsRecord]]" = OrderedDict()
    for record in records:
        if record.ok:
            groups.setdefault(tuple(record.label(f) for f in fields), []).append(record)
    if not groups:
        raise InvalidParameterError("empty group: no ok records to aggregate")
    rows = []
    for key, members in groups.items():
        values = {m: np.array([r.get(m) for r in members], dtype=np.float64) for m in metrics}
        single = len(members) == 1
        rows.append(AggregateRow(
            group_by=fields, key=key, n=len(members),
            mean={m: float(v.mean()) for m, v in values.items()},
            std={m: 0.0 if single else float(v.std(ddof=1)) for m, v in values.items()},
            summary={m: FiveNumberSummary.of(v) for m, v in values.items()},
            single=single,
        ))
    return rows
