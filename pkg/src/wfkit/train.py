"""Cross-validation splits, the training loop, and closed/open-world metrics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np

from . import tensor as T
from .model import WfcatModel

log = logging.getLogger(__name__)


class SplitError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Manifest indices for one fold's train/val/test sets."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    fold: int
    seed: int

    def per_class(self, labels: np.ndarray, part: str) -> dict[int, np.ndarray]:
        idx = getattr(self, part)
        return {int(c): idx[labels[idx] == c] for c in np.unique(labels)}


def make_folds(labels, folds: int = 10, seed: int = 0) -> list[SplitPlan]:
    """Per-class k-fold plans: fold ``i`` tests on group ``i`` and validates on ``i+1``.

    ``labels`` may be a manifest (anything with a ``labels`` attribute) or an
    integer array. Each class is shuffled once with ``seed`` before grouping.
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    if folds < 3:
        raise SplitError("need at least 3 folds for disjoint train/val/test sets")
    groups: list[list[np.ndarray]] = [[] for _ in range(folds)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < folds:
            raise SplitError(f"class {c} has {idx.size} instances, fewer than {folds} folds")
        rng = np.random.default_rng([seed, int(c)])
        for g, part in enumerate(np.array_split(rng.permutation(idx), folds)):
            groups[g].append(part)
    flat = [np.sort(np.concatenate(g)) for g in groups]
    plans = []
    for i in range(folds):
        v = (i + 1) % folds
        train = np.sort(np.concatenate([flat[g] for g in range(folds) if g not in (i, v)]))
        plans.append(SplitPlan(train, flat[v], flat[i], i, seed))
    return plans


def model_input(features: np.ndarray) -> np.ndarray:
    """Cache layout ``[M, G, 2, L]`` to model layout ``[M, G, L, 2]``."""
    return np.ascontiguousarray(np.swapaxes(features, -1, -2))


@dataclass
class History:
    epochs: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_acc"])
            for e, loss, acc in self.epochs:
                w.writerow([e, repr(loss), repr(acc)])


def _state(model: WfcatModel):
    return {k: v.copy() for k, v in model.state_dict().items()}


def train(
    model: WfcatModel,
    features: np.ndarray,
    labels: np.ndarray,
    split: SplitPlan,
    epochs: int = 50,
    batch: int = 64,
    lr: float = 1e-3,
    wd: float = 5e-4,
    seed: int = 0,
    decoupled: bool = False,
) -> tuple[WfcatModel, History]:
    """Mini-batch Adam training with best-validation-epoch selection.

    ``features`` are in cache layout ``[M, G, 2, L]``. The returned model
    holds the parameters (and normalization statistics) of the epoch with the
    highest validation accuracy, earliest on ties.
    """
    labels = np.asarray(labels, dtype=np.int64)
    x = model_input(features).astype(model.cfg.dtype)
    if x.shape[1:] != (model.cfg.bins, model.cfg.slots, 2):
        raise T.ShapeError(
            f"features {list(features.shape[1:])} do not match model input "
            f"[{model.cfg.bins}, 2, {model.cfg.slots}]"
        )
    if labels.max(initial=0) >= model.cfg.class_count:
        raise ValueError("labels exceed the model's class count")
    rng = np.random.default_rng([seed, 2])
    params = list(model.parameters().values())
    history = History()
    best_acc, best_state = -1.0, None
    step = 0
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(split.train)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, order.size, batch)):
            idx = order[start:start + batch]
            model.zero_grad()
            try:
                loss = T.softmax_cross_entropy(model.forward(x[idx]), labels[idx])
            except FloatingPointError as e:
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}: {e}") from e
            if not math.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            loss.backward()
            step += 1
            T.adam_step(params, lr=lr, weight_decay=wd, t=step, decoupled=decoupled)
            total += float(loss.data) * idx.size
            seen += idx.size
        train_loss = total / max(seen, 1)
        if split.val.size:
            val_acc = closed_world_accuracy(model.predict_proba(x[split.val]), labels[split.val])
        else:
            val_acc = float("nan")
        history.epochs.append((epoch, train_loss, val_acc))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, train_loss, val_acc)
        if best_state is None or val_acc > best_acc:
            best_acc, best_state = val_acc, _state(model)
            history.best_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def predict_proba(model: WfcatModel, features: np.ndarray) -> np.ndarray:
    return model.predict_proba(model_input(features).astype(model.cfg.dtype))


# metrics ---------------------------------------------------------------------


def closed_world_accuracy(predictions, labels) -> float:
    """Fraction of correct predictions; accepts class ids or probability rows."""
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if not labels.size:
        raise ValueError("no predictions")
    return float(np.mean(pred == labels))


class OpenWorldCounts(NamedTuple):
    tp: int
    wp: int
    fn: int
    fp: int
    tn: int

    @property
    def precision(self) -> float | None:
        positives = self.tp + self.wp + self.fp
        return self.tp / positives if positives else None

    @property
    def recall(self) -> float:
        monitored = self.tp + self.wp + self.fn
        return self.tp / monitored if monitored else 0.0


def open_world_counts(probs: np.ndarray, labels, tau: float) -> OpenWorldCounts:
    """Tally TP/WP/FN/FP/TN at threshold ``tau`` over ``C+1``-way confidences.

    A trace counts as predicted monitored iff its top class is below ``C``
    and that class's confidence strictly exceeds ``tau``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = probs.shape[1] - 1
    top = probs.argmax(axis=1)
    conf = probs[np.arange(len(top)), top]
    positive = (top < C) & (conf > tau)
    mon = labels < C
    tp = int(np.sum(mon & positive & (top == labels)))
    wp = int(np.sum(mon & positive & (top != labels)))
    fn = int(np.sum(mon & ~positive))
    fp = int(np.sum(~mon & positive))
    tn = int(np.sum(~mon & ~positive))
    return OpenWorldCounts(tp, wp, fn, fp, tn)


def f1_score(precision: float | None, recall: float) -> float | None:
    if precision is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    accuracy: float
    rows: list[tuple[float, OpenWorldCounts]]
    fold: int | None = None

    def points(self) -> list[tuple[float, float]]:
        """(precision, recall) for every threshold with at least one positive."""
        return [(c.precision, c.recall) for _, c in self.rows if c.precision is not None]

    @property
    def best_f1(self) -> float:
        scores = [f1_score(c.precision, c.recall) for _, c in self.rows]
        scores = [s for s in scores if s is not None]
        return max(scores) if scores else 0.0

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["tau", "tp", "wp", "fn", "fp", "precision", "recall", "f1"])
            for tau, c in self.rows:
                p = c.precision
                f1 = f1_score(p, c.recall)
                w.writerow([
                    f"{tau:.6g}", c.tp, c.wp, c.fn, c.fp,
                    "NA" if p is None else repr(p), repr(c.recall),
                    "NA" if f1 is None else repr(f1),
                ])


def tau_grid(points: int = 101) -> np.ndarray:
    if points < 2:
        raise ValueError("threshold grid needs at least 2 points")
    return np.linspace(0.0, 1.0, points)


def pr_curve(probs: np.ndarray, labels, taus: Sequence[float] | None = None, fold: int | None = None) -> EvalReport:
    """Sweep the confidence threshold and collect open-world counts per value."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    taus = tau_grid() if taus is None else np.asarray(taus, dtype=np.float64)
    if taus.size < 2 or taus.min() < 0 or taus.max() > 1:
        raise ValueError("threshold grid needs >= 2 values in [0, 1]")
    C = probs.shape[1] - 1
    mon = labels < C
    if not mon.any():
        raise ValueError("no monitored traces among the predictions")
    acc = closed_world_accuracy(probs[mon], labels[mon])
    rows = [(float(t), open_world_counts(probs, labels, float(t))) for t in taus]
    return EvalReport(acc, rows, fold)


def slot_profile(features: np.ndarray) -> np.ndarray:
    """Per-trace IAT-bin/direction proportions: the slot axis summed out."""
    prof = features.sum(axis=-1).reshape(len(features), -1).astype(np.float64)
    total = prof.sum(axis=1, keepdims=True)
    return prof / np.where(total > 0, total, 1.0)


def nearest_centroid(train_x: np.ndarray, train_y, test_x: np.ndarray) -> np.ndarray:
    """Euclidean nearest-class-mean predictions on flattened inputs."""
    train_x = train_x.reshape(len(train_x), -1)
    test_x = test_x.reshape(len(test_x), -1)
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return classes[d.argmin(axis=1)]
