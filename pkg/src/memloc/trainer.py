"""Mini-batch SGD training with per-epoch checkpoints and subset evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointStore
from .data import BatchPlan, ProbeDataset, batches
from .model import ExampleTiedDropout, GateSet, Model, StandardDropout
from .optim import SGD, OneCycleSchedule, one_cycle_lr

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    peak_lr: float = 0.1
    peak_epoch: int = 10
    div_factor: float = 25.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    dropout: StandardDropout | ExampleTiedDropout | None = None
    freeze: frozenset[int] = field(default_factory=frozenset)
    bn_update_frozen: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.freeze = frozenset(self.freeze)

    def schedule(self) -> OneCycleSchedule | None:
        if self.epochs == 0:
            return None
        if self.epochs == 1:
            # no room for a ramp; a 2-epoch cycle evaluated at its start
            return OneCycleSchedule(self.peak_lr, 1, 2, self.div_factor)
        peak = min(self.peak_epoch, self.epochs - 1)
        return OneCycleSchedule(self.peak_lr, max(peak, 1), self.epochs, self.div_factor)


@dataclass(frozen=True)
class SubsetScore:
    """Accuracy and mean loss over a subset; ``count == 0`` marks an empty subset."""

    accuracy: float | None
    loss: float | None
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


EMPTY = SubsetScore(None, None, 0)


@dataclass
class LearningCurves:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]


Hook = Callable[[int, Model], None]


def evaluate(
    model: Model,
    dataset: ProbeDataset,
    subset: str,
    dropout=None,
    drop_mem: bool = False,
    gates: GateSet | None = None,
    ids: np.ndarray | None = None,
) -> SubsetScore:
    """Eval-mode accuracy and mean cross entropy on a subset.

    Training subsets are scored against training labels, ``"test"`` against
    the original test labels. Under example-tied dropout, training examples
    use their own masks unless ``drop_mem``; test inputs always drop
    memorization units.
    """
    if subset == "test":
        if dataset.test_inputs is None or len(dataset.test_inputs) == 0:
            return EMPTY
        x, y, sel = dataset.test_inputs, dataset.test_labels, None
        if isinstance(dropout, ExampleTiedDropout):
            drop_mem = True
    else:
        sel = dataset.subset_ids(subset) if ids is None else np.asarray(ids)
        if sel.size == 0:
            return EMPTY
        x, y = dataset.inputs[sel], dataset.training_labels[sel]
    fw = {"gates": gates}
    if isinstance(dropout, ExampleTiedDropout):
        fw.update(dropout=dropout, drop_mem=drop_mem, ids=None if drop_mem else sel)
    logits = model.predict(x, **fw)
    loss = T.softmax_cross_entropy(T.Tensor(logits), y, reduction="mean")
    acc = float((logits.argmax(axis=1) == y).mean())
    return SubsetScore(acc, float(loss.data), int(len(y)))


def _curve_row(model, dataset, epoch, lr, dropout):
    row = {"epoch": epoch, "lr": lr}
    for name in ("clean", "probe", "test"):
        s = evaluate(model, dataset, name, dropout=dropout)
        row[f"{name}_acc"], row[f"{name}_loss"] = s.accuracy, s.loss
    return row


def train(
    model: Model,
    dataset: ProbeDataset,
    config: TrainConfig,
    hooks: Iterable[Hook] = (),
    store: CheckpointStore | None = None,
    train_ids: Sequence[int] | None = None,
    id_log: list | None = None,
    evaluate_curves: bool = True,
) -> tuple[Model, CheckpointStore | None, LearningCurves]:
    """Train in place and return ``(model, store, curves)``.

    Epoch 0 (before any update) is evaluated, checkpointed and passed to the
    hooks; so is the state after every epoch. Only ``train_ids`` (default:
    every example) are ever drawn into batches; ``id_log`` collects the ids
    of every batch when given.
    """
    hooks = list(hooks)
    if model.spec.input_shape != tuple(dataset.inputs.shape[1:]):
        raise T.ShapeError(f"model input {model.spec.input_shape} vs data {dataset.inputs.shape[1:]}")
    bad = set(config.freeze) - set(range(model.n_layers))
    if bad:
        raise ValueError(f"freeze set names unknown layers {sorted(bad)}")
    model.frozen = set(config.freeze)
    trainable = [l for l in range(model.n_layers) if l not in config.freeze]
    bn_eval = () if config.bn_update_frozen else tuple(sorted(config.freeze))
    sched = config.schedule()
    opt = SGD(config.momentum, config.weight_decay)
    plan = BatchPlan(config.seed, config.batch_size)
    pool = np.arange(len(dataset)) if train_ids is None else np.asarray(train_ids)
    n_batches = max(1, -(-len(pool) // config.batch_size))
    curves = LearningCurves()

    def boundary(epoch, lr):
        if store is not None:
            store.save(model, epoch)
        if evaluate_curves:
            curves.rows.append(_curve_row(model, dataset, epoch, lr, config.dropout))
        for h in hooks:
            h(epoch, model)

    boundary(0, None)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch, 0xD0])
        lr = None
        for b, (ids, xb, yb) in enumerate(batches(dataset, plan, epoch, pool)):
            if id_log is not None:
                id_log.append(ids.copy())
            lr = one_cycle_lr(sched, min(epoch + b / n_batches, sched.total_epochs - 1e-9))
            try:
                grads = _step_grads(model, xb, yb, ids, config, trainable, bn_eval, rng)
            except T.NumericFault as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}, batch {b}: {exc}") from exc
            if model.sparse is not None:
                for n, m in model.sparse.masks.items():
                    if n in grads:
                        grads[n] *= m
            opt.step(model.params, grads, lr)
        log.debug("epoch %d done (lr %.4g)", epoch + 1, lr or 0.0)
        boundary(epoch + 1, lr)
    return model, store, curves


def _step_grads(model, xb, yb, ids, config, trainable, bn_eval, rng):
    if not trainable and not config.bn_update_frozen:
        return {}
    leaves = model.param_leaves(trainable)
    logits = model.forward(
        xb, mode="train", dropout=config.dropout, ids=ids, leaves=leaves, rng=rng, bn_eval_layers=bn_eval
    )
    if not trainable:
        return {}
    loss = T.softmax_cross_entropy(logits, yb, reduction="mean")
    loss.backward()
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in leaves.items()}
