"""Layer-level procedures: gradient accounting, layer rewinding and clean-only retraining.

Accounting gradients are full-pass, sum-reduced gradients on a frozen
snapshot evaluated in eval mode (running norm statistics), so the gradient
of the whole training set is exactly the sum of the subset gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointStore
from .data import ProbeDataset
from .model import Model, reinit_layer
from .optim import UndefinedSimilarity, cosine_similarity
from .trainer import TrainConfig, evaluate, train

SUBSETS = ("clean", "probe", "total")


@dataclass(frozen=True)
class AccountingRecord:
    epoch: int
    layer: str
    subset: str
    norm: float | None  # ||dL(S_x)/dtheta_l|| / sqrt(P_l); None marks an empty subset
    per_example_norm: float | None  # same for the subset-mean gradient


@dataclass(frozen=True)
class AlignmentRecord:
    epoch: int
    layer: str
    cosine: float | None  # None when a mean gradient vanishes or a subset is empty


def subset_gradients(model: Model, dataset: ProbeDataset, ids: np.ndarray, chunk: int = 1024,
                     layers: Sequence[int] | None = None) -> dict[str, np.ndarray]:
    """Sum-loss gradient over ``ids`` for every parameter (eval mode, float64 accumulation)."""
    total = {n: np.zeros(p.shape, dtype=np.float64) for n, p in model.params.items()}
    for s in range(0, len(ids), chunk):
        sel = ids[s:s + chunk]
        _, g, _ = model.loss_and_grads(dataset.inputs[sel], dataset.training_labels[sel],
                                       reduction="sum", layers=layers)
        for n, v in g.items():
            total[n] += v
    return total


def layer_vector(model: Model, grads: dict[str, np.ndarray], layers: Sequence[int]) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for l in layers for n in model.layer_param_names(l)])


def _units(model: Model, by_group: bool) -> list[tuple[str, list[int]]]:
    if not by_group:
        return [(f"layer{i}", [i]) for i in range(model.n_layers)]
    out: dict[str, list[int]] = {}
    for i, g in enumerate(model.spec.groups):
        out.setdefault(g, []).append(i)
    return list(out.items())


def gradient_accounting(model: Model, dataset: ProbeDataset, epoch: int = 0, by_group: bool = False,
                        chunk: int = 1024) -> tuple[list[AccountingRecord], list[AlignmentRecord]]:
    """Per-layer normalized gradient norms for clean, probe and all examples, plus clean/probe cosine.

    Norms are divided by the square root of the layer's parameter count. For
    a group, the normalized norms of its layers are averaged.
    """
    ids = {"clean": dataset.clean_ids, "probe": dataset.probe_ids, "total": np.arange(len(dataset))}
    grads = {s: (subset_gradients(model, dataset, ids[s], chunk) if ids[s].size else None) for s in SUBSETS}
    records, align = [], []
    for name, layers in _units(model, by_group):
        for s in SUBSETS:
            g, n = grads[s], ids[s].size
            if g is None:
                records.append(AccountingRecord(epoch, name, s, None, None))
                continue
            norms = [np.linalg.norm(layer_vector(model, g, [l])) / np.sqrt(model.layer_size(l)) for l in layers]
            norm = float(np.mean(norms))
            records.append(AccountingRecord(epoch, name, s, norm, norm / n))
        if grads["clean"] is None or grads["probe"] is None:
            align.append(AlignmentRecord(epoch, name, None))
            continue
        try:
            c = cosine_similarity(
                layer_vector(model, grads["clean"], layers) / ids["clean"].size,
                layer_vector(model, grads["probe"], layers) / ids["probe"].size,
            )
        except UndefinedSimilarity:
            c = None
        align.append(AlignmentRecord(epoch, name, c))
    return records, align


def gradient_alignment(model: Model, dataset: ProbeDataset, epoch: int = 0, by_group: bool = False) -> list[AlignmentRecord]:
    return gradient_accounting(model, dataset, epoch, by_group)[1]


class AccountingHook:
    """Trainer hook that runs gradient accounting at every epoch boundary."""

    def __init__(self, dataset: ProbeDataset, by_group: bool = False, epochs: Sequence[int] | None = None):
        self.dataset = dataset
        self.by_group = by_group
        self.epochs = None if epochs is None else set(epochs)
        self.records: list[AccountingRecord] = []
        self.alignment: list[AlignmentRecord] = []

    def __call__(self, epoch: int, model: Model) -> None:
        if self.epochs is not None and epoch not in self.epochs:
            return
        r, a = gradient_accounting(model, self.dataset, epoch, self.by_group)
        self.records.extend(r)
        self.alignment.extend(a)


def average_records(records: Sequence[AccountingRecord], epochs: Sequence[int] | None = None) -> dict:
    """Mean normalized norms per ``(layer, subset)`` over the selected epochs."""
    keep = None if epochs is None else set(epochs)
    acc: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for r in records:
        if r.norm is None or (keep is not None and r.epoch not in keep):
            continue
        acc.setdefault((r.layer, r.subset), []).append((r.norm, r.per_example_norm))
    return {k: (float(np.mean([a for a, _ in v])), float(np.mean([b for _, b in v]))) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# rewinding


def resolve_layers(model: Model, target) -> list[int]:
    """A layer index, a list of indices, or a group label -> layer indices."""
    if isinstance(target, str):
        if target.startswith("layer") and target[5:].isdigit() and target not in model.spec.groups:
            return [int(target[5:])]
        return model.spec.layers_in_group(target)
    if isinstance(target, (int, np.integer)):
        return [int(target)]
    return [int(t) for t in target]


def rewind_layer(converged: Model, store: CheckpointStore, layer, epoch: int,
                 rewind_buffers: bool = False) -> Model:
    """Converged model with ``layer`` (or every layer of a group) set to its epoch-``epoch`` parameters."""
    layers = resolve_layers(converged, layer)
    snap = store.tensors(epoch)
    return reinit_layer(converged, layers, snap, buffers=snap if rewind_buffers else None)


@dataclass
class RewindCell:
    layer: str
    epoch: int
    clean_acc: float | None
    probe_acc: float | None


@dataclass
class RewindMatrix:
    cells: list[RewindCell] = field(default_factory=list)

    def get(self, layer: str, epoch: int) -> RewindCell:
        for c in self.cells:
            if c.layer == layer and c.epoch == epoch:
                return c
        raise KeyError((layer, epoch))


def _label(model: Model, target) -> str:
    if isinstance(target, str):
        return target
    layers = resolve_layers(model, target)
    return f"layer{layers[0]}" if len(layers) == 1 else "+".join(f"layer{l}" for l in layers)


def rewind_cell(converged, store, target, epoch, dataset, rewind_buffers=False, dropout=None) -> RewindCell:
    m = rewind_layer(converged, store, target, epoch, rewind_buffers)
    c = evaluate(m, dataset, "clean", dropout=dropout)
    p = evaluate(m, dataset, "probe", dropout=dropout)
    return RewindCell(_label(converged, target), epoch, c.accuracy, p.accuracy)


def rewind_sweep(converged: Model, store: CheckpointStore, targets, epochs: Sequence[int],
                 dataset: ProbeDataset, rewind_buffers: bool = False, jobs: int = 1) -> RewindMatrix:
    cells = [(t, e) for t in targets for e in epochs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            futs = [ex.submit(rewind_cell, converged, store, t, e, dataset, rewind_buffers) for t, e in cells]
            return RewindMatrix([f.result() for f in futs])
    return RewindMatrix([rewind_cell(converged, store, t, e, dataset, rewind_buffers) for t, e in cells])


# ---------------------------------------------------------------------------
# retraining


@dataclass
class RetrainCurve:
    layer: str
    rows: list[dict]  # epoch, clean_acc, probe_acc
    converged_probe_acc: float | None
    trained_ids: np.ndarray
    threshold: float = 0.8

    @property
    def final_clean_acc(self):
        return self.rows[-1]["clean_acc"]

    @property
    def final_probe_acc(self):
        return self.rows[-1]["probe_acc"]

    @property
    def peak_probe_acc(self):
        vals = [r["probe_acc"] for r in self.rows if r["probe_acc"] is not None]
        return max(vals) if vals else None

    @property
    def verdict(self) -> str:
        """``"redundant"`` when retraining recovers the probe set, else ``"inconclusive"``.

        A failed recovery never proves the layer is needed for memorization,
        so there is no third verdict.
        """
        peak, ref = self.peak_probe_acc, self.converged_probe_acc
        if peak is None or ref is None:
            return "inconclusive"
        return "redundant" if peak >= self.threshold * ref else "inconclusive"


def retrain_config(epochs: int = 20, peak_lr: float = 0.1, peak_epoch: int = 10, batch_size: int = 512,
                   momentum: float = 0.9, weight_decay: float = 5e-4, seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=batch_size, peak_lr=peak_lr, peak_epoch=peak_epoch,
                       momentum=momentum, weight_decay=weight_decay, seed=seed)


def retrain_layer(converged: Model, store: CheckpointStore, layer, dataset: ProbeDataset,
                  config: TrainConfig | None = None, threshold: float = 0.8) -> RetrainCurve:
    """Reset ``layer`` to its initialization, freeze the rest, train on clean examples only.

    Batch-norm running statistics of every layer keep updating. Probe
    accuracy is recorded after each epoch though probe examples never enter
    a batch.
    """
    config = config or retrain_config()
    layers = resolve_layers(converged, layer)
    if dataset.clean_ids.size == 0:
        raise ValueError("retraining needs a nonempty clean subset")
    ref = evaluate(converged, dataset, "probe").accuracy
    model = rewind_layer(converged, store, layers, 0)
    cfg = TrainConfig(**{**config.__dict__, "freeze": frozenset(set(range(model.n_layers)) - set(layers)),
                         "bn_update_frozen": True})
    log: list[np.ndarray] = []
    _, _, curves = train(model, dataset, cfg, train_ids=dataset.clean_ids, id_log=log)
    rows = [{"epoch": r["epoch"], "clean_acc": r["clean_acc"], "probe_acc": r["probe_acc"]} for r in curves.rows]
    seen = np.unique(np.concatenate(log)) if log else np.zeros(0, dtype=np.int64)
    return RetrainCurve(_label(converged, layer), rows, ref, seen, threshold)
