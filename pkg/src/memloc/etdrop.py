"""Example-tied dropout runs, the (p_mem, p_gen) grid, and the dense-capacity baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ProbeDataset
from .model import ExampleTiedDropout, Model, ModelSpec, StandardDropout, StaticSparseMask, apply_sparse_mask, build_model
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)


def _scores(model, dataset, dropout, drop_mem) -> dict:
    return {name: evaluate(model, dataset, subset, dropout=dropout, drop_mem=drop_mem).accuracy
            for name, subset in (("clean", "clean"), ("noisy", "probe"), ("test", "test"))}


@dataclass
class EtdropOutcome:
    before: dict  # clean / noisy / test accuracy with each example's own memorization units
    after: dict  # same weights, memorization units dropped
    config: dict
    model: Model | None = field(default=None, repr=False)
    dropout: ExampleTiedDropout | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"config": self.config, "before_drop": self.before, "after_drop": self.after}


def cell_seed(base_seed: int, *values: float) -> int:
    """Seed for one configuration cell, independent of which other cells run."""
    key = [int(base_seed)] + [int(round(v * 1_000_000)) for v in values]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def run_etdrop(dataset: ProbeDataset, spec: ModelSpec, p_gen: float, p_mem: float, config: TrainConfig,
               seed: int | None = None, dtype="f32", keep_model: bool = True) -> EtdropOutcome:
    """Train with example-tied dropout after every hidden layer and score before/after dropping memorization units.

    Test inputs are always evaluated without memorization units, so the
    before and after test accuracies coincide.
    """
    seed = config.seed if seed is None else seed
    drop = ExampleTiedDropout(p_gen, p_mem, len(dataset), seed=seed)
    model = build_model(spec, seed=seed, dtype=dtype)
    train(model, dataset, replace(config, dropout=drop, seed=seed), evaluate_curves=False)
    cfg = {"p_gen": p_gen, "p_mem": p_mem, "seed": seed, "epochs": config.epochs,
           "dataset": dataset.meta.get("name", "custom")}
    return EtdropOutcome(_scores(model, dataset, drop, False), _scores(model, dataset, drop, True), cfg,
                         model if keep_model else None, drop if keep_model else None)


@dataclass
class GridCell:
    p_mem: float
    p_gen: float
    clean_after: float | None
    noisy_after: float | None
    seed: int
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class GridOutcome:
    cells: dict[tuple[float, float], GridCell]

    def __getitem__(self, key: tuple[float, float]) -> GridCell:
        return self.cells[key]

    def __len__(self) -> int:
        return len(self.cells)


def _grid_cell(dataset, spec, p_gen, p_mem, config, base_seed, dtype) -> GridCell:
    s = cell_seed(base_seed, p_mem, p_gen)
    try:
        out = run_etdrop(dataset, spec, p_gen, p_mem, config, seed=s, dtype=dtype, keep_model=False)
    except Exception as exc:  # a failed cell is reported, the grid goes on
        log.warning("grid cell p_mem=%s p_gen=%s failed: %s", p_mem, p_gen, exc)
        return GridCell(p_mem, p_gen, None, None, s, f"{type(exc).__name__}: {exc}")
    return GridCell(p_mem, p_gen, out.after["clean"], out.after["noisy"], s)


def run_grid(dataset: ProbeDataset, spec: ModelSpec, p_gens: Sequence[float], p_mems: Sequence[float],
             config: TrainConfig, base_seed: int = 0, dtype="f32", jobs: int = 1) -> GridOutcome:
    if not p_gens or not p_mems:
        raise ValueError("grid needs nonempty p_gen and p_mem lists")
    keys = [(pm, pg) for pm in p_mems for pg in p_gens]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            futs = [ex.submit(_grid_cell, dataset, spec, pg, pm, config, base_seed, dtype) for pm, pg in keys]
            cells = [f.result() for f in futs]
    else:
        cells = [_grid_cell(dataset, spec, pg, pm, config, base_seed, dtype) for pm, pg in keys]
    return GridOutcome({k: c for k, c in zip(keys, cells)})


@dataclass
class BaselineRecord:
    arm: str
    clean_acc: float | None
    noisy_acc: float | None
    test_acc: float | None


def run_baselines(dataset: ProbeDataset, spec: ModelSpec, p_gen: float, config: TrainConfig,
                  seed: int | None = None, dtype="f32") -> list[BaselineRecord]:
    """Standard dropout with rate ``p_gen`` and a static sparse net keeping ``p_gen`` of each weight tensor.

    Both arms share the dataset, schedule and seed with the example-tied run.
    """
    seed = config.seed if seed is None else seed
    cfg = replace(config, seed=seed)
    out = []
    m = build_model(spec, seed=seed, dtype=dtype)
    train(m, dataset, replace(cfg, dropout=StandardDropout(p_gen)), evaluate_curves=False)
    s = _scores(m, dataset, None, False)
    out.append(BaselineRecord("standard_dropout", s["clean"], s["noisy"], s["test"]))
    base = build_model(spec, seed=seed, dtype=dtype)
    m = apply_sparse_mask(base, StaticSparseMask.random(base, p_gen, seed=seed))
    train(m, dataset, replace(cfg, dropout=None), evaluate_curves=False)
    s = _scores(m, dataset, None, False)
    out.append(BaselineRecord("static_sparse", s["clean"], s["noisy"], s["test"]))
    return out


@dataclass(frozen=True)
class ForgottenExample:
    example_id: int
    label: int
    predicted_before: int
    predicted_after: int


def forgotten_clean_report(outcome: EtdropOutcome, dataset: ProbeDataset) -> list[ForgottenExample]:
    """Clean examples predicted correctly with their memorization units and wrongly without them."""
    if outcome.model is None or outcome.dropout is None:
        raise ValueError("outcome was produced without keeping the trained model")
    ids = dataset.clean_ids
    if ids.size == 0:
        return []
    x, y = dataset.inputs[ids], dataset.training_labels[ids]
    before = outcome.model.predict(x, dropout=outcome.dropout, ids=ids).argmax(axis=1)
    after = outcome.model.predict(x, dropout=outcome.dropout, drop_mem=True).argmax(axis=1)
    hit = (before == y) & (after != y)
    return [ForgottenExample(int(i), int(l), int(b), int(a))
            for i, l, b, a in zip(ids[hit], y[hit], before[hit], after[hit])]
