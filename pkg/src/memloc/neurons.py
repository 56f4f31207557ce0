"""Greedy critical-unit removal under a noise-smoothed classifier.

A unit's score is the first-order change of the search objective when its
gate goes from its current value to zero:

    score(l, j) = -g_lj * d obj / d g_lj
    obj = mean_k CE(x_i + noise_k, y_i) - mean_batch CE

so the highest-scoring unit is the one whose removal is predicted to hurt
the target example most while sparing the reference batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ProbeDataset
from .model import GateSet, Model

log = logging.getLogger(__name__)

SCORERS = ("gate", "theta")


class NoActiveUnits(RuntimeError):
    pass


@dataclass
class SmoothedClassifier:
    """Base model averaged over ``k`` Gaussian-noised copies of the input."""

    model: Model
    sigma: float | np.ndarray = 0.0
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def for_dataset(cls, model: Model, dataset: ProbeDataset, scale: float = 0.05, k: int = 5, seed: int = 0):
        """Noise at ``scale`` times the per-feature standard deviation of the training inputs."""
        return cls(model, (scale * dataset.inputs.std(axis=0)).astype(model.dtype), k, seed)

    def noisy_copies(self, x: np.ndarray, key: int = 0) -> np.ndarray:
        """``k`` noised copies of one input, stacked on a new leading axis; same key -> same draws."""
        x = np.asarray(x, dtype=self.model.dtype)
        rng = np.random.default_rng([self.seed, int(key), 0x5A])
        noise = rng.standard_normal((self.k,) + x.shape) * np.asarray(self.sigma)
        return (x[None] + noise).astype(self.model.dtype)


def smoothed_predict(sc: SmoothedClassifier, x, gates: GateSet | None = None, key: int = 0):
    """``(class, mean softmax)`` for one input."""
    logits = sc.model.forward(sc.noisy_copies(x, key), gates=gates).data
    p = T.softmax(logits.astype(np.float64)).mean(axis=0)
    return int(p.argmax()), p


def _candidates(model: Model, gates: GateSet, include_head: bool) -> list[tuple[int, int]]:
    last = model.n_layers - 1
    return [u for u in gates.active_units() if include_head or u[0] != last]


def _objective_inputs(sc, x_noisy, y, ref_x, ref_y):
    k, n = len(x_noisy), len(ref_x)
    xs = np.concatenate([x_noisy, ref_x]) if n else x_noisy
    ys = np.concatenate([np.full(k, y), ref_y]).astype(np.int64) if n else np.full(k, y)
    w = np.concatenate([np.full(k, 1.0 / k), np.full(n, -1.0 / n)]) if n else np.full(k, 1.0 / k)
    return xs, ys, w


def criticality_scores(sc: SmoothedClassifier, gates: GateSet, x, y: int, ref_x, ref_y,
                       key: int = 0, scorer: str = "gate", include_head: bool = False) -> dict:
    """Score for every active candidate unit, ``{(layer, unit): score}``.

    ``scorer="theta"`` replaces the gate derivative by the first-order
    change from zeroing the unit's incoming parameters, summed over them.
    """
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}")
    model = sc.model
    cands = _candidates(model, gates, include_head)
    if not cands:
        raise NoActiveUnits("no active units left to score")
    xs, ys, w = _objective_inputs(sc, sc.noisy_copies(x, key), y, np.asarray(ref_x), np.asarray(ref_y))
    if scorer == "gate":
        gl = [T.Tensor(g, requires_grad=True) for g in gates.gates]
        obj = T.softmax_cross_entropy(model.forward(xs, gates=gl), ys, weights=w, reduction="sum")
        obj.backward()
        per_layer = [-(g.data.astype(np.float64) * (g.grad if g.grad is not None else 0.0)) for g in gl]
    else:
        leaves = model.param_leaves()
        obj = T.softmax_cross_entropy(model.forward(xs, gates=gates, leaves=leaves), ys, weights=w, reduction="sum")
        obj.backward()
        per_layer = [_theta_unit_scores(model, leaves, l) for l in range(model.n_layers)]
    return {(l, j): float(per_layer[l][j]) for l, j in cands}


def _theta_unit_scores(model: Model, leaves, layer: int) -> np.ndarray:
    out = np.zeros(model.unit_counts()[layer])
    for name in model.layer_param_names(layer):
        t = leaves[name]
        contrib = -(t.data.astype(np.float64) * (t.grad if t.grad is not None else 0.0))
        if name.endswith(".weight"):
            # dense weights are (in, out); conv weights are (out, in, kh, kw)
            kind = model.spec.layers[layer].kind
            contrib = contrib.sum(axis=0) if kind == "dense" else contrib.reshape(contrib.shape[0], -1).sum(axis=1)
        out += contrib
    return out


@dataclass
class FlipResult:
    example_id: int
    removed: list[tuple[int, int]]
    flip_count: int
    flipped: bool
    post_removal_acc: float | None
    budget: int
    pre_flipped: bool = False
    is_probe: bool = False


def reference_batch(dataset: ProbeDataset, example_id: int, size: int = 512, seed: int = 0) -> np.ndarray:
    """Training ids of the reference batch for one example's search (never the example itself)."""
    pool = np.delete(np.arange(len(dataset)), example_id)
    rng = np.random.default_rng([seed, int(example_id), 0xBA])
    return np.sort(rng.choice(pool, size=min(size, pool.size), replace=False))


def train_accuracy(model: Model, dataset: ProbeDataset, gates: GateSet | None) -> float:
    logits = model.predict(dataset.inputs, gates=gates)
    return float((logits.argmax(axis=1) == dataset.training_labels).mean())


def flip_example(sc: SmoothedClassifier, dataset: ProbeDataset, example_id: int, budget: int = 100,
                 batch_seed: int = 0, ref_size: int = 512, scorer: str = "gate",
                 include_head: bool = False, post_accuracy: bool = True) -> FlipResult:
    """Zero the top-scoring unit until the smoothed prediction leaves the training label.

    The flip count of an unflipped search is the budget (a censored count).
    Post-removal accuracy is the plain model with the final gates over the
    whole training set, the searched example included.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    i = int(example_id)
    x, y = dataset.inputs[i], int(dataset.training_labels[i])
    probe = bool(dataset.probe_flags[i])
    model = sc.model
    gates = GateSet.ones(model)
    if smoothed_predict(sc, x, gates, key=i)[0] != y:
        acc = train_accuracy(model, dataset, gates) if post_accuracy else None
        return FlipResult(i, [], 0, True, acc, budget, pre_flipped=True, is_probe=probe)
    ref = reference_batch(dataset, i, ref_size, batch_seed)
    ref_x, ref_y = dataset.inputs[ref], dataset.training_labels[ref]
    removed: list[tuple[int, int]] = []
    flipped = False
    while len(removed) < budget:
        try:
            scores = criticality_scores(sc, gates, x, y, ref_x, ref_y, key=i, scorer=scorer,
                                        include_head=include_head)
        except NoActiveUnits:
            break
        # ties resolve to the lowest (layer, unit)
        unit = max(sorted(scores), key=lambda u: scores[u])
        gates.gates[unit[0]][unit[1]] = 0
        removed.append(unit)
        if smoothed_predict(sc, x, gates, key=i)[0] != y:
            flipped = True
            break
    acc = train_accuracy(model, dataset, gates) if post_accuracy else None
    return FlipResult(i, removed, len(removed) if flipped else budget, flipped, acc, budget, is_probe=probe)


def _flip_task(args):
    sc, dataset, i, kw = args
    return flip_example(sc, dataset, i, **kw)


def flip_many(sc: SmoothedClassifier, dataset: ProbeDataset, ids: Sequence[int], jobs: int = 1, **kw) -> list[FlipResult]:
    """Independent searches for several examples; results follow ``ids`` order for any ``jobs``."""
    tasks = [(sc, dataset, int(i), kw) for i in ids]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_flip_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    out = []
    for n, t in enumerate(tasks):
        out.append(_flip_task(t))
        log.debug("flip %d/%d: id %d -> %d", n + 1, len(tasks), t[2], out[-1].flip_count)
    return out


def flip_statistics(repeats: Sequence[Sequence[FlipResult]]) -> dict[int, float]:
    """Mean flip count per example id across repeats (independently trained models)."""
    if not repeats:
        raise ValueError("need at least one repeat")
    acc: dict[int, list[int]] = {}
    for results in repeats:
        for r in results:
            acc.setdefault(r.example_id, []).append(r.flip_count)
    return {i: float(np.mean(v)) for i, v in sorted(acc.items())}


# ---------------------------------------------------------------------------
# detector


def _doubled_ranks(values: np.ndarray) -> np.ndarray:
    """Twice the 1-based average rank of each value (an integer even with ties)."""
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    ranks = np.empty(len(values), dtype=np.int64)
    start = 0
    n = len(values)
    while start < n:
        stop = start
        while stop + 1 < n and sv[stop + 1] == sv[start]:
            stop += 1
        ranks[order[start:stop + 1]] = (start + 1) + (stop + 1)
        start = stop + 1
    return ranks


def mislabel_auc(scores, flags) -> float:
    """Probability that a flagged example outscores an unflagged one, ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(flags, dtype=bool)
    if s.shape != f.shape:
        raise ValueError("scores and flags differ in length")
    n_pos, n_neg = int(f.sum()), int((~f).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both flagged and unflagged examples")
    r2 = int(_doubled_ranks(s)[f].sum())
    u2 = r2 - n_pos * (n_pos + 1)  # twice the Mann-Whitney U
    return (u2 / 2) / (n_pos * n_neg)


def threshold_sweep(scores, flags) -> list[dict]:
    """TPR/FPR of ``score >= threshold`` at every distinct score, highest threshold first."""
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(flags, dtype=bool)
    n_pos, n_neg = max(int(f.sum()), 1), max(int((~f).sum()), 1)
    pts = []
    for t in np.unique(s)[::-1]:
        hit = s >= t
        pts.append({"threshold": float(t), "tpr": int((hit & f).sum()) / n_pos, "fpr": int((hit & ~f).sum()) / n_neg})
    return pts


@dataclass
class DetectorResult:
    ids: np.ndarray
    scores: np.ndarray  # minus the (mean) flip count: higher is more suspicious
    flags: np.ndarray
    auc: float
    sweep: list[dict] = field(default_factory=list)


def flip_detector(flip_counts: dict[int, float], dataset: ProbeDataset) -> DetectorResult:
    ids = np.array(sorted(flip_counts), dtype=np.int64)
    scores = -np.array([flip_counts[i] for i in ids], dtype=np.float64)
    flags = dataset.probe_flags[ids].astype(bool)
    return DetectorResult(ids, scores, flags, mislabel_auc(scores, flags), threshold_sweep(scores, flags))


def layer_histogram(results: Sequence[FlipResult], n_layers: int, probe: bool | None = None) -> np.ndarray:
    """Counts of removed units per layer, optionally restricted to probe or non-probe examples."""
    h = np.zeros(n_layers, dtype=np.int64)
    for r in results:
        if probe is not None and r.is_probe != probe:
            continue
        for l, _ in r.removed:
            h[l] += 1
    return h


def tv_distance(a, b) -> float | None:
    """Total-variation distance between two histograms after normalization; None if either is empty."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.sum() == 0 or b.sum() == 0:
        return None
    return float(0.5 * np.abs(a / a.sum() - b / b.sum()).sum())
