"""``memloc`` command line: one subcommand per experiment, all driven by a YAML config."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .checkpoint import CheckpointError, CheckpointStore
from .config import ConfigError, config_digest, dump_config, load_config
from .etdrop import cell_seed, forgotten_clean_report, run_baselines, run_etdrop, run_grid
from .localization import AccountingHook, gradient_accounting, resolve_layers, retrain_layer, rewind_sweep
from .model import LayerSpec, ModelSpec, build_model
from .neurons import SmoothedClassifier, flip_detector, flip_many, flip_statistics, layer_histogram, tv_distance
from .reports import ExperimentReport, atomic_write_text, payload_names, write_csv, write_json
from .trainer import TrainConfig, train

log = logging.getLogger("memloc")

COMMANDS = ("train", "account", "rewind", "retrain", "flip", "etdrop")


# ---------------------------------------------------------------------------
# building blocks from a resolved config


def build_dataset(cfg: dict) -> D.ProbeDataset:
    d, seed = cfg["dataset"], cfg["seed"]
    if d["source"] == "synth":
        s = d["synth"]
        ds = D.synth_clusters(s["classes"], s["per_class"], s["dim"], s["margin"], seed=seed,
                              test_per_class=s["test_per_class"])
    else:
        if d["source"] == "mnist5k":
            images, labels = D.mnist5k_to_idx(d["directory"])
        else:
            if not d["images"] or not d["labels"]:
                raise ConfigError("idx source needs images and labels paths", "dataset.images")
            images, labels = d["images"], d["labels"]
        for p in (images, labels, d["test_images"], d["test_labels"]):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"dataset file not found: {p}")
        ds = D.load_idx(images, labels, test_images=d["test_images"], test_labels=d["test_labels"])
        if d["holdout"] and ds.test_inputs is None:
            ds = D.holdout(ds, int(d["holdout"]), seed=seed)
        if d["flatten"] and cfg["model"]["kind"] == "mlp":
            test = None if ds.test_inputs is None else ds.test_inputs.reshape(len(ds.test_inputs), -1)
            ds = D.from_arrays(ds.inputs.reshape(len(ds), -1), ds.original_labels, ds.num_classes, test,
                               ds.test_labels)
    if d["scores"]:
        ds = D.partition_by_score(ds, D.read_scores(d["scores"]), d["score_threshold"])
    elif d["noise"] > 0:
        ds = D.inject_label_noise(ds, d["noise"], seed=seed)
    ds.meta["name"] = d["source"]
    return ds


def build_spec(cfg: dict, ds: D.ProbeDataset) -> ModelSpec:
    m = cfg["model"]
    shape = ds.inputs.shape[1:]
    if m["kind"] == "mlp":
        if len(shape) != 1:
            raise ConfigError("mlp needs flat inputs; set dataset.flatten", "model.kind")
        return ModelSpec.mlp(shape[0], m["hidden"], ds.num_classes, norm=m["norm"], seed=cfg["seed"])
    if m["kind"] == "cnn":
        return ModelSpec.small_cnn(shape, ds.num_classes, m["channels"], m["dense"], seed=cfg["seed"])
    if not m["layers"]:
        raise ConfigError("custom model needs a layers list", "model.layers")
    return ModelSpec(shape, ds.num_classes, [LayerSpec(**l) for l in m["layers"]], seed=cfg["seed"])


def train_config(cfg: dict, **kw) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], peak_lr=t["peak_lr"],
                       peak_epoch=t["peak_epoch"], div_factor=t["div_factor"], momentum=t["momentum"],
                       weight_decay=t["weight_decay"], seed=cfg["seed"], **kw)


class Run:
    """Resolved config, output directory and shared state of one invocation."""

    def __init__(self, cfg: dict, out: Path, jobs: int = 1):
        self.cfg, self.out, self.jobs = cfg, out, jobs
        self.digest = config_digest(cfg)
        self.seed = cfg["seed"]
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out / "config.resolved.yaml", dump_config(cfg))
        self.ds = build_dataset(cfg)
        self.spec = build_spec(cfg, self.ds)
        self.payloads: list[Path] = []
        self.summary: dict = {}

    @property
    def store(self) -> CheckpointStore:
        return CheckpointStore(self.out / "checkpoints", self.spec)

    def final_epoch(self) -> int:
        epochs = self.store.epochs()
        if not epochs:
            raise CheckpointError(f"no checkpoints in {self.out / 'checkpoints'}; run `memloc train` first")
        return epochs[-1]

    def csv(self, name: str, schema: str, rows) -> None:
        self.payloads.append(write_csv(self.out / name, schema, rows, self.digest, self.seed))

    def json(self, name: str, payload) -> None:
        self.payloads.append(write_json(self.out / name, payload))


def _fresh_store(run: Run) -> CheckpointStore:
    store = run.store
    for e in store.epochs():
        store.manifest_path(e).unlink()
        store.blob_path(e).unlink(missing_ok=True)
    return store


def _curve_rows(curves):
    return [{k: r[k] for k in ("epoch", "lr", "clean_acc", "clean_loss", "probe_acc", "probe_loss",
                               "test_acc", "test_loss")} for r in curves.rows]


def _train(run: Run, hooks=()) -> None:
    model = build_model(run.spec, seed=run.seed, dtype=run.cfg["dtype"])
    _, _, curves = train(model, run.ds, train_config(run.cfg), hooks=hooks, store=_fresh_store(run))
    run.csv("curves.csv", "curves", _curve_rows(curves))
    last = curves.rows[-1]
    run.summary.update(final_clean_acc=last["clean_acc"], final_probe_acc=last["probe_acc"],
                       final_test_acc=last["test_acc"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(run: Run) -> None:
    _train(run)


def cmd_account(run: Run) -> None:
    by_group = run.cfg["experiment"]["account"]["by_group"]
    T_ = run.cfg["train"]["epochs"]
    store = run.store
    if all(e in store for e in range(T_ + 1)):
        records, align = [], []
        for e in range(T_ + 1):
            r, a = gradient_accounting(store.load(e), run.ds, e, by_group)
            records += r
            align += a
    else:
        hook = AccountingHook(run.ds, by_group)
        _train(run, hooks=[hook])
        records, align = hook.records, hook.alignment
    run.csv("accounting.csv", "accounting", [
        {"epoch": r.epoch, "layer": r.layer, "subset": r.subset, "norm": r.norm,
         "per_example_norm": r.per_example_norm} for r in records])
    run.csv("alignment.csv", "alignment", [{"epoch": a.epoch, "layer": a.layer, "cosine": a.cosine} for a in align])


def cmd_rewind(run: Run) -> None:
    rc = run.cfg["experiment"]["rewind"]
    T_ = run.final_epoch()
    store = run.store
    converged = store.load(T_)
    targets = rc["targets"] if rc["targets"] is not None else list(range(converged.n_layers))
    epochs = rc["epochs"] if rc["epochs"] is not None else store.epochs()
    missing = [e for e in epochs if e not in store]
    if missing:
        raise CheckpointError(f"missing checkpoints for epochs {missing}")
    matrix = rewind_sweep(converged, store, targets, epochs, run.ds, rc["rewind_buffers"], jobs=run.jobs)
    run.csv("rewind.csv", "rewind", [{"epoch": c.epoch, "layer": c.layer, "clean_acc": c.clean_acc,
                                      "probe_acc": c.probe_acc} for c in matrix.cells])


def cmd_retrain(run: Run) -> None:
    rc = run.cfg["experiment"]["retrain"]
    T_ = run.final_epoch()
    store = run.store
    converged = store.load(T_)
    layers = rc["layers"] if rc["layers"] is not None else [converged.n_layers - 1]
    cfg = train_config(run.cfg)
    cfg = replace(cfg, epochs=rc["epochs"], peak_lr=rc["peak_lr"], peak_epoch=rc["peak_epoch"],
                  batch_size=rc["batch_size"] or cfg.batch_size)
    verdicts = {}
    for layer in layers:
        curve = retrain_layer(converged, store, layer, run.ds, cfg, rc["threshold"])
        run.csv(f"retrain_{curve.layer}.csv", "retrain", [
            {"epoch": r["epoch"], "layer": curve.layer, "clean_acc": r["clean_acc"], "probe_acc": r["probe_acc"]}
            for r in curve.rows])
        verdicts[curve.layer] = {"verdict": curve.verdict, "peak_probe_acc": curve.peak_probe_acc,
                                 "converged_probe_acc": curve.converged_probe_acc}
    run.summary["retrain"] = verdicts


def _flip_ids(ds: D.ProbeDataset, n_clean: int, n_probe: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xF1])
    c, p = ds.clean_ids, ds.probe_ids
    pick_c = rng.choice(c, size=min(n_clean, c.size), replace=False)
    pick_p = rng.choice(p, size=min(n_probe, p.size), replace=False)
    return np.sort(np.concatenate([pick_c, pick_p]))


def cmd_flip(run: Run) -> None:
    fc = run.cfg["experiment"]["flip"]
    T_ = run.final_epoch()
    ids = _flip_ids(run.ds, fc["n_clean"], fc["n_probe"], run.seed)
    repeats = []
    for r in range(fc["repeats"]):
        if r == 0:
            model = run.store.load(T_)
        else:
            model = build_model(run.spec, seed=cell_seed(run.seed, r), dtype=run.cfg["dtype"])
            train(model, run.ds, replace(train_config(run.cfg), seed=cell_seed(run.seed, r)), evaluate_curves=False)
        sc = SmoothedClassifier.for_dataset(model, run.ds, fc["sigma_scale"], fc["k"], seed=run.seed)
        repeats.append(flip_many(sc, run.ds, ids, jobs=run.jobs, budget=fc["budget"], batch_seed=run.seed,
                                 ref_size=fc["ref_size"], scorer=fc["scorer"], include_head=fc["include_head"]))
    rows, units = [], []
    for r, results in enumerate(repeats):
        for f in results:
            rows.append({"epoch": T_, "example_id": f.example_id, "is_probe": f.is_probe, "flip_count": f.flip_count,
                         "flipped": f.flipped, "post_removal_acc": f.post_removal_acc, "repeat": r})
            units += [{"epoch": T_, "example_id": f.example_id, "step": s, "layer": l, "unit": j, "repeat": r}
                      for s, (l, j) in enumerate(f.removed)]
    run.csv("flips.csv", "flips", rows)
    run.csv("flip_units.csv", "flip_units", units)
    means = flip_statistics(repeats)
    det = flip_detector(means, run.ds)
    n_layers = len(run.spec.layers)
    all_results = [f for res in repeats for f in res]
    h_clean = layer_histogram(all_results, n_layers, probe=False)
    h_probe = layer_histogram(all_results, n_layers, probe=True)
    flags = run.ds.probe_flags
    summary = {
        "auc": det.auc,
        "mean_flips_clean": float(np.mean([v for i, v in means.items() if not flags[i]])),
        "mean_flips_probe": float(np.mean([v for i, v in means.items() if flags[i]])),
        "sweep": det.sweep,
        "layer_histogram_clean": h_clean.tolist(),
        "layer_histogram_probe": h_probe.tolist(),
        "layer_tv_distance": tv_distance(h_clean, h_probe),
        "repeats": len(repeats),
        "budget": fc["budget"],
        "sigma_scale": fc["sigma_scale"],
        "scorer": fc["scorer"],
    }
    run.json("detector.json", summary)
    run.summary.update({k: summary[k] for k in ("auc", "mean_flips_clean", "mean_flips_probe")})


def cmd_etdrop(run: Run) -> None:
    ec = run.cfg["experiment"]["etdrop"]
    cfg = train_config(run.cfg)
    dt = run.cfg["dtype"]
    outcome = run_etdrop(run.ds, run.spec, ec["p_gen"], ec["p_mem"], cfg, dtype=dt)
    run.json("etdrop.json", outcome.to_dict())
    run.csv("forgotten.csv", "forgotten", [
        {"epoch": cfg.epochs, "example_id": f.example_id, "label": f.label, "predicted_before": f.predicted_before,
         "predicted_after": f.predicted_after} for f in forgotten_clean_report(outcome, run.ds)])
    run.summary.update(before=outcome.before, after=outcome.after)
    if ec["grid_p_gen"] and ec["grid_p_mem"]:
        grid = run_grid(run.ds, run.spec, ec["grid_p_gen"], ec["grid_p_mem"], cfg, run.seed, dt, jobs=run.jobs)
        run.csv("grid.csv", "grid", [
            {"epoch": cfg.epochs, "p_mem": c.p_mem, "p_gen": c.p_gen, "clean_after": c.clean_after,
             "noisy_after": c.noisy_after, "cell_seed": c.seed, "error": c.error} for c in grid.cells.values()])
    if ec["baselines"]:
        recs = run_baselines(run.ds, run.spec, ec["p_gen"], cfg, dtype=dt)
        run.csv("baselines.csv", "baselines", [
            {"epoch": cfg.epochs, "arm": b.arm, "clean_acc": b.clean_acc, "noisy_acc": b.noisy_acc,
             "test_acc": b.test_acc} for b in recs])


HANDLERS = {"train": cmd_train, "account": cmd_account, "rewind": cmd_rewind, "retrain": cmd_retrain,
            "flip": cmd_flip, "etdrop": cmd_etdrop}


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--out", help="output directory (default: $MEMLOC_OUT/<config name>, else runs/<config name>)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    common.add_argument("--dtype", choices=("f32", "f64"), help="override the config dtype")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="memloc", description="Localize memorization in small networks.")
    p.add_argument("--version", action="version", version=f"memloc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__ or name)
    return p


def output_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get("MEMLOC_OUT", "runs"))
    return root / Path(args.config).stem


def _error(kind: str, exc: BaseException) -> None:
    msg = str(exc).replace("\n", " ")
    print(f"memloc: error: kind={kind} type={type(exc).__name__} message={msg}", file=sys.stderr)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "dtype": args.dtype})
        run = Run(cfg, output_dir(args), args.jobs)
        t0 = time.perf_counter()
        HANDLERS[args.command](run)
        report = ExperimentReport(args.command, run.digest, cfg, payload_names(run.payloads),
                                  time.perf_counter() - t0, __version__, run.summary)
        path = report.write(run.out)
    except ConfigError as exc:
        _error("config", exc)
        return 2
    except CheckpointError as exc:
        _error("checkpoint", exc)
        return 3
    except (FileNotFoundError, D.FormatError) as exc:
        _error("input", exc)
        return 4
    except Exception as exc:  # noqa: BLE001 - last-resort structured error line
        _error("runtime", exc)
        if args.verbose:
            raise
        return 1
    log.info("%s done in %.1fs -> %s", args.command, report.wall_clock_s, path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
