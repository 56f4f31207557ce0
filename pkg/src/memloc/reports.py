"""CSV/JSON payload emission.

Every CSV row starts with ``config_digest,seed,epoch`` so rows stay
attributable after files are concatenated. Payload files contain no
timestamps; wall-clock and version live only in the per-run report JSON.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PREFIX = ("config_digest", "seed", "epoch")

# column order after the attribution prefix; new columns only ever go at the end
SCHEMAS = {
    "accounting": ("layer", "subset", "norm", "per_example_norm"),
    "alignment": ("layer", "cosine"),
    "curves": ("lr", "clean_acc", "clean_loss", "probe_acc", "probe_loss", "test_acc", "test_loss"),
    "rewind": ("layer", "clean_acc", "probe_acc"),  # epoch = rewind epoch
    "retrain": ("layer", "clean_acc", "probe_acc"),  # epoch = retraining epoch
    "flips": ("example_id", "is_probe", "flip_count", "flipped", "post_removal_acc", "repeat"),
    "flip_units": ("example_id", "step", "layer", "unit", "repeat"),
    "grid": ("p_mem", "p_gen", "clean_after", "noisy_after", "cell_seed", "error"),
    "baselines": ("arm", "clean_acc", "noisy_acc", "test_acc"),
    "forgotten": ("example_id", "label", "predicted_before", "predicted_after"),
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, schema: str, rows: Iterable[dict], digest: str, seed: int) -> Path:
    """Write ``rows`` under the named schema; missing ``epoch`` becomes an empty cell."""
    cols = PREFIX + SCHEMAS[schema]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        extra = set(r) - set(cols)
        if extra:
            raise KeyError(f"{schema}: unexpected columns {sorted(extra)}")
        full = {"config_digest": digest, "seed": seed, **r}
        w.writerow([_fmt(full.get(c)) for c in cols])
    p = Path(path)
    atomic_write_text(p, buf.getvalue())
    return p


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, payload) -> Path:
    p = Path(path)
    atomic_write_text(p, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return p


@dataclass
class ExperimentReport:
    kind: str
    config_digest: str
    config: dict
    payloads: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    version: str = ""
    summary: dict = field(default_factory=dict)

    def write(self, directory) -> Path:
        return write_json(Path(directory) / f"report_{self.kind}.json", {
            "kind": self.kind, "config_digest": self.config_digest, "config": self.config,
            "payloads": sorted(self.payloads), "wall_clock_s": self.wall_clock_s,
            "version": self.version, "summary": self.summary,
        })


def payload_names(paths: Sequence[Path]) -> list[str]:
    return [Path(p).name for p in paths]
