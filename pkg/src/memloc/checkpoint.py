"""On-disk per-epoch snapshots of parameters and norm buffers.

Layout per epoch ``t``: ``weights_<t>.bin`` holds every tensor's raw
little-endian values back to back in catalog order, and
``manifest_<t>.json`` lists name/shape/dtype/byte offset for each plus the
architecture digest. The manifest is written last and both files are moved
into place atomically, so a visible manifest always describes a complete blob.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import Model, ModelSpec

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CheckpointStore:
    def __init__(self, directory, spec: ModelSpec):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.spec = spec
        self._cache: dict[int, tuple[dict, dict[str, np.ndarray]]] = {}

    def manifest_path(self, epoch: int) -> Path:
        return self.directory / f"manifest_{epoch}.json"

    def blob_path(self, epoch: int) -> Path:
        return self.directory / f"weights_{epoch}.bin"

    def epochs(self) -> list[int]:
        out = []
        for p in self.directory.glob("manifest_*.json"):
            try:
                out.append(int(p.stem.split("_", 1)[1]))
            except ValueError:
                continue
        return sorted(out)

    def __contains__(self, epoch: int) -> bool:
        return self.manifest_path(epoch).exists()

    def save(self, model: Model, epoch: int, overwrite: bool = False) -> dict:
        if model.spec.digest() != self.spec.digest():
            raise IncompatibleCheckpoint("model architecture differs from the store's spec")
        if epoch in self and not overwrite:
            raise CheckpointError(f"epoch {epoch} already saved in {self.directory}")
        catalog, chunks, offset = [], [], 0
        for name, arr in model.state().items():
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = le.tobytes()
            catalog.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        blob = b"".join(chunks)
        manifest = {
            "version": FORMAT_VERSION,
            "epoch": epoch,
            "spec_digest": self.spec.digest(),
            "spec": self.spec.to_dict(),
            "param_digest": hashlib.blake2b(blob, digest_size=8).hexdigest(),
            "tensors": catalog,
        }
        _atomic_write(self.blob_path(epoch), blob)
        _atomic_write(self.manifest_path(epoch), json.dumps(manifest, indent=1).encode())
        self._cache.pop(epoch, None)
        return manifest

    def manifest(self, epoch: int) -> dict:
        return self._read(epoch)[0]

    def _read(self, epoch: int):
        if epoch not in self._cache:
            mp = self.manifest_path(epoch)
            if not mp.exists():
                raise CheckpointError(f"no checkpoint for epoch {epoch} in {self.directory}")
            manifest = json.loads(mp.read_text())
            if manifest.get("version") != FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
            if manifest["spec_digest"] != self.spec.digest():
                raise IncompatibleCheckpoint(
                    f"epoch {epoch}: checkpoint digest {manifest['spec_digest']} != spec digest {self.spec.digest()}"
                )
            blob = self.blob_path(epoch).read_bytes()
            tensors = {}
            for t in manifest["tensors"]:
                dt = np.dtype(t["dtype"]).newbyteorder("<")
                arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(t["shape"], dtype=np.int64)), offset=t["offset"])
                tensors[t["name"]] = arr.reshape(t["shape"]).astype(dt.newbyteorder("="))
            self._cache[epoch] = (manifest, tensors)
        return self._cache[epoch]

    def tensors(self, epoch: int) -> dict[str, np.ndarray]:
        """Copy of every stored tensor for ``epoch``."""
        return {k: v.copy() for k, v in self._read(epoch)[1].items()}

    def load(self, epoch: int) -> Model:
        manifest, tensors = self._read(epoch)
        names = [t["name"] for t in manifest["tensors"]]
        dtype = tensors[names[0]].dtype
        params = {n: tensors[n].copy() for n in names if not n.endswith(("running_mean", "running_var"))}
        buffers = {n: tensors[n].copy() for n in names if n.endswith(("running_mean", "running_var"))}
        return Model(self.spec, params, buffers, dtype)


def save_checkpoint(store: CheckpointStore, model: Model, epoch: int) -> dict:
    return store.save(model, epoch)


def load_checkpoint(store: CheckpointStore, epoch: int) -> Model:
    return store.load(epoch)
