"""Feed-forward classifiers with per-unit gates and dropout variants.

A model is an ordered list of parameterized layers (dense or conv). Each
layer owns its weights, an optional batch-norm affine pair and running
statistics, an activation, and optional pooling. A *unit* is one output
neuron of a dense layer or one output channel of a conv layer; gates and
dropout masks act on units right after the activation.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_dtype


class SpecError(ValueError):
    pass


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


@dataclass
class LayerSpec:
    kind: str  # "dense" | "conv"
    width: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    norm: bool = False
    act: str | None = "relu"
    pool: str | None = None  # None | "max" | "gap"
    group: str | None = None


@dataclass
class ModelSpec:
    input_shape: tuple[int, ...]
    num_classes: int
    layers: list[LayerSpec]
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.validate()

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], num_classes: int, norm: bool = False, seed: int = 0):
        layers = [LayerSpec("dense", w, norm=norm) for w in hidden]
        layers.append(LayerSpec("dense", num_classes, act=None))
        return cls((input_dim,), num_classes, layers, seed=seed)

    @classmethod
    def small_cnn(cls, input_shape: Sequence[int], num_classes: int, channels: Sequence[int] = (32, 64),
                  hidden: int = 256, seed: int = 0):
        """3x3 conv + BN + 2x2 max-pool blocks, one hidden dense layer, linear head."""
        layers = [LayerSpec("conv", c, kernel=3, pad=1, norm=True, pool="max") for c in channels]
        layers += [LayerSpec("dense", hidden), LayerSpec("dense", num_classes, act=None)]
        return cls(tuple(input_shape), num_classes, layers, seed=seed)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            layers=[LayerSpec(**l) for l in d["layers"]],
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(l) for l in self.layers],
            "seed": self.seed,
        }

    def digest(self) -> str:
        # seed excluded: checkpoints of different seeds share an architecture
        d = self.to_dict()
        d.pop("seed")
        return fnv1a64(json.dumps(d, sort_keys=True, separators=(",", ":")).encode())

    @property
    def groups(self) -> list[str]:
        return [l.group if l.group is not None else f"layer{i}" for i, l in enumerate(self.layers)]

    def layers_in_group(self, group: str) -> list[int]:
        idx = [i for i, g in enumerate(self.groups) if g == group]
        if not idx:
            raise SpecError(f"no layer belongs to group {group!r}")
        return idx

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shape (without batch axis), after pooling."""
        out = []
        shape = self.input_shape
        for i, l in enumerate(self.layers):
            if l.kind == "dense":
                shape = (l.width,)
            elif l.kind == "conv":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
                _, H, W = shape
                oh = (H + 2 * l.pad - l.kernel) // l.stride + 1
                ow = (W + 2 * l.pad - l.kernel) // l.stride + 1
                if oh < 1 or ow < 1:
                    raise SpecError(f"layer {i}: kernel {l.kernel} does not fit input {shape}")
                shape = (l.width, oh, ow)
                if l.pool == "max":
                    if oh < 2 or ow < 2:
                        raise SpecError(f"layer {i}: cannot max-pool a {oh}x{ow} map")
                    shape = (l.width, oh // 2, ow // 2)
                elif l.pool == "gap":
                    shape = (l.width,)
            else:
                raise SpecError(f"layer {i}: unknown kind {l.kind!r}")
            out.append(shape)
        return out

    def fan_in(self, i: int) -> int:
        prev = self.input_shape if i == 0 else self.shapes()[i - 1]
        l = self.layers[i]
        if l.kind == "dense":
            return int(np.prod(prev))
        return prev[0] * l.kernel * l.kernel

    def validate(self) -> None:
        if not self.layers:
            raise SpecError("model has no layers")
        for i, l in enumerate(self.layers):
            if l.width < 1:
                raise SpecError(f"layer {i}: width must be positive")
            if l.act not in (None, "relu"):
                raise SpecError(f"layer {i}: unknown activation {l.act!r}")
            if l.pool not in (None, "max", "gap"):
                raise SpecError(f"layer {i}: unknown pool {l.pool!r}")
            if l.kind == "dense" and l.pool is not None:
                raise SpecError(f"layer {i}: dense layers cannot pool")
        self.shapes()
        head = self.layers[-1]
        if head.kind != "dense" or head.width != self.num_classes or head.act is not None:
            raise SpecError("the last layer must be a linear dense head with num_classes outputs")
        for i, l in enumerate(self.layers[:-1]):
            if l.kind == "dense" and l.act is None:
                raise SpecError(f"layer {i}: only the head may be linear")


# ---------------------------------------------------------------------------
# gates and dropout regimes


@dataclass
class GateSet:
    """Multiplicative gates in [0, 1], one array per layer (one entry per unit)."""

    gates: list[np.ndarray]

    @classmethod
    def ones(cls, model: "Model") -> "GateSet":
        return cls([np.ones(u, dtype=model.dtype) for u in model.unit_counts()])

    def copy(self) -> "GateSet":
        return GateSet([g.copy() for g in self.gates])

    def __len__(self) -> int:
        return sum(g.size for g in self.gates)

    def active_units(self) -> list[tuple[int, int]]:
        return [(l, int(j)) for l, g in enumerate(self.gates) for j in np.flatnonzero(g)]

    def zeroed_units(self) -> list[tuple[int, int]]:
        return [(l, int(j)) for l, g in enumerate(self.gates) for j in np.flatnonzero(g == 0)]


def zero_unit(gates: GateSet, unit: tuple[int, int]) -> GateSet:
    layer, j = unit
    if not (0 <= layer < len(gates.gates)) or not (0 <= j < gates.gates[layer].size):
        raise IndexError(f"invalid unit {unit}")
    out = gates.copy()
    out.gates[layer][j] = 0
    return out


@dataclass
class StandardDropout:
    """Element-wise inverted dropout on hidden-layer activations (train mode only)."""

    p: float

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ValueError("dropout probability must be in [0, 1)")


_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)
_GEN_SALT = 0xA5A5_5A5A_0000_0001


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array."""
    x = x + _M1
    x = (x ^ (x >> np.uint64(30))) * _M2
    x = (x ^ (x >> np.uint64(27))) * _M3
    return x ^ (x >> np.uint64(31))


def _keys(seed: int, layer: int, row, units: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = _mix(np.full(1, seed, dtype=np.uint64))
        h = _mix(h ^ np.uint64(layer))
        h = _mix(np.asarray(row, dtype=np.uint64).reshape(-1, 1) ^ h)
        return _mix(h ^ units.astype(np.uint64).reshape(1, -1))


@dataclass
class ExampleTiedDropout:
    """Generalization units that are always on plus per-example memorization units.

    Per layer with ``U`` units, ``floor(p_gen * U)`` units form the fixed
    generalization set. Each example id owns ``floor(p_mem * U)`` units drawn
    without replacement from the remaining pool by a seeded hash of
    ``(seed, layer, id)``. No rescaling is applied in any mode.
    """

    p_gen: float
    p_mem: float
    n_examples: int
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.p_gen < 1 and 0 <= self.p_mem < 1 and self.p_gen + self.p_mem <= 1):
            raise ValueError(f"need 0 < p_gen, 0 <= p_mem and p_gen + p_mem <= 1; got {self.p_gen}, {self.p_mem}")
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def counts(self, units: int) -> tuple[int, int]:
        return int(np.floor(self.p_gen * units + 1e-9)), int(np.floor(self.p_mem * units + 1e-9))

    def _split(self, layer: int, units: int) -> tuple[np.ndarray, np.ndarray]:
        key = (layer, units)
        if key not in self._cache:
            n_gen, _ = self.counts(units)
            order = np.argsort(_keys(self.seed, layer, _GEN_SALT, np.arange(units))[0], kind="stable")
            self._cache[key] = (np.sort(order[:n_gen]), np.sort(order[n_gen:]))
        return self._cache[key]

    def gen_set(self, layer: int, units: int) -> np.ndarray:
        return self._split(layer, units)[0]

    def mem_pool(self, layer: int, units: int) -> np.ndarray:
        return self._split(layer, units)[1]

    def mem_sets(self, layer: int, units: int, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_examples):
            raise IndexError("example id outside [0, n_examples)")
        pool = self.mem_pool(layer, units)
        _, n_mem = self.counts(units)
        if n_mem == 0 or pool.size == 0:
            return np.zeros((ids.size, 0), dtype=np.int64)
        k = _keys(self.seed, layer, ids, pool)
        pick = np.argsort(k, axis=1, kind="stable")[:, :n_mem]
        return pool[pick]

    def mask(self, layer: int, units: int, ids=None, drop_mem: bool = False, dtype=np.float64) -> np.ndarray:
        """``(U,)`` gen-only mask when ``drop_mem``; otherwise ``(N, U)`` per example."""
        gen = self.gen_set(layer, units)
        if drop_mem:
            m = np.zeros(units, dtype=dtype)
            m[gen] = 1
            return m
        if ids is None:
            raise ValueError("example-tied dropout needs example ids unless memorization units are dropped")
        ids = np.asarray(ids)
        m = np.zeros((ids.size, units), dtype=dtype)
        m[:, gen] = 1
        mem = self.mem_sets(layer, units, ids)
        if mem.size:
            np.put_along_axis(m, mem, 1, axis=1)
        return m


@dataclass
class StaticSparseMask:
    """Fixed binary masks over weight tensors keeping a fraction ``keep`` of entries."""

    keep: float
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def random(cls, model: "Model", keep: float, seed: int = 0) -> "StaticSparseMask":
        if not 0 < keep <= 1:
            raise ValueError("keep fraction must be in (0, 1]")
        masks = {}
        for i, name in enumerate(n for n in model.params if n.endswith(".weight")):
            size = model.params[name].size
            n_keep = int(round(keep * size))
            rng = np.random.default_rng([seed, i, 0x5A])
            flat = np.zeros(size, dtype=bool)
            flat[rng.permutation(size)[:n_keep]] = True
            masks[name] = flat.reshape(model.params[name].shape)
        return cls(keep, masks)


# ---------------------------------------------------------------------------
# the model


class Model:
    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray], dtype):
        self.spec = spec
        self.dtype = as_dtype(dtype)
        self.params = params
        self.buffers = buffers
        self.frozen: set[int] = set()
        self.sparse: StaticSparseMask | None = None
        self.bn_momentum = 0.1
        self.bn_eps = 1e-5

    @property
    def n_layers(self) -> int:
        return len(self.spec.layers)

    def unit_counts(self) -> list[int]:
        return [l.width for l in self.spec.layers]

    def layer_param_names(self, layer: int) -> list[str]:
        prefix = f"l{layer}."
        return [n for n in self.params if n.startswith(prefix)]

    def layer_buffer_names(self, layer: int) -> list[str]:
        prefix = f"l{layer}."
        return [n for n in self.buffers if n.startswith(prefix)]

    def layer_size(self, layer: int) -> int:
        return sum(self.params[n].size for n in self.layer_param_names(layer))

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """All named tensors in catalog order: parameters then buffers."""
        return {**self.params, **self.buffers}

    def copy(self) -> "Model":
        m = Model(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.dtype,
        )
        m.frozen = set(self.frozen)
        m.sparse = copy.deepcopy(self.sparse)
        m.bn_momentum, m.bn_eps = self.bn_momentum, self.bn_eps
        return m

    # -- forward ---------------------------------------------------------

    def forward(
        self,
        x,
        mode: str = "eval",
        gates: GateSet | Sequence[Tensor] | None = None,
        dropout: StandardDropout | ExampleTiedDropout | None = None,
        ids=None,
        drop_mem: bool = False,
        leaves: dict[str, Tensor] | None = None,
        rng: np.random.Generator | None = None,
        bn_eval_layers: Sequence[int] = (),
    ) -> Tensor:
        """Logits for a batch.

        ``mode="train"`` uses batch statistics in batch norm (and updates the
        running buffers of layers not listed in ``bn_eval_layers``) and
        applies dropout. Example-tied masks are applied in every mode: keyed
        by ``ids`` unless ``drop_mem`` is set, in which case only the
        generalization units stay active. ``leaves`` supplies parameter
        tensors to differentiate through; by default parameters are constants.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if isinstance(dropout, ExampleTiedDropout):
            if ids is None and not drop_mem:
                raise ValueError("example-tied dropout needs example ids")
        if gates is not None:
            glist = gates.gates if isinstance(gates, GateSet) else list(gates)
            counts = self.unit_counts()
            if len(glist) != len(counts) or any(
                np.shape(g.data if isinstance(g, Tensor) else g) != (u,) for g, u in zip(glist, counts)
            ):
                raise T.ShapeError(f"gate set does not match unit counts {counts}")
        else:
            glist = None
        if isinstance(dropout, StandardDropout) and mode == "train" and dropout.p > 0 and rng is None:
            raise ValueError("standard dropout in train mode needs an rng")

        P = leaves if leaves is not None else {}

        def param(name):
            t = P.get(name)
            return t if t is not None else Tensor(self.params[name])

        h = Tensor(np.asarray(x, dtype=self.dtype))
        if h.shape[1:] != self.spec.input_shape:
            raise T.ShapeError(f"input shape {h.shape[1:]} does not match spec {self.spec.input_shape}")
        last = self.n_layers - 1
        for i, l in enumerate(self.spec.layers):
            if l.kind == "dense":
                if h.ndim != 2:
                    h = T.flatten(h)
                h = T.matmul(h, param(f"l{i}.weight"))
                if not l.norm:
                    h = T.add(h, param(f"l{i}.bias"))
            else:
                h = T.conv2d(h, param(f"l{i}.weight"), None if l.norm else param(f"l{i}.bias"), l.stride, l.pad)
            if l.norm:
                h = self._norm(i, h, param, mode == "train" and i not in bn_eval_layers)
            if l.act == "relu":
                h = T.relu(h)
            if glist is not None:
                h = T.gate(h, glist[i])
            if i != last and dropout is not None:
                h = self._dropout(i, h, mode, dropout, ids, drop_mem, rng)
            if l.pool == "max":
                h = T.max_pool2d(h)
            elif l.pool == "gap":
                h = T.global_avg_pool(h)
        return h

    def _norm(self, i, h, param, batch_stats: bool):
        mean_k, var_k = f"l{i}.running_mean", f"l{i}.running_var"
        if not batch_stats:
            out, _, _ = T.batch_norm(h, param(f"l{i}.gamma"), param(f"l{i}.beta"),
                                     self.buffers[mean_k], self.buffers[var_k], self.bn_eps)
            return out
        out, mu, var = T.batch_norm(h, param(f"l{i}.gamma"), param(f"l{i}.beta"), eps=self.bn_eps)
        m = h.size // h.shape[1]
        unbiased = var * (m / max(m - 1, 1))
        mom = self.dtype.type(self.bn_momentum)
        rm, rv = self.buffers[mean_k], self.buffers[var_k]
        rm *= 1 - mom
        rm += mom * mu.astype(self.dtype)
        rv *= 1 - mom
        rv += mom * unbiased.astype(self.dtype)
        return out

    def _dropout(self, i, h, mode, dropout, ids, drop_mem, rng):
        if isinstance(dropout, StandardDropout):
            if mode != "train" or dropout.p == 0:
                return h
            keep = (rng.random(h.shape) >= dropout.p).astype(self.dtype)
            return T.multiply(h, keep * self.dtype.type(1.0 / (1.0 - dropout.p)))
        m = dropout.mask(i, h.shape[1], ids=ids, drop_mem=drop_mem, dtype=self.dtype)
        return T.gate(h, m)

    # -- convenience -----------------------------------------------------

    def predict(self, x, batch: int = 2048, **kw) -> np.ndarray:
        """Eval-mode logits, chunked; ``ids`` (if given) are chunked alongside ``x``."""
        ids = kw.pop("ids", None)
        outs = []
        for s in range(0, len(x), batch):
            sub = None if ids is None else ids[s:s + batch]
            outs.append(self.forward(x[s:s + batch], mode="eval", ids=sub, **kw).data)
        if not outs:
            return np.zeros((0, self.spec.num_classes), dtype=self.dtype)
        return np.concatenate(outs)

    def param_leaves(self, layers: Sequence[int] | None = None) -> dict[str, Tensor]:
        names = self.params if layers is None else [n for l in layers for n in self.layer_param_names(l)]
        return {n: Tensor(self.params[n], requires_grad=True, name=n) for n in names}

    def loss_and_grads(self, x, y, weights=None, reduction: str = "sum", layers=None, **fw):
        """Loss value and parameter gradients for one chunk (eval mode by default)."""
        leaves = self.param_leaves(layers)
        logits = self.forward(x, leaves=leaves, **fw)
        loss = T.softmax_cross_entropy(logits, y, weights=weights, reduction=reduction)
        loss.backward()
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in leaves.items()}
        return float(loss.data), grads, logits.data


def build_model(spec: ModelSpec, seed: int | None = None, dtype="f32") -> Model:
    """He-normal (fan-in) weights, zero biases, unit BN scale; deterministic per seed."""
    seed = spec.seed if seed is None else seed
    dt = as_dtype(dtype)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    shapes = spec.shapes()
    for i, l in enumerate(spec.layers):
        rng = np.random.default_rng([seed, i])
        fan_in = spec.fan_in(i)
        gain = 2.0 if l.act == "relu" else 1.0
        std = np.sqrt(gain / fan_in)
        prev = spec.input_shape if i == 0 else shapes[i - 1]
        if l.kind == "dense":
            wshape = (int(np.prod(prev)), l.width)
        else:
            wshape = (l.width, prev[0], l.kernel, l.kernel)
        params[f"l{i}.weight"] = (rng.standard_normal(wshape) * std).astype(dt)
        if l.norm:
            params[f"l{i}.gamma"] = np.ones(l.width, dtype=dt)
            params[f"l{i}.beta"] = np.zeros(l.width, dtype=dt)
            buffers[f"l{i}.running_mean"] = np.zeros(l.width, dtype=dt)
            buffers[f"l{i}.running_var"] = np.ones(l.width, dtype=dt)
        else:
            params[f"l{i}.bias"] = np.zeros(l.width, dtype=dt)
    return Model(spec, params, buffers, dt)


def list_units(model: Model) -> list[tuple[int, int]]:
    return [(l, j) for l, u in enumerate(model.unit_counts()) for j in range(u)]


def reinit_layer(model: Model, layer: int | Sequence[int], params: dict[str, np.ndarray],
                 buffers: dict[str, np.ndarray] | None = None) -> Model:
    """Copy of ``model`` with the parameters of ``layer`` taken from ``params``.

    ``params`` may hold a full checkpoint; only names belonging to the
    requested layer(s) are read. ``buffers`` optionally replaces that layer's
    norm statistics too.
    """
    layers = [layer] if isinstance(layer, (int, np.integer)) else list(layer)
    out = model.copy()
    for l in layers:
        if not 0 <= l < model.n_layers:
            raise IndexError(f"layer {l} out of range")
        for n in model.layer_param_names(l):
            src = np.asarray(params[n])
            if src.shape != model.params[n].shape:
                raise T.ShapeError(f"reinit_layer: {n} has shape {model.params[n].shape}, got {src.shape}")
            out.params[n] = src.astype(model.dtype, copy=True)
        if buffers is not None:
            for n in model.layer_buffer_names(l):
                out.buffers[n] = np.asarray(buffers[n]).astype(model.dtype, copy=True)
    if out.sparse is not None:
        _apply_mask_arrays(out)
    return out


def _apply_mask_arrays(model: Model) -> None:
    for n, m in model.sparse.masks.items():
        model.params[n] *= m


def apply_sparse_mask(model: Model, mask: StaticSparseMask) -> Model:
    """Copy of ``model`` with masked weights zeroed; the trainer also masks their gradients."""
    for n, m in mask.masks.items():
        if n not in model.params or model.params[n].shape != m.shape:
            raise T.ShapeError(f"sparse mask for {n} does not match the model")
    out = model.copy()
    out.sparse = mask
    _apply_mask_arrays(out)
    return out
