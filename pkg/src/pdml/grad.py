"""Parameter store, gradient evaluation, finite-difference checking and checkpoints.

Gradients are hand-derived in the modules that define each computation; a
loss program is any callable ``loss_fn(params, batch, rng) -> (loss, grads)``
where ``grads`` maps parameter names to arrays shaped like the values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError

TAGS = ("backbone", "mean_head", "var_head", "classifier", "metric_scalars")

CHECKPOINT_MAGIC = b"PDC1"
CHECKPOINT_VERSION = 1


@dataclass
class Param:
    value: np.ndarray
    tag: str
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigError(f"unknown routing tag {self.tag!r}")
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


class ParamStore:
    """Ordered name -> (value, grad, tag) mapping."""

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value, tag: str) -> None:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._entries[name] = Param(value, tag)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __setitem__(self, name: str, value) -> None:
        p = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise ConfigError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value = value

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def param(self, name: str) -> Param:
        return self._entries[name]

    def tag(self, name: str) -> str:
        return self._entries[name].tag

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def names_with_tag(self, tag: str) -> list[str]:
        return [n for n, p in self._entries.items() if p.tag == tag]

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad = np.zeros_like(p.value)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._entries.items():
            out._entries[name] = Param(p.value.copy(), p.tag, p.grad.copy())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        return {n: p.grad for n, p in self._entries.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self._entries.items()}

    def equal(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of names, tags and values."""
        if list(self) != list(other):
            return False
        return all(self.tag(n) == other.tag(n) and np.array_equal(self[n], other[n])
                   for n in self)


def make_rng(state) -> np.random.Generator:
    """Build a fresh generator from a seed, seed sequence or saved bit-generator state."""
    if isinstance(state, dict):
        bg = np.random.PCG64()
        bg.state = state
        return np.random.Generator(bg)
    return np.random.default_rng(state)


LossFn = Callable[[ParamStore, object, np.random.Generator], tuple[float, dict]]


def eval_loss_and_grads(loss_fn: LossFn, params: ParamStore, batch, rng_state) -> float:
    """Evaluate ``loss_fn`` and accumulate its gradients into ``params``."""
    loss, grads = loss_fn(params, batch, make_rng(rng_state))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        params.param(name).grad += g
    return float(loss)


@dataclass
class GradCheckReport:
    eps: float
    per_param: dict[str, float]
    per_tag: dict[str, float]
    coords_per_tag: dict[str, int]

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tag.values(), default=0.0)

    def flagged(self, tol: float = 1e-4) -> list[str]:
        return [t for t, e in self.per_tag.items() if e >= tol]

    def to_dict(self) -> dict:
        return {"eps": self.eps, "max_rel_error": self.max_rel_error,
                "per_tag": self.per_tag, "per_param": self.per_param,
                "coords_per_tag": self.coords_per_tag}


def finite_diff_check(loss_fn: LossFn, params: ParamStore, batch, rng_state,
                      eps: float = 1e-4, coords_per_tag: int = 200,
                      seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences under frozen noise.

    Samples up to ``coords_per_tag`` coordinates for every routing tag (all of
    them when the tag owns fewer). Relative error is
    ``|g - n| / max(1, |g|, |n|)``.
    """
    _, analytic = loss_fn(params, batch, make_rng(rng_state))
    pick = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    per_tag: dict[str, float] = {}
    counts: dict[str, int] = {}
    for tag in TAGS:
        names = params.names_with_tag(tag)
        pool = [(n, i) for n in names for i in range(params[n].size)]
        if not pool:
            continue
        idx = pick.choice(len(pool), size=min(coords_per_tag, len(pool)), replace=False)
        counts[tag] = len(idx)
        worst = 0.0
        for k in np.sort(idx):
            name, i = pool[k]
            value = params[name].reshape(-1)
            orig = value[i]
            value[i] = orig + eps
            f_plus, _ = loss_fn(params, batch, make_rng(rng_state))
            value[i] = orig - eps
            f_minus, _ = loss_fn(params, batch, make_rng(rng_state))
            value[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            g = analytic.get(name)
            exact = 0.0 if g is None else float(g.reshape(-1)[i])
            err = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
            per_param[name] = max(per_param.get(name, 0.0), err)
            worst = max(worst, err)
        per_tag[tag] = worst
    return GradCheckReport(eps, per_param, per_tag, counts)


# ---------------------------------------------------------------------------
# Checkpoints: magic, u64 manifest length, JSON manifest, raw float64 LE tensors


def save_checkpoint(path, params: ParamStore, state: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None, extra: dict[str, ParamStore] | None = None) -> None:
    """Write params, optional optimizer state and optional extra stores (e.g. best model)."""
    tensors, blobs = [], []

    def put(group, name, arr, tag=None):
        arr = np.asarray(arr, dtype="<f8")
        tensors.append({"group": group, "name": name, "shape": list(arr.shape), "tag": tag})
        blobs.append(np.ascontiguousarray(arr).tobytes())

    for name in params:
        put("params", name, params[name], params.tag(name))
    for name, arr in (state or {}).items():
        put("state", name, arr)
    for group, store in (extra or {}).items():
        for name in store:
            put(group, name, store[name], store.tag(name))
    manifest = json.dumps({"version": CHECKPOINT_VERSION, "tensors": tensors,
                           "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


@dataclass
class Checkpoint:
    params: ParamStore
    state: dict[str, np.ndarray]
    meta: dict
    extra: dict[str, ParamStore]


def load_checkpoint(path, like: ParamStore | None = None) -> Checkpoint:
    """Read a checkpoint; ``like`` enforces matching names and shapes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<Q", raw, 4)
    try:
        manifest = json.loads(raw[12:12 + mlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
    offset = 12 + mlen
    params, state, extra = ParamStore(), {}, {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if offset + 8 * n > len(raw):
            raise CheckpointError(f"{path}: payload too short for tensor {t['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(t["shape"])
        arr = arr.astype(np.float64)
        offset += 8 * n
        if t["group"] == "params":
            params.add(t["name"], arr, t["tag"])
        elif t["group"] == "state":
            state[t["name"]] = arr
        else:
            extra.setdefault(t["group"], ParamStore()).add(t["name"], arr, t["tag"])
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after tensors")
    if like is not None:
        if list(like) != list(params):
            raise CheckpointError(f"{path}: parameter names differ from expected model")
        for name in like:
            if like[name].shape != params[name].shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name!r}: "
                    f"{params[name].shape} != {like[name].shape}")
    return Checkpoint(params, state, manifest.get("meta", {}), extra)
