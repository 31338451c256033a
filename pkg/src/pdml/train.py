"""Training loop: batching, routed gradients, RMSProp and validation-based selection."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSplit, HsiCube, LabelMap, make_batches
from .errors import CheckpointError, ConfigError, NumericError
from .grad import ParamStore, eval_loss_and_grads, load_checkpoint, save_checkpoint
from .losses import LossConfig, make_loss_fn
from .metrics import evaluate
from .model import BackboneConfig, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    rho: float = 0.9
    rms_eps: float = 1e-8
    seed: int = 0
    selection: str = "best_val_oa"  # or "last"
    patch_size: int = 5
    c1: int = 24
    c2: int = 24
    r: int = 16
    lap_bias: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.selection not in ("best_val_oa", "last"):
            raise ConfigError(f"unknown selection rule {self.selection!r}")

    def backbone(self, d: int, n_classes: int) -> BackboneConfig:
        return BackboneConfig(d=d, n_classes=n_classes, s=self.patch_size, c1=self.c1,
                              c2=self.c2, r=self.r, lap_bias=self.lap_bias)

    def to_dict(self) -> dict:
        return asdict(self)


def rmsprop_step(params: ParamStore, grads: dict, state: dict, lr: float,
                 rho: float = 0.9, eps: float = 1e-8) -> dict:
    """In-place RMSProp update; ``state`` holds the running mean of squared grads."""
    for name in params:
        g = grads[name]
        s = state.get(name)
        if s is None:
            s = np.zeros_like(g)
        s = rho * s + (1.0 - rho) * g * g
        new = params[name] - lr * g / (np.sqrt(s) + eps)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite update for parameter {name!r}")
        state[name] = s
        params[name] = new
    return state


@dataclass
class TrainResult:
    params: ParamStore  # the selected model
    last: ParamStore
    state: dict
    history: list
    best_epoch: int
    best_val_oa: float | None


def _batch_rng_state(seed: int, epoch: int, index: int):
    return [seed, epoch, index, 1]


def train(cube: HsiCube, labels: LabelMap, split: DatasetSplit, cfg: TrainConfig,
          resume: TrainResult | None = None, record_time: bool = True) -> TrainResult:
    """Run ``cfg.epochs`` epochs, continuing from ``resume`` when given."""
    if len(split.train) == 0:
        raise ConfigError("training split is empty")
    use_val = cfg.selection == "best_val_oa"
    if use_val and len(split.val) == 0:
        raise ConfigError("best_val_oa selection needs a validation split")
    bcfg = cfg.backbone(cube.bands, labels.n_classes)
    loss_fn = make_loss_fn(cfg.loss)

    if resume is None:
        params = init_params(bcfg, cfg.seed)
        state: dict = {}
        history: list = []
        best, best_epoch, best_oa = params.copy(), -1, None
    else:
        params, state = resume.last.copy(), {k: v.copy() for k, v in resume.state.items()}
        history = list(resume.history)
        best, best_epoch, best_oa = resume.params.copy(), resume.best_epoch, resume.best_val_oa

    for epoch in range(len(history), cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        batches = make_batches(split.train, cube, labels, cfg.patch_size, cfg.batch_size,
                               cfg.seed, epoch)
        for bi, batch in enumerate(batches):
            if batch.size < 2:
                continue  # the objective needs a pair; a lone leftover patch is dropped
            params.zero_grad()
            try:
                loss = eval_loss_and_grads(loss_fn, params, batch,
                                           _batch_rng_state(cfg.seed, epoch, bi))
                rmsprop_step(params, params.grads(), state, cfg.lr, cfg.rho, cfg.rms_eps)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {bi}: {e}") from e
            losses.append(loss)
        val_oa = None
        if len(split.val):
            _, m = evaluate(params, cube, labels, split.val, cfg.patch_size)
            val_oa = m.oa
        if use_val:
            if best_oa is None or val_oa > best_oa:
                best, best_epoch, best_oa = params.copy(), epoch, val_oa
        else:
            best, best_epoch = params, epoch
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_oa": val_oa}
        if record_time:
            entry["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        history.append(entry)
        log.info("epoch %d loss %.6f val_oa %s", epoch, entry["train_loss"], val_oa)

    return TrainResult(best.copy(), params, state, history, best_epoch, best_oa)


# ---------------------------------------------------------------------------
# Persistence


def save_result(path, result: TrainResult, cfg: TrainConfig, data_meta: dict | None = None):
    """Write the selected model plus everything needed to resume training."""
    meta = {
        "train_config": cfg.to_dict(),
        "data": data_meta or {},
        "best_epoch": result.best_epoch,
        "best_val_oa": result.best_val_oa,
        "history": result.history,
        # per-batch streams are derived from (seed, epoch, batch index), so this resumes them
        "rng": {"generator": "PCG64", "seed": cfg.seed, "next_epoch": len(result.history)},
    }
    save_checkpoint(path, result.params, result.state, meta, extra={"last": result.last})


def load_result(path) -> tuple[TrainResult, TrainConfig, dict]:
    ck = load_checkpoint(path)
    try:
        cfg = TrainConfig(**ck.meta["train_config"])
        last = ck.extra.get("last", ck.params)
        result = TrainResult(ck.params, last, ck.state, list(ck.meta["history"]),
                             ck.meta["best_epoch"], ck.meta["best_val_oa"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: incomplete training manifest ({e})") from e
    return result, cfg, ck.meta.get("data", {})


def write_history(path, history: list) -> None:
    with open(path, "w") as f:
        for entry in history:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
