"""Patch network producing per-pixel Gaussian embeddings and center-pixel logits.

Layout: 1x1 spectral conv (d -> c1), ReLU, 3x3 zero-padded spatial conv
(c1 -> c2), ReLU, then two 1x1 heads (c2 -> r) for the mean and the standard
deviation. A 1x1 classifier (r -> K) reads the mean at the center pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import lap_index
from .errors import ConfigError
from .grad import ParamStore

V_FLOOR = 1e-6


@dataclass
class BackboneConfig:
    d: int
    n_classes: int
    s: int = 5
    c1: int = 24
    c2: int = 24
    r: int = 16
    lap_bias: bool = True

    def __post_init__(self):
        for name in ("d", "n_classes", "s", "c1", "c2", "r"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.r < 2:
            raise ConfigError("embedding dimension r must be >= 2")
        if self.s % 2 == 0:
            raise ConfigError(f"patch side must be odd, got {self.s}")


@dataclass
class GaussianField:
    M: np.ndarray  # (B, T, r)
    V: np.ndarray | None  # (B, T, r) standard deviations; None on the mean-only path


def init_params(cfg: BackboneConfig, seed: int = 0) -> ParamStore:
    """He-normal weights, zero biases, a = exp(0) = 1, b = 0."""
    rng = np.random.default_rng(seed)

    def he(*shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    p = ParamStore()
    p.add("conv1.w", he(cfg.d, cfg.c1, fan_in=cfg.d), "backbone")
    p.add("conv1.b", np.zeros(cfg.c1), "backbone")
    p.add("conv2.w", he(3, 3, cfg.c1, cfg.c2, fan_in=9 * cfg.c1), "backbone")
    p.add("conv2.b", np.zeros(cfg.c2), "backbone")
    p.add("mean.w", he(cfg.c2, cfg.r, fan_in=cfg.c2), "mean_head")
    p.add("mean.b", np.zeros(cfg.r), "mean_head")
    p.add("var.w", he(cfg.c2, cfg.r, fan_in=cfg.c2), "var_head")
    p.add("var.b", np.zeros(cfg.r), "var_head")
    if cfg.lap_bias:
        p.add("var.lap", np.zeros((cfg.s // 2 + 1, cfg.r)), "var_head")
    p.add("cls.w", he(cfg.r, cfg.n_classes, fan_in=cfg.r), "classifier")
    p.add("cls.b", np.zeros(cfg.n_classes), "classifier")
    p.add("metric.log_a", np.zeros(()), "metric_scalars")
    p.add("metric.b", np.zeros(()), "metric_scalars")
    return p


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_input(params: ParamStore, patches: np.ndarray) -> None:
    if patches.ndim != 4 or patches.shape[1] != patches.shape[2]:
        raise ConfigError(f"patches must be (B, s, s, d), got {patches.shape}")
    if patches.shape[3] != params["conv1.w"].shape[0]:
        raise ConfigError(
            f"patch bands {patches.shape[3]} != model input bands {params['conv1.w'].shape[0]}")
    if "var.lap" in params and params["var.lap"].shape[0] != patches.shape[1] // 2 + 1:
        raise ConfigError(f"model was built for a different patch side than {patches.shape[1]}")


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, s, s, c) -> (B, s, s, 3, 3, c) zero-padded 3x3 neighborhoods."""
    b, s, _, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, s, s, 3, 3, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + s, j:j + s, :]
    return cols


def _col2im3(dcols: np.ndarray) -> np.ndarray:
    b, s, _, _, _, c = dcols.shape
    dxp = np.zeros((b, s + 2, s + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + s, j:j + s, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :]


def forward(params: ParamStore, patches: np.ndarray, with_variance: bool = True):
    """Return ``(GaussianField, cache)``; the cache feeds :func:`backward`."""
    _check_input(params, patches)
    x = np.asarray(patches, dtype=np.float64)
    b, s = x.shape[0], x.shape[1]
    c1 = params["conv1.w"].shape[1]
    c2 = params["conv2.w"].shape[3]
    h1_pre = x @ params["conv1.w"] + params["conv1.b"]
    h1 = np.maximum(h1_pre, 0.0)
    cols = _im2col3(h1).reshape(b, s, s, 9 * c1)
    h2_pre = cols @ params["conv2.w"].reshape(9 * c1, c2) + params["conv2.b"]
    h2 = np.maximum(h2_pre, 0.0).reshape(b, s * s, c2)
    M = h2 @ params["mean.w"] + params["mean.b"]
    cache = {"x": x, "h1_pre": h1_pre, "cols": cols, "h2_pre": h2_pre, "h2": h2, "M": M}
    V = None
    if with_variance:
        v_pre = h2 @ params["var.w"] + params["var.b"]
        if "var.lap" in params:
            v_pre = v_pre + params["var.lap"][lap_index(s).lap_of - 1]
        V = softplus(v_pre) + V_FLOOR
        cache["v_pre"] = v_pre
    return GaussianField(M, V), cache


def center_index(T: int) -> int:
    return T // 2


def classify_logits(params: ParamStore, M: np.ndarray) -> np.ndarray:
    """Center-pixel logits of the per-pixel 1x1 classifier."""
    if M.ndim != 3 or M.shape[2] != params["cls.w"].shape[0]:
        raise ConfigError(f"mean tensor shape {M.shape} does not fit the classifier")
    return M[:, center_index(M.shape[1])] @ params["cls.w"] + params["cls.b"]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: ParamStore, patches: np.ndarray) -> np.ndarray:
    """1-based class ids from the mean path only; ties go to the smaller id."""
    field, _ = forward(params, patches, with_variance=False)
    probs = softmax(classify_logits(params, field.M))
    return np.argmax(probs, axis=1) + 1


def backward(params: ParamStore, cache: dict, dM=None, dV=None, dlogits=None) -> dict:
    """Gradients of every parameter given upstream grads on M, V and the logits.

    Missing upstream terms count as zero; every parameter gets an array so
    per-term gradients can be summed exactly.
    """
    grads = {n: np.zeros_like(params[n]) for n in params}
    h2 = cache["h2"]
    b, T, c2 = h2.shape
    dh2 = np.zeros_like(h2)
    touched = False

    if dlogits is not None:
        ci = center_index(T)
        mc = cache["M"][:, ci]
        grads["cls.w"] = mc.T @ dlogits
        grads["cls.b"] = dlogits.sum(axis=0)
        dmc = dlogits @ params["cls.w"].T
        dM = np.zeros_like(cache["M"]) if dM is None else dM.copy()
        dM[:, ci] += dmc

    if dM is not None:
        grads["mean.w"] = h2.reshape(-1, c2).T @ dM.reshape(-1, dM.shape[2])
        grads["mean.b"] = dM.sum(axis=(0, 1))
        dh2 += dM @ params["mean.w"].T
        touched = True

    if dV is not None:
        dv_pre = dV * sigmoid(cache["v_pre"])
        grads["var.w"] = h2.reshape(-1, c2).T @ dv_pre.reshape(-1, dv_pre.shape[2])
        grads["var.b"] = dv_pre.sum(axis=(0, 1))
        if "var.lap" in params:
            lap_of = lap_index(int(round(np.sqrt(T)))).lap_of
            g = np.zeros_like(params["var.lap"])
            np.add.at(g, lap_of - 1, dv_pre.sum(axis=0))
            grads["var.lap"] = g
        dh2 += dv_pre @ params["var.w"].T
        touched = True

    if not touched:
        return grads

    s = int(round(np.sqrt(T)))
    c1 = params["conv1.w"].shape[1]
    dh2_pre = dh2.reshape(b, s, s, c2) * (cache["h2_pre"] > 0)
    cols = cache["cols"]
    grads["conv2.w"] = (cols.reshape(-1, 9 * c1).T @ dh2_pre.reshape(-1, c2)).reshape(3, 3, c1, c2)
    grads["conv2.b"] = dh2_pre.sum(axis=(0, 1, 2))
    dcols = (dh2_pre @ params["conv2.w"].reshape(9 * c1, c2).T).reshape(b, s, s, 3, 3, c1)
    dh1 = _col2im3(dcols)
    dh1_pre = dh1 * (cache["h1_pre"] > 0)
    x = cache["x"]
    grads["conv1.w"] = x.reshape(-1, x.shape[3]).T @ dh1_pre.reshape(-1, c1)
    grads["conv1.b"] = dh1_pre.sum(axis=(0, 1, 2))
    return grads
