"""Objective terms: Monte-Carlo match probability, probabilistic contrastive loss,
lap variance ordering, deterministic contrastive baseline and cross-entropy.

The scalar functions at the top define each term on a single input. The
``*_term`` functions evaluate a whole batch and return gradients with respect
to the network outputs; :func:`pdml_objective` wires them through the model.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import model
from .data import LapIndex, PatchBatch, lap_index
from .errors import ConfigError
from .grad import ParamStore

P_CLAMP = 1e-12
TERMS = ("ce", "var", "pair")


@dataclass
class LossConfig:
    alpha: float = 0.2
    mc_samples: int = 3
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    hinge_var: bool = True
    pair_cap: int = 4096
    pair_scope: str = "batch"  # or "patch"
    metric: str = "pcon"  # or "contrastive" (deterministic baseline on the same samples)

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.pair_cap < 1:
            raise ConfigError("pair_cap must be >= 1")
        if self.pair_scope not in ("batch", "patch"):
            raise ConfigError(f"unknown pair_scope {self.pair_scope!r}")
        if self.metric not in ("pcon", "contrastive"):
            raise ConfigError(f"unknown metric {self.metric!r}")


def logistic(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Single-input definitions


def mc_sample(m, v, K: int, rng: np.random.Generator) -> np.ndarray:
    """K reparameterized draws ``m + v * eps``; returns (K, r)."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    eps = rng.standard_normal((K, m.shape[-1]))
    return m + v * eps


def match_probability(z1, z2, a: float, b: float) -> float:
    d = np.linalg.norm(np.asarray(z1, dtype=np.float64) - np.asarray(z2, dtype=np.float64))
    return float(logistic(-a * d + b))


def dist_match_probability(samples1, samples2, a: float, b: float) -> float:
    """Average match probability over all K1 x K2 sample pairs."""
    s1 = np.asarray(samples1, dtype=np.float64)
    s2 = np.asarray(samples2, dtype=np.float64)
    d = np.linalg.norm(s1[:, None, :] - s2[None, :, :], axis=-1)
    return float(logistic(-a * d + b).mean())


def pcon_loss(p: float, is_match: bool) -> float:
    p = min(max(float(p), P_CLAMP), 1.0 - P_CLAMP)
    return -np.log(p) if is_match else -np.log1p(-p)


def variance_lap_loss(V, lap: LapIndex, alpha: float, hinge_var: bool = True) -> float:
    """Penalty for inner laps whose mean std is not (1 + alpha) below the next lap out.

    ``V`` is the (T, r) std matrix of one patch.
    """
    if lap.n_laps < 2:
        raise ConfigError("variance lap loss needs s >= 3")
    per_pixel = np.asarray(V, dtype=np.float64).mean(axis=1)
    lap_mean = np.array([per_pixel[lap.lap_of == j].mean() for j in range(1, lap.n_laps + 1)])
    total = 0.0
    for j in range(1, lap.n_laps):
        term = -(lap_mean[j] - (1.0 + alpha) * lap_mean[j - 1])
        total += max(term, 0.0) if hinge_var else term
    return total


def contrastive_loss(zi, zj, y: int, beta: float) -> float:
    d = np.linalg.norm(np.asarray(zi, dtype=np.float64) - np.asarray(zj, dtype=np.float64))
    return y * d ** 2 + (1 - y) * max(beta - d, 0.0) ** 2


def cross_entropy(logits, label: int) -> float:
    """``label`` is 1-based."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[label - 1])


# ---------------------------------------------------------------------------
# Batched terms with gradients w.r.t. network outputs


def lap_variance_term(V: np.ndarray, lap: LapIndex, alpha: float, hinge_var: bool):
    """Mean over patches of :func:`variance_lap_loss`; returns ``(value, dV)``."""
    if lap.n_laps < 2:
        raise ConfigError("variance lap loss needs s >= 3")
    B, T, r = V.shape
    onehot = np.eye(lap.n_laps)[lap.lap_of - 1]  # (T, L)
    counts = np.asarray(lap.counts, dtype=np.float64)
    per_pixel = V.mean(axis=2)  # (B, T)
    lap_mean = per_pixel @ onehot / counts  # (B, L)
    raw = -(lap_mean[:, 1:] - (1.0 + alpha) * lap_mean[:, :-1])  # (B, L-1)
    if hinge_var:
        active = raw > 0
        terms = np.where(active, raw, 0.0)
    else:
        active = np.ones_like(raw, dtype=bool)
        terms = raw
    value = terms.sum(axis=1).mean()
    g = active / B
    d_lap = np.zeros_like(lap_mean)
    d_lap[:, 1:] -= g
    d_lap[:, :-1] += (1.0 + alpha) * g
    d_pixel = (d_lap / counts) @ onehot.T  # (B, T)
    dV = np.repeat(d_pixel[:, :, None] / r, r, axis=2)
    return float(value), dV


@functools.lru_cache(maxsize=16)
def _all_pairs(n: int):
    i, j = np.triu_indices(n, 1)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


def select_pairs(center_labels: np.ndarray, T: int, cap: int, rng: np.random.Generator,
                 scope: str = "batch"):
    """Pick pixel-distribution pairs for the pair term.

    Pixels are indexed ``patch * T + position`` and inherit their patch's
    center label. Returns ``(i, j, match)`` in ascending enumeration order.
    Above ``cap`` candidates, pairs are drawn without replacement, half
    matches and half non-matches when both pools allow it.
    """
    B = len(center_labels)
    if scope == "batch":
        i, j = _all_pairs(B * T)
    else:
        pi, pj = _all_pairs(T)
        offs = (np.arange(B) * T)[:, None]
        i, j = (pi + offs).ravel(), (pj + offs).ravel()
    labels = np.repeat(np.asarray(center_labels), T)
    match = labels[i] == labels[j]
    if len(i) <= cap:
        return i, j, match
    pos, neg = np.flatnonzero(match), np.flatnonzero(~match)
    n_pos = min(cap // 2, len(pos))
    n_neg = min(cap - n_pos, len(neg))
    n_pos = min(cap - n_neg, len(pos))
    keep = np.sort(np.concatenate([
        rng.choice(pos, size=n_pos, replace=False),
        rng.choice(neg, size=n_neg, replace=False),
    ]))
    return i[keep], j[keep], match[keep]


def _scatter_rows(idx: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """Sum ``rows`` into an (n, r) array at row positions ``idx``."""
    r = rows.shape[1]
    flat = (idx[:, None] * r + np.arange(r)).ravel()
    return np.bincount(flat, weights=rows.ravel(), minlength=n * r).reshape(n, r)


def pair_term(M: np.ndarray, V: np.ndarray, eps: np.ndarray, pairs, log_a: float, b: float,
              metric: str = "pcon", beta: float = 1.0):
    """Sum of pair losses over ``pairs``, normalized by the pixel count B*T.

    ``eps`` holds the frozen unit-normal draws, shape (B, T, K, r).
    Returns ``(value, dM, dV, d_log_a, d_b)``.
    """
    B, T, r = M.shape
    K = eps.shape[2]
    N = B * T
    pi, pj, match = pairs
    Mf, Vf, Ef = M.reshape(N, r), V.reshape(N, r), eps.reshape(N, K, r)
    zi = Mf[pi, None, :] + Vf[pi, None, :] * Ef[pi]  # (P, K, r)
    zj = Mf[pj, None, :] + Vf[pj, None, :] * Ef[pj]
    diff = zi[:, :, None, :] - zj[:, None, :, :]  # (P, K, K, r)
    dist = np.sqrt(np.einsum("pklr,pklr->pkl", diff, diff))  # (P, K, K)
    scale = 1.0 / N
    y = match.astype(np.float64)[:, None, None]
    d_log_a = d_b = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_dist = np.where(dist > 0, 1.0 / dist, 0.0)

    if metric == "pcon":
        a = float(np.exp(log_a))
        p = logistic(-a * dist + b)
        phat = p.mean(axis=(1, 2))
        pc = np.clip(phat, P_CLAMP, 1.0 - P_CLAMP)
        losses = np.where(match, -np.log(pc), -np.log1p(-pc))
        inside = (phat > P_CLAMP) & (phat < 1.0 - P_CLAMP)
        dphat = np.where(match, -1.0 / pc, 1.0 / (1.0 - pc)) * inside * scale
        du = dphat[:, None, None] / (K * K) * p * (1.0 - p)
        d_log_a = float(-(du * dist).sum() * a)
        d_b = float(du.sum())
        coef = -a * du * inv_dist  # dL/d(diff) = coef * diff
    else:
        hinge = np.maximum(beta - dist, 0.0)
        c = y * dist ** 2 + (1.0 - y) * hinge ** 2
        losses = c.mean(axis=(1, 2))
        w = scale / (K * K)
        coef = 2.0 * w * (y - (1.0 - y) * hinge * inv_dist)

    dzi = np.einsum("pkl,pklr->pkr", coef, diff)  # (P, K, r)
    dzj = -np.einsum("pkl,pklr->plr", coef, diff)
    dMf = _scatter_rows(pi, dzi.sum(axis=1), N) + _scatter_rows(pj, dzj.sum(axis=1), N)
    dVf = (_scatter_rows(pi, np.einsum("pkr,pkr->pr", dzi, Ef[pi]), N)
           + _scatter_rows(pj, np.einsum("pkr,pkr->pr", dzj, Ef[pj]), N))
    value = float(losses.sum() * scale)
    return value, dMf.reshape(B, T, r), dVf.reshape(B, T, r), d_log_a, d_b


def cross_entropy_term(logits: np.ndarray, labels: np.ndarray):
    """Batch-mean cross-entropy with 1-based labels; returns ``(value, dlogits)``."""
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.asarray(labels) - 1
    value = float((lse - z[np.arange(B), idx]).mean())
    probs = np.exp(z - lse[:, None])
    probs[np.arange(B), idx] -= 1.0
    return value, probs / B


# ---------------------------------------------------------------------------
# Composite objective


def draw_noise(rng: np.random.Generator, B: int, T: int, K: int, r: int) -> np.ndarray:
    return rng.standard_normal((B, T, K, r))


def total_loss(params: ParamStore, batch: PatchBatch, field: model.GaussianField,
               lap: LapIndex, cfg: LossConfig, rng: np.random.Generator) -> float:
    """Weighted sum of the lap variance, pair and cross-entropy terms."""
    return _terms(params, batch, field, lap, cfg, rng)[0]


def _terms(params, batch, field, lap, cfg, rng):
    B, T, r = field.M.shape
    if B < 2:
        raise ConfigError(f"the objective needs at least 2 patches, got {B}")
    values = {t: 0.0 for t in TERMS}
    upstream = {}
    if cfg.lambda1 > 0:
        v, dV = lap_variance_term(field.V, lap, cfg.alpha, cfg.hinge_var)
        values["var"] = v
        upstream["var"] = {"dV": cfg.lambda1 * dV}
    if cfg.lambda2 > 0:
        eps = draw_noise(rng, B, T, cfg.mc_samples, r)
        pairs = select_pairs(batch.center_labels, T, cfg.pair_cap, rng, cfg.pair_scope)
        v, dM, dV, dla, db = pair_term(field.M, field.V, eps, pairs,
                                       float(params["metric.log_a"]), float(params["metric.b"]),
                                       cfg.metric, cfg.beta)
        values["pair"] = v
        upstream["pair"] = {"dM": cfg.lambda2 * dM, "dV": cfg.lambda2 * dV,
                            "metric.log_a": cfg.lambda2 * dla, "metric.b": cfg.lambda2 * db}
    logits = model.classify_logits(params, field.M)
    v, dlogits = cross_entropy_term(logits, batch.center_labels)
    values["ce"] = v
    if cfg.lambda3 > 0:
        upstream["ce"] = {"dlogits": cfg.lambda3 * dlogits}
    total = cfg.lambda3 * values["ce"]
    if cfg.lambda1 > 0:
        total = total + cfg.lambda1 * values["var"]
    if cfg.lambda2 > 0:
        total = total + cfg.lambda2 * values["pair"]
    return float(total), values, upstream


def pdml_objective(params: ParamStore, batch: PatchBatch, cfg: LossConfig,
                   rng: np.random.Generator):
    """Forward pass, all terms, and one backward pass per term.

    Returns ``(total, term_values, term_grads)`` where ``term_grads[t]`` holds
    the full parameter gradient of the weighted term ``t`` alone.
    """
    field, cache = model.forward(params, batch.patches)
    lap = lap_index(batch.s)
    total, values, upstream = _terms(params, batch, field, lap, cfg, rng)
    term_grads = {}
    for t in TERMS:
        up = upstream.get(t)
        if up is None:
            term_grads[t] = {n: np.zeros_like(params[n]) for n in params}
            continue
        g = model.backward(params, cache, dM=up.get("dM"), dV=up.get("dV"),
                           dlogits=up.get("dlogits"))
        if t == "pair":
            g["metric.log_a"] = np.asarray(up["metric.log_a"])
            g["metric.b"] = np.asarray(up["metric.b"])
        term_grads[t] = g
    return total, values, term_grads


# Which objective terms may update each routing tag.
ROUTES = {
    "classifier": ("ce",),
    "var_head": ("var", "pair"),
    "mean_head": ("ce", "var", "pair"),
    "backbone": ("ce", "var", "pair"),
    "metric_scalars": ("pair",),
}


def apply_routing(term_grads: dict, tags: dict[str, str]) -> dict[str, np.ndarray]:
    """Sum per-term gradients, keeping only the terms each tag may receive."""
    out = {}
    for name, tag in tags.items():
        if tag not in ROUTES:
            raise ConfigError(f"unknown routing tag {tag!r}")
        g = None
        for t in ROUTES[tag]:
            part = term_grads[t][name]
            g = part.copy() if g is None else g + part
        out[name] = g
    return out


def make_loss_fn(cfg: LossConfig):
    """Routed PDML objective as a ``loss_fn(params, batch, rng)`` program."""

    def loss_fn(params, batch, rng):
        total, _, term_grads = pdml_objective(params, batch, cfg, rng)
        return total, apply_routing(term_grads, {n: params.tag(n) for n in params})

    return loss_fn
