"""Accuracy metrics, classification-map rendering and embedding export."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import model
from .data import HsiCube, LabelMap, extract_patches
from .errors import ConfigError, IngestError, RenderError
from .grad import ParamStore


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    per_class: list  # recall per class; NaN where the class is absent from truth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = [None if np.isnan(x) else x for x in self.per_class]
        return d


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    """Rows are truth, columns predictions; labels are 1-based."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def metrics_from_confusion(cm) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ConfigError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    p_o = np.trace(cm) / total
    p_e = float((rows * cols).sum()) / float(total) ** 2
    kappa = 1.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(rows > 0, np.diag(cm) / rows, np.nan)
    aa = float(np.nanmean(recall))
    return Metrics(float(p_o), aa, float(kappa), recall.tolist())


def predict_coords(params: ParamStore, cube: HsiCube, coords, s: int,
                   chunk: int = 512) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    out = np.empty(len(coords), dtype=np.int64)
    for start in range(0, len(coords), chunk):
        sl = slice(start, start + chunk)
        out[sl] = model.predict(params, extract_patches(cube, coords[sl], s))
    return out


def evaluate(params: ParamStore, cube: HsiCube, labels: LabelMap, coords, s: int):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) == 0:
        raise ConfigError("no coordinates to evaluate")
    truth = labels.labels[coords[:, 0], coords[:, 1]]
    if np.any(truth == 0):
        raise ConfigError("evaluation coordinates include unlabeled pixels")
    pred = predict_coords(params, cube, coords, s)
    cm = confusion_matrix(truth, pred, labels.n_classes)
    return cm, metrics_from_confusion(cm)


# ---------------------------------------------------------------------------
# Maps


def default_palette(n_classes: int) -> np.ndarray:
    """Index 0 is black; classes get evenly spaced hues."""
    hues = np.arange(n_classes) / max(n_classes, 1)
    pal = [(0, 0, 0)]
    for h in hues:
        i = int(h * 6)
        f = h * 6 - i
        q, t = 1 - f, f
        rgb = [(1, t, 0), (q, 1, 0), (0, 1, t), (0, q, 1), (t, 0, 1), (1, 0, q)][i % 6]
        pal.append(tuple(int(round(255 * c)) for c in rgb))
    return np.array(pal, dtype=np.uint8)


def render_map(pred, palette) -> bytes:
    """Binary PPM (P6, maxval 255), one pixel per raster cell."""
    pred = np.asarray(pred, dtype=np.int64)
    palette = np.asarray(palette, dtype=np.uint8)
    if pred.ndim != 2:
        raise RenderError(f"class map must be 2-D, got shape {pred.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= len(palette)):
        raise RenderError(
            f"class id {int(pred.max())} outside palette of {len(palette)} colors")
    h, w = pred.shape
    return f"P6\n{w} {h}\n255\n".encode() + palette[pred].tobytes()


def read_ppm(blob: bytes) -> np.ndarray:
    """Parse a P6 image written by :func:`render_map` into (h, w, 3) uint8."""
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise IngestError("not a binary PPM image")
    w, h = (int(x) for x in parts[1].split())
    if parts[2] != b"255":
        raise IngestError("only maxval 255 is supported")
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != h * w * 3:
        raise IngestError("PPM payload length does not match its header")
    return pixels.reshape(h, w, 3)


def predict_map(params: ParamStore, cube: HsiCube, s: int) -> np.ndarray:
    rows, cols = np.indices((cube.height, cube.width))
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return predict_coords(params, cube, coords, s).reshape(cube.height, cube.width)


# ---------------------------------------------------------------------------
# Embedding export


def center_embeddings(params: ParamStore, cube: HsiCube, coords, s: int, chunk: int = 512):
    """Mean and std of the center pixel of each patch: two (n, r) arrays."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    ms, vs = [], []
    for start in range(0, len(coords), chunk):
        field, _ = model.forward(params, extract_patches(cube, coords[start:start + chunk], s))
        ci = model.center_index(field.M.shape[1])
        ms.append(field.M[:, ci])
        vs.append(field.V[:, ci])
    r = params["mean.w"].shape[1]
    if not ms:
        return np.zeros((0, r)), np.zeros((0, r))
    return np.concatenate(ms), np.concatenate(vs)


def dump_embeddings(params: ParamStore, cube: HsiCube, labels: LabelMap, coords, s: int,
                    path) -> None:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    m, v = center_embeddings(params, cube, coords, s)
    r = m.shape[1]
    lab = labels.labels[coords[:, 0], coords[:, 1]]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + [f"m{k}" for k in range(r)] + [f"v{k}" for k in range(r)])
        for row in range(len(coords)):
            writer.writerow([int(lab[row])] + [repr(float(x)) for x in m[row]]
                            + [repr(float(x)) for x in v[row]])
