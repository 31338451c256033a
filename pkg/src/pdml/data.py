"""Hyperspectral cube ingestion, standardization, splitting and patch extraction.

Cubes are held as ``(height, width, bands)`` arrays; label maps as
``(height, width)`` integer arrays where 0 marks an unlabeled pixel.
"""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestError, SplitError

CUBE_MAGIC = b"HSC1"
LABEL_MAGIC = b"HSL1"
_HEADER = struct.Struct("<4sIII")


@dataclass
class HsiCube:
    data: np.ndarray  # (height, width, bands)
    standardized: bool = False

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ConfigError(f"cube data must be 3-D, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # (height, width), 0 = unlabeled
    n_classes: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ConfigError(f"label map must be 2-D, got shape {self.labels.shape}")
        if self.labels.size and int(self.labels.max()) > self.n_classes:
            raise ConfigError(
                f"label {int(self.labels.max())} exceeds class count {self.n_classes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def labeled_coords(self) -> np.ndarray:
        return np.argwhere(self.labels > 0)


@dataclass
class PatchBatch:
    patches: np.ndarray  # (B, s, s, d)
    center_labels: np.ndarray  # (B,) 1-based
    coords: np.ndarray  # (B, 2)

    @property
    def size(self) -> int:
        return self.patches.shape[0]

    @property
    def s(self) -> int:
        return self.patches.shape[1]


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple[float, float, float]

    def part(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split part {name!r}")
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        obj = json.loads(text)
        parts = {k: np.asarray(obj[k], dtype=np.int64).reshape(-1, 2)
                 for k in ("train", "val", "test")}
        return cls(seed=obj["seed"], ratios=tuple(obj["ratios"]), **parts)


@dataclass(frozen=True)
class LapIndex:
    s: int
    lap_of: np.ndarray  # (s*s,) lap number per flat pixel, 1-based
    counts: tuple[int, ...]

    @property
    def n_laps(self) -> int:
        return len(self.counts)


# ---------------------------------------------------------------------------
# File formats


def save_cube(cube: HsiCube, path) -> None:
    h, w, d = cube.data.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CUBE_MAGIC, h, w, d))
        f.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())


def load_cube(path) -> HsiCube:
    raw = _read_bytes(path)
    if len(raw) < _HEADER.size:
        raise IngestError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, h, w, d = _HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise IngestError(f"{path}: bad magic {magic!r} at byte offset 0")
    n = h * w * d
    expected = _HEADER.size + 4 * n
    if len(raw) < expected:
        raise IngestError(
            f"{path}: truncated payload at byte offset {len(raw)}, "
            f"expected {expected} bytes for {h}x{w}x{d}")
    values = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise IngestError(
            f"{path}: non-finite value at byte offset {_HEADER.size + 4 * int(bad[0])}")
    return HsiCube(values.astype(np.float32).reshape(h, w, d))


def save_labels(labels: LabelMap, path) -> None:
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(LABEL_MAGIC, h, w, labels.n_classes))
        f.write(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def load_labels(path) -> LabelMap:
    raw = _read_bytes(path)
    if len(raw) < _HEADER.size:
        raise IngestError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, h, w, k = _HEADER.unpack_from(raw)
    if magic != LABEL_MAGIC:
        raise IngestError(f"{path}: bad magic {magic!r} at byte offset 0")
    expected = _HEADER.size + 2 * h * w
    if len(raw) < expected:
        raise IngestError(
            f"{path}: truncated payload at byte offset {len(raw)}, expected {expected} bytes")
    values = np.frombuffer(raw, dtype="<u2", count=h * w, offset=_HEADER.size)
    over = np.flatnonzero(values > k)
    if over.size:
        raise IngestError(
            f"{path}: label {int(values[over[0]])} > K={k} at byte offset "
            f"{_HEADER.size + 2 * int(over[0])}")
    return LabelMap(values.astype(np.int64).reshape(h, w), k)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IngestError(f"cannot read {path}: {e}") from e


# ---------------------------------------------------------------------------
# Preprocessing


def standardize(cube: HsiCube) -> HsiCube:
    """Per-band z-score over all pixels, population std."""
    flat = cube.data.reshape(-1, cube.bands).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    zero = np.flatnonzero(std == 0)
    if zero.size:
        raise ConfigError(f"band {int(zero[0])} has zero variance")
    out = (flat - mean) / std
    return HsiCube(out.reshape(cube.data.shape), standardized=True)


def _check_side(s: int) -> None:
    if s < 1 or s % 2 == 0:
        raise ConfigError(f"patch side must be odd and positive, got {s}")


def reflect_index(idx, n: int) -> np.ndarray:
    """Mirror out-of-range indices about the border without repeating the edge."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patches(cube: HsiCube, coords, s: int) -> np.ndarray:
    """Return ``(len(coords), s, s, bands)`` windows centered on ``coords``."""
    _check_side(s)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    half = s // 2
    offs = np.arange(-half, half + 1)
    rows = reflect_index(coords[:, :1] + offs, cube.height)  # (n, s)
    cols = reflect_index(coords[:, 1:] + offs, cube.width)
    return cube.data[rows[:, :, None], cols[:, None, :]]


def extract_patch(cube: HsiCube, row: int, col: int, s: int) -> np.ndarray:
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ConfigError(f"pixel ({row}, {col}) outside {cube.height}x{cube.width} cube")
    return extract_patches(cube, [(row, col)], s)[0]


@functools.lru_cache(maxsize=None)
def lap_index(s: int) -> LapIndex:
    _check_side(s)
    half = s // 2
    r, c = np.meshgrid(np.arange(s) - half, np.arange(s) - half, indexing="ij")
    lap_of = (np.maximum(np.abs(r), np.abs(c)) + 1).ravel()
    lap_of.setflags(write=False)
    counts = tuple(1 if j == 1 else (2 * j - 1) ** 2 - (2 * j - 3) ** 2
                   for j in range(1, half + 2))
    return LapIndex(s, lap_of, counts)


# ---------------------------------------------------------------------------
# Splitting and batching


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand the remainder out train -> val -> test."""
    counts = [int(np.floor(r * n + 1e-9)) for r in ratios]
    i = 0
    while sum(counts) < n:
        counts[i % len(counts)] += 1
        i += 1
    return counts


def stratified_split(labels: LabelMap, ratios=(0.2, 0.1, 0.7), seed: int = 0) -> DatasetSplit:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for cls in range(1, labels.n_classes + 1):
        coords = np.argwhere(labels.labels == cls)
        if len(coords) == 0:
            continue
        if len(coords) < 3:
            raise SplitError(f"class {cls} has only {len(coords)} labeled pixels (need >= 3)")
        coords = coords[rng.permutation(len(coords))]
        start = 0
        for k, n in enumerate(split_counts(len(coords), ratios)):
            parts[k].append(coords[start:start + n])
            start += n
    merged = [np.concatenate(p).astype(np.int64) if p else np.zeros((0, 2), np.int64)
              for p in parts]
    return DatasetSplit(*merged, seed=seed, ratios=ratios)


def make_batches(coords, cube: HsiCube, labels: LabelMap, s: int, batch_size: int,
                 seed: int, epoch: int) -> Iterator[PatchBatch]:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) == 0:
        raise ConfigError("cannot batch an empty coordinate list")
    rng = np.random.default_rng([seed, epoch])
    order = coords[rng.permutation(len(coords))]
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield PatchBatch(
            patches=extract_patches(cube, chunk, s),
            center_labels=labels.labels[chunk[:, 0], chunk[:, 1]].astype(np.int64),
            coords=chunk,
        )


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class SynthSpec:
    n_classes: int = 4
    height: int = 64
    width: int = 64
    bands: int = 16
    grid: tuple[int, int] = (4, 4)
    seed: int = 0
    noise: float = 0.05
    mixing: float = 1.0


def _signature(rng: np.random.Generator, bands: int) -> np.ndarray:
    x = np.arange(bands, dtype=np.float64)
    sig = np.full(bands, rng.uniform(0.1, 0.4))
    for _ in range(3):
        mu = rng.uniform(0, bands - 1)
        width = rng.uniform(bands / 8, bands / 3)
        sig += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((x - mu) / width) ** 2)
    return sig


def _axis_weights(n: int, tile: float, n_tiles: int, mixing: float) -> np.ndarray:
    """Fraction of the box [i - mixing, i + mixing] covered by each tile along one axis.

    Pixel i sits at coordinate i; tile t spans [t * tile, (t + 1) * tile).
    Tiles beyond the raster are folded onto the outermost tile.
    """
    pos = np.arange(n, dtype=np.float64)
    w = np.zeros((n, n_tiles))
    if mixing == 0:
        w[np.arange(n), np.minimum((pos // tile).astype(int), n_tiles - 1)] = 1.0
        return w
    lo, hi = pos - mixing, pos + mixing
    edges = np.arange(n_tiles + 1) * tile
    edges[0], edges[-1] = -np.inf, np.inf
    for t in range(n_tiles):
        overlap = np.minimum(hi, edges[t + 1]) - np.maximum(lo, edges[t])
        w[:, t] = np.clip(overlap, 0, None) / (2 * mixing)
    return w


def synth_cube(spec: SynthSpec) -> tuple[HsiCube, LabelMap]:
    """Tile the raster into class regions and blend signatures near tile edges.

    Each pixel mixes the signatures of every tile overlapped by a square box of
    half-width ``spec.mixing`` centered on it; the mixing weights are the
    overlap fractions. The label is the dominant class, ties going to the
    tile that contains the pixel.
    """
    k, (gr, gc) = spec.n_classes, spec.grid
    if k < 2:
        raise ConfigError("synthetic scene needs at least 2 classes")
    if spec.bands < 4:
        raise ConfigError("synthetic scene needs at least 4 bands")
    if gr * gc < k:
        raise ConfigError(f"grid {gr}x{gc} cannot hold {k} classes")
    th, tw = spec.height / gr, spec.width / gc
    if spec.mixing < 0 or spec.mixing >= min(th, tw) / 2:
        raise ConfigError(
            f"mixing width {spec.mixing} must be below half the tile size {min(th, tw) / 2}")
    rng = np.random.default_rng(spec.seed)
    sigs = np.stack([_signature(rng, spec.bands) for _ in range(k)])
    perm = rng.permutation(k)
    tile_class = perm[(np.arange(gr)[:, None] + np.arange(gc)[None, :]) % k]  # 0-based

    wr = _axis_weights(spec.height, th, gr, spec.mixing)  # (H, gr)
    wc = _axis_weights(spec.width, tw, gc, spec.mixing)  # (W, gc)
    onehot = np.eye(k)[tile_class]  # (gr, gc, k)
    class_w = np.einsum("it,ju,tuk->ijk", wr, wc, onehot)

    own_r = np.minimum((np.arange(spec.height) // th).astype(int), gr - 1)
    own_c = np.minimum((np.arange(spec.width) // tw).astype(int), gc - 1)
    own = tile_class[own_r[:, None], own_c[None, :]]
    best = class_w.max(axis=2, keepdims=True)
    is_best = class_w >= best - 1e-12
    own_is_best = np.take_along_axis(is_best, own[..., None], axis=2)[..., 0]
    label = np.where(own_is_best, own, class_w.argmax(axis=2)) + 1

    data = class_w @ sigs
    if spec.noise > 0:
        data = data + rng.normal(0.0, spec.noise, size=data.shape)
    return HsiCube(data.astype(np.float32)), LabelMap(label.astype(np.int64), k)


def boundary_mask(labels: LabelMap) -> np.ndarray:
    """True where a pixel's 8-neighborhood contains a different label."""
    lab = np.pad(labels.labels, 1, mode="edge")
    h, w = labels.shape
    center = lab[1:-1, 1:-1]
    out = np.zeros((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out |= lab[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] != center
    return out


def write_synthetic(spec: SynthSpec, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cube, labels = synth_cube(spec)
    paths = {"cube": out / "cube.hsc", "labels": out / "labels.hsl",
             "spec": out / "synth.json"}
    save_cube(cube, paths["cube"])
    save_labels(labels, paths["labels"])
    meta = asdict(spec)
    meta["grid"] = list(spec.grid)
    paths["spec"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths
