"""Single-scene rasters: DFGP1 container I/O, CSV import, normalization and
train/test sampling.

DFGP1 layout (all little endian)::

    b"DFGP" 0x01 | u32 height | u32 width | u32 channels | payload

The payload is float32, row-major, channel-fastest. Mask files use the same
header with ``channels = 1`` and a u8 payload (0 Invalid, 1 Observed,
2 Missing). Value rasters mark nodata with -9999.0.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyTrainingSet, FormatError, InsufficientSamples, ShapeError
from .numeric import make_rng

MAGIC = b"DFGP"
VERSION = 1
HEADER = struct.Struct("<4sBIII")
NODATA = -9999.0
MAX_ELEMENTS = 2 ** 34

INVALID, OBSERVED, MISSING = 0, 1, 2

TARGET_LO, TARGET_HI = 0.05, 0.95


@dataclass
class RasterStack:
    values: np.ndarray  # (H, W, C) float32, NaN where nodata
    resolution_km: float = 1.0
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"raster stack must be H x W x C with positive sizes, got {v.shape}")
        if not self.resolution_km > 0:
            raise ValueError("resolution_km must be positive")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def nodata(self) -> np.ndarray:
        """(H, W) bool, True where any channel is missing."""
        return np.any(~np.isfinite(self.values), axis=2)


@dataclass
class Mask:
    labels: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ShapeError("mask must be two-dimensional")
        if not np.isin(lab, (INVALID, OBSERVED, MISSING)).all():
            raise FormatError("mask labels must be 0, 1 or 2")
        self.labels = lab.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def flat(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels.ravel() == label)


@dataclass
class NormState:
    """Per-channel z-score and target min-max statistics (Observed pixels)."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray
    target_min: float
    target_max: float
    lo: float = TARGET_LO
    hi: float = TARGET_HI

    def scale_target(self, t):
        t = np.asarray(t, dtype=np.float64)
        span = self.target_max - self.target_min
        if span == 0:
            return np.full_like(t, 0.5 * (self.lo + self.hi))
        return self.lo + (t - self.target_min) / span * (self.hi - self.lo)

    def unscale_target(self, s):
        s = np.asarray(s, dtype=np.float64)
        return self.target_min + (s - self.lo) / (self.hi - self.lo) * (self.target_max - self.target_min)

    def unscale_std(self, s):
        return np.asarray(s, dtype=np.float64) * (self.target_max - self.target_min) / (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "constant": self.constant.astype(bool).tolist(),
                "target_min": self.target_min, "target_max": self.target_max,
                "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "NormState":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64),
                   np.asarray(d["constant"], bool), float(d["target_min"]), float(d["target_max"]),
                   float(d.get("lo", TARGET_LO)), float(d.get("hi", TARGET_HI)))


@dataclass
class Dataset:
    """All valid pixels, flattened.

    ``pixels`` are flat indices ``row * W + col``; ``labels`` holds their mask
    label. ``targets`` are scaled, ``targets_raw`` in original units (NaN
    where unknown).
    """

    pixels: np.ndarray
    labels: np.ndarray
    coords: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    targets_raw: np.ndarray
    norm_state: NormState
    image: np.ndarray  # (H, W, C) float32 standardized covariates, 0 at nodata
    resolution_km: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def rows_of(self, pixels: np.ndarray) -> np.ndarray:
        """Row positions in this dataset of the given flat pixel indices."""
        pos = np.searchsorted(self.pixels, pixels)
        if np.any(pos >= self.pixels.size) or np.any(self.pixels[np.minimum(pos, self.pixels.size - 1)] != pixels):
            raise IndexError("pixel not present in dataset")
        return pos


@dataclass
class PredictionField:
    mean: np.ndarray
    stddev: np.ndarray
    mask: Mask
    norm_state: NormState | None = None
    metrics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# DFGP1 container


def _write(path, payload: np.ndarray, dtype: str) -> None:
    h, w, c = payload.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, h, w, c))
        fh.write(np.ascontiguousarray(payload, dtype=dtype).tobytes())


def _read(path, dtype: str) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w, c = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = h * w * c
    if min(h, w, c) < 1 or n > MAX_ELEMENTS:
        raise FormatError(f"{path}: invalid dimensions {h}x{w}x{c}")
    itemsize = np.dtype(dtype).itemsize
    if len(data) != HEADER.size + n * itemsize:
        raise FormatError(f"{path}: payload size {len(data) - HEADER.size} != {n * itemsize}")
    return np.frombuffer(data, dtype=dtype, offset=HEADER.size).reshape(h, w, c).copy()


def write_stack(path, stack: RasterStack) -> None:
    vals = np.where(np.isfinite(stack.values), stack.values, np.float32(NODATA))
    _write(path, vals, "<f4")


def read_stack(path, resolution_km: float = 1.0) -> RasterStack:
    """Read a DFGP1 value raster (or the covariates of a CSV scene).

    Nodata sentinels come back as NaN; :attr:`RasterStack.nodata` flags them.
    """
    if str(path).lower().endswith(".csv"):
        return read_csv_scene(path, resolution_km)[0]
    vals = _read(path, "<f4").astype(np.float32)
    vals[vals == np.float32(NODATA)] = np.nan
    return RasterStack(vals, resolution_km)


def write_mask(path, mask: Mask) -> None:
    _write(path, mask.labels[:, :, None], "u1")


def read_mask(path) -> Mask:
    lab = _read(path, "u1")
    if lab.shape[2] != 1:
        raise FormatError(f"{path}: mask must have one channel")
    try:
        return Mask(lab[:, :, 0])
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_csv_scene(path, resolution_km: float = 1.0) -> tuple[RasterStack, RasterStack, Mask]:
    """Import ``row,col,<features...>,target``; an empty target cell marks a
    Missing pixel, pixels absent from the file are Invalid."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        header = [h.strip() for h in header]
        if len(header) < 4 or header[:2] != ["row", "col"] or header[-1] != "target":
            raise FormatError(f"{path}: header must be row,col,<features...>,target")
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FormatError(f"{path}:{line_no}: expected {len(header)} fields")
            rows.append(rec)
    if not rows:
        raise FormatError(f"{path}: no data rows")

    def num(s: str) -> float:
        s = s.strip()
        return float(s) if s else np.nan

    try:
        rc = np.array([[int(r[0]), int(r[1])] for r in rows])
        feats = np.array([[num(v) for v in r[2:-1]] for r in rows], dtype=np.float64)
        tgt = np.array([num(r[-1]) for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if rc.min() < 0:
        raise FormatError(f"{path}: negative row/col")
    h, w = int(rc[:, 0].max()) + 1, int(rc[:, 1].max()) + 1
    if h * w * feats.shape[1] > MAX_ELEMENTS:
        raise FormatError(f"{path}: raster too large")
    cov = np.full((h, w, feats.shape[1]), np.nan, dtype=np.float32)
    target = np.full((h, w, 1), np.nan, dtype=np.float32)
    labels = np.zeros((h, w), dtype=np.uint8)
    cov[rc[:, 0], rc[:, 1]] = feats
    target[rc[:, 0], rc[:, 1], 0] = tgt
    labels[rc[:, 0], rc[:, 1]] = np.where(np.isfinite(tgt), OBSERVED, MISSING)
    labels[np.any(~np.isfinite(cov), axis=2)] = INVALID
    return (RasterStack(cov, resolution_km, header[2:-1]), RasterStack(target, resolution_km, ["target"]),
            Mask(labels))


# ---------------------------------------------------------------------------
# Normalization and sampling


def normalize(stack: RasterStack, mask: Mask, target: RasterStack) -> Dataset:
    """Standardize covariates and scale targets using Observed pixels only.

    Pixels that are nodata in the covariates, or Observed pixels with no
    target value, are treated as Invalid.
    """
    h, w = stack.height, stack.width
    if mask.shape != (h, w) or (target.height, target.width) != (h, w):
        raise ShapeError("stack, mask and target dimensions disagree")
    labels = mask.labels.copy()
    labels[stack.nodata] = INVALID
    tvals = target.values[:, :, 0].astype(np.float64)
    labels[(labels == OBSERVED) & ~np.isfinite(tvals)] = INVALID
    obs = labels == OBSERVED
    if not obs.any():
        raise EmptyTrainingSet("no Observed pixels")

    vals = stack.values.astype(np.float64)
    obs_vals = vals[obs]
    mean = obs_vals.mean(axis=0)
    std = obs_vals.std(axis=0)
    constant = ~(std > 0)
    safe_std = np.where(constant, 1.0, std)
    image = (vals - mean) / safe_std
    image[:, :, constant] = 0.0
    image[~np.isfinite(image)] = 0.0

    obs_t = tvals[obs]
    norm = NormState(mean, np.where(constant, 0.0, std), constant,
                     float(obs_t.min()), float(obs_t.max()))

    pixels = np.flatnonzero(labels.ravel() != INVALID)
    rows, cols = np.divmod(pixels, w)
    coords = np.column_stack([rows, cols]).astype(np.float64) * stack.resolution_km
    flat_img = image.reshape(h * w, -1)
    raw = tvals.ravel()[pixels]
    return Dataset(pixels=pixels, labels=labels.ravel()[pixels], coords=coords,
                   features=flat_img[pixels], targets=norm.scale_target(raw), targets_raw=raw,
                   norm_state=norm, image=image.astype(np.float32), resolution_km=stack.resolution_km)


def _test_pixels(mask: Mask) -> np.ndarray:
    return mask.flat(MISSING)


def grid_patches(shape: tuple[int, int], n: int = 10) -> np.ndarray:
    """(H, W) array of patch ids for an ``n x n`` partition of the image."""
    h, w = shape
    rb = np.repeat(np.arange(n), [len(a) for a in np.array_split(np.arange(h), n)])
    cb = np.repeat(np.arange(n), [len(a) for a in np.array_split(np.arange(w), n)])
    return rb[:, None] * n + cb[None, :]


def split_grid_scenario(mask: Mask, n_train: int, seed: int, grid: int = 10,
                        fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Training pixels drawn only from a random 20% of the 10 x 10 patches.

    Returns ``(train, test, selected_patch_ids)`` with flat pixel indices.
    """
    h, w = mask.shape
    if h < grid or w < grid:
        raise ShapeError(f"image must be at least {grid}x{grid} for the grid scenario")
    rng = make_rng(seed)
    n_sel = int(round(fraction * grid * grid))
    selected = np.sort(rng.choice(grid * grid, size=n_sel, replace=False))
    patch_of = grid_patches((h, w), grid).ravel()
    pool = np.flatnonzero((mask.labels.ravel() == OBSERVED) & np.isin(patch_of, selected))
    if n_train > pool.size:
        raise InsufficientSamples(f"{n_train} requested, {pool.size} Observed pixels in selected patches")
    train = np.sort(rng.choice(pool, size=n_train, replace=False))
    return train, _test_pixels(mask), selected


def split_random_scenario(mask: Mask, n_train: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Training pixels drawn uniformly from all Observed pixels."""
    rng = make_rng(seed)
    pool = mask.flat(OBSERVED)
    if n_train > pool.size:
        raise InsufficientSamples(f"{n_train} requested, {pool.size} Observed pixels")
    if n_train < 1:
        raise InsufficientSamples("n_train must be at least 1")
    train = np.sort(rng.choice(pool, size=n_train, replace=False))
    return train, _test_pixels(mask)


# ---------------------------------------------------------------------------
# Prediction export


def write_prediction(out_dir, field_: PredictionField, prefix: str = "prediction") -> list[Path]:
    """Write ``<prefix>_mean.dfgp``, ``<prefix>_std.dfgp`` and a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}_mean.dfgp", out / f"{prefix}_std.dfgp", out / f"{prefix}.json"]
    write_stack(paths[0], RasterStack(field_.mean[:, :, None]))
    write_stack(paths[1], RasterStack(field_.stddev[:, :, None]))
    side = {"norm_state": field_.norm_state.to_dict() if field_.norm_state else None,
            "metrics": field_.metrics,
            "counts": {name: int(np.sum(field_.mask.labels == lab))
                       for name, lab in (("invalid", INVALID), ("observed", OBSERVED), ("missing", MISSING))}}
    paths[2].write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return paths
