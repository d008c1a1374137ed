"""Hyperspectral cubes: container I/O, normalization, patches, splits, synthesis."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HSC1"
_HEADER = struct.Struct("<IIIIB")


class CubeFormatError(ValueError):
    """Malformed cube file or invalid cube contents."""


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    bands: int
    num_classes: int = 0


@dataclass
class HyperCube:
    domain_id: str
    data: np.ndarray  # (H, W, B)
    labels: np.ndarray | None = None  # (H, W); 0 = unlabeled, 1..C = class
    num_classes: int = 0

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise CubeFormatError(f"cube data must be a non-empty HxWxB array, got {self.data.shape}")
        validate_cube(self)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def spec(self) -> DomainSpec:
        return DomainSpec(self.domain_id, self.bands, self.num_classes)

    def labeled_indices(self) -> np.ndarray:
        """Flat (row-major) indices of labeled pixels."""
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(self.labels.ravel() > 0)


def validate_cube(cube: HyperCube) -> None:
    finite = np.isfinite(cube.data)
    if not finite.all():
        r, c, b = np.argwhere(~finite)[0]
        raise CubeFormatError(f"{cube.domain_id}: non-finite value at pixel ({r}, {c}) band {b}")
    if cube.labels is None:
        return
    if cube.labels.shape != cube.data.shape[:2]:
        raise CubeFormatError(f"{cube.domain_id}: label shape {cube.labels.shape} != image {cube.data.shape[:2]}")
    bad = (cube.labels < 0) | (cube.labels > cube.num_classes)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise CubeFormatError(
            f"{cube.domain_id}: label {cube.labels[r, c]} at pixel ({r}, {c}) outside 0..{cube.num_classes}")


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------


def save_cube(cube: HyperCube, path) -> None:
    h, w, b = cube.data.shape
    has_labels = cube.labels is not None
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(h, w, b, cube.num_classes, int(has_labels)))
        fh.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(cube.labels, dtype="<u2").tobytes())


def read_header(path) -> tuple[int, int, int, int, bool]:
    with open(path, "rb") as fh:
        head = fh.read(4 + _HEADER.size)
    return _parse_header(head, path)


def _parse_header(blob: bytes, path) -> tuple[int, int, int, int, bool]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CubeFormatError(f"{path}: bad magic at byte 0, expected {MAGIC!r}")
    if len(blob) < 4 + _HEADER.size:
        raise CubeFormatError(f"{path}: header truncated at byte {len(blob)}")
    h, w, b, c, flag = _HEADER.unpack_from(blob, 4)
    if min(h, w, b) == 0:
        raise CubeFormatError(f"{path}: header declares empty dimensions H={h} W={w} B={b} (byte 4)")
    if flag not in (0, 1):
        raise CubeFormatError(f"{path}: has_labels byte at offset {4 + 16} must be 0 or 1, got {flag}")
    return h, w, b, c, bool(flag)


def load_cube(path, domain_id: str | None = None) -> HyperCube:
    """Read an HSC1 file. The domain id defaults to the file stem."""
    path = Path(path)
    blob = path.read_bytes()
    h, w, b, c, has_labels = _parse_header(blob, path)
    off = 4 + _HEADER.size
    n_values = h * w * b
    expected = off + 4 * n_values + (2 * h * w if has_labels else 0)
    if len(blob) != expected:
        raise CubeFormatError(
            f"{path}: payload size mismatch, header implies {expected} bytes, file has {len(blob)} "
            f"(data payload starts at byte {off})")
    data = np.frombuffer(blob, dtype="<f4", count=n_values, offset=off).reshape(h, w, b).astype(np.float32)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u2", count=h * w, offset=off + 4 * n_values).reshape(h, w)
        labels = labels.astype(np.int64)
    bad = ~np.isfinite(data)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise CubeFormatError(f"{path}: non-finite value at byte {off + 4 * flat} "
                              f"(pixel {flat // b // w}, {flat // b % w}, band {flat % b})")
    if labels is not None and labels.max(initial=0) > c:
        flat = int(np.flatnonzero(labels.ravel() > c)[0])
        raise CubeFormatError(f"{path}: label {labels.ravel()[flat]} at pixel index {flat} "
                              f"(byte {off + 4 * n_values + 2 * flat}) exceeds declared C={c}")
    return HyperCube(domain_id or path.stem, data, labels, c)


def import_csv(path, domain_id: str | None = None) -> HyperCube:
    """Read the plain-text fixture format: header line, then ``row,col,label,v1..vB``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        rows = [r for r in reader if r]
    if not rows:
        raise CubeFormatError(f"{path}: no pixel rows")
    nb = len(rows[0]) - 3
    if nb < 1:
        raise CubeFormatError(f"{path}: line 2 has no band values")
    recs = []
    for lineno, r in enumerate(rows, start=2):
        if len(r) - 3 != nb:
            raise CubeFormatError(f"{path}: line {lineno} has {len(r) - 3} bands, expected {nb}")
        try:
            recs.append((int(r[0]), int(r[1]), int(r[2]), [float(v) for v in r[3:]]))
        except ValueError as exc:
            raise CubeFormatError(f"{path}: line {lineno}: {exc}") from None
    h = max(r[0] for r in recs) + 1
    w = max(r[1] for r in recs) + 1
    if len(recs) != h * w:
        raise CubeFormatError(f"{path}: {len(recs)} pixels do not cover a {h}x{w} grid")
    data = np.empty((h, w, nb), dtype=np.float32)
    labels = np.zeros((h, w), dtype=np.int64)
    seen = np.zeros((h, w), dtype=bool)
    for row, col, lab, vals in recs:
        if row < 0 or col < 0 or seen[row, col]:
            raise CubeFormatError(f"{path}: pixel ({row}, {col}) invalid or repeated")
        seen[row, col] = True
        data[row, col] = vals
        labels[row, col] = lab
    c = int(labels.max())
    return HyperCube(domain_id or path.stem, data, labels if c > 0 else None, c)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def normalize_cube(cube: HyperCube) -> HyperCube:
    """Per-band z-score (population std) in float64; constant bands become 0."""
    x = cube.data.astype(np.float64).reshape(-1, cube.bands)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    # a zero std also covers distinct subnormal values whose variance underflows
    const = (np.ptp(x, axis=0) == 0) | ~(sd > 0)
    sd[const] = 1.0
    z = (x - mu) / sd
    z[:, const] = 0.0
    return HyperCube(cube.domain_id, z.reshape(cube.data.shape),
                     None if cube.labels is None else cube.labels.copy(), cube.num_classes)


def prepare_cube(cube: HyperCube, dtype=np.float32) -> HyperCube:
    """Model input: per-band z-score, then division by sqrt(B).

    After the second step every pixel's spectral vector has unit mean squared
    norm whatever the band count, so a 5x5 encoder window carries the same
    input energy for a 100-band and a 200-band sensor.
    """
    z = normalize_cube(cube)
    return HyperCube(cube.domain_id, (z.data / np.sqrt(cube.bands)).astype(dtype),
                     z.labels, cube.num_classes)


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m)


@dataclass
class Patch:
    domain_id: str
    center_row: int
    center_col: int
    spatial: int
    values: np.ndarray  # (S, S, B)


def extract_patch(cube: HyperCube, row: int, col: int, size: int) -> Patch:
    """S x S x B window centred on (row, col), mirror-reflected at the borders."""
    vals = extract_patches(cube, np.array([row]), np.array([col]), size)[0]
    return Patch(cube.domain_id, int(row), int(col), size, vals)


def extract_patches(cube: HyperCube, rows, cols, size: int) -> np.ndarray:
    """Batch form of :func:`extract_patch`; returns (N, S, S, B)."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window side must be odd and positive, got {size}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= cube.height or cols.min() < 0 or cols.max() >= cube.width):
        raise ValueError(f"patch centre outside the {cube.height}x{cube.width} image")
    off = np.arange(size) - size // 2
    ri = reflect_index(rows[:, None] + off, cube.height)
    ci = reflect_index(cols[:, None] + off, cube.width)
    return cube.data[ri[:, :, None], ci[:, None, :]]


def dihedral(arr: np.ndarray, k: int, axes=(0, 1)) -> np.ndarray:
    """k-th element of the order-8 dihedral group acting on ``axes``.

    k = 0..3 are rotations by k quarter turns; k = 4..7 mirror the second
    axis first, then rotate by k - 4 quarter turns.
    """
    if not 0 <= k <= 7:
        raise ValueError(f"dihedral index must be in 0..7, got {k}")
    if k >= 4:
        arr = np.flip(arr, axis=axes[1])
    return np.rot90(arr, k % 4, axes=axes)


def dihedral_augment(patch: Patch, k: int) -> Patch:
    return Patch(patch.domain_id, patch.center_row, patch.center_col, patch.spatial,
                 np.ascontiguousarray(dihedral(patch.values, k)))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train_per_domain: int = 200
    run_index: int = 0

    def __post_init__(self):
        if self.train_per_domain < 1:
            raise ValueError("train_per_domain must be positive")
        if not 0 <= self.run_index <= 4:
            raise ValueError("run_index must lie in [0, 4]")


def make_split(cube: HyperCube, spec: SplitSpec, allow_empty_test: bool = False):
    """Random train/test partition of the labeled pixels (flat indices, sorted)."""
    labeled = cube.labeled_indices()
    n = spec.train_per_domain
    if labeled.size < n:
        raise ValueError(f"{cube.domain_id}: {labeled.size} labeled pixels, need {n} for training")
    if labeled.size == n and not allow_empty_test:
        raise ValueError(f"{cube.domain_id}: training on all {n} labeled pixels leaves an empty test set")
    rng = np.random.default_rng([spec.seed, spec.run_index])
    pick = rng.choice(labeled.size, size=n, replace=False)
    mask = np.zeros(labeled.size, dtype=bool)
    mask[pick] = True
    return labeled[mask], labeled[~mask]


# ---------------------------------------------------------------------------
# synthetic domains
# ---------------------------------------------------------------------------

_COMMON_GRID = 64


def _smooth_signature(rng: np.random.Generator, bands: int) -> np.ndarray:
    """Random smooth spectrum: a sum of Gaussian bumps on a sloped baseline."""
    t = np.linspace(0.0, 1.0, bands)
    sig = rng.uniform(-1, 1) * (t - 0.5)
    for _ in range(rng.integers(2, 5)):
        centre, width, amp = rng.uniform(0, 1), rng.uniform(0.05, 0.25), rng.uniform(-1.5, 1.5)
        sig += amp * np.exp(-0.5 * ((t - centre) / width) ** 2)
    return sig


def _on_common_grid(sig: np.ndarray) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, _COMMON_GRID)
    return np.interp(grid, np.linspace(0.0, 1.0, sig.size), sig)


def synth_domains(num_domains: int, bands_list, classes_list, size: int, seed: int,
                  noise: float = 0.05, margin: float = 5.0, tile: int | None = None,
                  max_tries: int = 1000) -> list[HyperCube]:
    """Piecewise-constant synthetic scenes, one cube per domain.

    Each image is tiled into square single-class blocks of side ``tile``
    (default ``size // 8``). Each class gets a smooth signature; pixels add
    i.i.d. Gaussian noise of std ``noise``. Every pair of signatures (within
    and across domains, compared on a common resampled wavelength axis)
    is at least ``margin * noise * sqrt(grid)`` apart, with the distance
    floored at a small constant when ``noise`` is 0.
    """
    bands_list, classes_list = list(bands_list), list(classes_list)
    if num_domains < 1 or len(bands_list) != num_domains or len(classes_list) != num_domains:
        raise ValueError("bands_list and classes_list must have one entry per domain")
    if size < 2 or min(bands_list) < 1 or min(classes_list) < 1:
        raise ValueError("degenerate synthetic size, band count or class count")
    tile = tile or max(1, size // 8)
    n_tiles = -(-size // tile)
    if n_tiles * n_tiles < max(classes_list):
        raise ValueError(f"{n_tiles * n_tiles} tiles cannot host {max(classes_list)} classes")
    rng = np.random.default_rng(seed)
    min_dist = margin * max(noise, 0.02) * np.sqrt(_COMMON_GRID)

    accepted: list[np.ndarray] = []
    signatures: list[list[np.ndarray]] = []
    for bands, n_cls in zip(bands_list, classes_list):
        sigs = []
        for _ in range(n_cls):
            for _ in range(max_tries):
                s = _smooth_signature(rng, bands)
                g = _on_common_grid(s)
                if all(np.linalg.norm(g - a) >= min_dist for a in accepted):
                    break
            else:
                raise ValueError("could not place well-separated signatures; lower margin or noise")
            accepted.append(g)
            sigs.append(s)
        signatures.append(sigs)

    cubes = []
    for d, (bands, n_cls) in enumerate(zip(bands_list, classes_list)):
        order = np.concatenate([np.arange(n_cls), rng.integers(0, n_cls, n_tiles * n_tiles - n_cls)])
        rng.shuffle(order)
        tile_cls = order.reshape(n_tiles, n_tiles)
        cls_map = np.kron(tile_cls, np.ones((tile, tile), dtype=np.int64))[:size, :size]
        sig = np.stack(signatures[d])
        data = sig[cls_map] + noise * rng.standard_normal((size, size, bands))
        cubes.append(HyperCube(f"synth{d}", data.astype(np.float32), cls_map + 1, n_cls))
    return cubes
