"""Shared data model: image tensors, volume I/O, seeded randomness and manifests.

Images travel through the package as ``float32`` numpy arrays of shape
``(C, H, W)``. Volumes are consumed as independent 2-D axial slices.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RAW_MAGIC = b"IQTCFMTENSOR"  # 12 bytes + u32 version = 16-byte header
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<12sI")

SPLITS = ("train", "val", "test_ind", "test_ood")


class VolumeError(ValueError):
    """Raised for unreadable, inconsistent or non-finite volume files."""


# --------------------------------------------------------------------------
# randomness


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed`` and an optional key path.

    ``make_rng(seed, "record", 3)`` always yields the same stream, independent
    of how many other streams were created before it.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """A stable 63-bit integer seed derived from ``seed`` and ``keys``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# image tensors


def as_image(x, name: str = "image") -> np.ndarray:
    """Validate and coerce ``x`` into a finite float32 ``(C, H, W)`` array."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, what: str = "inputs") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def minmax_normalize(data: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-volume min-max scaling to [0, 1]; constant input maps to zeros."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0.0:
        return np.zeros(data.shape, dtype=np.float32), lo, hi
    return ((data - lo) / (hi - lo)).astype(np.float32), lo, hi


def center_fit(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Center-crop or zero-pad the last two dims of ``img`` to ``size``."""
    out = img
    for axis, target in ((-2, size[0]), (-1, size[1])):
        n = out.shape[axis]
        if target < n:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif target > n:
            before = (target - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, target - n - before)
            out = np.pad(out, pad)
    return np.ascontiguousarray(out)


@dataclass
class Volume:
    """A normalized volume plus the intensity range it was scaled from."""

    data: np.ndarray
    source_min: float
    source_max: float
    path: str = ""

    def slices(self) -> list[np.ndarray]:
        """2-D slices as ``(1, H, W)`` tensors.

        Raw tensors of rank 3 are already ``(C, H, W)`` and are returned as
        per-channel slices; NIfTI data ``(X, Y, Z)`` is sliced along Z.
        """
        d = self.data
        if d.ndim == 2:
            return [d[None].copy()]
        if d.ndim == 3:
            if self.path.endswith((".nii", ".nii.gz")):
                return [np.ascontiguousarray(d[:, :, k])[None] for k in range(d.shape[2])]
            return [d[c][None].copy() for c in range(d.shape[0])]
        raise VolumeError(f"cannot slice a rank-{d.ndim} volume")


# --------------------------------------------------------------------------
# raw tensor format


def write_raw(arr: np.ndarray, path) -> None:
    """Write ``arr`` as a raw float32 tensor file (bit-exact)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION))
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_raw(path) -> np.ndarray:
    """Read a raw tensor file without any normalization."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _RAW_HEADER.size + 4:
        raise VolumeError(f"{path}: truncated header")
    magic, version = _RAW_HEADER.unpack_from(blob, 0)
    if magic != RAW_MAGIC:
        raise VolumeError(f"{path}: not a raw tensor file")
    if version != RAW_VERSION:
        raise VolumeError(f"{path}: unsupported raw tensor version {version}")
    off = _RAW_HEADER.size
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + 4 * rank:
        raise VolumeError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) - off != expected:
        raise VolumeError(
            f"{path}: header declares {expected} payload bytes, found {len(blob) - off}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def _read_nifti(path: Path) -> np.ndarray:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float64)
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise VolumeError(f"cannot read NIfTI {path}: {exc}") from exc
    data = np.squeeze(data)
    if data.ndim not in (2, 3):
        raise VolumeError(f"{path}: only scalar single-frame images are supported")
    return data


def load_volume(path, normalize: bool = True) -> Volume:
    """Load a raw tensor or NIfTI-1 file and min-max normalize it to [0, 1].

    With ``normalize=False`` the payload is returned untouched (raw files then
    round-trip bit-exactly through :func:`save_volume`).
    """
    path = Path(path)
    name = path.name
    if name.endswith((".nii", ".nii.gz")):
        data = _read_nifti(path)
    else:
        data = read_raw(path)
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"{path}: non-finite voxels")
    if not normalize:
        arr = np.asarray(data, dtype=np.float32)
        return Volume(arr, float(arr.min()), float(arr.max()), str(path))
    norm, lo, hi = minmax_normalize(data)
    return Volume(norm, lo, hi, str(path))


def save_volume(t: np.ndarray, path) -> None:
    """Save a tensor as raw (bit-exact) or as a 16-bit PNG (quantized).

    PNG export clips to [0, 1] and rounds half up: ``floor(v * 65535 + 0.5)``.
    Only single-channel or 2-D tensors can be written as PNG.
    """
    arr = np.asarray(t, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot save a tensor with non-finite values")
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png16(arr, path)
    else:
        write_raw(arr, path)


def quantize16(arr: np.ndarray) -> np.ndarray:
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    return np.floor(a * 65535.0 + 0.5).astype(np.uint16)


def write_png16(arr: np.ndarray, path) -> None:
    from PIL import Image

    a = np.asarray(arr)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError("PNG export needs a single-channel tensor")
        a = a[0]
    Image.fromarray(quantize16(a)).save(path)


def write_nifti(data: np.ndarray, path, affine=None) -> None:
    """Write a float32 NIfTI-1 volume (used for fixtures and exports)."""
    import nibabel as nib

    img = nib.Nifti1Image(np.asarray(data, dtype=np.float32), np.eye(4) if affine is None else affine)
    nib.save(img, str(path))


# --------------------------------------------------------------------------
# manifests


@dataclass
class PairedSample:
    """A (low, high) image pair in memory plus its degradation provenance."""

    low: np.ndarray
    high: np.ndarray
    subject_id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.low = as_image(self.low, "low")
        self.high = as_image(self.high, "high")
        check_same_shape(self.low, self.high, "low/high")


@dataclass
class ManifestRecord:
    subject_id: str
    split: str
    high_path: str
    low_path: str
    params: dict
    seed: int

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "split": self.split,
            "high_path": self.high_path,
            "low_path": self.low_path,
            "params": self.params,
            "seed": self.seed,
        }


@dataclass
class DatasetManifest:
    """Records reference pixel files by path; ``root`` resolves relative paths."""

    records: list[ManifestRecord]
    seed: int
    simulator_config_digest: str
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS and name != "pool":
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, int]:
        return {s: sum(r.split == s for r in self.records) for s in SPLITS}

    def load_pairs(self, split: str) -> list[PairedSample]:
        out = []
        for r in self.split(split):
            out.append(
                PairedSample(
                    low=read_raw(self.root / r.low_path),
                    high=read_raw(self.root / r.high_path),
                    subject_id=r.subject_id,
                    params=r.params,
                )
            )
        return out

    def write(self, directory) -> Path:
        """Write ``manifest.jsonl`` (one record per line) and ``manifest.json`` metadata."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        path = directory / "manifest.jsonl"
        path.write_text("".join(line + "\n" for line in lines))
        meta = {
            "seed": self.seed,
            "simulator_config_digest": self.simulator_config_digest,
            "counts": self.counts(),
        }
        (directory / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, directory) -> "DatasetManifest":
        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())
        records = []
        for line in (directory / "manifest.jsonl").read_text().splitlines():
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
        return cls(records, int(meta["seed"]), meta["simulator_config_digest"], directory)


def split_manifest(
    pool: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.2),
    rng: np.random.Generator | None = None,
    names: Sequence[str] = ("train", "val"),
) -> DatasetManifest:
    """Randomly partition the ``pool`` records into ``names`` by ``fractions``.

    Every split but the last gets ``floor(fraction * n)`` records, the last
    takes the remainder. Records already labelled with a test split are left
    untouched.
    """
    if len(fractions) != len(names):
        raise ValueError("need one fraction per split name")
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    idx = [i for i, r in enumerate(pool.records) if r.split in ("pool", *names)]
    if not idx:
        raise ValueError("cannot split an empty pool")
    if rng is None:
        rng = make_rng(pool.seed, "split")
    n = len(idx)
    order = [idx[j] for j in rng.permutation(n)]
    bounds, acc = [], 0
    for f in fractions[:-1]:
        acc += int(math.floor(f * n + 1e-9))
        bounds.append(acc)
    bounds.append(n)
    records = [ManifestRecord(**r.to_json()) for r in pool.records]
    start = 0
    for name, stop in zip(names, bounds):
        for j in order[start:stop]:
            records[j].split = name
        start = stop
    return DatasetManifest(records, pool.seed, pool.simulator_config_digest, pool.root)


def digest_of(obj) -> str:
    """sha256 of the canonical JSON encoding of ``obj`` (first 16 hex chars)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def iter_slices(volumes: Iterable[Volume]) -> Iterable[tuple[str, int, np.ndarray]]:
    for vol in volumes:
        stem = Path(vol.path).name.split(".")[0] or "volume"
        for k, sl in enumerate(vol.slices()):
            yield stem, k, sl
