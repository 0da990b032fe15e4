"""Synthetic 2-D thoracic phantoms and the MRSL slice file format.

Image rows run anterior (top) to posterior (bottom) and the patient's left
appears on the image right, as in radiological display.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABELS = {1: "left_lung", 2: "right_lung", 3: "heart", 4: "esophagus", 5: "spinal_cord"}
STRUCTURE_NAMES = ("Left Lung", "Right Lung", "Heart", "Esophagus", "Spinal Cord")

SLICE_MAGIC = b"MRSL"
SLICE_VERSION = 1
MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "val", "test")

_MASK64 = (1 << 64) - 1


class PhantomError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, msg: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{msg} at byte offset {offset}")
        self.offset = offset


def splitmix64(x: int) -> int:
    """One step of the splitmix64 output function."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Per-slice seed; depends only on (base_seed, index), never on generation order."""
    return splitmix64((splitmix64(base_seed & _MASK64) + index) & _MASK64)


@dataclass
class LabeledSlice:
    image: np.ndarray  # (S, S) float32 in [0, 1]
    mask: np.ndarray  # (S, S) uint8 in {0..5}
    slice_id: str = ""

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledSlice):
            return NotImplemented
        return (self.slice_id == other.slice_id
                and self.image.dtype == other.image.dtype
                and self.image.tobytes() == other.image.tobytes()
                and np.array_equal(self.mask, other.mask))


@dataclass
class PhantomParams:
    """Geometry ranges as fractions of the slice size unless noted as pixels."""

    size: int = 256
    body_axes: tuple = ((0.43, 0.46), (0.32, 0.36))  # (x semi-axis, y semi-axis)
    lung_offset_x: tuple = (0.23, 0.25)
    lung_center_y: tuple = (0.46, 0.49)
    lung_axes: tuple = ((0.10, 0.12), (0.18, 0.21))
    heart_center_y: tuple = (0.36, 0.39)
    heart_axes: tuple = ((0.06, 0.08), (0.06, 0.075))
    tube_width_px: tuple = (2, 4)
    tube_length: tuple = (0.05, 0.08)
    cord_radius_px: tuple = (2, 5)
    gap_px: int = 1
    intensity: dict = field(default_factory=lambda: {
        "air": 0.0, "body": 0.45, "lung": 0.12, "heart": 0.78, "esophagus": 0.62, "cord": 0.92,
    })
    intensity_jitter: float = 0.03
    noise_sigma: float = 0.03
    max_retries: int = 50

    def validate(self) -> "PhantomParams":
        if self.size < 32 or self.size & (self.size - 1):
            raise ValueError(f"phantom size must be a power of two >= 32, got {self.size}")
        return self


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(r):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def _draw_geometry(params: PhantomParams, rng: np.random.Generator) -> dict:
    S = params.size
    u = lambda lo_hi: rng.uniform(*lo_hi)  # noqa: E731
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    c = S / 2.0

    body = _ellipse(yy, xx, c, c, u(params.body_axes[1]) * S, u(params.body_axes[0]) * S)
    ly = u(params.lung_center_y) * S
    lung_rx, lung_ry = u(params.lung_axes[0]) * S, u(params.lung_axes[1]) * S
    left = _ellipse(yy, xx, ly + rng.uniform(-1, 1), c + u(params.lung_offset_x) * S,
                    lung_ry * rng.uniform(0.95, 1.05), lung_rx * rng.uniform(0.95, 1.05))
    right = _ellipse(yy, xx, ly + rng.uniform(-1, 1), c - u(params.lung_offset_x) * S,
                     lung_ry * rng.uniform(0.95, 1.05), lung_rx * rng.uniform(0.95, 1.05))
    hy = u(params.heart_center_y) * S
    hry = u(params.heart_axes[1]) * S
    heart = _ellipse(yy, xx, hy, c + rng.uniform(-1.5, 1.5), hry, u(params.heart_axes[0]) * S)

    # esophagus: vertical tube just behind the heart
    heart_bottom = int(np.nonzero(heart.any(axis=1))[0].max())
    width = int(rng.integers(params.tube_width_px[0], params.tube_width_px[1] + 1))
    length = max(2, int(round(u(params.tube_length) * S)))
    top = heart_bottom + 1 + params.gap_px + int(rng.integers(0, 2))
    x0 = int(round(c - width / 2.0 + rng.uniform(-1.0, 1.0)))
    eso = np.zeros((S, S), dtype=bool)
    eso[top:top + length, x0:x0 + width] = True

    radius = rng.uniform(params.cord_radius_px[0], params.cord_radius_px[1])
    cy = top + length + params.gap_px + 1 + radius + rng.uniform(0.0, 1.0)
    cord = _ellipse(yy, xx, cy, c + rng.uniform(-0.5, 0.5), radius, radius)
    return {"body": body, 1: left, 2: right, 3: heart, 4: eso, 5: cord}


def _geometry_ok(geom: dict, params: PhantomParams) -> bool:
    body = geom["body"]
    inner = ~_dilate(~body, 1)
    for label in LABELS:
        m = geom[label]
        if not m.any() or (m & ~inner).any():
            return False
    for a in LABELS:
        grown = _dilate(geom[a], params.gap_px)
        for b in LABELS:
            if b > a and (grown & geom[b]).any():
                return False
    return True


def generate_phantom(params: PhantomParams, seed: int, slice_id: str = "") -> LabeledSlice:
    """Deterministic phantom slice for ``(params, seed)``."""
    params.validate()
    rng = np.random.default_rng(seed)
    for _ in range(params.max_retries):
        geom = _draw_geometry(params, rng)
        if _geometry_ok(geom, params):
            break
    else:
        raise PhantomError(f"no feasible phantom geometry after {params.max_retries} attempts (seed {seed})")

    S = params.size
    inten = params.intensity
    jit = lambda: rng.uniform(-params.intensity_jitter, params.intensity_jitter)  # noqa: E731
    image = np.full((S, S), inten["air"], dtype=np.float64)
    image[geom["body"]] = inten["body"] + jit()
    mask = np.zeros((S, S), dtype=np.uint8)
    tissue = {1: "lung", 2: "lung", 3: "heart", 4: "esophagus", 5: "cord"}
    lung_level = inten["lung"] + jit()
    for label, name in tissue.items():
        image[geom[label]] = lung_level if name == "lung" else inten[name] + jit()
        mask[geom[label]] = label
    image += rng.normal(0.0, params.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return LabeledSlice(image.astype(np.float32), mask, slice_id)


def generate_corpus(params: PhantomParams, ids: Sequence[str], base_seed: int) -> list[LabeledSlice]:
    return [generate_phantom(params, derive_seed(base_seed, i), sid) for i, sid in enumerate(ids)]


# --------------------------------------------------------------------------- splits / manifest

def slice_ids(n: int) -> list[str]:
    return [f"slice_{i:05d}" for i in range(n)]


def make_splits(n_train: int = 200, n_val: int = 35, n_test: int = 50, seed: int = 0) -> list[tuple[str, str]]:
    """Manifest rows ``(slice_id, split)`` sorted by id, splits assigned by seeded permutation."""
    for label, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ValueError(f"{label} must be >= 1, got {n}")
    ids = slice_ids(n_train + n_val + n_test)
    order = np.random.default_rng(seed).permutation(len(ids))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[ids[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return [(sid, split_of[sid]) for sid in ids]


def write_manifest(manifest: Iterable[tuple[str, str]], path) -> None:
    lines = [f"{sid}\t{split}\n" for sid, split in manifest]
    Path(path).write_text("".join(lines))


def read_manifest(path) -> list[tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: malformed manifest line {line!r}")
        rows.append((parts[0], parts[1]))
    return rows


# --------------------------------------------------------------------------- MRSL files

def encode_slice(s: LabeledSlice) -> bytes:
    S = s.image.shape[0]
    if s.image.shape != (S, S) or s.mask.shape != (S, S):
        raise ValueError(f"slice {s.slice_id!r}: image {s.image.shape} / mask {s.mask.shape} must be square and equal")
    return (SLICE_MAGIC + struct.pack("<II", SLICE_VERSION, S)
            + s.image.astype("<f4").tobytes() + s.mask.astype(np.uint8).tobytes())


def decode_slice(buf: bytes, slice_id: str = "", path=None) -> LabeledSlice:
    if len(buf) < 4 or buf[:4] != SLICE_MAGIC:
        raise DatasetFormatError(f"bad magic {bytes(buf[:4])!r}", 0, path)
    if len(buf) < 12:
        raise DatasetFormatError("truncated header", len(buf), path)
    version, S = struct.unpack_from("<II", buf, 4)
    if version != SLICE_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4, path)
    n_img = 4 * S * S
    need = 12 + n_img + S * S
    if len(buf) < need:
        offset = len(buf)
        part = "image" if offset < 12 + n_img else "mask"
        raise DatasetFormatError(f"truncated {part} data (need {need} bytes, have {len(buf)})", offset, path)
    if len(buf) > need:
        raise DatasetFormatError(f"{len(buf) - need} trailing bytes", need, path)
    image = np.frombuffer(buf, dtype="<f4", count=S * S, offset=12).reshape(S, S).astype(np.float32)
    mask = np.frombuffer(buf, dtype=np.uint8, count=S * S, offset=12 + n_img).reshape(S, S).copy()
    if mask.max(initial=0) > 5:
        bad = int(np.argmax(mask.ravel() > 5))
        raise DatasetFormatError(f"mask label {mask.ravel()[bad]} out of range", 12 + n_img + bad, path)
    return LabeledSlice(image, mask, slice_id)


def write_slice(s: LabeledSlice, path) -> None:
    Path(path).write_bytes(encode_slice(s))


def read_slice(path, slice_id: str | None = None) -> LabeledSlice:
    path = Path(path)
    return decode_slice(path.read_bytes(), slice_id if slice_id is not None else path.stem, path)


def write_dataset(slices: Sequence[LabeledSlice], path, splits: dict | None = None) -> None:
    """Write ``<slice_id>.mrsl`` files plus the manifest into directory ``path``.

    ``splits`` maps slice_id to its split name; unspecified slices go to train.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    splits = splits or {}
    for s in slices:
        if not s.slice_id:
            raise ValueError("every slice needs a slice_id to be written")
        write_slice(s, root / f"{s.slice_id}.mrsl")
    write_manifest([(s.slice_id, splits.get(s.slice_id, "train")) for s in slices], root / MANIFEST_NAME)


def read_dataset(path, split: str | None = None) -> list[LabeledSlice]:
    """Read slices in manifest order, optionally restricted to one split."""
    root = Path(path)
    out = []
    for sid, sp in read_manifest(root / MANIFEST_NAME):
        if split is None or sp == split:
            out.append(read_slice(root / f"{sid}.mrsl", sid))
    return out


def stack(slices: Sequence[LabeledSlice], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(n, 1, S, S)`` images and ``(n, S, S)`` int masks."""
    images = np.stack([s.image for s in slices])[:, None].astype(dtype)
    masks = np.stack([s.mask for s in slices]).astype(np.int64)
    return images, masks
