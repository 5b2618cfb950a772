"""Synthetic long-range-dependency dataset and on-disk formats.

The marker dataset makes patch classification depend on distant context:
each image is a noisy gray canvas with one colored marker block flush in a
random corner and several identical white patches scattered elsewhere.  The
patches' class label equals the marker's color index, so a model can only
classify a patch by relating it to the far-away marker; the marker itself
and the rest of the canvas are background.

File formats are fully specified here:

* images: binary PPM (``P6``, maxval 255), channels interleaved RGB;
* label maps: binary PGM (``P5``, maxval 255);
* checkpoints: magic ``RSPC``, a little-endian u32 version, u32 tensor
  count, then per tensor a u32 name length, UTF-8 name, u32 rank, u64
  extents, and the row-major float64 little-endian payload.
"""

from __future__ import annotations

import colorsys
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from rsphead.tensor import Tensor

__all__ = [
    "SegmentationSample",
    "MarkerDatasetSpec",
    "DatasetError",
    "generate_marker_dataset",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
    "save_checkpoint",
    "load_checkpoint",
    "save_dataset",
    "load_dataset",
]

CHECKPOINT_MAGIC = b"RSPC"
CHECKPOINT_VERSION = 1


class DatasetError(ValueError):
    """Raised when a dataset spec cannot be realized or a data file is unusable."""


@dataclass
class SegmentationSample:
    """One training example: float image [3,H,W] in [0,1], int labels [H,W]."""

    image: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class MarkerDatasetSpec:
    """Parameters of the marker dataset.

    ``num_colors`` marker colors give ``num_colors + 1`` classes (background
    is class 0, and the marker block itself is background).  Sample ``i`` is
    generated from a generator seeded by ``(seed, i)``, so any prefix of the
    dataset is stable under changes of ``count``.
    """

    count: int
    size: int = 64
    num_colors: int = 3
    patches_per_image: int = 4
    patch_size: int = 6
    marker_size: int = 8
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise DatasetError(f"count must be >=1, got {self.count}")
        if self.size < 16:
            raise DatasetError(f"image size must be >=16, got {self.size}")
        if self.num_colors < 1:
            raise DatasetError(f"need >=1 marker colors, got {self.num_colors}")
        if self.marker_size < 1 or self.marker_size > self.size // 2:
            raise DatasetError(f"marker size {self.marker_size} does not fit a {self.size} canvas corner")
        if self.patch_size < 1 or self.patch_size > self.size // 2:
            raise DatasetError(f"patch size {self.patch_size} does not fit a {self.size} canvas")
        if self.patches_per_image < 1:
            raise DatasetError(f"need >=1 patches, got {self.patches_per_image}")
        area_needed = self.patches_per_image * (self.patch_size ** 2) + self.marker_size ** 2
        if area_needed > (self.size ** 2) // 2:
            raise DatasetError(
                f"{self.patches_per_image} patches of size {self.patch_size} cannot be placed "
                f"without crowding a {self.size}x{self.size} canvas"
            )
        if self.noise_std < 0:
            raise DatasetError(f"noise_std must be >=0, got {self.noise_std}")
        if self.seed < 0:
            raise DatasetError(f"seed must be non-negative, got {self.seed}")

    @property
    def num_classes(self) -> int:
        return self.num_colors + 1


def _marker_palette(num_colors: int) -> np.ndarray:
    """Fully saturated hues, evenly spaced; 3 colors give pure R, G, B."""
    return np.array([colorsys.hsv_to_rgb(i / num_colors, 1.0, 1.0) for i in range(num_colors)])


def _rects_overlap(a: tuple, b: tuple) -> bool:
    ar, ac, ah, aw = a
    br, bc, bh, bw = b
    return ar < br + bh and br < ar + ah and ac < bc + bw and bc < ac + aw


def _make_sample(spec: MarkerDatasetSpec, index: int) -> SegmentationSample:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    s = spec.size
    m = spec.marker_size
    ps = spec.patch_size

    color_id = int(rng.integers(1, spec.num_colors + 1))
    corner = int(rng.integers(4))
    marker_rect = {
        0: (0, 0, m, m),
        1: (0, s - m, m, m),
        2: (s - m, 0, m, m),
        3: (s - m, s - m, m, m),
    }[corner]

    rects = [marker_rect]
    for p in range(spec.patches_per_image):
        for attempt in range(100):
            r = int(rng.integers(0, s - ps + 1))
            c = int(rng.integers(0, s - ps + 1))
            cand = (r, c, ps, ps)
            if not any(_rects_overlap(cand, other) for other in rects):
                rects.append(cand)
                break
        else:
            raise DatasetError(f"could not place patch {p} of sample {index} after 100 attempts")

    image = np.full((3, s, s), 0.5)
    color = _marker_palette(spec.num_colors)[color_id - 1]
    r, c, h, w = marker_rect
    image[:, r : r + h, c : c + w] = color[:, None, None]
    labels = np.zeros((s, s), dtype=np.int64)
    for r, c, h, w in rects[1:]:
        image[:, r : r + h, c : c + w] = 1.0
        labels[r : r + h, c : c + w] = color_id

    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=(3, s, s))
    return SegmentationSample(image=np.clip(image, 0.0, 1.0), labels=labels)


def generate_marker_dataset(spec: MarkerDatasetSpec) -> list:
    return [_make_sample(spec, i) for i in range(spec.count)]


# -- PPM / PGM -------------------------------------------------------------------


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(image, path) -> None:
    """Write a [3,H,W] float image in [0,1] as binary PPM (P6, maxval 255)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got shape {arr.shape}")
    h, w = arr.shape[1:]
    payload = _quantize(arr).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(payload)


def write_pgm(labels, path) -> None:
    """Write an integer [H,W] label map as binary PGM (P5, maxval 255)."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"expected [H,W] labels, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"label values must be in 0..255, got range {arr.min()}..{arr.max()}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.astype(np.uint8).tobytes())


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def _parse_pnm_header(buf: bytes, magic: bytes, path) -> tuple:
    """Return (width, height, maxval, payload offset), honoring '#' comments."""
    if buf[:2] != magic:
        raise DatasetError(f"{path}: bad magic {buf[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise DatasetError(f"{path}: truncated header")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise DatasetError(f"{path}: truncated header comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise DatasetError(f"{path}: malformed header byte {ch!r}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DatasetError(f"{path}: missing whitespace after header")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}, expected 255")
    if w < 1 or h < 1:
        raise DatasetError(f"{path}: bad image extents {w}x{h}")
    return w, h, maxval, pos


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a [3,H,W] float64 array scaled to [0,1]."""
    buf = _read_file(path)
    w, h, _, pos = _parse_pnm_header(buf, b"P6", path)
    need = w * h * 3
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise DatasetError(f"{path}: truncated payload, need {need} bytes, have {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an [H,W] int64 array."""
    buf = _read_file(path)
    w, h, _, pos = _parse_pnm_header(buf, b"P5", path)
    need = w * h
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise DatasetError(f"{path}: truncated payload, need {need} bytes, have {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.int64)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(state: Mapping, path) -> None:
    """Serialize named float tensors; round-trips bit-exactly via float64 LE."""
    items = []
    for name, value in state.items():
        if not name:
            raise DatasetError("checkpoint tensor names must be non-empty")
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        items.append((name, np.ascontiguousarray(arr, dtype="<f8")))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            f.write(arr.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into an ordered name -> float64 array map."""
    buf = _read_file(path)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetError(f"{path}: truncated checkpoint while reading {what}")
        piece = buf[pos : pos + n]
        pos += n
        return piece

    pos = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"{path}: checkpoint version {version} unsupported, expected {CHECKPOINT_VERSION}")
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in state:
            raise DatasetError(f"{path}: duplicate tensor name '{name}'")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents")) if rank else ()
        n_values = int(np.prod(shape)) if rank else 1
        payload = take(8 * n_values, f"payload of '{name}'")
        state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if pos != len(buf):
        raise DatasetError(f"{path}: {len(buf) - pos} trailing bytes after last tensor")
    return state


# -- directory layout used by the CLI ----------------------------------------------


def save_dataset(samples: Sequence, directory) -> None:
    """Write samples as img_NNNNN.ppm / lab_NNNNN.pgm pairs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        write_ppm(sample.image, directory / f"img_{i:05d}.ppm")
        write_pgm(sample.labels, directory / f"lab_{i:05d}.pgm")


def load_dataset(directory) -> list:
    """Read back a directory produced by ``save_dataset``."""
    directory = Path(directory)
    images = sorted(directory.glob("img_*.ppm"))
    if not images:
        raise DatasetError(f"no img_*.ppm files in {directory}")
    samples = []
    for img_path in images:
        lab_path = directory / img_path.name.replace("img_", "lab_").replace(".ppm", ".pgm")
        if not lab_path.exists():
            raise DatasetError(f"missing label map {lab_path} for {img_path.name}")
        samples.append(SegmentationSample(image=read_ppm(img_path), labels=read_pgm(lab_path)))
    return samples
