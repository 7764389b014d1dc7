"""Paired grayscale images: binary PGM I/O, pairing, patch sampling, synthesis."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix64

log = logging.getLogger(__name__)

SYNTH_KINDS = ("complementary-halves", "gradient-vs-texture", "step-edges")


class DataError(ValueError):
    """Bad or missing input data."""


@dataclass
class ImagePair:
    name: str
    vis: np.ndarray  # (1, 1, H, W) in [0, 1]
    ir: np.ndarray

    def __post_init__(self):
        if self.vis.shape != self.ir.shape:
            raise DataError(f"pair {self.name!r}: vis {self.vis.shape} and ir {self.ir.shape} differ")


@dataclass
class PatchBatch:
    vis: np.ndarray  # (N, 1, P, P)
    ir: np.ndarray
    indices: np.ndarray  # source pair per item
    offsets: np.ndarray  # (N, 2) top-left (row, col)


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------


def _header_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DataError("truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path: str | os.PathLike, dtype=np.float64) -> np.ndarray:
    """Binary PGM (P5) to a (1, 1, H, W) array scaled into [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise DataError(f"{path}: unsupported format {data[:2]!r} (only binary P5 PGM)")
    tokens, pos = _header_tokens(data[2:], 3)
    pos += 2
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed PGM header {tokens!r}") from None
    if w < 1 or h < 1:
        raise DataError(f"{path}: invalid dimensions {w}x{h}")
    if not 0 < maxval <= 65535:
        raise DataError(f"{path}: maxval {maxval} outside 1..65535")
    sample = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * sample.itemsize
    raster = data[pos : pos + need]
    if len(raster) < need:
        raise DataError(f"{path}: truncated payload ({len(raster)} of {need} bytes)")
    img = np.frombuffer(raster, dtype=sample).reshape(h, w).astype(np.float64) / maxval
    return img.reshape(1, 1, h, w).astype(dtype)


def quantize(img: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Round half away from zero onto the 0..maxval grid."""
    q = np.floor(np.clip(np.asarray(img, np.float64), 0.0, 1.0) * maxval + 0.5)
    return q.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(img: np.ndarray, path: str | os.PathLike, maxval: int = 255) -> None:
    a = np.asarray(img, dtype=np.float64)
    a = a.reshape(a.shape[-2], a.shape[-1])
    if a.min() < 0 or a.max() > 1:
        log.warning("%s: values outside [0, 1] clamped before writing", path)
    if not 0 < maxval <= 65535:
        raise ValueError(f"maxval {maxval} outside 1..65535")
    h, w = a.shape
    q = quantize(a, maxval)
    payload = q.astype(">u2").tobytes() if maxval > 255 else q.tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + payload)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def _stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.pgm"))}


def pair_dataset(vis_dir: str | os.PathLike, ir_dir: str | os.PathLike, dtype=np.float64) -> list[ImagePair]:
    """Pair ``vis_dir/*.pgm`` with ``ir_dir/*.pgm`` by filename stem, sorted by name."""
    vis_dir, ir_dir = Path(vis_dir), Path(ir_dir)
    for d in (vis_dir, ir_dir):
        if not d.is_dir():
            raise DataError(f"missing directory {d}")
    vis, ir = _stems(vis_dir), _stems(ir_dir)
    for name in sorted(set(vis) ^ set(ir)):
        log.warning("skipping unpaired image %r", name)
    common = sorted(set(vis) & set(ir))
    if not common:
        raise DataError(f"no paired images between {vis_dir} and {ir_dir}")
    pairs = []
    for name in common:
        v, i = read_pgm(vis[name], dtype), read_pgm(ir[name], dtype)
        if v.shape != i.shape:
            raise DataError(
                f"shape mismatch for {name!r}: {vis[name]} is {v.shape[2:]}, {ir[name]} is {i.shape[2:]}"
            )
        pairs.append(ImagePair(name, v, i))
    return pairs


def sample_patches(pairs: list[ImagePair], P: int, N: int, rng: SplitMix64 | int) -> PatchBatch:
    """Crop ``N`` aligned PxP patches; pair index, then row, then column per item."""
    rng = SplitMix64(rng) if isinstance(rng, int) else rng
    if P % 2:
        raise DataError(f"patch size {P} must be even")
    min_dim = min(min(p.vis.shape[2:]) for p in pairs)
    if P > min_dim:
        raise DataError(f"patch size {P} exceeds smallest image dimension {min_dim}")
    vis, ir, idx, offs = [], [], [], []
    for _ in range(N):
        k = int(rng.integers(len(pairs), 1)[0])
        pair = pairs[k]
        h, w = pair.vis.shape[2:]
        y = int(rng.integers(h - P + 1, 1)[0])
        x = int(rng.integers(w - P + 1, 1)[0])
        vis.append(pair.vis[0, :, y : y + P, x : x + P])
        ir.append(pair.ir[0, :, y : y + P, x : x + P])
        idx.append(k)
        offs.append((y, x))
    return PatchBatch(np.stack(vis), np.stack(ir), np.array(idx), np.array(offs))


# --------------------------------------------------------------------------
# synthetic pairs
# --------------------------------------------------------------------------

def _disks(size: int, rng: SplitMix64, count: int, x_range: tuple[int, int]) -> np.ndarray:
    """Sum of hard-edged disks with random centers, radii and amplitudes."""
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.zeros((size, size))
    u = rng.uniform(4 * count).reshape(count, 4)
    for cy, cx, r, a in u:
        cy = cy * size
        cx = x_range[0] + cx * (x_range[1] - x_range[0])
        r = size * (0.06 + 0.1 * r)
        amp = 0.25 + 0.3 * a
        out += amp * ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)
    return out


def synth_pairs(kind: str, size: int, count: int, seed: int | SplitMix64) -> list[ImagePair]:
    """Deterministic synthetic (vis, ir) pairs.

    ``complementary-halves``: vis carries disks only in its left half and ir
    only in its right half over a zero background, so ``vis * ir == 0``
    everywhere and the ideal fusion is their pixel-wise max.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if size % 2 or size < 4:
        raise ValueError(f"synthetic size must be even and >= 4, got {size}")
    rng = SplitMix64(seed) if isinstance(seed, int) else seed
    half = size // 2
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    pairs = []
    for n in range(count):
        if kind == "complementary-halves":
            vs = _disks(size, rng, 4, (0, half))
            vs[:, half:] = 0
            irs = _disks(size, rng, 4, (half, size))
            irs[:, :half] = 0
            vis, ir = vs, irs
        elif kind == "gradient-vs-texture":
            phase, freq = rng.uniform(2)
            vis = 0.2 + 0.6 * (xx * (0.5 + phase) + yy * (1.5 - phase)) / 2
            k = 2 * np.pi * (3 + 5 * freq)
            ir = 0.5 + 0.3 * np.sin(k * xx) * np.sin(k * yy)
        else:
            cut_x, cut_y = (0.25 + 0.5 * rng.uniform(2)) * size
            vis = np.where(np.arange(size)[None, :] < cut_x, 0.2, 0.8) * np.ones((size, 1))
            ir = np.where(np.arange(size)[:, None] < cut_y, 0.7, 0.3) * np.ones((1, size))
        vis = np.clip(vis, 0, 1).reshape(1, 1, size, size)
        ir = np.clip(ir, 0, 1).reshape(1, 1, size, size)
        pairs.append(ImagePair(f"{kind}-{n:04d}", vis, ir))
    return pairs


def save_pairs(pairs: list[ImagePair], root: str | os.PathLike, maxval: int = 255) -> None:
    """Write pairs under ``root/vis`` and ``root/ir`` as PGM."""
    root = Path(root)
    for p in pairs:
        write_pgm(p.vis, root / "vis" / f"{p.name}.pgm", maxval)
        write_pgm(p.ir, root / "ir" / f"{p.name}.pgm", maxval)
