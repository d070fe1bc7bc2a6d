"""Weight files, PPM/PGM images, dataset layout and random initialization.

Weight file layout (all integers little-endian)::

    "HDES"  u32 version=1  u32 count
    count x { u16 name_len, name (utf-8), u8 rank, u32 dims[rank], f32 data[prod(dims)] }

Depth maps are 16-bit binary PGM (P5, maxval 65535, big-endian samples)
holding millimetres, 0 meaning "no measurement".  Segmentation labels are
8-bit P5 images (0 background, 1 person).  RGB frames are 8-bit P6.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .graph import BatchNorm, Conv, Graph
from .tensor import DTYPE, Tensor

MAGIC = b"HDES"
VERSION = 1
MAX_NAME_BYTES = 255
DEPTH_MM_PER_M = 1000.0


class WeightStore(dict):
    """Ordered ``name -> float32 ndarray`` map (rank 1 vectors, rank 4 kernels)."""

    def __setitem__(self, name, value):
        if not isinstance(name, str) or not name:
            raise ValueError("weight names must be non-empty strings")
        if len(name.encode("utf-8")) > MAX_NAME_BYTES:
            raise ValueError(f"weight name longer than {MAX_NAME_BYTES} bytes: {name[:40]}...")
        a = np.array(value, dtype=DTYPE)
        if a.ndim not in (1, 4):
            raise ShapeError(f"weight {name!r} must be rank 1 or 4, got shape {a.shape}")
        super().__setitem__(name, a)

    def update(self, *args, **kw):
        for k, v in dict(*args, **kw).items():
            self[k] = v

    def copy(self) -> "WeightStore":
        return WeightStore((k, v.copy()) for k, v in self.items())

    def __init__(self, items=()):
        super().__init__()
        for k, v in (items.items() if isinstance(items, dict) else items):
            self[k] = v

    @property
    def n_elements(self) -> int:
        return sum(v.size for v in self.values())

    def equal(self, other) -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self)


def weights_to_bytes(ws: WeightStore) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(ws))]
    for name, arr in ws.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def weights_from_bytes(buf: bytes) -> WeightStore:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated weight file while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an HDES weight file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}", 4)
    ws = WeightStore()
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", start + 2) from None
        if not name or name in ws:
            raise FormatError(f"empty or duplicate tensor name {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        if rank not in (1, 4):
            raise FormatError(f"tensor {name!r} has unsupported rank {rank}", pos - 1)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims))
        data = np.frombuffer(take(4 * size, f"data of {name!r}"), dtype="<f4")
        ws[name] = data.astype(DTYPE).reshape(dims)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return ws


def save_weights(ws: WeightStore, path) -> None:
    Path(path).write_bytes(weights_to_bytes(ws))


def load_weights(path) -> WeightStore:
    return weights_from_bytes(Path(path).read_bytes())


# -- initialization ----------------------------------------------------------

def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


def init_node_weights(node, rng: np.random.Generator) -> dict[str, np.ndarray]:
    k = node.kind
    if isinstance(k, Conv):
        out = {node.weights[0]: he_normal(rng, k.spec.weight_shape)}
        if k.bias:
            out[node.weights[1]] = np.zeros(k.spec.out_ch, dtype=DTYPE)
        return out
    if isinstance(k, BatchNorm):
        c = k.channels
        gamma, beta, mean, var = node.weights
        return {gamma: np.ones(c, DTYPE), beta: np.zeros(c, DTYPE),
                mean: np.zeros(c, DTYPE), var: np.ones(c, DTYPE)}
    return {}


def init_weights(g: Graph, seed: int) -> WeightStore:
    """He-normal conv kernels, zero biases, identity batch norm; seeded."""
    rng = np.random.default_rng(seed)
    ws = WeightStore()
    for node in g:
        ws.update(init_node_weights(node, rng))
    return ws


def randomize_batchnorm(g: Graph, ws: WeightStore, seed: int) -> WeightStore:
    """Replace identity BN statistics with random but well-conditioned ones,
    so that folding and equivalence checks exercise every BN term."""
    rng = np.random.default_rng(seed)
    out = ws.copy()
    for node in g:
        if isinstance(node.kind, BatchNorm):
            c = node.kind.channels
            gamma, beta, mean, var = node.weights
            out[gamma] = rng.uniform(0.5, 1.5, c)
            out[beta] = rng.normal(0.0, 0.1, c)
            out[mean] = rng.normal(0.0, 0.1, c)
            out[var] = rng.uniform(0.5, 1.5, c)
    return out


# -- netpbm images -----------------------------------------------------------

def _read_header(buf: bytes, magic: bytes):
    """Parse 'Px w h maxval' with comments; returns (w, h, maxval, data offset)."""
    if buf[:2] != magic:
        raise FormatError(f"expected {magic.decode()} header, got {buf[:2]!r}", 0)
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed netpbm header", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after netpbm header", pos)
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"invalid image size {w}x{h}", 2)
    return w, h, maxval, pos + 1


def _payload(buf, offset, n_bytes):
    if len(buf) - offset < n_bytes:
        raise FormatError(f"truncated image data: need {n_bytes} bytes, have {len(buf) - offset}", len(buf))
    return buf[offset:offset + n_bytes]


def read_ppm(path) -> np.ndarray:
    """P6 maxval-255 image as an (h, w, 3) uint8 array."""
    buf = Path(path).read_bytes()
    w, h, maxval, off = _read_header(buf, b"P6")
    if maxval != 255:
        raise FormatError(f"PPM maxval must be 255, got {maxval}", 2)
    return np.frombuffer(_payload(buf, off, w * h * 3), dtype=np.uint8).reshape(h, w, 3)


def load_ppm(path) -> Tensor:
    rgb = read_ppm(path)
    return Tensor.wrap((rgb.transpose(2, 0, 1)[None].astype(DTYPE) / DTYPE(255)).astype(DTYPE))


def save_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def read_pgm(path) -> np.ndarray:
    """P5 image as (h, w) uint8 (maxval < 256) or uint16 (big-endian on disk)."""
    buf = Path(path).read_bytes()
    w, h, maxval, off = _read_header(buf, b"P5")
    if not 0 < maxval <= 65535:
        raise FormatError(f"invalid PGM maxval {maxval}", 2)
    if maxval < 256:
        return np.frombuffer(_payload(buf, off, w * h), dtype=np.uint8).reshape(h, w).copy()
    return np.frombuffer(_payload(buf, off, 2 * w * h), dtype=">u2").reshape(h, w).astype(np.uint16)


def write_pgm(samples: np.ndarray, path, maxval: int) -> None:
    samples = np.asarray(samples)
    h, w = samples.shape
    if maxval < 256:
        data = samples.astype(np.uint8).tobytes()
    else:
        data = samples.astype(">u2").tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + data)


def save_pgm16(depth, path, scale: float = 1.0) -> None:
    """Write a depth map in metres as millimetre samples.

    ``scale`` is millimetres per stored unit (1.0 = plain millimetres).
    """
    d = np.asarray(depth, dtype=np.float64)
    d = d.reshape(d.shape[-2:])
    mm = np.rint(d * DEPTH_MM_PER_M / scale)
    write_pgm(np.clip(mm, 0, 65535).astype(np.uint16), path, 65535)


def load_pgm16(path, scale: float = 1.0) -> Tensor:
    """Depth PGM as a (1,1,h,w) tensor in metres."""
    buf = Path(path).read_bytes()
    _, _, maxval, _ = _read_header(buf, b"P5")
    if maxval != 65535:
        raise FormatError(f"depth PGM must have maxval 65535, got {maxval}", 2)
    s = read_pgm(path).astype(np.float64) * scale / DEPTH_MM_PER_M
    return Tensor.wrap(s.astype(DTYPE)[None, None])


def save_labels(labels, path) -> None:
    lab = np.asarray(labels)
    write_pgm(lab.reshape(lab.shape[-2:]).astype(np.uint8), path, 255)


def load_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _, _, maxval, _ = _read_header(buf, b"P5")
    if maxval != 255:
        raise FormatError(f"label PGM must have maxval 255, got {maxval}", 2)
    return read_pgm(path)


# -- dataset layout ----------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    frame_id: str
    rgb_path: Path
    depth_path: Path
    mask_path: Path


@dataclass
class DatasetIndex:
    samples: list[Sample]
    depth_scale: float = 1.0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def index_dataset(root, depth_scale: float = 1.0, check: bool = True) -> DatasetIndex:
    """Discover ``root/{rgb,depth,mask}/<frame>.{ppm,pgm}`` triples, sorted by rgb path."""
    root = Path(root)
    rgb_dir = root / "rgb"
    if not rgb_dir.is_dir():
        raise FormatError(f"dataset root {root} has no rgb/ directory")
    samples = []
    for rgb in sorted(rgb_dir.glob("*.ppm"), key=lambda p: os.fsencode(p)):
        frame = rgb.stem
        depth, mask = root / "depth" / f"{frame}.pgm", root / "mask" / f"{frame}.pgm"
        for p in (depth, mask):
            if not p.is_file():
                raise FormatError(f"frame {frame!r}: missing {p}")
        if check:
            h, w = read_ppm(rgb).shape[:2]
            for p in (depth, mask):
                if read_pgm(p).shape != (h, w):
                    raise FormatError(f"frame {frame!r}: {p.name} size differs from rgb {w}x{h}")
        samples.append(Sample(frame, rgb, depth, mask))
    return DatasetIndex(samples, depth_scale)
