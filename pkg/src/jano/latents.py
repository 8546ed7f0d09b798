"""Latent tensors, 3-D block geometry and the ``.jlat`` binary format.

A latent is a ``(C, F, H, W)`` float32 array. After channel averaging, one
token corresponds to one ``(frame, row, col)`` cell, and blocks are
``(f, h, w)`` tiles of that grid.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

MAGIC = b"JANO"
VERSION = 1
_HEADER = struct.Struct("<4sI4I")


@dataclass(frozen=True)
class LatentTensor:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 4:
            raise InvalidInputError(f"latent must be 4-D (C, F, H, W), got shape {arr.shape}")
        if arr.size == 0:
            raise InvalidInputError("latent tensor is empty")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("latent contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def spatial_shape(self):
        """(F, H, W) token grid."""
        return self.data.shape[1:]

    def tokens(self):
        """Token matrix of shape (F*H*W, C), row-major over (frame, row, col)."""
        c = self.data.shape[0]
        return self.data.reshape(c, -1).T.copy()

    @classmethod
    def from_tokens(cls, tokens, spatial_shape):
        tokens = np.asarray(tokens)
        f, h, w = spatial_shape
        return cls(tokens.T.reshape(tokens.shape[1], f, h, w))


@dataclass(frozen=True)
class BlockGrid:
    """Tiling of an (F, H, W) token grid by (f, h, w) blocks.

    Partial blocks at the far edges are kept; ``token_index_map`` only lists
    the real (unpadded) tokens of each block.
    """

    spatial_shape: tuple
    block_size: tuple
    grid_dims: tuple = field(init=False)
    token_index_map: tuple = field(init=False, repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.spatial_shape)
        bs = tuple(int(b) for b in self.block_size)
        if len(shape) != 3 or len(bs) != 3:
            raise InvalidInputError("spatial shape and block size must both have 3 entries")
        if any(b < 1 for b in bs):
            raise InvalidInputError(f"block dimensions must be >= 1, got {bs}")
        if any(s < 1 for s in shape):
            raise InvalidInputError(f"spatial dimensions must be >= 1, got {shape}")
        dims = tuple(math.ceil(s / b) for s, b in zip(shape, bs))
        flat = np.arange(np.prod(shape)).reshape(shape)
        index = []
        for fi in range(dims[0]):
            for hi in range(dims[1]):
                for wi in range(dims[2]):
                    sl = flat[
                        fi * bs[0] : (fi + 1) * bs[0],
                        hi * bs[1] : (hi + 1) * bs[1],
                        wi * bs[2] : (wi + 1) * bs[2],
                    ]
                    idx = sl.ravel().copy()
                    idx.setflags(write=False)
                    index.append(idx)
        object.__setattr__(self, "spatial_shape", shape)
        object.__setattr__(self, "block_size", bs)
        object.__setattr__(self, "grid_dims", dims)
        object.__setattr__(self, "token_index_map", tuple(index))

    @property
    def num_blocks(self):
        return len(self.token_index_map)

    @property
    def num_tokens(self):
        return int(np.prod(self.spatial_shape))

    def block_coords(self, block_id):
        nf, nh, nw = self.grid_dims
        return (block_id // (nh * nw), (block_id // nw) % nh, block_id % nw)

    def token_block_ids(self):
        """Block id of every token, shape (num_tokens,)."""
        out = np.empty(self.num_tokens, dtype=np.int64)
        for b, idx in enumerate(self.token_index_map):
            out[idx] = b
        return out

    def block_sizes(self):
        return np.array([len(idx) for idx in self.token_index_map])

    def expand(self, per_block):
        """Broadcast one value per block to one value per token."""
        per_block = np.asarray(per_block)
        return per_block[self.token_block_ids()]


@dataclass(frozen=True)
class BlockFeatureMatrix:
    block_id: int
    values: np.ndarray  # (f, h, w)

    @property
    def matrix(self):
        f, h, w = self.values.shape
        return self.values.reshape(f, h * w)


def channel_average(latent):
    """Mean over channels: (C, F, H, W) -> (F, H, W)."""
    arr = latent.data if isinstance(latent, LatentTensor) else np.asarray(latent)
    if arr.ndim != 4 or arr.size == 0 or arr.shape[0] < 1:
        raise InvalidInputError(f"expected a non-empty (C, F, H, W) tensor, got shape {arr.shape}")
    return arr.mean(axis=0, dtype=np.float64).astype(arr.dtype, copy=False)


def _check_block_size(block_size):
    bs = tuple(int(b) for b in block_size)
    if len(bs) != 3 or any(b < 1 for b in bs):
        raise InvalidInputError(f"block size must be three positive integers, got {block_size}")
    return bs


def block_view(tensor, block_size):
    """Edge-pad ``tensor`` (..., F, H, W) to whole blocks and split it.

    Returns an array of shape ``(..., nF, nH, nW, f, h, w)``.
    """
    tensor = np.asarray(tensor)
    f, h, w = _check_block_size(block_size)
    F, H, W = tensor.shape[-3:]
    nf, nh, nw = math.ceil(F / f), math.ceil(H / h), math.ceil(W / w)
    pad = [(0, 0)] * (tensor.ndim - 3) + [(0, nf * f - F), (0, nh * h - H), (0, nw * w - W)]
    if any(p[1] for p in pad):
        tensor = np.pad(tensor, pad, mode="edge")
    lead = tensor.shape[:-3]
    t = tensor.reshape(*lead, nf, f, nh, h, nw, w)
    k = len(lead)
    order = list(range(k)) + [k, k + 2, k + 4, k + 1, k + 3, k + 5]
    return t.transpose(order)


def partition_blocks(tensor, block_size):
    """Split an (F, H, W) tensor into edge-padded (f, h, w) blocks, row-major by block."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 3:
        raise InvalidInputError(f"expected an (F, H, W) tensor, got shape {tensor.shape}")
    view = block_view(tensor, block_size)
    nf, nh, nw = view.shape[:3]
    flat = view.reshape(nf * nh * nw, *view.shape[3:])
    return [BlockFeatureMatrix(i, np.ascontiguousarray(b)) for i, b in enumerate(flat)]


def assemble_blocks(blocks, spatial_shape, block_size):
    """Inverse of :func:`partition_blocks`: place unpadded regions back."""
    F, H, W = spatial_shape
    f, h, w = _check_block_size(block_size)
    nh, nw = math.ceil(H / h), math.ceil(W / w)
    out = np.empty((F, H, W), dtype=blocks[0].values.dtype)
    for blk in blocks:
        fi, hi, wi = blk.block_id // (nh * nw), (blk.block_id // nw) % nh, blk.block_id % nw
        region = out[fi * f : (fi + 1) * f, hi * h : (hi + 1) * h, wi * w : (wi + 1) * w]
        region[...] = blk.values[: region.shape[0], : region.shape[1], : region.shape[2]]
    return out


def save_latent(latent, path):
    arr = latent.data if isinstance(latent, LatentTensor) else np.asarray(latent, dtype=np.float32)
    header = _HEADER.pack(MAGIC, VERSION, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_latent(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic bytes, expected b'JANO'", 0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    _, version, *dims = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    payload = len(raw) - _HEADER.size
    if payload < expected:
        raise FormatError(
            f"payload has {payload} bytes but dims {tuple(dims)} need {expected}", len(raw)
        )
    if payload > expected:
        raise FormatError(
            f"payload has {payload} bytes but dims {tuple(dims)} need {expected}",
            _HEADER.size + expected,
        )
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(dims)
    return LatentTensor(arr.astype(np.float32))
