"""Binary containers for model weights and prompt fixtures.

Layout (all little-endian)::

    magic   8 bytes      b"ADSPWTS\\0" (weights) or b"ADSPSEQ\\0" (sequence)
    version u64
    header  u64 fields   weights: num_layers, hidden_dim, ffn_dim, num_heads,
                                  vocab_size, max_positions
                         sequence: audio_len, text_len, hidden_dim
    body    f64 arrays   matrices in declaration order, row-major

A companion ``*.manifest.txt`` lists ``name rows cols`` per matrix.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .runtime import ModelConfig, ModelWeights, LayerWeights, LAYER_MATRICES, Sequence

WEIGHTS_MAGIC = b"ADSPWTS\0"
SEQUENCE_MAGIC = b"ADSPSEQ\0"
FORMAT_VERSION = 1

_CONFIG_FIELDS = ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "vocab_size", "max_positions")


class FormatError(ValueError):
    pass


def _write_matrix(fh, m: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def _read_matrix(fh, rows: int, cols: int) -> np.ndarray:
    nbytes = rows * cols * 8
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError("truncated matrix data")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(rows, cols)


def _read_header(fh, magic: bytes, count: int) -> tuple[int, ...]:
    got = fh.read(8)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<Q", fh.read(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    return struct.unpack(f"<{count}Q", fh.read(8 * count))


def manifest_text(entries) -> str:
    return "".join(f"{name} {rows} {cols}\n" for name, (rows, cols) in entries)


def save_weights(weights: ModelWeights, path) -> Path:
    path = Path(path)
    cfg = weights.config
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<Q", FORMAT_VERSION))
        fh.write(struct.pack("<6Q", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
        for name, m in weights.named_matrices():
            _write_matrix(fh, m)
    path.with_suffix(".manifest.txt").write_text(
        manifest_text((name, m.shape) for name, m in weights.named_matrices())
    )
    return path


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, _read_header(fh, WEIGHTS_MAGIC, 6))))
        shell = ModelWeights(cfg, [], np.empty(0), np.empty(0), np.empty(0))
        mats = {name: _read_matrix(fh, *shape) for name, shape in shell.expected_shapes()}
        if fh.read(1):
            raise FormatError("trailing bytes after weight matrices")
    layers = [
        LayerWeights(**{n: mats[f"layers.{i}.{n}"] for n in LAYER_MATRICES}) for i in range(cfg.num_layers)
    ]
    return ModelWeights(cfg, layers, mats["embedding"], mats["positional"], mats["head"])


def save_sequence(seq: Sequence, path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(SEQUENCE_MAGIC)
        fh.write(struct.pack("<Q", FORMAT_VERSION))
        fh.write(struct.pack("<3Q", seq.audio_len, seq.text_len, seq.embeddings.shape[1]))
        _write_matrix(fh, seq.embeddings)
    path.with_suffix(".manifest.txt").write_text(
        manifest_text([("embeddings", seq.embeddings.shape)])
    )
    return path


def load_sequence(path) -> Sequence:
    with open(path, "rb") as fh:
        audio_len, text_len, d = _read_header(fh, SEQUENCE_MAGIC, 3)
        emb = _read_matrix(fh, audio_len + text_len, d)
        if fh.read(1):
            raise FormatError("trailing bytes after sequence embeddings")
    return Sequence(emb, audio_len, text_len)
