"""Corpus ingestion, vocabulary construction, synthetic desk-scale tasks, and
the binary checkpoint container.

Checkpoint layout: ``HNMT`` magic, u32 version, u64 body length, body, u32
CRC32 of the body. The body is a length-prefixed JSON config followed by
named tensor records of little-endian float64, so round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import Model, ModelConfig, ModelParams, init_params, iter_tensors
from .tokens import BOS_ID, EOS_ID, N_RESERVED, PAD_ID, RESERVED_TOKENS, UNK_ID


class DataError(ValueError):
    """Malformed corpus or vocabulary input."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class Vocabulary:
    """token <-> id bijection with the fixed reserved prefix PAD/BOS/EOS/UNK."""

    def __init__(self, tokens: Sequence[str]):
        for tok in tokens:
            if tok in RESERVED_TOKENS:
                raise DataError(f"reserved token {tok!r} cannot be a content token")
        self._id_to_token = list(RESERVED_TOKENS) + list(tokens)
        if len(set(self._id_to_token)) != len(self._id_to_token):
            raise DataError("duplicate tokens in vocabulary")
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    def __len__(self) -> int:
        return len(self._id_to_token)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:N_RESERVED]) != RESERVED_TOKENS:
            raise DataError(f"{path}: vocabulary file lacks the reserved-token header")
        return cls(lines[N_RESERVED:])


def build_vocab(source, cap: int) -> Vocabulary:
    """Frequency-ranked vocabulary over whitespace-tokenized lines.

    ``cap`` bounds the number of kept content tokens (reserved ids come on
    top); frequency ties break lexicographically.
    """
    if cap < 1:
        raise DataError("vocabulary cap must be >= 1")
    lines = read_lines(source) if isinstance(source, (str, Path)) else list(source)
    counts: Counter = Counter()
    for line in lines:
        counts.update(line.split())
    if not counts:
        raise DataError("empty corpus: no tokens to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ranked[:cap]])


def read_lines(path) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{path}: not a readable file")
    return p.read_text(encoding="utf-8").splitlines()


def encode_line(vocab: Vocabulary, line: str, role: str = "source") -> list[int]:
    """Whitespace-tokenize and map to ids; OOV becomes UNK. Targets are
    wrapped BOS ... EOS, sources stay bare."""
    ids = [vocab.id_of(tok) for tok in line.split()]
    if role == "target":
        return [BOS_ID] + ids + [EOS_ID]
    if role != "source":
        raise DataError(f"unknown role {role!r}")
    return ids


def decode_line(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Render ids as text, dropping PAD/BOS/EOS (UNK stays visible)."""
    keep = [i for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]
    return " ".join(vocab.token_of(i) for i in keep)


def synthetic_vocab(vocab_size: int) -> Vocabulary:
    """Vocabulary whose content token for id i is ``w{i}``."""
    if vocab_size <= N_RESERVED:
        raise DataError("synthetic vocab needs at least one content token")
    return Vocabulary([f"w{i}" for i in range(N_RESERVED, vocab_size)])


TASK_KINDS = ("copy", "reverse", "rotate")


def make_synthetic_task(kind: str, vocab_size: int, max_len: int, count: int,
                        seed: int) -> list[tuple[list[int], list[int]]]:
    """Deterministic parallel corpus in id space; targets carry BOS ... EOS.

    copy: target = source; reverse: target = mirrored source;
    rotate: target id = ((src - 4 + 1) mod content_range) + 4.
    """
    if kind not in TASK_KINDS:
        raise DataError(f"unknown task kind {kind!r}")
    if vocab_size <= N_RESERVED:
        raise DataError("vocab_size must exceed the reserved range")
    rng = ad.make_rng(seed)
    content = vocab_size - N_RESERVED
    pairs = []
    for _ in range(count):
        n = int(rng.integers(1, max_len + 1))
        src = [int(i) for i in rng.integers(N_RESERVED, vocab_size, size=n)]
        if kind == "copy":
            body = list(src)
        elif kind == "reverse":
            body = src[::-1]
        else:
            body = [(i - N_RESERVED + 1) % content + N_RESERVED for i in src]
        pairs.append((src, [BOS_ID] + body + [EOS_ID]))
    return pairs


def write_parallel_corpus(pairs, vocab: Vocabulary, src_path, tgt_path) -> None:
    src_lines = [decode_line(vocab, src) for src, _ in pairs]
    tgt_lines = [decode_line(vocab, tgt) for _, tgt in pairs]
    Path(src_path).write_text("\n".join(src_lines) + "\n", encoding="utf-8")
    Path(tgt_path).write_text("\n".join(tgt_lines) + "\n", encoding="utf-8")


def encode_corpus(src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                  src_lines: Sequence[str], tgt_lines: Sequence[str]
                  ) -> list[tuple[list[int], list[int]]]:
    if len(src_lines) != len(tgt_lines):
        raise DataError(f"corpus not line-aligned: {len(src_lines)} vs {len(tgt_lines)} lines")
    pairs = []
    for s, t in zip(src_lines, tgt_lines):
        src = encode_line(src_vocab, s, "source")
        tgt = encode_line(tgt_vocab, t, "target")
        if src:
            pairs.append((src, tgt))
    if not pairs:
        raise DataError("corpus contains no non-empty sentence pairs")
    return pairs


# ---------------- checkpoints ----------------

_MAGIC = b"HNMT"
_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams) -> None:
    body = bytearray()
    config_blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(config_blob)) + config_blob
    entries = list(iter_tensors(params))
    body += struct.pack("<I", len(entries))
    for name, tensor in entries:
        name_b = name.encode("utf-8")
        body += struct.pack("<I", len(name_b)) + name_b
        shape = tensor.data.shape
        body += struct.pack("<I", len(shape))
        for dim in shape:
            body += struct.pack("<Q", dim)
        body += np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
    blob = _MAGIC + struct.pack("<I", _VERSION) + struct.pack("<Q", len(body))
    blob += bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointTruncatedError(f"{path}: shorter than the fixed header")
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a hybridnmt checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {_VERSION}")
    (body_len,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + body_len + 4:
        raise CheckpointTruncatedError(f"{path}: body truncated "
                                       f"({len(raw) - 16} of {body_len + 4} bytes)")
    body = raw[16:16 + body_len]
    (stored_crc,) = struct.unpack_from("<I", raw, 16 + body_len)
    if zlib.crc32(body) != stored_crc:
        raise CheckpointChecksumError(f"{path}: payload checksum mismatch")

    view = memoryview(body)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointTruncatedError(f"{path}: record overruns body")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_dict(json.loads(bytes(take(cfg_len)).decode("utf-8")))
    (n_entries,) = struct.unpack("<I", take(4))
    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack(f"<{rank}Q", take(8 * rank))) if rank else ()
        numel = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * numel), dtype="<f8").astype(np.float64).reshape(shape)
        loaded[name] = arr

    params = init_params(cfg, seed=0)
    names = [name for name, _ in iter_tensors(params)]
    if set(names) != set(loaded):
        raise CheckpointError(f"{path}: parameter set does not match config")
    for name, tensor in iter_tensors(params):
        if tensor.data.shape != loaded[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        tensor.data = loaded[name]
    return cfg, params


def save_model(path, model: Model) -> None:
    save_checkpoint(path, model.cfg, model.params)


def load_model(path) -> Model:
    cfg, params = load_checkpoint(path)
    return Model(cfg, params)
