"""Tokenization, padding, frozen-encoder pooling and the on-disk feature cache.

Feature cache layout (all integers little-endian)::

    offset  size        field
    0       6           magic b"XHFEAT"
    6       2           uint16 format version (1)
    8       32          encoder fingerprint, raw SHA-256 bytes
    40      4           uint32 d_model
    44      8           uint64 row count n
    52      4*n*d       float32 rows, row-major
    ...     per row     uint32 byte length + UTF-8 sample id
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, DataError, StaleCacheError

log = logging.getLogger(__name__)

CACHE_MAGIC = b"XHFEAT"
CACHE_VERSION = 1
_HEADER = struct.Struct("<6sH32sIQ")

# backbone ids resolved to Hugging Face model names
KNOWN_BACKBONES = {
    "mbert-base": "bert-base-multilingual-cased",
    "xlmr-base": "xlm-roberta-base",
}


class TokenizerKind(str, enum.Enum):
    WHITESPACE_STUB = "WHITESPACE_STUB"
    BACKBONE_ADAPTER = "BACKBONE_ADAPTER"


@dataclass(frozen=True)
class TokenizerSpec:
    kind: TokenizerKind = TokenizerKind.WHITESPACE_STUB
    vocab_size: int = 1 << 18
    pad_id: int = 0
    unk_id: int = 1
    bos_id: int = 2
    name: str = "whitespace"

    def __post_init__(self):
        if self.vocab_size <= 0:
            raise ConfigError("vocab_size must be positive")
        if self.pad_id == self.unk_id:
            raise ConfigError("pad_id and unk_id must differ")
        if max(self.pad_id, self.unk_id, self.bos_id) >= self.vocab_size:
            raise ConfigError("special token ids must be < vocab_size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class EncoderConfig:
    backbone_id: str = "stub-32"
    d_model: int = 32
    max_seq_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.d_model < 2:
            raise ConfigError("d_model must be >= 2")


@dataclass(frozen=True)
class TokenBatch:
    ids: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    tokenizer_spec: TokenizerSpec

    @property
    def max_seq_len(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray
    sample_ids: tuple
    encoder_fingerprint: str

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype="<f4")
        if rows.ndim != 2:
            raise DataError("feature rows must form a matrix")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if rows.shape[0] != len(self.sample_ids):
            raise DataError(f"{rows.shape[0]} feature rows but {len(self.sample_ids)} ids")
        if not np.all(np.isfinite(rows)):
            raise DataError("feature matrix contains non-finite values")

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def d_model(self) -> int:
        return self.rows.shape[1]

    def to_bytes(self) -> bytes:
        parts = [
            _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, bytes.fromhex(self.encoder_fingerprint), self.d_model, len(self)),
            self.rows.tobytes(order="C"),
        ]
        for sid in self.sample_ids:
            raw = sid.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureMatrix":
        if len(data) < _HEADER.size:
            raise DataError("feature cache truncated")
        magic, version, fp, d_model, n = _HEADER.unpack_from(data, 0)
        if magic != CACHE_MAGIC or version != CACHE_VERSION:
            raise DataError("not a feature cache file (bad magic or version)")
        off = _HEADER.size
        nbytes = 4 * n * d_model
        rows = np.frombuffer(data, dtype="<f4", count=n * d_model, offset=off).reshape(n, d_model)
        off += nbytes
        ids = []
        for _ in range(n):
            (k,) = struct.unpack_from("<I", data, off)
            off += 4
            ids.append(data[off : off + k].decode("utf-8"))
            off += k
        if off != len(data):
            raise DataError("feature cache has trailing bytes")
        return cls(rows.copy(), ids, fp.hex())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def take(self, ids: Sequence[str]) -> "FeatureMatrix":
        """Rows for ``ids`` in the given order."""
        index = {sid: i for i, sid in enumerate(self.sample_ids)}
        try:
            sel = [index[sid] for sid in ids]
        except KeyError as exc:
            raise DataError(f"sample {exc} has no cached feature row") from None
        return FeatureMatrix(self.rows[sel], list(ids), self.encoder_fingerprint)


# --------------------------------------------------------------------------
# tokenizers


class WhitespaceTokenizer:
    """Whitespace splitting with hashed token ids; needs no vocabulary file."""

    def __init__(self, spec: TokenizerSpec | None = None):
        self.spec = spec or TokenizerSpec()
        self._n_special = max(self.spec.pad_id, self.spec.unk_id, self.spec.bos_id) + 1
        if self.spec.vocab_size <= self._n_special:
            raise ConfigError("vocab_size leaves no room for regular tokens")

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def token_id(self, token: str) -> int:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
        return self._n_special + h % (self.spec.vocab_size - self._n_special)

    def encode(self, text: str) -> list[int]:
        return [self.token_id(t) for t in self.tokenize(text)]


class AdapterTokenizer:
    """Delegates to a backbone's own (subword) tokenizer."""

    def __init__(self, hf_tokenizer, name: str):
        self._tok = hf_tokenizer
        pad = hf_tokenizer.pad_token_id
        unk = hf_tokenizer.unk_token_id
        bos = hf_tokenizer.cls_token_id if hf_tokenizer.cls_token_id is not None else hf_tokenizer.bos_token_id
        self.spec = TokenizerSpec(TokenizerKind.BACKBONE_ADAPTER, len(hf_tokenizer), pad, unk, bos, name)

    def tokenize(self, text: str) -> list[str]:
        return self._tok.tokenize(text)

    def encode(self, text: str) -> list[int]:
        return list(self._tok(text, add_special_tokens=True, truncation=False)["input_ids"])


# --------------------------------------------------------------------------
# sequence length and batching


def choose_max_seq_len(
    histogram: Mapping[int, int],
    lower_bound: int = 25,
    upper_bound: float = 35,
    coverage: float = 0.95,
) -> int:
    """Smallest length covering ``coverage`` of samples, clamped to the bounds."""
    if not histogram or sum(histogram.values()) == 0:
        raise DataError("length histogram is empty")
    if lower_bound > upper_bound:
        raise ConfigError("lower_bound exceeds upper_bound")
    if not 0 < coverage <= 1:
        raise ConfigError("coverage must lie in (0, 1]")
    total = sum(histogram.values())
    need = coverage * total
    cum = 0
    for length in sorted(histogram):
        cum += histogram[length]
        # relative slack guards against coverage*total landing a hair above an integer
        if cum >= need - 1e-9 * total:
            break
    return int(min(max(length, lower_bound), upper_bound))


def encode_batch(texts: Sequence[str], tokenizer, max_seq_len: int) -> TokenBatch:
    spec = tokenizer.spec
    if max_seq_len < 1:
        raise ConfigError("max_seq_len must be >= 1")
    n = len(texts)
    ids = np.full((n, max_seq_len), spec.pad_id, dtype=np.int64)
    mask = np.zeros((n, max_seq_len), dtype=np.int8)
    lengths = np.zeros(n, dtype=np.int64)
    for i, text in enumerate(texts):
        toks = tokenizer.encode(text) or [spec.unk_id]
        lengths[i] = len(toks)
        k = min(len(toks), max_seq_len)
        ids[i, :k] = toks[:k]
        mask[i, :k] = 1
    return TokenBatch(ids, mask, lengths, spec)


# --------------------------------------------------------------------------
# encoders

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
    return x ^ (x >> np.uint64(31))


def stub_embedding(token_ids, d_model: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-embeddings in [-1, 1), shape ``(*token_ids.shape, d_model)``.

    Value for (token t, dimension j) is ``mix(mix(mix(seed) ^ t) ^ j)`` with
    splitmix64 finalization, top 53 bits scaled to [0, 1) and mapped to [-1, 1).
    """
    with np.errstate(over="ignore"):
        tok = np.asarray(token_ids, dtype=np.uint64)[..., None]
        dims = np.arange(d_model, dtype=np.uint64)
        h = _splitmix64(np.asarray([seed], dtype=np.uint64))
        h = _splitmix64(h ^ tok)
        h = _splitmix64(h ^ dims)
    unit = (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return 2.0 * unit - 1.0


class StubEncoder:
    """Mean-pooled hashed embeddings standing in for a pretrained backbone."""

    def __init__(self, config: EncoderConfig):
        self.config = config

    def pool(self, batch: TokenBatch) -> np.ndarray:
        emb = stub_embedding(batch.ids, self.config.d_model, self.config.seed)
        m = batch.mask.astype(np.float64)[..., None]
        pooled = (emb * m).sum(axis=1) / np.maximum(m.sum(axis=1), 1.0)
        return pooled.astype("<f4")


class BackboneAdapter:
    """First-position representation of a Hugging Face encoder, loaded lazily."""

    def __init__(self, config: EncoderConfig, model_name_or_path: str, device: str = "cpu"):
        self.config = config
        self.model_name_or_path = model_name_or_path
        self.device = device
        self._model = None
        self._tokenizer = None

    def _load(self):
        if self._model is not None:
            return
        try:
            import torch  # noqa: F401
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise CapabilityError(f"backbone {self.config.backbone_id!r} needs torch and transformers ({exc})") from None
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(self.model_name_or_path, local_files_only=True)
            self._model = AutoModel.from_pretrained(self.model_name_or_path, local_files_only=True)
        except (OSError, ValueError) as exc:
            raise CapabilityError(
                f"backbone {self.config.backbone_id!r}: model artifacts not available at "
                f"{self.model_name_or_path!r} ({exc.__class__.__name__})"
            ) from None
        self._model.eval().to(self.device)
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def tokenizer(self) -> AdapterTokenizer:
        self._load()
        return AdapterTokenizer(self._tokenizer, self.model_name_or_path)

    def pool(self, batch: TokenBatch) -> np.ndarray:
        import torch

        self._load()
        with torch.no_grad():
            out = self._model(
                input_ids=torch.as_tensor(batch.ids, device=self.device),
                attention_mask=torch.as_tensor(batch.mask.astype(np.int64), device=self.device),
            )
        return out.last_hidden_state[:, 0, :].cpu().numpy().astype("<f4")


def make_backbone(
    backbone_id: str, max_seq_len: int, seed: int = 0, model_dir: str | os.PathLike | None = None
):
    """Resolve a backbone id to ``(tokenizer, encoder)``.

    ``stub-<d>`` gives the whitespace stub with width d; ``mbert-base`` and
    ``xlmr-base`` resolve to local Hugging Face checkpoints; ``hf:<path>``
    loads an arbitrary local checkpoint.
    """
    if backbone_id.startswith("stub-"):
        try:
            d_model = int(backbone_id[len("stub-"):])
        except ValueError:
            raise ConfigError(f"bad stub backbone id {backbone_id!r}") from None
        config = EncoderConfig(backbone_id, d_model, max_seq_len, seed)
        return WhitespaceTokenizer(), StubEncoder(config)
    if backbone_id.startswith("hf:"):
        path = backbone_id[3:]
    elif backbone_id in KNOWN_BACKBONES:
        name = KNOWN_BACKBONES[backbone_id]
        path = str(Path(model_dir) / name) if model_dir else name
    else:
        raise ConfigError(f"unknown backbone {backbone_id!r}")
    # the width is a placeholder until the checkpoint reports its hidden size
    adapter = BackboneAdapter(EncoderConfig(backbone_id, 768, max_seq_len, seed), path)
    adapter._load()
    hidden = adapter._model.config.hidden_size
    adapter.config = EncoderConfig(backbone_id, hidden, max_seq_len, seed)
    return adapter.tokenizer, adapter


def encoder_fingerprint(config: EncoderConfig, tokenizer_spec: TokenizerSpec) -> str:
    payload = {"encoder": asdict(config), "tokenizer": tokenizer_spec.to_dict()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def pooled_features(batch: TokenBatch, encoder, sample_ids: Sequence[str] | None = None) -> FeatureMatrix:
    config = replace(encoder.config, max_seq_len=batch.max_seq_len)
    rows = encoder.pool(batch) if len(batch) else np.zeros((0, config.d_model), dtype="<f4")
    if rows.shape[1] != config.d_model:
        raise ConfigError(f"encoder produced width {rows.shape[1]}, expected {config.d_model}")
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(batch))]
    return FeatureMatrix(rows, ids, encoder_fingerprint(config, batch.tokenizer_spec))


def encode_corpus(corpus, tokenizer, encoder, max_seq_len: int, chunk: int = 256) -> FeatureMatrix:
    samples = list(corpus)
    config = replace(encoder.config, max_seq_len=max_seq_len)
    fp = encoder_fingerprint(config, tokenizer.spec)
    blocks = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        batch = encode_batch([s.text for s in part], tokenizer, max_seq_len)
        blocks.append(pooled_features(batch, encoder, [s.id for s in part]).rows)
    rows = np.concatenate(blocks) if blocks else np.zeros((0, config.d_model), dtype="<f4")
    return FeatureMatrix(rows, [s.id for s in samples], fp)


def save_feature_cache(features: FeatureMatrix, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(features.to_bytes())
    os.replace(tmp, path)


def load_feature_cache(path: str | os.PathLike, expected_fingerprint: str | None = None) -> FeatureMatrix:
    features = FeatureMatrix.from_bytes(Path(path).read_bytes())
    if expected_fingerprint is not None and features.encoder_fingerprint != expected_fingerprint:
        raise StaleCacheError(
            f"{path}: cache fingerprint {features.encoder_fingerprint[:12]} does not match "
            f"encoder {expected_fingerprint[:12]}"
        )
    return features


def build_feature_cache(
    corpus, tokenizer, encoder, max_seq_len: int, path: str | os.PathLike | None = None
) -> FeatureMatrix:
    """Encode ``corpus`` once and persist; reuse a valid cache at ``path``."""
    fp = encoder_fingerprint(replace(encoder.config, max_seq_len=max_seq_len), tokenizer.spec)
    ids = [s.id for s in corpus]
    if path is not None and Path(path).exists():
        try:
            cached = load_feature_cache(path, fp)
            if list(cached.sample_ids) == ids:
                return cached
            log.info("%s: cached ids differ from corpus, recomputing", path)
        except (StaleCacheError, DataError) as exc:
            log.info("%s; recomputing", exc)
    features = encode_corpus(corpus, tokenizer, encoder, max_seq_len)
    if path is not None:
        save_feature_cache(features, path)
    return features


def cache_path_for(cache_dir: str | os.PathLike, corpus_digest: str, fingerprint: str) -> Path:
    return Path(cache_dir) / f"{corpus_digest[:16]}-{fingerprint[:16]}.xhf"

