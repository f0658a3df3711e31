"""Corpus preparation: ingest MLMA/CONAN exports, normalize, filter, dedup, split."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import ConfigError, DataError, SchemaError

log = logging.getLogger(__name__)

NOT_HATEFUL = 0
HATEFUL = 1
LABELS = (NOT_HATEFUL, HATEFUL)
DEFAULT_LANGUAGES = frozenset({"en", "fr"})

# Real MLMA exports ship one CSV per language with no language column.
MLMA_COLUMNS = {"id": "HITId", "text": "tweet", "labels": "sentiment"}
CONAN_FIELDS = {"text": "hateSpeech", "language": "language", "id": "cn_id"}

_WS = re.compile(r"\s+")
_MARKER = re.compile(r"(?<!\w)[#@]\w")


class Source(str, enum.Enum):
    MLMA = "MLMA"
    CONAN = "CONAN"
    SYNTHETIC = "SYNTHETIC"


@dataclass(frozen=True)
class TextSample:
    id: str
    text: str
    language: str
    label: int
    source: Source

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"sample {self.id!r}: label must be 0 or 1, got {self.label!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "language": self.language,
            "label": int(self.label),
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TextSample":
        try:
            return cls(str(d["id"]), d["text"], d["language"], int(d["label"]), Source(d["source"]))
        except KeyError as exc:
            raise SchemaError(f"prepared sample is missing key {exc}") from None


@dataclass(frozen=True)
class RawMlmaRecord:
    id: str
    text: str
    label_tags: frozenset
    language: str


@dataclass(frozen=True)
class RowProblem:
    row: int
    reason: str


@dataclass(frozen=True)
class Corpus:
    """Prepared, immutable sample collection.

    Construction checks every prepared-sample invariant, so an instance is
    always safe to hand to the encoder.
    """

    samples: tuple = ()
    provenance: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        ids, texts = set(), set()
        for s in self.samples:
            if s.id in ids:
                raise DataError(f"duplicate sample id {s.id!r}")
            if s.text in texts:
                raise DataError(f"duplicate text in corpus (id {s.id!r})")
            if not s.text or normalize(s.text) != s.text:
                raise DataError(f"sample {s.id!r} is not normalized")
            if should_discard(s.text):
                raise DataError(f"sample {s.id!r} contains a hashtag or mention")
            ids.add(s.id)
            texts.add(s.text)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def language_mix(self) -> dict:
        return dict(sorted(Counter(s.language for s in self.samples).items()))

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def texts(self) -> list[str]:
        return [s.text for s in self.samples]

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.samples]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict(), ensure_ascii=False) + "\n" for s in self.samples)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    def subset(self, ids: Iterable[str]) -> "Corpus":
        wanted = set(ids)
        return Corpus([s for s in self.samples if s.id in wanted], self.provenance)


@dataclass(frozen=True)
class DatasetStats:
    n_total: int
    n_per_class: dict
    n_per_language: dict
    token_length_histogram: dict

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_per_class": {str(k): v for k, v in sorted(self.n_per_class.items())},
            "n_per_language": dict(sorted(self.n_per_language.items())),
            "token_length_histogram": {str(k): v for k, v in sorted(self.token_length_histogram.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetStats":
        return cls(
            int(d["n_total"]),
            {int(k): int(v) for k, v in d["n_per_class"].items()},
            {k: int(v) for k, v in d["n_per_language"].items()},
            {int(k): int(v) for k, v in d["token_length_histogram"].items()},
        )

    def __add__(self, other: "DatasetStats") -> "DatasetStats":
        def add(a, b):
            out = Counter(a)
            out.update(b)
            return dict(sorted(out.items()))

        return DatasetStats(
            self.n_total + other.n_total,
            add(self.n_per_class, other.n_per_class),
            add(self.n_per_language, other.n_per_language),
            add(self.token_length_histogram, other.token_length_histogram),
        )


@dataclass(frozen=True)
class SplitSpec:
    train_parts: int = 3
    val_parts: int = 1
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.train_parts <= 0 or self.val_parts <= 0:
            raise ConfigError("split parts must be positive")
        if self.seed < 0:
            raise ConfigError("split seed must be unsigned")


@dataclass(frozen=True)
class ClassWeights:
    w: tuple = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if len(self.w) != 2 or not all(0.0 < x < float("inf") for x in self.w):
            raise ConfigError(f"class weights must be two finite positive numbers, got {self.w}")

    def __getitem__(self, label: int) -> float:
        return self.w[label]


@dataclass
class DedupSummary:
    kept: list
    n_dropped: int = 0
    n_label_conflicts: int = 0


@dataclass
class PrepReport:
    """Per-language counts from one run of the preparation pipeline."""

    language: str
    n_raw: int = 0
    n_raw_by_source: dict = field(default_factory=dict)
    n_empty: int = 0
    n_discarded: int = 0
    n_dedup_without_filter: int = 0
    n_final: int = 0
    n_label_conflicts: int = 0

    @property
    def shrinkage(self) -> float:
        return 1.0 - self.n_final / self.n_raw if self.n_raw else 0.0

    def to_dict(self) -> dict:
        return {
            "language": self.language,
            "n_raw": self.n_raw,
            "n_raw_by_source": dict(self.n_raw_by_source),
            "n_empty": self.n_empty,
            "n_discarded": self.n_discarded,
            "n_dedup_without_filter": self.n_dedup_without_filter,
            "n_final": self.n_final,
            "n_label_conflicts": self.n_label_conflicts,
            "shrinkage": self.shrinkage,
        }


# --------------------------------------------------------------------------
# parsing


def _check_columns(mapping: Mapping[str, str], available: Iterable[str], kind: str) -> None:
    available = set(available)
    missing = [col for col in mapping.values() if col is not None and col not in available]
    if missing:
        raise SchemaError(f"{kind}: missing column(s) {missing}; available: {sorted(available)}")


def parse_mlma(
    rows: Sequence[Mapping[str, Any]],
    column_map: Mapping[str, str] | None = None,
    tag_separator: str = "_",
    language_filter: Iterable[str] = DEFAULT_LANGUAGES,
    *,
    language: str | None = None,
    fieldnames: Sequence[str] | None = None,
    problems: list | None = None,
) -> list[RawMlmaRecord]:
    """Turn tabular MLMA rows into records.

    ``column_map`` maps the logical fields ``text``, ``labels`` and optionally
    ``id`` and ``language`` to column names. Files without a language column
    need ``language``. Rows with an empty text or label cell are skipped and
    appended to ``problems``.
    """
    column_map = dict(column_map or MLMA_COLUMNS)
    if not tag_separator:
        raise ConfigError("tag separator must be non-empty")
    for key in ("text", "labels"):
        if key not in column_map:
            raise SchemaError(f"MLMA column map lacks {key!r}")
    if "language" not in column_map and language is None:
        raise SchemaError("MLMA input has no language column and no fixed language was given")
    if fieldnames is None and rows:
        fieldnames = list(rows[0].keys())
    if fieldnames is not None:
        _check_columns(column_map, fieldnames, "MLMA")

    keep = {lang.lower() for lang in language_filter}
    out = []
    for n, row in enumerate(rows, start=1):
        lang = (row.get(column_map["language"]) if "language" in column_map else language) or ""
        lang = lang.strip().lower()
        if lang not in keep:
            continue
        text = row.get(column_map["text"]) or ""
        if not text.strip():
            _problem(problems, n, "empty text cell")
            continue
        tags = frozenset(t.strip() for t in (row.get(column_map["labels"]) or "").split(tag_separator) if t.strip())
        if not tags:
            _problem(problems, n, "empty label cell")
            continue
        rid = row.get(column_map["id"]) if "id" in column_map else None
        out.append(RawMlmaRecord(str(rid if rid not in (None, "") else n), text, tags, lang))
    return out


def _problem(problems, row, reason):
    if problems is None:
        log.warning("row %d skipped: %s", row, reason)
    else:
        problems.append(RowProblem(row, reason))


def binarize_mlma_label(tags: Iterable[str]) -> int:
    tags = {t.strip().lower() for t in tags}
    if not tags:
        raise DataError("cannot binarize an empty tag set")
    return NOT_HATEFUL if tags == {"normal"} else HATEFUL


def mlma_to_samples(records: Iterable[RawMlmaRecord]) -> list[TextSample]:
    return [
        TextSample(f"mlma-{r.language}-{r.id}", r.text, r.language, binarize_mlma_label(r.label_tags), Source.MLMA)
        for r in records
    ]


def parse_conan(
    records: Sequence[Mapping[str, Any]],
    field_map: Mapping[str, str] | None = None,
    language_filter: Iterable[str] = DEFAULT_LANGUAGES,
) -> list[TextSample]:
    """Emit one HATEFUL sample per CONAN record in the wanted languages.

    Only the hate-speech side of each pair is read; counter-narrative fields
    are ignored.
    """
    field_map = dict(field_map or CONAN_FIELDS)
    for key in ("text", "language"):
        if key not in field_map:
            raise SchemaError(f"CONAN field map lacks {key!r}")
    keep = {lang.lower() for lang in language_filter}
    out = []
    for n, rec in enumerate(records, start=1):
        for key in ("text", "language"):
            if field_map[key] not in rec:
                raise SchemaError(f"CONAN record {n}: missing field {field_map[key]!r}")
        lang = str(rec[field_map["language"]]).strip().lower()
        if lang not in keep:
            continue
        rid = rec.get(field_map["id"]) if "id" in field_map else None
        rid = str(rid) if rid not in (None, "") else str(n)
        out.append(TextSample(f"conan-{lang}-{rid}", str(rec[field_map["text"]]), lang, HATEFUL, Source.CONAN))
    return out


# --------------------------------------------------------------------------
# text rules


def normalize(text: str) -> str:
    """Lowercase and collapse whitespace. An empty result means "drop me"."""
    return _WS.sub(" ", text.lower()).strip()


def should_discard(text: str) -> bool:
    return _MARKER.search(text) is not None


def deduplicate_with_summary(samples: Iterable[TextSample]) -> DedupSummary:
    first: dict[str, TextSample] = {}
    summary = DedupSummary(kept=[])
    for s in samples:
        seen = first.get(s.text)
        if seen is None:
            first[s.text] = s
            summary.kept.append(s)
            continue
        summary.n_dropped += 1
        if seen.label != s.label:
            summary.n_label_conflicts += 1
    if summary.n_label_conflicts:
        log.debug(
            "dedup: %d duplicates dropped, %d with a label differing from the kept copy",
            summary.n_dropped,
            summary.n_label_conflicts,
        )
    return summary


def deduplicate(samples: Iterable[TextSample]) -> list[TextSample]:
    """Keep the first occurrence of each distinct text, preserving order."""
    return deduplicate_with_summary(samples).kept


def clean_samples(samples: Iterable[TextSample]) -> list[TextSample]:
    """normalize -> filter -> deduplicate."""
    return deduplicate(s for s in _normalized_nonempty(samples) if not should_discard(s.text))


def _normalized_nonempty(samples):
    for s in samples:
        text = normalize(s.text)
        if text:
            yield TextSample(s.id, text, s.language, s.label, s.source)


def merge(corpora: Sequence[Corpus]) -> Corpus:
    """Concatenate in argument order, dedup, and re-namespace colliding ids."""
    kept = deduplicate(s for c in corpora for s in c.samples)
    seen: set[str] = set()
    out = []
    for s in kept:
        sid = s.id
        if sid in seen:
            base = f"{s.source.value.lower()}:{s.id}"
            sid, k = base, 1
            while sid in seen:
                k += 1
                sid = f"{base}~{k}"
            log.info("id %r re-namespaced to %r", s.id, sid)
            s = TextSample(sid, s.text, s.language, s.label, s.source)
        seen.add(sid)
        out.append(s)
    return Corpus(out, [d for c in corpora for d in c.provenance])


def prepare_language(
    language: str,
    mlma: Iterable[RawMlmaRecord] = (),
    conan: Iterable[TextSample] = (),
    provenance: Sequence[str] = (),
) -> tuple[Corpus, PrepReport]:
    """Build one language's merged corpus (MLMA first, then CONAN)."""
    sources = [
        [s for s in mlma_to_samples(mlma) if s.language == language],
        [s for s in conan if s.language == language],
    ]
    report = PrepReport(language, sum(map(len, sources)))
    report.n_raw_by_source = {"MLMA": len(sources[0]), "CONAN": len(sources[1])}
    nonempty = [list(_normalized_nonempty(src)) for src in sources]
    report.n_empty = report.n_raw - sum(map(len, nonempty))
    filtered = [[s for s in src if not should_discard(s.text)] for src in nonempty]
    report.n_discarded = sum(map(len, nonempty)) - sum(map(len, filtered))
    report.n_dedup_without_filter = len(deduplicate(nonempty[0] + nonempty[1]))
    report.n_label_conflicts = deduplicate_with_summary(filtered[0] + filtered[1]).n_label_conflicts
    if report.n_label_conflicts:
        log.warning("%s: %d duplicate texts carried a different label than the kept copy", language, report.n_label_conflicts)

    merged = merge([Corpus(deduplicate(src)) for src in filtered])
    merged = Corpus(merged.samples, provenance)
    report.n_final = len(merged)
    return merged, report


# --------------------------------------------------------------------------
# splitting and statistics


def _round_half_up_ratio(n: int, num: int, den: int) -> int:
    return (2 * n * num + den) // (2 * den)


def split_train_val(corpus: Corpus, spec: SplitSpec = SplitSpec()) -> tuple[Corpus, Corpus]:
    """Seeded train/val split; outputs keep the input order."""
    total_parts = spec.train_parts + spec.val_parts
    if len(corpus) < total_parts:
        raise DataError(f"corpus of {len(corpus)} samples cannot be split {spec.train_parts}:{spec.val_parts}")
    rng = random.Random(spec.seed)
    if spec.stratified:
        strata = [[i for i, s in enumerate(corpus.samples) if s.label == c] for c in LABELS]
        if not all(strata):
            raise DataError("stratified split needs both classes present")
    else:
        strata = [list(range(len(corpus)))]
    # overall train size rounds half-up; strata share it by largest remainder,
    # so every stratum stays within one sample of its exact proportion
    target = _round_half_up_ratio(len(corpus), spec.train_parts, total_parts)
    quotas = [len(idx) * spec.train_parts // total_parts for idx in strata]
    remainders = [len(idx) * spec.train_parts % total_parts for idx in strata]
    for k in sorted(range(len(strata)), key=lambda k: (-remainders[k], k))[: target - sum(quotas)]:
        quotas[k] += 1
    train_idx: set[int] = set()
    for idx, quota in zip(strata, quotas):
        idx = list(idx)
        rng.shuffle(idx)
        train_idx.update(idx[:quota])
    train = [s for i, s in enumerate(corpus.samples) if i in train_idx]
    val = [s for i, s in enumerate(corpus.samples) if i not in train_idx]
    return Corpus(train, corpus.provenance), Corpus(val, corpus.provenance)


def _tokenize_fn(tokenizer) -> Callable[[str], list]:
    if tokenizer is None:
        return str.split
    return getattr(tokenizer, "tokenize", tokenizer)


def compute_stats(corpus: Iterable[TextSample], tokenizer=None) -> DatasetStats:
    tokenize = _tokenize_fn(tokenizer)
    per_class = Counter({c: 0 for c in LABELS})
    per_lang: Counter = Counter()
    hist: Counter = Counter()
    n = 0
    for s in corpus:
        n += 1
        per_class[s.label] += 1
        per_lang[s.language] += 1
        hist[len(tokenize(s.text))] += 1
    return DatasetStats(n, dict(sorted(per_class.items())), dict(sorted(per_lang.items())), dict(sorted(hist.items())))


def compute_class_weights(stats: DatasetStats | Mapping[int, int]) -> ClassWeights:
    """Balanced inverse-frequency weights, N / (K * n_c)."""
    counts = stats.n_per_class if isinstance(stats, DatasetStats) else stats
    n = [int(counts.get(c, 0)) for c in LABELS]
    if min(n) <= 0:
        raise ConfigError(
            f"class counts {n} include an empty class; disable class weighting for this data"
        )
    total = sum(n)
    return ClassWeights(tuple(total / (len(LABELS) * nc) for nc in n))


# --------------------------------------------------------------------------
# file I/O


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _open(path, **kw):
    try:
        return open(path, **kw)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def read_mlma_csv(path: str | Path) -> tuple[list[dict], list[str]]:
    with _open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return rows, list(reader.fieldnames or [])


def read_conan_json(path: str | Path) -> list[dict]:
    """Accept a JSON array, an object wrapping one array, or JSON Lines."""
    with _open(path, encoding="utf-8-sig") as fh:
        raw = fh.read()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError:
        try:
            return [json.loads(line) for line in raw.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: neither JSON nor JSON Lines ({exc})") from None
    if isinstance(data, dict):
        lists = [v for v in data.values() if isinstance(v, list)]
        if len(lists) != 1:
            raise SchemaError(f"{path}: expected an array of records")
        data = lists[0]
    if not isinstance(data, list) or not all(isinstance(r, dict) for r in data):
        raise SchemaError(f"{path}: expected an array of objects")
    return data


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(corpus.to_jsonl(), encoding="utf-8")


def read_jsonl(path: str | Path) -> Corpus:
    samples = []
    with _open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(TextSample.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: {exc}") from None
    return Corpus(samples, [file_digest(path)])
