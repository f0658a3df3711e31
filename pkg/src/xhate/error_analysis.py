"""Misclassification analysis: surface-feature tagging, aggregation and run comparison."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Corpus, normalize
from .errors import ComparisonRefused, DataError

log = logging.getLogger(__name__)

LEXICON_KINDS = ("ethnic", "political")
DEFAULT_CONDITIONAL_MARKERS = {
    "en": ("if", "unless"),
    "fr": ("si", "s'il", "s'ils"),
}
DIRECTIONS = ("false_hateful", "missed_hateful")


@dataclass(frozen=True)
class Lexicon:
    name: str
    language: str
    entries: frozenset

    def __post_init__(self):
        object.__setattr__(self, "entries", frozenset(normalize(e) for e in self.entries if normalize(e)))
        pats = [_phrase_pattern(e) for e in sorted(self.entries)]
        object.__setattr__(self, "_regex", re.compile("|".join(pats)) if pats else None)

    def hits(self, text: str) -> bool:
        return self._regex is not None and self._regex.search(text) is not None


def _phrase_pattern(phrase: str) -> str:
    return r"(?<!\w)" + re.escape(phrase) + r"(?!\w)"


def load_lexicon(path: str | Path, name: str | None = None, language: str = "") -> Lexicon:
    """UTF-8, one phrase per line, '#' starts a comment line."""
    path = Path(path)
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            entries.append(line)
    if name is None or not language:
        lang, _, kind = path.stem.partition("_")
        name = name or kind or path.stem
        language = language or lang
    return Lexicon(name, language, frozenset(entries))


def load_lexicons(directory: str | Path | None = None) -> dict:
    """``{language: {kind: Lexicon}}`` from ``<lang>_<kind>.txt`` files.

    Without a directory the bundled lexicons are used.
    """
    if directory is None:
        files = [f for f in resources.files("xhate").joinpath("lexicons").iterdir() if f.name.endswith(".txt")]
    else:
        files = sorted(Path(directory).glob("*_*.txt"))
    out: dict = {}
    for f in sorted(files, key=lambda f: f.name):
        with resources.as_file(f) as p:
            lex = load_lexicon(p)
        out.setdefault(lex.language, {})[lex.name] = lex
    return out


@dataclass(frozen=True)
class TaggerConfig:
    short_threshold: int = 10
    long_threshold: int = 25
    conditional_markers: Mapping = field(default_factory=lambda: dict(DEFAULT_CONDITIONAL_MARKERS))


@dataclass(frozen=True)
class FeatureTagSet:
    interrogative: bool
    exclamatory: bool
    conditional: bool
    short_lt10_words: bool
    long_ge25_words: bool
    contains_numeral: bool
    ends_ellipsis: bool
    ethnic_lexicon_hit: bool
    political_lexicon_hit: bool
    word_count: int

    def categories(self) -> list[str]:
        return [name for name in CATEGORIES if getattr(self, name)]

    def to_dict(self) -> dict:
        return asdict(self)


CATEGORIES = tuple(f.name for f in fields(FeatureTagSet) if f.name != "word_count")

_DIGIT = re.compile(r"\d")
_default_lexicons: dict | None = None


def _bundled_lexicons() -> dict:
    global _default_lexicons
    if _default_lexicons is None:
        _default_lexicons = load_lexicons()
    return _default_lexicons


def tag_features(
    text: str,
    language: str,
    lexicons: Mapping | None = None,
    config: TaggerConfig = TaggerConfig(),
) -> FeatureTagSet:
    lexicons = _bundled_lexicons() if lexicons is None else lexicons
    tail = text.rstrip()
    n_words = len(text.split())
    markers = config.conditional_markers.get(language, ())
    lang_lex = lexicons.get(language)
    if lang_lex is None:
        log.warning("no lexicons for language %r; lexicon tags left false", language)
        lang_lex = {}
    return FeatureTagSet(
        interrogative=tail.endswith("?"),
        exclamatory=tail.endswith("!"),
        conditional=any(re.search(_phrase_pattern(m), text) for m in markers),
        short_lt10_words=n_words < config.short_threshold,
        long_ge25_words=n_words >= config.long_threshold,
        contains_numeral=_DIGIT.search(text) is not None,
        ends_ellipsis=tail.endswith("...") or tail.endswith("…"),
        ethnic_lexicon_hit=bool(lang_lex.get("ethnic") and lang_lex["ethnic"].hits(text)),
        political_lexicon_hit=bool(lang_lex.get("political") and lang_lex["political"].hits(text)),
        word_count=n_words,
    )


@dataclass(frozen=True)
class ErrorRecord:
    sample_id: str
    text: str
    gold: int
    predicted: int
    tags: FeatureTagSet

    def __post_init__(self):
        if self.gold == self.predicted:
            raise DataError(f"{self.sample_id}: not an error (gold == predicted)")

    @property
    def direction(self) -> str:
        return "false_hateful" if self.predicted == 1 else "missed_hateful"

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "text": self.text,
            "gold": self.gold,
            "predicted": self.predicted,
            "direction": self.direction,
            "tags": self.tags.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorRecord":
        return cls(d["sample_id"], d["text"], int(d["gold"]), int(d["predicted"]), FeatureTagSet(**d["tags"]))


def collect_errors(
    predictions,
    corpus: Corpus,
    lexicons: Mapping | None = None,
    config: TaggerConfig = TaggerConfig(),
) -> list[ErrorRecord]:
    """Tagged records for every sample whose prediction differs from its label.

    ``predictions`` is a label sequence aligned with ``corpus`` or an
    EvalReport carrying predictions and sample ids.
    """
    ids = getattr(predictions, "sample_ids", None)
    preds = list(getattr(predictions, "predictions", predictions))
    if len(preds) != len(corpus):
        raise DataError(f"{len(preds)} predictions for {len(corpus)} samples")
    if ids and list(ids) != corpus.ids:
        raise DataError("prediction sample ids do not match the corpus order")
    return [
        ErrorRecord(s.id, s.text, s.label, int(p), tag_features(s.text, s.language, lexicons, config))
        for s, p in zip(corpus.samples, preds)
        if int(p) != s.label
    ]


@dataclass
class ErrorReport:
    run_id: str
    corpus_digest: str
    n_evaluated: int
    total_errors: int
    category_counts: dict
    direction_counts: dict
    category_by_direction: dict
    records: list

    @property
    def error_ids(self) -> set:
        return {r.sample_id for r in self.records}

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "corpus_digest": self.corpus_digest,
            "n_evaluated": self.n_evaluated,
            "total_errors": self.total_errors,
            "category_counts": self.category_counts,
            "direction_counts": self.direction_counts,
            "category_by_direction": self.category_by_direction,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorReport":
        return cls(
            d["run_id"], d["corpus_digest"], d["n_evaluated"], d["total_errors"],
            d["category_counts"], d["direction_counts"], d["category_by_direction"],
            [ErrorRecord.from_dict(r) for r in d["records"]],
        )


def aggregate(
    errors: Sequence[ErrorRecord], run_id: str = "", corpus_digest: str = "", n_evaluated: int | None = None
) -> ErrorReport:
    """Category counts are non-exclusive; one record may count in several."""
    cats = {c: 0 for c in CATEGORIES}
    dirs = {d: 0 for d in DIRECTIONS}
    by_dir = {d: {c: 0 for c in CATEGORIES} for d in DIRECTIONS}
    for r in errors:
        dirs[r.direction] += 1
        for c in r.tags.categories():
            cats[c] += 1
            by_dir[r.direction][c] += 1
    return ErrorReport(
        run_id, corpus_digest, len(errors) if n_evaluated is None else n_evaluated,
        len(errors), cats, dirs, by_dir, list(errors),
    )


@dataclass(frozen=True)
class RunComparison:
    run_a: str
    run_b: str
    errors_a: int
    errors_b: int
    reduction: float | None
    category_deltas: dict
    newly_misclassified: tuple
    newly_correct: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["newly_misclassified"] = list(self.newly_misclassified)
        d["newly_correct"] = list(self.newly_correct)
        return d


def compare(report_a: ErrorReport, report_b: ErrorReport) -> RunComparison:
    """How run B's errors differ from run A's on the same test corpus.

    ``reduction`` is ``(errors_a - errors_b) / errors_a``; positive when B
    makes fewer errors. It is None when A made none.
    """
    if report_a.corpus_digest != report_b.corpus_digest:
        raise ComparisonRefused(
            f"runs {report_a.run_id!r} and {report_b.run_id!r} were evaluated on different corpora"
        )
    a, b = report_a.total_errors, report_b.total_errors
    if a:
        reduction = (a - b) / a
    else:
        reduction = 0.0 if b == 0 else None
    ids_a, ids_b = report_a.error_ids, report_b.error_ids
    return RunComparison(
        report_a.run_id,
        report_b.run_id,
        a,
        b,
        reduction,
        {c: report_b.category_counts.get(c, 0) - report_a.category_counts.get(c, 0) for c in CATEGORIES},
        tuple(sorted(ids_b - ids_a)),
        tuple(sorted(ids_a - ids_b)),
    )


def render_error_report(report: ErrorReport) -> str:
    lines = [
        f"run {report.run_id}: {report.total_errors} errors out of {report.n_evaluated}",
        f"  false hateful: {report.direction_counts['false_hateful']}"
        f"  missed hateful: {report.direction_counts['missed_hateful']}",
        "",
        f"{'category':<24}{'all':>6}{'false':>7}{'missed':>8}",
    ]
    for c in CATEGORIES:
        lines.append(
            f"{c:<24}{report.category_counts[c]:>6}"
            f"{report.category_by_direction['false_hateful'][c]:>7}"
            f"{report.category_by_direction['missed_hateful'][c]:>8}"
        )
    return "\n".join(lines) + "\n"


def render_comparison(comp: RunComparison, report_a: ErrorReport, report_b: ErrorReport) -> str:
    red = "n/a" if comp.reduction is None else f"{comp.reduction:+.2%}"
    lines = [
        f"A = {comp.run_a}: {comp.errors_a} errors",
        f"B = {comp.run_b}: {comp.errors_b} errors",
        f"error reduction A->B: {red}",
        f"newly misclassified in B: {len(comp.newly_misclassified)}; newly correct in B: {len(comp.newly_correct)}",
        "",
        f"{'category':<24}{'A':>6}{'B':>6}{'delta':>7}",
    ]
    for c in CATEGORIES:
        lines.append(
            f"{c:<24}{report_a.category_counts[c]:>6}{report_b.category_counts[c]:>6}{comp.category_deltas[c]:>+7}"
        )
    return "\n".join(lines) + "\n"
