"""Seeded toy bilingual corpus with two separable classes.

Each text mixes class-marker tokens shared by both languages with
language-specific filler words, so a head trained on one language can be
tested on the other.
"""

from __future__ import annotations

import random

from .corpus import Corpus, Source, TextSample

# marker tokens shared across languages
MARKERS = {
    0: ("lumo", "paxi", "velu", "soren", "amity", "calmo"),
    1: ("zorgh", "vexar", "kruul", "draxo", "morrk", "skarn"),
}
FILLER = {
    "en": (
        "the", "people", "today", "city", "news", "they", "say", "about", "our", "street",
        "new", "with", "again", "every", "time", "really", "this", "week", "those", "folks",
    ),
    "fr": (
        "les", "gens", "aujourd'hui", "ville", "nouvelles", "ils", "disent", "sur", "notre", "rue",
        "encore", "avec", "chaque", "fois", "vraiment", "cette", "semaine", "ces", "types", "quartier",
    ),
}


def synthetic_samples(language: str, n: int, seed: int = 0, hateful_fraction: float = 0.5) -> list[TextSample]:
    if language not in FILLER:
        raise ValueError(f"no filler vocabulary for language {language!r}")
    rng = random.Random(f"{seed}:{language}")
    n_hate = round(n * hateful_fraction)
    labels = [1] * n_hate + [0] * (n - n_hate)
    rng.shuffle(labels)
    seen: set[str] = set()
    out = []
    for i, label in enumerate(labels):
        while True:
            words = rng.choices(MARKERS[label], k=rng.randint(4, 6))
            words += rng.choices(FILLER[language], k=rng.randint(2, 5))
            rng.shuffle(words)
            text = " ".join(words)
            if text not in seen:
                break
        seen.add(text)
        out.append(TextSample(f"syn-{language}-{i:05d}", text, language, label, Source.SYNTHETIC))
    return out


def synthetic_corpus(language: str, n: int, seed: int = 0, hateful_fraction: float = 0.5) -> Corpus:
    return Corpus(synthetic_samples(language, n, seed, hateful_fraction), [f"synthetic:{language}:{n}:{seed}"])
