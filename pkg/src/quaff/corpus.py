"""Deterministic synthetic text corpus.

Word-salad prose over a fixed lexicon: sentences of 4-10 words with
occasional commas, paragraphs of 4-8 sentences.  The character set stays
small (lowercase letters, space, comma, period, newline), which keeps the
char-level vocabulary around thirty symbols, and the fixed spellings give
a model plenty of local structure to learn.

Same ``(n_bytes, seed)`` always produces the same text, with no I/O or
network involved.
"""

from __future__ import annotations

from .tensor import make_rng

LEXICON = (
    "the a this that every some another each",
    "stone river cloud meadow lantern harbor forest garden valley mill",
    "wren otter heron badger falcon salmon beetle marten swift vole",
    "quiet amber silver crooked hollow distant pale mossy narrow bright",
    "drifts settles wanders lingers gathers turns rests leans winds fades",
    "slowly gently nearly almost often rarely softly early late soon",
    "under over beside beyond within along across toward behind near",
    "morning evening winter summer autumn spring twilight noon dusk dawn",
)
WORDS = tuple(w for group in LEXICON for w in group.split())


def generate_corpus(n_bytes: int = 1_000_000, seed: int = 0) -> str:
    """Exactly ``n_bytes`` of ASCII prose, reproducible from the seed."""
    if n_bytes < 1:
        raise ValueError("n_bytes must be >= 1")
    rng = make_rng(seed, "corpus")
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        sentences = []
        for _ in range(int(rng.integers(4, 9))):
            n_words = int(rng.integers(4, 11))
            words = [WORDS[i] for i in rng.integers(0, len(WORDS), size=n_words)]
            if n_words >= 7 and rng.random() < 0.5:
                words[int(rng.integers(2, n_words - 1))] += ","
            sentences.append(" ".join(words) + ".")
        para = " ".join(sentences) + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts)[:n_bytes]


def write_corpus(path, n_bytes: int = 1_000_000, seed: int = 0) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(generate_corpus(n_bytes, seed))
