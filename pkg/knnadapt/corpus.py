"""
Synthetic multi-domain data, corpus files and vocabulary.

Translation in the synthetic language pairs is lexicon substitution followed by
block reversal inside a reorder window. Domains differ by their content words
and by the sense chosen for a shared set of ambiguous source words.
"""

import tomllib
from collections import Counter
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
import tomli_w
from pydantic import BaseModel, PrivateAttr, ValidationError, model_validator

from .errors import CorpusParseError, FormatError, InvalidSpecError
from .log import get_logger
from .models import BOS, EOS, PAD, SPECIAL_TOKENS, UNK, DomainSpec, SentencePair

logger = get_logger()

SOURCE_CONSONANTS = "bdgkmnpt"
TARGET_CONSONANTS = "fhlrsvwz"
VOWELS = "aeiou"


class TextPair(NamedTuple):
    source: tuple[str, ...]
    target: tuple[str, ...]


def tokenize(text: str) -> list[str]:
    return text.split()


class Vocabulary(BaseModel):
    """Token strings in id order; the four specials always come first."""

    tokens: list[str]
    _index: dict[str, int] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def validate_tokens(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        return self

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def lookup(self, token: str) -> int:
        return self._index.get(token, UNK)

    def detokenize(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = tokenize(text) if isinstance(text, str) else text
        return [self.lookup(w) for w in words]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> str:
        words = [
            self.tokens[i]
            for i in ids
            if not (strip_specials and i in (PAD, BOS, EOS))
        ]
        return " ".join(words)

    def encode_pair(self, pair: TextPair) -> SentencePair:
        return SentencePair(source=self.encode(pair.source), target=self.encode(pair.target))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        try:
            return cls(tokens=tokens)
        except ValidationError as e:
            raise FormatError(path, 0, f"not a vocabulary file: {e.errors()[0]['msg']}")


def build_vocabulary(
    corpora: Iterable[Iterable[str | Sequence[str]]], min_count: int = 1
) -> Vocabulary:
    """Specials, then tokens with frequency >= min_count by (-frequency, token)."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for corpus in corpora:
        for sentence in corpus:
            counts.update(tokenize(sentence) if isinstance(sentence, str) else sentence)
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(tokens=[*SPECIAL_TOKENS, *kept])


def reorder(tokens: Sequence[str], window: int) -> list[str]:
    """Reverse each consecutive block of ``window`` tokens (window 2 = adjacent swaps)."""
    out: list[str] = []
    for start in range(0, len(tokens), window):
        out.extend(reversed(tokens[start : start + window]))
    return out


def translate_tokens(spec: DomainSpec, source: Sequence[str]) -> list[str]:
    mapped = [spec.ambiguous.get(w) or spec.lexicon[w] for w in source]
    return reorder(mapped, spec.reorder_window)


def generate_domain_corpus(
    spec: DomainSpec,
    n_sentences: int,
    length_range: tuple[int, int],
    seed: int,
) -> list[TextPair]:
    """Sample ``n_sentences`` source sentences from ``spec`` and translate them.

    Output is a pure function of the arguments.
    """
    min_len, max_len = length_range
    if min_len < 1 or max_len < min_len:
        raise ValueError(f"invalid length range {length_range}")
    if not spec.lexicon:
        raise InvalidSpecError(f"domain '{spec.name}' has an empty lexicon")

    ambiguous = sorted(spec.ambiguous)
    shared = list(spec.shared)
    content = list(spec.content) or sorted(set(spec.lexicon) - set(shared))
    if not content:
        content = shared

    p_amb = spec.ambiguous_rate if ambiguous else 0.0
    p_shared = spec.shared_rate if shared else 0.0

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        draws = rng.random(length)
        picks = rng.integers(0, 2**31, size=length)
        source = []
        for u, pick in zip(draws, picks, strict=True):
            if u < p_amb:
                pool = ambiguous
            elif u < p_amb + p_shared:
                pool = shared
            else:
                pool = content
            source.append(pool[int(pick) % len(pool)])
        pairs.append(TextPair(tuple(source), tuple(translate_tokens(spec, source))))
    return pairs


def _pseudo_words(
    rng: np.random.Generator, consonants: str, count: int, taken: set[str]
) -> list[str]:
    syllables = [c + v for c in consonants for v in VOWELS]
    words: list[str] = []
    while len(words) < count:
        n_syl = int(rng.integers(2, 4))
        word = "".join(syllables[int(i)] for i in rng.integers(0, len(syllables), n_syl))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def make_domain_specs(
    domains: Sequence[str],
    n_shared: int = 40,
    n_content: int = 120,
    n_ambiguous: int = 12,
    reorder_window: int = 2,
    seed: int = 0,
    ambiguous_rate: float = 0.2,
    shared_rate: float = 0.3,
) -> dict[str, DomainSpec]:
    """Build ``general`` plus one spec per in-domain name.

    Source and target inventories are disjoint. The general lexicon covers every
    domain's content words so the base model can translate all of them; what the
    general domain gets wrong in-domain is the sense of each ambiguous word.
    """
    names = ["general", *domains]
    rng = np.random.default_rng(seed)
    src_taken: set[str] = set()
    tgt_taken: set[str] = set()

    src_shared = _pseudo_words(rng, SOURCE_CONSONANTS, n_shared, src_taken)
    tgt_shared = _pseudo_words(rng, TARGET_CONSONANTS, n_shared, tgt_taken)
    src_ambiguous = _pseudo_words(rng, SOURCE_CONSONANTS, n_ambiguous, src_taken)

    content: dict[str, dict[str, str]] = {}
    senses: dict[str, dict[str, str]] = {}
    for name in names:
        src = _pseudo_words(rng, SOURCE_CONSONANTS, n_content, src_taken)
        tgt = _pseudo_words(rng, TARGET_CONSONANTS, n_content, tgt_taken)
        content[name] = dict(zip(src, tgt, strict=True))
        sense_words = _pseudo_words(rng, TARGET_CONSONANTS, n_ambiguous, tgt_taken)
        senses[name] = dict(zip(src_ambiguous, sense_words, strict=True))

    shared_lexicon = dict(zip(src_shared, tgt_shared, strict=True))
    all_content = {w: t for name in names for w, t in content[name].items()}

    specs = {}
    for name in names:
        lexicon = {**shared_lexicon, **(all_content if name == "general" else content[name])}
        specs[name] = DomainSpec(
            name=name,
            lexicon=lexicon,
            ambiguous=senses[name],
            reorder_window=reorder_window,
            shared=src_shared,
            content=list(all_content if name == "general" else content[name]),
            ambiguous_rate=ambiguous_rate,
            shared_rate=shared_rate,
        )
    return specs


def save_domain_specs(specs: dict[str, DomainSpec], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {name: spec.model_dump(exclude={"name"}) for name, spec in specs.items()}
    path.write_text(tomli_w.dumps(data), encoding="utf-8")
    return path


def load_domain_specs(path: str | Path) -> dict[str, DomainSpec]:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise InvalidSpecError(f"{path}: not a valid domain spec file: {e}")
    try:
        return {name: DomainSpec(name=name, **table) for name, table in data.items()}
    except (ValidationError, TypeError) as e:
        raise InvalidSpecError(f"{path}: {e}")


def load_corpus(
    path: str | Path,
    vocab: Vocabulary,
    mode: Literal["parallel", "monolingual"] = "parallel",
) -> list[SentencePair] | list[list[int]]:
    """Read a corpus file; unknown words become UNK and line order is kept."""
    items: list = []
    with open(path, encoding="utf-8") as f:
        for line_number, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            fields = line.split("\t")
            if mode == "parallel":
                if len(fields) != 2:
                    raise CorpusParseError(
                        path, line_number, f"expected 2 tab-separated fields, got {len(fields)}"
                    )
                try:
                    items.append(
                        SentencePair(source=vocab.encode(fields[0]), target=vocab.encode(fields[1]))
                    )
                except ValidationError as e:
                    raise CorpusParseError(path, line_number, e.errors()[0]["msg"])
            else:
                if len(fields) != 1:
                    raise CorpusParseError(
                        path, line_number, f"expected 1 field, got {len(fields)}"
                    )
                ids = vocab.encode(line)
                if not ids or PAD in ids:
                    raise CorpusParseError(path, line_number, "empty or padded sentence")
                items.append(ids)
    logger.debug("Loaded corpus", extra={"path": str(path), "mode": mode, "lines": len(items)})
    return items


def write_corpus(
    path: str | Path,
    items: Iterable[SentencePair | TextPair | Sequence[int] | Sequence[str]],
    vocab: Vocabulary | None = None,
) -> Path:
    """Inverse of load_corpus; pairs become tab-separated lines."""

    def render(side) -> str:
        if side and isinstance(side[0], str):
            return " ".join(side)
        if vocab is None:
            raise ValueError("a vocabulary is needed to write token ids")
        return vocab.decode(side, strip_specials=False)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for item in items:
            if isinstance(item, SentencePair | TextPair):
                f.write(f"{render(item.source)}\t{render(item.target)}\n")
            else:
                f.write(render(item) + "\n")
    return path


def swap_pairs(pairs: Iterable[SentencePair]) -> list[SentencePair]:
    return [p.swapped() for p in pairs]
