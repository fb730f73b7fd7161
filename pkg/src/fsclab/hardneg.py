"""Rule-based hard-negative captions.

Three rewrites are produced for each caption, in a fixed slot order:

``negclip``  swap two distinct words that share a part-of-speech tag
``replace``  substitute one adjective (antonym) or noun (co-hyponym)
``bigram``   permute adjacent word pairs

A rewrite that cannot be produced leaves its slot invalid; invalid slots
carry the original text and are masked out of the hard-negative losses.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

POS_TAGS = ("NOUN", "ADJ", "VERB", "ADP", "DET", "OTHER")
SLOTS = ("negclip", "replace", "bigram")
REPLACEABLE = ("ADJ", "NOUN")

_MASK64 = (1 << 64) - 1


class UnknownWord(KeyError):
    pass


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    words: tuple[str, ...]
    pos: dict
    alternatives: dict

    @classmethod
    def parse(cls, text: str) -> "Lexicon":
        words, pos, alts = [], {}, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 2:
                parts.append("")
            if len(parts) != 3:
                raise LexiconError(f"line {lineno}: expected word<TAB>POS<TAB>alternatives")
            word, tag, rest = (p.strip() for p in parts)
            if tag not in POS_TAGS:
                raise LexiconError(f"line {lineno}: unknown POS {tag!r}")
            if word in pos:
                raise LexiconError(f"line {lineno}: duplicate word {word!r}")
            words.append(word)
            pos[word] = tag
            alts[word] = tuple(a for a in (x.strip() for x in rest.split(",")) if a)
        for word, options in alts.items():
            for alt in options:
                if alt not in pos:
                    raise LexiconError(f"alternative {alt!r} of {word!r} is not in the lexicon")
                if pos[alt] != pos[word] or alt == word:
                    raise LexiconError(f"alternative {alt!r} of {word!r} must be a different word with the same POS")
        return cls(tuple(words), pos, alts)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Lexicon":
        if path is None:
            text = resources.files("fsclab").joinpath("data/lexicon.tsv").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.parse(text)

    def dumps(self) -> str:
        return "".join(f"{w}\t{self.pos[w]}\t{','.join(self.alternatives[w])}\n" for w in self.words)

    def __contains__(self, word):
        return word in self.pos


_DEFAULT_LEXICON: Lexicon | None = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.load()
    return _DEFAULT_LEXICON


@dataclass(frozen=True)
class TaggedCaption:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class HardNegativeSet:
    original: str
    negatives: tuple[str, ...]
    valid: tuple[bool, ...]

    def to_json(self) -> dict:
        return {"caption": self.original, "negatives": list(self.negatives), "valid": list(self.valid)}


def tokenize(caption: str) -> list[str]:
    return caption.lower().split()


def tag(caption: str, lexicon: Lexicon | None = None) -> TaggedCaption:
    lexicon = lexicon or default_lexicon()
    tokens = tuple(tokenize(caption))
    tags = []
    for tok in tokens:
        try:
            tags.append(lexicon.pos[tok])
        except KeyError:
            raise UnknownWord(tok) from None
    return TaggedCaption(tokens, tuple(tags))


def negclip_swap(tc: TaggedCaption, rng: random.Random) -> str | None:
    by_tag = {}
    for i, t in enumerate(tc.tags):
        by_tag.setdefault(t, []).append(i)
    eligible = [t for t in POS_TAGS if len({tc.tokens[i] for i in by_tag.get(t, ())}) >= 2]
    if not eligible:
        return None
    positions = by_tag[rng.choice(eligible)]
    pairs = [(i, j) for i, j in itertools.combinations(positions, 2) if tc.tokens[i] != tc.tokens[j]]
    i, j = rng.choice(pairs)
    out = list(tc.tokens)
    out[i], out[j] = out[j], out[i]
    return " ".join(out)


def lexicon_replace(tc: TaggedCaption, lexicon: Lexicon, rng: random.Random) -> str | None:
    candidates = [
        i for i, (tok, t) in enumerate(zip(tc.tokens, tc.tags)) if t in REPLACEABLE and lexicon.alternatives.get(tok)
    ]
    if not candidates:
        return None
    i = rng.choice(candidates)
    options = [a for a in lexicon.alternatives[tc.tokens[i]] if a != tc.tokens[i]]
    out = list(tc.tokens)
    out[i] = rng.choice(options)
    return " ".join(out)


def _blocks(tokens):
    return [tuple(tokens[i : i + 2]) for i in range(0, len(tokens), 2)]


def bigram_shuffle(tc: TaggedCaption, rng: random.Random, max_tries: int = 32) -> str | None:
    if len(tc.tokens) < 4:
        return None
    blocks = _blocks(tc.tokens)
    original = tc.tokens
    order = list(range(len(blocks)))

    def render(perm):
        return tuple(tok for k in perm for tok in blocks[k])

    for _ in range(max_tries):
        perm = order[:]
        rng.shuffle(perm)
        if perm != order and render(perm) != original:
            return " ".join(render(perm))
    # long run of rejections: settle it exhaustively
    outs = sorted({render(p) for p in itertools.permutations(order) if list(p) != order} - {original})
    if not outs:
        return None
    return " ".join(rng.choice(outs))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def hash64(*values: int) -> int:
    """Fold integers into one 64-bit seed with the splitmix64 finalizer."""
    h = 0
    for v in values:
        h = _splitmix64(h ^ (int(v) & _MASK64))
    return h


def generate_set(caption: str, lexicon: Lexicon | None = None, *, seed: int = 0, item_id: int = 0, step: int = 0) -> HardNegativeSet:
    lexicon = lexicon or default_lexicon()
    tc = tag(caption, lexicon)
    original = tc.text
    rngs = [random.Random(hash64(seed, item_id, step, slot)) for slot in range(len(SLOTS))]
    outs = (
        negclip_swap(tc, rngs[0]),
        lexicon_replace(tc, lexicon, rngs[1]),
        bigram_shuffle(tc, rngs[2]),
    )
    valid = tuple(o is not None and o != original for o in outs)
    negatives = tuple(o if ok else original for o, ok in zip(outs, valid))
    return HardNegativeSet(original, negatives, valid)


def generate_corpus(captions, lexicon: Lexicon | None = None, *, seed: int = 0, step: int = 0) -> list[HardNegativeSet]:
    lexicon = lexicon or default_lexicon()
    return [generate_set(c, lexicon, seed=seed, item_id=i, step=step) for i, c in enumerate(captions)]
