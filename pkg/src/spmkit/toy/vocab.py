"""Toy conceptual space: a compositional color x shape vocabulary with a
deterministic embedding geometry.

Color and shape words occupy dedicated orthogonal axes, and every color-shape
pair detected in a text contributes a dominant pair-specific axis, so two
concepts sharing a color or shape have cosine 1/6 and fully disjoint concepts
are exactly orthogonal. Any other word receives a small-norm deterministic
hash vector confined to the remaining axes, which keeps filler words from
perturbing the concept geometry while still giving every string a usable
encoding.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import torch

from ..concepts import ConceptEncoding

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "cross", "triangle")

EMBED_DIM = 40
_SEMANTIC_DIM = len(COLORS) + len(SHAPES) + len(COLORS) * len(SHAPES)
_FILLER_NORM = 0.25
_PAIR_WEIGHT = 1.0

PROMPT_TEMPLATES = (
    "a {c}",
    "a photo of a {c}",
    "an image of the {c}",
    "a drawing of a {c}",
    "the small {c}",
    "a bright {c}",
    "a picture of the {c}",
    "{c} on a dark canvas",
)

FILLER_WORDS = (
    "a",
    "an",
    "the",
    "photo",
    "image",
    "drawing",
    "picture",
    "of",
    "on",
    "small",
    "bright",
    "dark",
    "canvas",
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Whole-word tokenizer: case-folded alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


def _hash_vector(word: str) -> torch.Tensor:
    """Deterministic small-norm embedding for out-of-vocabulary words."""
    digest = hashlib.sha256(word.encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    gen = torch.Generator().manual_seed(seed)
    v = torch.zeros(EMBED_DIM)
    tail = torch.randn(EMBED_DIM - _SEMANTIC_DIM, generator=gen)
    v[_SEMANTIC_DIM:] = _FILLER_NORM * tail / torch.linalg.vector_norm(tail)
    return v


@dataclass
class ToyVocabulary:
    """Concept words plus the deterministic embedding geometry behind them."""

    colors: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES
    embed_dim: int = EMBED_DIM
    _table: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        semantic = len(self.colors) + len(self.shapes) + len(self.colors) * len(self.shapes)
        if self.embed_dim < semantic:
            raise ValueError("embedding dimension too small for the concept axes")
        for i, word in enumerate(self.colors + self.shapes):
            v = torch.zeros(self.embed_dim)
            v[i] = 1.0
            self._table[word] = v

    @property
    def concepts(self) -> list[str]:
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    @property
    def anchor_words(self) -> list[str]:
        """Default anchor vocabulary: every concept plus the filler words."""
        return self.concepts + list(FILLER_WORDS)

    @property
    def n_classes(self) -> int:
        """Concept classes plus the background/surrogate class."""
        return len(self.concepts) + 1

    @property
    def background_label(self) -> int:
        return len(self.concepts)

    def label_of(self, concept: str) -> int:
        """Class index of a concept string; the empty prompt maps to background."""
        if concept.strip() == "":
            return self.background_label
        key = " ".join(tokenize(concept))
        try:
            return self.concepts.index(key)
        except ValueError:
            raise KeyError(f"{concept!r} is not a testbed concept") from None

    def pair_axis(self, color: str, shape: str) -> torch.Tensor:
        idx = (
            len(self.colors)
            + len(self.shapes)
            + self.colors.index(color) * len(self.shapes)
            + self.shapes.index(shape)
        )
        v = torch.zeros(self.embed_dim)
        v[idx] = 1.0
        return v

    def embed_word(self, word: str) -> torch.Tensor:
        word = word.lower()
        known = self._table.get(word)
        if known is not None:
            return known.clone()
        return _hash_vector(word)


class ToyTextEncoder:
    """Deterministic contextual encoder over the toy vocabulary.

    Pools word embeddings by mean, adds a dominant axis for every color-shape
    pair present in the text, and L2-normalizes; the empty prompt encodes to
    the zero vector.
    """

    def __init__(self, vocab: ToyVocabulary | None = None):
        self.vocab = vocab or ToyVocabulary()
        self.dim = self.vocab.embed_dim

    def tokenize(self, text: str) -> list[str]:
        return tokenize(text)

    def encode(self, text: str) -> ConceptEncoding:
        tokens = tokenize(text)
        if not tokens:
            return ConceptEncoding(vector=torch.zeros(self.dim), source=text)
        pooled = torch.stack([self.vocab.embed_word(t) for t in tokens]).mean(dim=0)
        present = set(tokens)
        for color in self.vocab.colors:
            if color not in present:
                continue
            for shape in self.vocab.shapes:
                if shape in present:
                    pooled = pooled + _PAIR_WEIGHT * self.vocab.pair_axis(color, shape)
        norm = torch.linalg.vector_norm(pooled)
        if norm > 0:
            pooled = pooled / norm
        return ConceptEncoding(vector=pooled, source=text)

    def encode_batch(self, texts: list[str]) -> torch.Tensor:
        return torch.stack([self.encode(t).vector for t in texts])
