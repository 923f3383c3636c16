"""Concept encodings and the anchor sampling distribution for latent anchoring.

Anchors are drawn from a discrete candidate vocabulary with probability
proportional to (1 - |cos(c, c_tar)|)^alpha, so candidates far from the
erasure target dominate and candidates parallel to it are never sampled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ConfigurationError, DegenerateInputError


@dataclass
class ConceptEncoding:
    """A fixed-length text encoding together with its source string."""

    vector: torch.Tensor
    source: str = ""

    def __post_init__(self):
        self.vector = torch.as_tensor(self.vector, dtype=torch.float32).flatten()
        if not torch.isfinite(self.vector).all():
            raise DegenerateInputError(f"encoding of {self.source!r} has non-finite entries")

    @property
    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.vector))


def _as_vector(c) -> torch.Tensor:
    if isinstance(c, ConceptEncoding):
        return c.vector
    return torch.as_tensor(c, dtype=torch.float32).flatten()


def abs_cosine(a, b) -> float:
    """|cos| between two encodings; raises on zero-norm inputs."""
    va, vb = _as_vector(a), _as_vector(b)
    na = torch.linalg.vector_norm(va)
    nb = torch.linalg.vector_norm(vb)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine of a zero-norm encoding is undefined")
    return float(torch.abs(va @ vb) / (na * nb))


def anchor_weight(c, c_tar, alpha: float) -> float:
    """Unnormalized sampling weight (1 - |cos(c, c_tar)|)^alpha."""
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")
    base = 1.0 - abs_cosine(c, c_tar)
    # guard tiny negative from float rounding of |cos| slightly above 1
    base = max(base, 0.0)
    return base**alpha


class AnchorPool:
    """Candidate concept encodings with target-distance-derived sampling weights."""

    def __init__(self, candidates: Sequence[ConceptEncoding], weights: Sequence[float], alpha: float):
        if len(candidates) != len(weights):
            raise ConfigurationError("candidate/weight length mismatch")
        self.candidates = list(candidates)
        self.weights = torch.tensor(weights, dtype=torch.float64)
        self.alpha = float(alpha)
        if len(self.candidates) == 0:
            raise ConfigurationError("anchor pool has no candidates")
        if torch.any(self.weights < 0):
            raise ConfigurationError("anchor weights must be non-negative")
        total = float(self.weights.sum())
        if total <= 0:
            raise ConfigurationError(
                "anchor pool has zero total weight (every candidate is parallel to the target)"
            )

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def probabilities(self) -> torch.Tensor:
        return self.weights / self.weights.sum()


def build_anchor_pool(vocabulary: Sequence[str], c_tar, alpha: float, text_encoder) -> AnchorPool:
    """Encode a candidate vocabulary and attach its anchor weights.

    c_tar may be a single encoding/string or a list of them; with several
    targets a candidate's weight is the minimum of its per-target weights.
    """
    if not vocabulary:
        raise ConfigurationError("anchor vocabulary is empty")
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")

    targets = c_tar if isinstance(c_tar, (list, tuple)) else [c_tar]
    target_vecs = []
    for t in targets:
        enc = text_encoder.encode(t) if isinstance(t, str) else t
        v = _as_vector(enc)
        if torch.linalg.vector_norm(v) == 0:
            raise DegenerateInputError("target concept has a zero-norm encoding")
        target_vecs.append(v)

    candidates: list[ConceptEncoding] = []
    weights: list[float] = []
    for word in vocabulary:
        vec = text_encoder.encode(word)
        vec = vec.vector if isinstance(vec, ConceptEncoding) else torch.as_tensor(vec)
        enc = ConceptEncoding(vector=vec, source=word)
        if enc.norm == 0:
            raise DegenerateInputError(f"vocabulary entry {word!r} encodes to a zero vector")
        candidates.append(enc)
        weights.append(min(anchor_weight(enc, t, alpha) for t in target_vecs))
    return AnchorPool(candidates, weights, alpha)


def sample_anchors(pool: AnchorPool, n: int, seed: int = 0) -> list[ConceptEncoding]:
    """n independent categorical draws proportional to pool weights, deterministic under seed."""
    if n < 1:
        raise ConfigurationError(f"anchor sample count must be >= 1, got {n}")
    gen = torch.Generator().manual_seed(seed)
    idx = torch.multinomial(pool.probabilities, n, replacement=True, generator=gen)
    return [pool.candidates[int(i)] for i in idx]
