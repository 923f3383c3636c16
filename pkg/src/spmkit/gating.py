"""Facilitated transport: prompt-conditioned permeability for each membrane.

Permeability combines a global encoding similarity s_f with a token-level
unigram overlap s_t; a membrane opens as gamma = max(s_f, s_t), taken over
its most-activated target. Raw cosines are clamped at 0 so gamma stays a
permeability in [0, 1] before any user scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adapter import Membrane
from .errors import ConfigurationError, DegenerateInputError

DEFAULT_GAMMA_MAX = 4.0


@dataclass
class TargetGate:
    target: str
    s_f: float
    s_t: float

    @property
    def gamma(self) -> float:
        return max(self.s_f, self.s_t)


@dataclass
class GateReport:
    """Per-membrane permeability with its global/token components per target."""

    membrane: str
    prompt: str
    targets: list[TargetGate] = field(default_factory=list)
    gamma_scale: float = 1.0
    gamma_max: float = DEFAULT_GAMMA_MAX

    @property
    def gamma(self) -> float:
        return max(t.gamma for t in self.targets)

    @property
    def gamma_scaled(self) -> float:
        return min(self.gamma * self.gamma_scale, self.gamma_max)

    def to_dict(self) -> dict:
        return {
            "membrane": self.membrane,
            "prompt": self.prompt,
            "targets": [
                {"target": t.target, "s_f": t.s_f, "s_t": t.s_t, "gamma": t.gamma}
                for t in self.targets
            ],
            "gamma": self.gamma,
            "gamma_scale": self.gamma_scale,
            "gamma_scaled": self.gamma_scaled,
        }


def token_set(text: str, tokenizer) -> set[str]:
    return {t.lower() for t in tokenizer(text)}


def token_similarity(concept: str, prompt: str, tokenizer) -> float:
    """Unigram overlap |T(c) & T(p)| / |T(c)| over deduplicated, case-folded tokens."""
    c_tokens = token_set(concept, tokenizer)
    if not c_tokens:
        raise ConfigurationError(f"concept {concept!r} tokenizes to no tokens")
    p_tokens = token_set(prompt, tokenizer)
    return len(c_tokens & p_tokens) / len(c_tokens)


def global_similarity(concept: str, prompt: str, text_encoder) -> float:
    """Cosine similarity of pooled encodings, clamped to [0, 1]."""
    c = torch.as_tensor(_vec(text_encoder.encode(concept)), dtype=torch.float32)
    p = torch.as_tensor(_vec(text_encoder.encode(prompt)), dtype=torch.float32)
    cn = torch.linalg.vector_norm(c)
    pn = torch.linalg.vector_norm(p)
    if cn == 0 or pn == 0:
        raise DegenerateInputError("zero-norm encoding in global similarity")
    cos = float(c @ p / (cn * pn))
    return min(max(cos, 0.0), 1.0)


def _vec(enc):
    return getattr(enc, "vector", enc)


def permeability(
    membrane: Membrane,
    prompt: str,
    tokenizer,
    text_encoder,
    gamma_scale: float = 1.0,
    gamma_max: float = DEFAULT_GAMMA_MAX,
) -> GateReport:
    """Gate one membrane against a prompt; multi-target membranes gate on their most-activated target."""
    membrane.validate_targets()
    gates = [
        TargetGate(
            target=target,
            s_f=global_similarity(target, prompt, text_encoder),
            s_t=token_similarity(target, prompt, tokenizer),
        )
        for target in membrane.targets
    ]
    return GateReport(
        membrane=membrane.name,
        prompt=prompt,
        targets=gates,
        gamma_scale=gamma_scale,
        gamma_max=gamma_max,
    )
