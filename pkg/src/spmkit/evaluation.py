"""Toy-scale evaluation: concept score, erasure rate, and generation drift.

Per concept, prompts run through a fixed template set; the concept score is
the mean classifier confidence on the concept's label, the erasure rate the
fraction classified as the surrogate class, and drift a kernel two-sample
divergence between erased-model and frozen-model generations on classifier
features. Same seeds give paired noise across models, so self-comparison
drift is exactly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError
from .toy.vocab import PROMPT_TEMPLATES


def mmd_drift(feat_x: torch.Tensor, feat_y: torch.Tensor) -> float:
    """Biased RBF-kernel MMD^2 with median-heuristic bandwidth; >= 0, 0 iff identical sets."""
    if feat_x.dim() != 2 or feat_y.dim() != 2:
        raise ConfigurationError("drift expects 2-d feature matrices")
    z = torch.cat([feat_x, feat_y], dim=0)
    d2 = torch.cdist(z, z).pow(2)
    off_diag = d2[~torch.eye(d2.shape[0], dtype=torch.bool)]
    positive = off_diag[off_diag > 0]
    if positive.numel() == 0:
        return 0.0
    bandwidth = float(positive.median())
    k = torch.exp(-d2 / bandwidth)
    nx, ny = feat_x.shape[0], feat_y.shape[0]
    kxx = k[:nx, :nx].mean()
    kyy = k[nx:, nx:].mean()
    kxy = k[:nx, nx:].mean()
    return max(float(kxx + kyy - 2 * kxy), 0.0)


@dataclass
class ConceptResult:
    concept: str
    concept_score: float
    erasure_rate: float
    accuracy: float
    drift: float
    n_samples: int
    seed: int
    surrogate_label: int

    def to_dict(self) -> dict:
        return {
            "concept": self.concept,
            "concept_score": self.concept_score,
            "erasure_rate": self.erasure_rate,
            "accuracy": self.accuracy,
            "drift": self.drift,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "surrogate_label": self.surrogate_label,
        }


@dataclass
class EvalReport:
    seed: int
    samples_per_concept: int
    membranes: list[str]
    gamma_scale: float
    no_ft: bool
    rows: list[ConceptResult] = field(default_factory=list)

    def row(self, concept: str) -> ConceptResult:
        for r in self.rows:
            if r.concept == concept:
                return r
        raise KeyError(concept)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "samples_per_concept": self.samples_per_concept,
            "membranes": self.membranes,
            "gamma_scale": self.gamma_scale,
            "no_ft": self.no_ft,
            "concepts": [r.to_dict() for r in self.rows],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _template_counts(n_samples: int) -> list[int]:
    base, extra = divmod(n_samples, len(PROMPT_TEMPLATES))
    return [base + (1 if i < extra else 0) for i in range(len(PROMPT_TEMPLATES))]


def eval_concept(
    model_handle,
    concept: str,
    n_samples: int,
    classifier,
    seed: int,
    surrogate: str = "",
) -> ConceptResult:
    """Evaluate one concept through the template set; drift compares against the
    frozen model under identical noise."""
    vocab = model_handle.model.vocab
    label = vocab.label_of(concept)
    surrogate_label = vocab.label_of(surrogate)

    gen_imgs, frozen_imgs = [], []
    for i, (tpl, count) in enumerate(zip(PROMPT_TEMPLATES, _template_counts(n_samples))):
        if count == 0:
            continue
        prompt = tpl.format(c=concept)
        gen_imgs.append(model_handle.sample(prompt, count, seed=seed + i))
        frozen_imgs.append(model_handle.frozen_sample(prompt, count, seed=seed + i))
    gen = torch.cat(gen_imgs)
    frozen = torch.cat(frozen_imgs)

    conf = classifier.confidences(gen)
    pred = conf.argmax(dim=1)
    drift = mmd_drift(classifier.features(gen), classifier.features(frozen))
    return ConceptResult(
        concept=concept,
        concept_score=float(conf[:, label].mean()),
        erasure_rate=float((pred == surrogate_label).float().mean()),
        accuracy=float((pred == label).float().mean()),
        drift=drift,
        n_samples=int(gen.shape[0]),
        seed=seed,
        surrogate_label=surrogate_label,
    )


def evaluate(
    model_handle,
    concepts: list[str],
    n_samples: int,
    classifier,
    seed: int,
    surrogate: str = "",
) -> EvalReport:
    report = EvalReport(
        seed=seed,
        samples_per_concept=n_samples,
        membranes=[m.name for m in model_handle.membranes],
        gamma_scale=model_handle.gamma_scale,
        no_ft=model_handle.no_ft,
    )
    for j, concept in enumerate(concepts):
        report.rows.append(
            eval_concept(
                model_handle,
                concept,
                n_samples,
                classifier,
                seed=seed + 1000 * (j + 1),
                surrogate=surrogate,
            )
        )
    return report
