"""Synthetic color x shape image data for the toy testbed.

Images are 3x8x8 tensors in [-1, 1]: a colored shape mask on a dark canvas,
with brightness/position jitter and pixel noise. The background class is the
empty canvas and corresponds to the empty prompt.
"""

from __future__ import annotations

import torch

from .vocab import PROMPT_TEMPLATES, ToyVocabulary, tokenize

IMAGE_SIZE = 8
IMAGE_CHANNELS = 3


def _shape_mask(shape: str) -> torch.Tensor:
    yy, xx = torch.meshgrid(
        torch.arange(IMAGE_SIZE, dtype=torch.float32),
        torch.arange(IMAGE_SIZE, dtype=torch.float32),
        indexing="ij",
    )
    if shape == "square":
        return ((yy >= 2) & (yy <= 5) & (xx >= 2) & (xx <= 5)).float()
    if shape == "circle":
        return (((yy - 3.5) ** 2 + (xx - 3.5) ** 2) <= 2.8**2).float()
    if shape == "cross":
        return (((yy >= 3) & (yy <= 4)) | ((xx >= 3) & (xx <= 4))).float()
    if shape == "triangle":
        return (yy >= (IMAGE_SIZE - 1 - xx)).float()
    raise KeyError(f"unknown shape {shape!r}")


_MASKS = {s: _shape_mask(s) for s in ("square", "circle", "cross", "triangle")}


def concept_image(concept: str, gen: torch.Generator) -> torch.Tensor:
    """One jittered sample of a concept ('<color> <shape>') in [-1, 1]."""
    color, shape = tokenize(concept)
    channel = ("red", "green", "blue").index(color)
    mask = _MASKS[shape]
    amp = 0.8 + 0.2 * torch.rand(1, generator=gen).item()
    img = torch.full((IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE), -1.0)
    img[channel] = img[channel] + 2.0 * amp * mask
    img = img + 0.05 * torch.randn(img.shape, generator=gen)
    return img


def background_image(gen: torch.Generator) -> torch.Tensor:
    """Empty canvas with pixel noise; the surrogate class for the empty prompt."""
    img = torch.full((IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE), -1.0)
    return img + 0.05 * torch.randn(img.shape, generator=gen)


def templated_prompt(concept: str, gen: torch.Generator) -> str:
    """Concept name wrapped in a random template (or left bare)."""
    k = int(torch.randint(0, len(PROMPT_TEMPLATES) + 2, (1,), generator=gen))
    if k >= len(PROMPT_TEMPLATES):
        return concept
    return PROMPT_TEMPLATES[k].format(c=concept)


def sample_training_batch(
    vocab: ToyVocabulary, batch_size: int, gen: torch.Generator
) -> tuple[torch.Tensor, list[str], torch.Tensor]:
    """(images, prompts, labels) with background mixed in at its class frequency."""
    images, prompts, labels = [], [], []
    n_classes = vocab.n_classes
    for _ in range(batch_size):
        label = int(torch.randint(0, n_classes, (1,), generator=gen))
        if label == vocab.background_label:
            images.append(background_image(gen))
            prompts.append("")
        else:
            concept = vocab.concepts[label]
            images.append(concept_image(concept, gen))
            prompts.append(templated_prompt(concept, gen))
        labels.append(label)
    return torch.stack(images), prompts, torch.tensor(labels)
