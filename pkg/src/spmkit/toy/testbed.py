"""Testbed construction: a pre-trained conditional toy diffusion system.

`build_testbed` pre-trains the denoiser on the synthetic concept data, trains
the concept classifier, verifies that the classifier labels frozen-model
generations correctly (>= 95%), and produces a fine-tuned second checkpoint
with an identical signature for transfer experiments. Everything is
reproducible from a single seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from ..errors import TestbedError
from ..signature import ModelSignature, signature_of
from .classifier import ToyClassifier
from .data import IMAGE_SIZE, background_image, concept_image, sample_training_batch
from .denoiser import DiffusionSchedule, ToyDenoiser, sample
from .vocab import PROMPT_TEMPLATES, ToyTextEncoder, ToyVocabulary

FORMAT_VERSION = 1
VARIANTS = ("a", "b")


def model_digest(module: torch.nn.Module) -> str:
    """sha256 over the state dict, byte-exact."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Testbed:
    """One loaded testbed variant: denoiser + classifier + conceptual space."""

    vocab: ToyVocabulary
    encoder: ToyTextEncoder
    denoiser: ToyDenoiser
    classifier: ToyClassifier
    schedule: DiffusionSchedule
    seed: int
    variant: str = "a"
    meta: dict | None = None

    @property
    def signature(self) -> ModelSignature:
        return signature_of(self.denoiser)

    def tokenizer(self):
        return self.encoder.tokenize

    def encode_prompts(self, prompts: list[str]) -> torch.Tensor:
        return self.encoder.encode_batch(prompts)


def _encoding_bank(vocab: ToyVocabulary, encoder: ToyTextEncoder) -> torch.Tensor:
    """[n_classes, n_variants, L]: per class, each template encoding plus the bare name.

    The background class row is all zeros (empty prompt).
    """
    variants = len(PROMPT_TEMPLATES) + 1
    bank = torch.zeros(vocab.n_classes, variants, encoder.dim)
    for i, concept in enumerate(vocab.concepts):
        for k, tpl in enumerate(PROMPT_TEMPLATES):
            bank[i, k] = encoder.encode(tpl.format(c=concept)).vector
        bank[i, len(PROMPT_TEMPLATES)] = encoder.encode(concept).vector
    return bank


def _build_dataset(vocab: ToyVocabulary, gen: torch.Generator, per_class: int = 480):
    images, labels = [], []
    for label in range(vocab.n_classes):
        for _ in range(per_class):
            if label == vocab.background_label:
                images.append(background_image(gen))
            else:
                images.append(concept_image(vocab.concepts[label], gen))
            labels.append(label)
    return torch.stack(images), torch.tensor(labels)


def _pretrain_denoiser(
    vocab: ToyVocabulary,
    encoder: ToyTextEncoder,
    schedule: DiffusionSchedule,
    gen: torch.Generator,
    steps: int = 4000,
    batch_size: int = 64,
    lr: float = 2e-3,
    denoiser: ToyDenoiser | None = None,
) -> ToyDenoiser:
    if denoiser is None:
        denoiser = ToyDenoiser(cond_dim=encoder.dim)
    images, labels = _build_dataset(vocab, gen)
    bank = _encoding_bank(vocab, encoder)
    n_variants = bank.shape[1]
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    T = schedule.timesteps
    for step in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        x0 = images[idx]
        # bare-name prompts get double weight, mirroring templated_prompt()
        variant = torch.randint(0, n_variants + 1, (batch_size,), generator=gen).clamp(max=n_variants - 1)
        cond = bank[labels[idx], variant]
        t = torch.randint(1, T + 1, (batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        x_t = schedule.forward_diffuse(x0, t, noise)
        loss = F.mse_loss(denoiser(x_t, cond, t.float()), noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
    denoiser.requires_grad_(False)
    denoiser.eval()
    return denoiser


def _train_classifier(
    vocab: ToyVocabulary,
    gen: torch.Generator,
    steps: int = 1200,
    batch_size: int = 128,
    lr: float = 2e-3,
) -> ToyClassifier:
    clf = ToyClassifier(n_classes=vocab.n_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for step in range(steps):
        x, _, y = sample_training_batch(vocab, batch_size, gen)
        # generation artifacts are noisier than the clean data
        x = x + torch.rand(1, generator=gen).item() * 0.15 * torch.randn(x.shape, generator=gen)
        loss = F.cross_entropy(clf(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.requires_grad_(False)
    clf.eval()
    return clf


@torch.no_grad()
def generation_accuracy(testbed: Testbed, seed: int = 1234, per_class: int = 32) -> float:
    """Classifier accuracy on frozen-model generations over every class."""
    vocab = testbed.vocab
    prompts, labels = [], []
    for label in range(vocab.n_classes):
        text = "" if label == vocab.background_label else vocab.concepts[label]
        prompts += [text] * per_class
        labels += [label] * per_class
    cond = testbed.encode_prompts(prompts)
    imgs = sample(testbed.denoiser, testbed.schedule, cond, seed=seed)
    pred = testbed.classifier.predict(imgs)
    return float((pred == torch.tensor(labels)).float().mean())


def build_testbed(
    seed: int,
    out_dir: str | Path | None = None,
    pretrain_steps: int = 3000,
    finetune_steps: int = 500,
    min_accuracy: float = 0.95,
) -> Testbed:
    """Build, verify and optionally persist a reproducible testbed (variants a and b)."""
    torch.manual_seed(seed)
    vocab = ToyVocabulary()
    encoder = ToyTextEncoder(vocab)
    schedule = DiffusionSchedule()

    gen = torch.Generator().manual_seed(seed)
    denoiser = _pretrain_denoiser(vocab, encoder, schedule, gen, steps=pretrain_steps)
    classifier = _train_classifier(vocab, gen)

    testbed = Testbed(
        vocab=vocab,
        encoder=encoder,
        denoiser=denoiser,
        classifier=classifier,
        schedule=schedule,
        seed=seed,
        variant="a",
    )
    acc = generation_accuracy(testbed)
    if acc < min_accuracy:
        raise TestbedError(
            f"testbed rejected: classifier accuracy {acc:.3f} on frozen generations "
            f"is below {min_accuracy:.2f}"
        )

    # fine-tuned sibling checkpoint with identical signature, for transfer tests
    gen_b = torch.Generator().manual_seed(seed + 7919)
    denoiser_b = copy.deepcopy(denoiser)
    denoiser_b.requires_grad_(True)
    denoiser_b = _pretrain_denoiser(
        vocab, encoder, schedule, gen_b, steps=finetune_steps, lr=5e-4, denoiser=denoiser_b
    )
    testbed_b = Testbed(
        vocab=vocab,
        encoder=encoder,
        denoiser=denoiser_b,
        classifier=classifier,
        schedule=schedule,
        seed=seed,
        variant="b",
    )
    acc_b = generation_accuracy(testbed_b)

    meta = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "colors": list(vocab.colors),
        "shapes": list(vocab.shapes),
        "embed_dim": vocab.embed_dim,
        "hidden": denoiser.hidden,
        "timesteps": schedule.timesteps,
        "beta_start": float(schedule.betas[0]),
        "beta_end": float(schedule.betas[-1]),
        "pretrain_steps": pretrain_steps,
        "finetune_steps": finetune_steps,
        "signature_digest": testbed.signature.digest,
        "classifier_accuracy_a": acc,
        "classifier_accuracy_b": acc_b,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    testbed.meta = meta
    testbed_b.meta = meta

    if out_dir is not None:
        save_testbed(testbed, testbed_b, out_dir)
    return testbed


def save_testbed(testbed_a: Testbed, testbed_b: Testbed, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(testbed_a.meta, indent=2))
    torch.save(testbed_a.denoiser.state_dict(), out / "denoiser_a.pt")
    torch.save(testbed_b.denoiser.state_dict(), out / "denoiser_b.pt")
    torch.save(testbed_a.classifier.state_dict(), out / "classifier.pt")
    return out


def load_testbed(path: str | Path, variant: str = "a") -> Testbed:
    root = Path(path)
    cfg_path = root / "config.json"
    if not cfg_path.is_file():
        raise TestbedError(f"no testbed at {root} (missing config.json)")
    if variant not in VARIANTS:
        raise TestbedError(f"unknown testbed variant {variant!r}")
    meta = json.loads(cfg_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise TestbedError(f"unsupported testbed format_version {meta.get('format_version')}")

    vocab = ToyVocabulary(
        colors=tuple(meta["colors"]), shapes=tuple(meta["shapes"]), embed_dim=meta["embed_dim"]
    )
    encoder = ToyTextEncoder(vocab)
    schedule = DiffusionSchedule(
        timesteps=meta["timesteps"], beta_start=meta["beta_start"], beta_end=meta["beta_end"]
    )
    denoiser = ToyDenoiser(cond_dim=vocab.embed_dim, hidden=meta["hidden"])
    weights = root / f"denoiser_{variant}.pt"
    if not weights.is_file():
        raise TestbedError(f"missing denoiser checkpoint {weights}")
    denoiser.load_state_dict(torch.load(weights, weights_only=True))
    denoiser.requires_grad_(False)
    denoiser.eval()
    classifier = ToyClassifier(n_classes=vocab.n_classes)
    classifier.load_state_dict(torch.load(root / "classifier.pt", weights_only=True))
    classifier.requires_grad_(False)
    classifier.eval()
    return Testbed(
        vocab=vocab,
        encoder=encoder,
        denoiser=denoiser,
        classifier=classifier,
        schedule=schedule,
        seed=meta["seed"],
        variant=variant,
        meta=meta,
    )
