"""Membrane fine-tuning: erasing loss plus latent anchoring against a frozen host.

Per step the trainer draws a self-supervised latent (x_t, t) from the frozen
sampler conditioned on the target, matches the membrane-modified noise
prediction to the guided erasing target, anchors freshly sampled non-target
concepts to their frozen predictions, and takes one AdamW step under a
warmup + cosine-restart schedule. Only membrane parameters move; the host is
never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .adapter import Membrane, apply_membranes, inject
from .concepts import AnchorPool, ConceptEncoding, build_anchor_pool, sample_anchors
from .errors import ConfigurationError, ContractViolationError, TrainingError
from .toy.denoiser import reverse_sample


@dataclass
class TrainConfig:
    """Hyperparameters for one erasure run (defaults follow the reference recipe)."""

    eta: float = 1.0
    lam: float = 1e3
    alpha: float = 1.0
    steps: int = 3000
    anchor_samples: int = 4
    learning_rate: float = 1e-4
    warmup_steps: int | None = None  # default: steps // 6
    restart_cycles: int = 3
    batch_size: int = 1
    seed: int = 0
    enable_la: bool = True
    enable_ft_at_eval: bool = True
    d: int = 1
    t_min: int = 1
    t_max: int | None = None  # default: schedule.timesteps
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigurationError(f"eta must be > 0, got {self.eta}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")

    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, self.steps // 6)


class NoisePredictor:
    """Callable contract eps(x_t, c, t | theta [, membranes]) over a frozen denoiser."""

    def __init__(self, denoiser: torch.nn.Module):
        self.denoiser = denoiser

    def frozen(self, x_t: torch.Tensor, cond: torch.Tensor, t) -> torch.Tensor:
        with torch.no_grad():
            return self.denoiser(x_t, cond, _t_batch(t, x_t))

    def intervened(
        self, x_t: torch.Tensor, cond: torch.Tensor, t, active: Sequence[tuple[Membrane, float]]
    ) -> torch.Tensor:
        with apply_membranes(self.denoiser, active):
            return self.denoiser(x_t, cond, _t_batch(t, x_t))

    def __call__(self, x_t, cond, t, active=None):
        if active:
            return self.intervened(x_t, cond, t, active)
        return self.frozen(x_t, cond, t)


def _t_batch(t, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype).flatten()
    if t.numel() == 1:
        t = t.expand(x.shape[0])
    return t


def _cond_batch(c, x: torch.Tensor) -> torch.Tensor:
    v = c.vector if isinstance(c, ConceptEncoding) else torch.as_tensor(c)
    v = v.to(x.dtype)
    if v.dim() == 1:
        v = v[None, :].expand(x.shape[0], -1)
    return v


def erasing_target(eps_tar: torch.Tensor, eps_sur: torch.Tensor, eta: float) -> torch.Tensor:
    """Guided target eps_sur - eta * (eps_tar - eps_sur); inputs come from the frozen model."""
    if eps_tar.shape != eps_sur.shape:
        raise ContractViolationError(
            f"noise estimate shapes differ: {tuple(eps_tar.shape)} vs {tuple(eps_sur.shape)}"
        )
    return eps_sur - eta * (eps_tar - eps_sur)


def erasing_loss(
    x_t: torch.Tensor,
    t,
    c_tar,
    c_sur,
    model: NoisePredictor,
    membrane: Membrane,
    eta: float,
) -> torch.Tensor:
    """Mean squared distance between the membrane-modified prediction on the target
    and the guided erasing target; differentiable in membrane parameters only."""
    cond_tar = _cond_batch(c_tar, x_t)
    cond_sur = _cond_batch(c_sur, x_t)
    eps_tar = model.frozen(x_t, cond_tar, t)
    eps_sur = model.frozen(x_t, cond_sur, t)
    target = erasing_target(eps_tar, eps_sur, eta)
    eps_m = model.intervened(x_t, cond_tar, t, [(membrane, 1.0)])
    return F.mse_loss(eps_m, target)


def anchoring_loss(
    x_t: torch.Tensor,
    t,
    anchors: Sequence[ConceptEncoding],
    model: NoisePredictor,
    membrane: Membrane,
) -> torch.Tensor:
    """Mean over anchors of the squared deviation from the frozen prediction."""
    if len(anchors) == 0:
        raise ConfigurationError("anchoring loss needs at least one anchor")
    k = len(anchors)
    b = x_t.shape[0]
    cond = torch.stack([a.vector for a in anchors]).to(x_t.dtype)
    cond = cond.repeat_interleave(b, dim=0)
    x_rep = x_t.repeat(k, 1, 1, 1)
    t_rep = _t_batch(t, x_t).repeat(k)
    eps_frozen = model.frozen(x_rep, cond, t_rep)
    eps_m = model.intervened(x_rep, cond, t_rep, [(membrane, 1.0)])
    return F.mse_loss(eps_m, eps_frozen)


def total_loss(era: torch.Tensor, anc: torch.Tensor, lam: float) -> torch.Tensor:
    return era + lam * anc


def sample_latent(denoiser, schedule, c_tar, t_range, seed: int):
    """Draw (x_t, t): t uniform over the range, x_t from the frozen sampler run
    from pure noise down to t, conditioned on the target. Deterministic under seed."""
    t_min, t_max = t_range
    if not (0 <= t_min <= t_max <= schedule.timesteps):
        raise ContractViolationError(f"invalid t_range {t_range} for T={schedule.timesteps}")
    gen = torch.Generator().manual_seed(seed)
    t = int(torch.randint(t_min, t_max + 1, (1,), generator=gen))
    channels = getattr(denoiser, "image_channels", 3)
    size = getattr(denoiser, "size", 8)
    cond = c_tar.vector[None, :] if isinstance(c_tar, ConceptEncoding) else torch.as_tensor(c_tar)
    if cond.dim() == 1:
        cond = cond[None, :]
    x = torch.randn(cond.shape[0], channels, size, size, generator=gen)
    if t == schedule.timesteps:
        return x, t
    x_t = reverse_sample(denoiser, schedule, x, schedule.timesteps, cond, gen, t_stop=t)
    return x_t, t


def _derive_seed(seed: int, step: int, salt: int) -> int:
    v = (seed * 6364136223846793005 + step * 1442695040888963407 + salt * 2654435761) % (2**63)
    return int(v)


def train_membrane(
    model,
    targets: Sequence[str],
    config: TrainConfig,
    anchor_pool: AnchorPool | None = None,
    *,
    surrogate: str = "",
    name: str | None = None,
    log_fn: Callable[[dict], None] | None = None,
    checkpoint_path=None,
) -> Membrane:
    """Fine-tune a freshly injected membrane on a frozen testbed model.

    `model` provides denoiser, encoder, schedule and signature (a Testbed).
    Returns the trained membrane with train_meta recorded.
    """
    if not targets:
        raise ConfigurationError("at least one target concept is required")
    denoiser = model.denoiser
    schedule = model.schedule
    encoder = model.encoder
    denoiser.requires_grad_(False)

    membrane = inject(
        model.signature,
        d=config.d,
        seed=config.seed,
        name=name or "+".join(targets),
        targets=targets,
        surrogate=surrogate,
    )
    membrane.requires_grad_(True)

    if anchor_pool is None:
        vocab = getattr(model, "vocab", None)
        vocabulary = list(getattr(vocab, "anchor_words", None) or getattr(vocab, "concepts", []))
        if not vocabulary:
            raise ConfigurationError("no anchor vocabulary available; pass anchor_pool")
        anchor_pool = build_anchor_pool(vocabulary, list(targets), config.alpha, encoder)

    predictor = NoisePredictor(denoiser)
    target_encs = [encoder.encode(t) for t in targets]
    sur_enc = encoder.encode(surrogate)
    t_max = config.t_max if config.t_max is not None else schedule.timesteps
    lam = config.lam if config.enable_la else 0.0

    opt = torch.optim.AdamW(membrane.parameters(), lr=config.learning_rate)
    warmup = config.resolved_warmup()

    def lr_lambda(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        span = max(config.steps - warmup, 1)
        cycle = math.ceil(span / max(config.restart_cycles, 1))
        pos = ((step - warmup) % cycle) / cycle
        return 0.5 * (1.0 + math.cos(math.pi * pos))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda)

    for step in range(config.steps):
        era_terms = []
        anc_terms = []
        for b in range(config.batch_size):
            c_step = target_encs[step % len(target_encs)]
            x_t, t = sample_latent(
                denoiser,
                schedule,
                c_step,
                (config.t_min, t_max),
                _derive_seed(config.seed, step, 2 * b),
            )
            for c_tar in target_encs:
                era_terms.append(erasing_loss(x_t, t, c_tar, sur_enc, predictor, membrane, config.eta))
            anchors = sample_anchors(
                anchor_pool, config.anchor_samples, _derive_seed(config.seed, step, 2 * b + 1)
            )
            anc_terms.append(anchoring_loss(x_t, t, anchors, predictor, membrane))
        era = torch.stack(era_terms).mean()
        anc = torch.stack(anc_terms).mean()
        loss = total_loss(era, anc, lam)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()

        if log_fn and (step % config.log_every == 0 or step == config.steps - 1):
            log_fn(
                {
                    "step": step,
                    "loss_era": float(era),
                    "loss_anc": float(anc),
                    "loss_total": float(loss),
                    "lr": sched.get_last_lr()[0],
                }
            )
        if (
            checkpoint_path is not None
            and config.checkpoint_every > 0
            and (step + 1) % config.checkpoint_every == 0
        ):
            _record_meta(membrane, config)
            from .registry import save

            save(membrane, checkpoint_path)

    _record_meta(membrane, config)
    membrane.requires_grad_(False)
    return membrane


def _record_meta(membrane: Membrane, config: TrainConfig) -> None:
    membrane.train_meta = {
        "eta": config.eta,
        "alpha": config.alpha,
        "lambda": config.lam,
        "steps": config.steps,
        "seed": config.seed,
        "anchor_samples": config.anchor_samples,
    }
