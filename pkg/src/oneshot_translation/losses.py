"""Loss terms for both training phases, with their gradient-gate semantics.

Domain-B terms flow gradients into the shared core; terms built from the
one-shot sample go through the detached compositions and can only update
unshared parameters. Discriminator terms see generated images as constants;
generator terms see the discriminator's parameters as constants.

All L1/least-squares reductions are per-element means so the tradeoff
weights are resolution-independent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import torch

from .data import ImageBatch
from .errors import NumericalError
from .gating import translate_aa, translate_ab, translate_ba
from .networks import SharedDualAutoencoder


@dataclass
class LossWeights:
    """Tradeoff coefficients for the weighted totals."""

    kl: float = 0.01
    gan_b: float = 1.0
    rec_a: float = 1.0
    cycle: float = 10.0
    gan_ab: float = 1.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not (value >= 0 and value == value and abs(value) != float("inf")):
                raise ValueError(f"weight {name} must be finite and >= 0")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: Dict[str, torch.Tensor]

    def scalars(self) -> Dict[str, float]:
        out = {name: float(t.detach()) for name, t in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out

    def check_finite(self) -> None:
        for name, value in self.scalars().items():
            if value != value or abs(value) == float("inf"):
                raise NumericalError(f"non-finite loss term {name!r}: {value}")


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def _ls(scores: torch.Tensor, target: float) -> torch.Tensor:
    return (scores - target).pow(2).mean()


def _reparameterize(mean: torch.Tensor,
                    generator: Optional[torch.Generator] = None,
                    noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Unit-variance posterior sampling; deterministic when both args are None."""
    if noise is not None:
        return mean + noise
    if generator is not None:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean + eps
    return mean


def _kl_from_mean(mean: torch.Tensor) -> torch.Tensor:
    # KL(N(mu, I) || N(0, I)) up to scale: mu^2 / 2 as a per-element mean,
    # like every other term, so the weight is resolution-independent
    return 0.5 * mean.pow(2).mean()


def _generator_adversarial(scores: torch.Tensor,
                           literal_sign: bool) -> torch.Tensor:
    # default: least-squares target "real"; literal_sign exposes the
    # unbounded -l(score, 0) variant for comparison
    if literal_sign:
        return -_ls(scores, 0.0)
    return _ls(scores, 1.0)


def rec_b(bundle: SharedDualAutoencoder, s: ImageBatch,
          generator: Optional[torch.Generator] = None,
          noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean L1 between the domain-B reconstruction and the input."""
    mean = bundle.encode(s, "B", update_stats=False)
    z = _reparameterize(mean, generator, noise)
    out = bundle.decode(z, "B", update_stats=False)
    return _l1(out, s.pixels)


def kl_b(bundle: SharedDualAutoencoder, s: ImageBatch) -> torch.Tensor:
    mean = bundle.encode(s, "B", update_stats=False)
    return _kl_from_mean(mean)


def gan_b_generator(bundle: SharedDualAutoencoder, s: ImageBatch,
                    generator: Optional[torch.Generator] = None,
                    noise: Optional[torch.Tensor] = None,
                    literal_sign: bool = False) -> torch.Tensor:
    mean = bundle.encode(s, "B", update_stats=False)
    z = _reparameterize(mean, generator, noise)
    fake = bundle.decode(z, "B", update_stats=False)
    scores = bundle.discriminate(fake, detach=True, update_stats=False)
    return _generator_adversarial(scores, literal_sign)


def gan_b_discriminator(bundle: SharedDualAutoencoder, s: ImageBatch,
                        generator: Optional[torch.Generator] = None,
                        noise: Optional[torch.Tensor] = None,
                        update_stats: bool = False) -> torch.Tensor:
    with torch.no_grad():
        mean = bundle.encode(s, "B", update_stats=False)
        z = _reparameterize(mean, generator, noise)
        fake = bundle.decode(z, "B", update_stats=False)
    return (_ls(bundle.discriminate(fake, update_stats=update_stats), 0.0)
            + _ls(bundle.discriminate(s, update_stats=update_stats), 1.0))


def rec_a(bundle: SharedDualAutoencoder, s: ImageBatch,
          selective: bool = True) -> torch.Tensor:
    """Mean L1 between the one-shot sample's A-path reconstruction and itself."""
    out = translate_aa(bundle, s, selective)
    return _l1(out, s.pixels)


def cycle(bundle: SharedDualAutoencoder, s: ImageBatch,
          selective: bool = True) -> torch.Tensor:
    """One-way cycle: A -> B -> A, compared to the A source. No reverse
    (B-started) cycle exists outside the explicit two-way ablation term."""
    fake_b = translate_ab(bundle, s, selective)
    back = translate_ba(bundle, fake_b, selective)
    return _l1(back, s.pixels)


def cycle_reverse(bundle: SharedDualAutoencoder, b: ImageBatch,
                  selective: bool = True) -> torch.Tensor:
    """B -> A -> B cycle. Ablation-only; degrades the one-shot setting."""
    fake_a = translate_ba(bundle, b, selective)
    back = translate_ab(bundle, fake_a, selective)
    return _l1(back, b.pixels)


def gan_ab_generator(bundle: SharedDualAutoencoder, s: ImageBatch,
                     selective: bool = True,
                     literal_sign: bool = False) -> torch.Tensor:
    fake = translate_ab(bundle, s, selective)
    scores = bundle.discriminate(fake, detach=True, update_stats=False)
    return _generator_adversarial(scores, literal_sign)


def gan_ab_discriminator(bundle: SharedDualAutoencoder, s: ImageBatch,
                         real_b: ImageBatch,
                         update_stats: bool = False) -> torch.Tensor:
    with torch.no_grad():
        fake = translate_ab(bundle, s)
    return (_ls(bundle.discriminate(fake, update_stats=update_stats), 0.0)
            + _ls(bundle.discriminate(real_b, update_stats=update_stats), 1.0))


def total_phase1(bundle: SharedDualAutoencoder, s: ImageBatch,
                 weights: LossWeights,
                 generator: Optional[torch.Generator] = None,
                 noise: Optional[torch.Tensor] = None,
                 literal_sign: bool = False,
                 update_stats: bool = False) -> LossBreakdown:
    """Weighted phase-I objective; encodes the batch once."""
    mean = bundle.encode(s, "B", update_stats=update_stats)
    kl = _kl_from_mean(mean)
    z = _reparameterize(mean, generator, noise)
    fake = bundle.decode(z, "B", update_stats=update_stats)
    rec = _l1(fake, s.pixels)
    scores = bundle.discriminate(fake, detach=True, update_stats=False)
    gan = _generator_adversarial(scores, literal_sign)
    total = rec + weights.kl * kl + weights.gan_b * gan
    return LossBreakdown(total, {"rec_b": rec, "kl_b": kl,
                                 "gan_b_generator": gan})


def total_phase2(bundle: SharedDualAutoencoder, s_a: ImageBatch,
                 s_b: ImageBatch, weights: LossWeights,
                 generator: Optional[torch.Generator] = None,
                 noise: Optional[torch.Tensor] = None,
                 selective: bool = True,
                 use_cycle: bool = True,
                 two_way_cycle: bool = False,
                 literal_sign: bool = False,
                 update_stats: bool = False) -> LossBreakdown:
    """Phase-I objective on the B batch plus the one-shot terms on the A batch.

    The B terms run through plain (unbarred) paths; the A terms run through
    the detached compositions unless selective=False.
    """
    base = total_phase1(bundle, s_b, weights, generator=generator, noise=noise,
                        literal_sign=literal_sign, update_stats=update_stats)
    terms = dict(base.terms)
    code_a = bundle.encode(s_a, "A", detach_shared=selective,
                           update_stats=False)
    rec_a_img = bundle.decode(code_a, "A", detach_shared=selective,
                              update_stats=False)
    terms["rec_a"] = _l1(rec_a_img, s_a.pixels)
    fake_b = bundle.decode(code_a, "B", detach_shared=selective,
                           update_stats=False)
    scores = bundle.discriminate(fake_b, detach=True, update_stats=False)
    terms["gan_ab_generator"] = _generator_adversarial(scores, literal_sign)
    total = (base.total + weights.rec_a * terms["rec_a"]
             + weights.gan_ab * terms["gan_ab_generator"])
    if use_cycle:
        back = translate_ba(bundle, fake_b, selective)
        terms["cycle"] = _l1(back, s_a.pixels)
        total = total + weights.cycle * terms["cycle"]
    if two_way_cycle:
        terms["cycle_reverse"] = cycle_reverse(bundle, s_b, selective)
        total = total + weights.cycle * terms["cycle_reverse"]
    return LossBreakdown(total, terms)


def discriminator_phase2(bundle: SharedDualAutoencoder, s_a: ImageBatch,
                         s_b: ImageBatch,
                         generator: Optional[torch.Generator] = None,
                         noise: Optional[torch.Tensor] = None,
                         update_stats: bool = False) -> LossBreakdown:
    d_b = gan_b_discriminator(bundle, s_b, generator=generator, noise=noise,
                              update_stats=update_stats)
    d_ab = gan_ab_discriminator(bundle, s_a, s_b, update_stats=update_stats)
    return LossBreakdown(d_b + d_ab, {"gan_b_discriminator": d_b,
                                      "gan_ab_discriminator": d_ab})


@dataclass
class LossReport:
    """One metrics row per iteration, appended to a JSON-lines file."""

    iteration: int
    phase: int
    terms: Dict[str, float]

    def append_to(self, path: Path | str) -> None:
        row = {"iteration": self.iteration, "phase": self.phase, **self.terms}
        with open(path, "a") as f:
            f.write(json.dumps(row) + "\n")
