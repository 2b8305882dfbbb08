"""Two-phase optimization: domain-B autoencoder training, cloning, and the
gated one-shot fine-tuning, plus checkpointing of the full train state."""

from __future__ import annotations

import copy
import io
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch

from . import losses as L
from .data import AugmentationSpec, ImageBatch, LoadedDataset, augment
from .errors import ConfigError, DataError
from .gating import (DIRECTIONS, audit_gates, default_gate_rules,
                     require_audit_pass)
from .losses import LossReport, LossWeights
from .networks import (DISCRIMINATOR, SHARED, UNSHARED_A, UNSHARED_B,
                       NetSpec, SharedDualAutoencoder, build,
                       bundle_from_payload, bundle_payload)


@dataclass
class AblationToggles:
    """The independently switchable pieces of the phase-II objective."""

    augmentation: bool = True
    one_way_cycle: bool = True
    selective_backprop: bool = True
    shared_frozen: bool = False
    two_way_cycle: bool = False


@dataclass
class TrainConfig:
    phase: int = 1
    iterations: int = 2000
    batch_size_b: int = 16
    max_a_batch: int = 8  # cap on one-shot samples consumed per iteration
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    toggles: AblationToggles = field(default_factory=AblationToggles)
    literal_gan_sign: bool = False
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be > 0")


@dataclass
class TrainState:
    bundle: SharedDualAutoencoder
    phase: int
    iteration: int
    opt_generator: Optional[torch.optim.Adam]
    opt_discriminator: Optional[torch.optim.Adam]
    rng_augment: torch.Generator
    rng_noise: torch.Generator
    generator_classes: tuple = ()


def _make_optimizers(bundle: SharedDualAutoencoder, cfg: TrainConfig,
                     generator_classes: tuple) -> tuple[torch.optim.Adam,
                                                        torch.optim.Adam]:
    opt_gen = torch.optim.Adam(bundle.parameters_in(*generator_classes),
                               lr=cfg.lr_generator,
                               betas=(cfg.beta1, cfg.beta2))
    opt_disc = torch.optim.Adam(bundle.parameters_in(DISCRIMINATOR),
                                lr=cfg.lr_discriminator,
                                betas=(cfg.beta1, cfg.beta2))
    return opt_gen, opt_disc


def _rng(seed: int, stream: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 7919 + stream)


def _maybe_augment(batch: ImageBatch, cfg: TrainConfig,
                   rng: torch.Generator) -> ImageBatch:
    if not cfg.toggles.augmentation:
        return batch
    return augment(batch, cfg.augment, rng)


def _log(out_dir: Optional[Path], name: str, iteration: int, phase: int,
         terms: dict, cfg: TrainConfig) -> None:
    if out_dir is None or cfg.log_every <= 0:
        return
    if iteration % cfg.log_every and iteration != 1:
        return
    metrics_dir = out_dir / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    LossReport(iteration, phase, terms).append_to(metrics_dir / name)


def train_phase1(dataset_b: LoadedDataset, cfg: TrainConfig,
                 net_spec: Optional[NetSpec] = None,
                 out_dir: Optional[Path | str] = None,
                 run_audit: bool = True) -> TrainState:
    """Train the domain-B variational adversarial autoencoder.

    Alternates a generator step on the weighted phase-I objective over the
    shared and unshared-B parameters with a discriminator step; every
    iteration consumes a freshly augmented B batch.
    """
    if cfg.phase != 1:
        raise ConfigError(f"train_phase1 requires phase 1, got {cfg.phase}")
    out_dir = Path(out_dir) if out_dir is not None else None
    spec = net_spec or NetSpec.for_resolution(dataset_b.images.shape[2])
    bundle = build(spec, seed=cfg.seed)
    gen_classes = (SHARED, UNSHARED_B)
    opt_gen, opt_disc = _make_optimizers(bundle, cfg, gen_classes)
    state = TrainState(bundle, 1, 0, opt_gen, opt_disc,
                       _rng(cfg.seed, 1), _rng(cfg.seed, 2), gen_classes)
    batches = dataset_b.batches(cfg.batch_size_b, seed=cfg.seed)
    for it in range(1, cfg.iterations + 1):
        s_b = _maybe_augment(next(batches), cfg, state.rng_augment)
        if it == 1 and run_audit:
            _audit_phase1(bundle, s_b, cfg)
        opt_gen.zero_grad(set_to_none=True)
        breakdown = L.total_phase1(bundle, s_b, cfg.weights,
                                   generator=state.rng_noise,
                                   literal_sign=cfg.literal_gan_sign,
                                   update_stats=True)
        breakdown.check_finite()
        breakdown.total.backward()
        opt_gen.step()

        opt_disc.zero_grad(set_to_none=True)
        d_loss = L.gan_b_discriminator(bundle, s_b, generator=state.rng_noise,
                                       update_stats=True)
        d_breakdown = L.LossBreakdown(d_loss, {"gan_b_discriminator": d_loss})
        d_breakdown.check_finite()
        d_loss.backward()
        opt_disc.step()

        state.iteration = it
        disc_terms = {k: v for k, v in d_breakdown.scalars().items()
                      if k != "total"}
        _log(out_dir, "phase1.jsonl", it, 1,
             {**breakdown.scalars(), **disc_terms}, cfg)
        _maybe_checkpoint(state, cfg, out_dir, it)
    return state


def _audit_phase1(bundle, s_b: ImageBatch, cfg: TrainConfig) -> None:
    noise = torch.randn(
        bundle.encode(s_b, "B", update_stats=False).shape)
    fns = {
        "rec_b": lambda: L.rec_b(bundle, s_b, noise=noise),
        "kl_b": lambda: L.kl_b(bundle, s_b),
        "gan_b_generator": lambda: L.gan_b_generator(bundle, s_b, noise=noise),
        "gan_b_discriminator": lambda: L.gan_b_discriminator(bundle, s_b,
                                                             noise=noise),
    }
    require_audit_pass(audit_gates(bundle, default_gate_rules(1), fns))


def clone_for_phase2(state: TrainState) -> TrainState:
    """Initialize the A-side unshared nets from the trained B-side ones.

    The shared core, B-side nets, and discriminator carry over as the same
    bundle; the A-side gets value copies, so subsequent A-side updates leave
    the B-side untouched. Optimizer moments start fresh.
    """
    if state.phase != 1:
        raise ConfigError(f"clone_for_phase2 requires a phase-1 state, "
                          f"got phase {state.phase}")
    bundle = state.bundle
    bundle.enc_a_unshared.load_state_dict(
        copy.deepcopy(bundle.enc_b_unshared.state_dict()))
    bundle.dec_a_unshared.load_state_dict(
        copy.deepcopy(bundle.dec_b_unshared.state_dict()))
    return TrainState(bundle, 2, 0, None, None,
                      state.rng_augment, state.rng_noise, ())


def train_phase2(state: TrainState, x: ImageBatch, dataset_b: LoadedDataset,
                 cfg: TrainConfig, out_dir: Optional[Path | str] = None,
                 run_audit: bool = True,
                 snapshot_callback: Optional[Callable[[TrainState, int], None]] = None,
                 ) -> TrainState:
    """Gated fine-tuning with the one-shot sample(s) x.

    Each iteration draws an augmented B batch and an augmented copy of x,
    applies the generator update under the gate table, then updates the
    discriminator on both real/fake pairs. With more than max_a_batch
    samples in A, a random sub-batch is consumed per iteration.
    """
    if state.phase != 2:
        raise ConfigError("train_phase2 requires a state from clone_for_phase2")
    if x.domain != "A":
        raise ConfigError("the one-shot batch must carry domain tag 'A'")
    out_dir = Path(out_dir) if out_dir is not None else None
    bundle = state.bundle
    toggles = cfg.toggles
    gen_classes = ((UNSHARED_A, UNSHARED_B) if toggles.shared_frozen
                   else (UNSHARED_A, UNSHARED_B, SHARED))
    opt_gen, opt_disc = _make_optimizers(bundle, cfg, gen_classes)
    state.opt_generator, state.opt_discriminator = opt_gen, opt_disc
    state.generator_classes = gen_classes
    batches = dataset_b.batches(cfg.batch_size_b, seed=cfg.seed)
    for it in range(1, cfg.iterations + 1):
        s_b = _maybe_augment(next(batches), cfg, state.rng_augment)
        s_a = _draw_a_batch(x, cfg, state.rng_augment)
        if it == 1 and run_audit:
            _audit_phase2(bundle, s_a, s_b, cfg)
        opt_gen.zero_grad(set_to_none=True)
        breakdown = L.total_phase2(
            bundle, s_a, s_b, cfg.weights, generator=state.rng_noise,
            selective=toggles.selective_backprop,
            use_cycle=toggles.one_way_cycle,
            two_way_cycle=toggles.two_way_cycle,
            literal_sign=cfg.literal_gan_sign, update_stats=True)
        breakdown.check_finite()
        breakdown.total.backward()
        opt_gen.step()

        opt_disc.zero_grad(set_to_none=True)
        d_breakdown = L.discriminator_phase2(bundle, s_a, s_b,
                                             generator=state.rng_noise,
                                             update_stats=True)
        d_breakdown.check_finite()
        d_breakdown.total.backward()
        opt_disc.step()

        state.iteration = it
        disc_terms = {k: v for k, v in d_breakdown.scalars().items()
                      if k != "total"}
        _log(out_dir, "phase2.jsonl", it, 2,
             {**breakdown.scalars(), **disc_terms}, cfg)
        _maybe_checkpoint(state, cfg, out_dir, it)
        if snapshot_callback is not None:
            snapshot_callback(state, it)
    return state


def _draw_a_batch(x: ImageBatch, cfg: TrainConfig,
                  rng: torch.Generator) -> ImageBatch:
    if len(x) > cfg.max_a_batch:
        idx = torch.randperm(len(x), generator=rng)[:cfg.max_a_batch]
        labels = x.labels[idx] if x.labels is not None else None
        x = ImageBatch(x.pixels[idx], x.domain, labels)
    return _maybe_augment(x, cfg, rng)


def _audit_phase2(bundle, s_a: ImageBatch, s_b: ImageBatch,
                  cfg: TrainConfig) -> None:
    toggles = cfg.toggles
    selective = toggles.selective_backprop
    noise = torch.randn(bundle.encode(s_b, "B", update_stats=False).shape)
    fns = {
        "rec_b": lambda: L.rec_b(bundle, s_b, noise=noise),
        "kl_b": lambda: L.kl_b(bundle, s_b),
        "gan_b_generator": lambda: L.gan_b_generator(bundle, s_b, noise=noise),
        "gan_b_discriminator": lambda: L.gan_b_discriminator(bundle, s_b,
                                                             noise=noise),
        "rec_a": lambda: L.rec_a(bundle, s_a, selective),
        "gan_ab_generator": lambda: L.gan_ab_generator(bundle, s_a, selective),
        "gan_ab_discriminator": lambda: L.gan_ab_discriminator(bundle, s_a, s_b),
    }
    if toggles.one_way_cycle:
        fns["cycle"] = lambda: L.cycle(bundle, s_a, selective)
    if toggles.two_way_cycle:
        fns["cycle_reverse"] = lambda: L.cycle_reverse(bundle, s_b, selective)
    rules = default_gate_rules(2, selective=selective,
                               two_way_cycle=toggles.two_way_cycle)
    if not toggles.one_way_cycle:
        rules = [r for r in rules if r.loss_name != "cycle"]
    require_audit_pass(audit_gates(bundle, rules, fns))


def translate(state: TrainState, batch: ImageBatch,
              direction: str) -> ImageBatch:
    """Deterministic evaluation-mode forward through a composition."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}")
    bundle = state.bundle
    was_training = bundle.training
    bundle.eval()
    try:
        with torch.no_grad():
            out = DIRECTIONS[direction](bundle, batch)
    finally:
        bundle.train(was_training)
    return ImageBatch(out, direction[1], batch.labels)


def _maybe_checkpoint(state: TrainState, cfg: TrainConfig,
                      out_dir: Optional[Path], it: int) -> None:
    if out_dir is None:
        return
    last = it == cfg.iterations
    if (cfg.checkpoint_every > 0 and it % cfg.checkpoint_every == 0) or last:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, ckpt_dir / f"phase{state.phase}_iter{it:07d}.pt")
        if last:
            save_checkpoint(state, ckpt_dir / f"phase{state.phase}_final.pt")


def save_checkpoint(state: TrainState, path: Path | str) -> None:
    payload = bundle_payload(state.bundle)
    payload.update({
        "phase": state.phase,
        "iteration": state.iteration,
        "generator_classes": list(state.generator_classes),
        "opt_generator": (state.opt_generator.state_dict()
                          if state.opt_generator else None),
        "opt_discriminator": (state.opt_discriminator.state_dict()
                              if state.opt_discriminator else None),
        "rng_augment": state.rng_augment.get_state(),
        "rng_noise": state.rng_noise.get_state(),
    })
    torch.save(payload, str(path))


def load_checkpoint(path: Path | str,
                    cfg: Optional[TrainConfig] = None) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(str(path), weights_only=False)
    except (RuntimeError, EOFError, io.UnsupportedOperation,
            pickle.UnpicklingError) as exc:
        raise DataError(f"corrupt checkpoint file: {path} ({exc})") from exc
    if not isinstance(payload, dict) or "phase" not in payload:
        raise DataError(f"corrupt checkpoint file: {path} (missing fields)")
    bundle = bundle_from_payload(payload)
    rng_augment = torch.Generator()
    rng_augment.set_state(payload["rng_augment"])
    rng_noise = torch.Generator()
    rng_noise.set_state(payload["rng_noise"])
    state = TrainState(bundle, payload["phase"], payload["iteration"],
                       None, None, rng_augment, rng_noise,
                       tuple(payload["generator_classes"]))
    if cfg is not None and state.generator_classes:
        opt_gen, opt_disc = _make_optimizers(bundle, cfg,
                                             state.generator_classes)
        if payload["opt_generator"] is not None:
            opt_gen.load_state_dict(payload["opt_generator"])
        if payload["opt_discriminator"] is not None:
            opt_disc.load_state_dict(payload["opt_discriminator"])
        state.opt_generator, state.opt_discriminator = opt_gen, opt_disc
    return state
