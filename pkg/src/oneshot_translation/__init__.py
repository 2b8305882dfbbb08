"""One-shot unsupervised image-to-image translation.

Train a variational adversarial autoencoder on the target domain, clone it
into a weight-sharing dual autoencoder, and fine-tune on a single source
image with selective backpropagation so the shared core is never directly
updated by the one-shot sample.
"""

from .data import (AugmentationSpec, DomainDataset, ImageBatch, augment,
                   draw_one_shot, load_domain)
from .gating import (GateRule, audit_gates, default_gate_rules, translate_aa,
                     translate_ab, translate_ba, translate_bb)
from .evaluation import (perceptual_distance, run_ablation_grid,
                         run_sample_sweep, style_difference,
                         train_classifier, translation_accuracy)
from .losses import LossWeights
from .networks import NetSpec, SharedDualAutoencoder, build
from .training import (AblationToggles, TrainConfig, TrainState,
                       clone_for_phase2, load_checkpoint, save_checkpoint,
                       train_phase1, train_phase2, translate)

__version__ = "0.1.0"

__all__ = [
    "AblationToggles", "AugmentationSpec", "DomainDataset", "GateRule",
    "ImageBatch", "LossWeights", "NetSpec", "SharedDualAutoencoder",
    "TrainConfig", "TrainState", "audit_gates", "augment", "build",
    "clone_for_phase2", "default_gate_rules", "draw_one_shot",
    "load_checkpoint", "load_domain", "perceptual_distance",
    "run_ablation_grid", "run_sample_sweep", "save_checkpoint",
    "style_difference", "train_classifier", "train_phase1", "train_phase2",
    "translate", "translate_aa", "translate_ab", "translate_ba",
    "translate_bb", "translation_accuracy",
]
