"""Selective backpropagation: cross-domain compositions and the gate audit.

The four compositions run the shared core with detached parameters, so the
forward value is identical to the plain composition but no gradient reaches
the shared class. The audit evaluates each loss and verifies, exactly, that
frozen parameter classes receive zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Sequence

import torch

from .errors import AuditError
from .networks import (DISCRIMINATOR, PARTITION_CLASSES, SHARED, UNSHARED_A,
                       UNSHARED_B, SharedDualAutoencoder)


def compose(bundle: SharedDualAutoencoder, batch, encoder_side: str,
            decoder_side: str, selective: bool = True,
            update_stats: bool = False) -> torch.Tensor:
    """Encode with one side, decode with another, shared core detached.

    selective=False removes the detachment (ablation only). Batch-norm
    running statistics are never updated on these paths; they belong to the
    domain-B batches.
    """
    code = bundle.encode(batch, encoder_side, detach_shared=selective,
                         update_stats=update_stats)
    return bundle.decode(code, decoder_side, detach_shared=selective,
                         update_stats=update_stats)


def translate_ab(bundle, batch, selective: bool = True) -> torch.Tensor:
    return compose(bundle, batch, "A", "B", selective)


def translate_aa(bundle, batch, selective: bool = True) -> torch.Tensor:
    return compose(bundle, batch, "A", "A", selective)


def translate_ba(bundle, batch, selective: bool = True) -> torch.Tensor:
    return compose(bundle, batch, "B", "A", selective)


def translate_bb(bundle, batch, selective: bool = True) -> torch.Tensor:
    return compose(bundle, batch, "B", "B", selective)


DIRECTIONS: Dict[str, Callable] = {
    "AB": translate_ab,
    "AA": translate_aa,
    "BA": translate_ba,
    "BB": translate_bb,
}


@dataclass(frozen=True)
class GateRule:
    """Which parameter classes a named loss is allowed to update."""

    loss_name: str
    updates: frozenset

    @staticmethod
    def of(loss_name: str, *classes: str) -> "GateRule":
        unknown = set(classes) - set(PARTITION_CLASSES)
        if unknown:
            raise ValueError(f"unknown partition classes {sorted(unknown)}")
        return GateRule(loss_name, frozenset(classes))


def default_gate_rules(phase: int, selective: bool = True,
                       two_way_cycle: bool = False) -> list[GateRule]:
    """The rule table covering every loss used in the given phase."""
    rules = [
        GateRule.of("rec_b", SHARED, UNSHARED_B),
        GateRule.of("kl_b", SHARED, UNSHARED_B),
        GateRule.of("gan_b_generator", SHARED, UNSHARED_B),
        GateRule.of("gan_b_discriminator", DISCRIMINATOR),
    ]
    if phase == 2:
        x_classes = ([UNSHARED_A, UNSHARED_B] if selective
                     else [UNSHARED_A, UNSHARED_B, SHARED])
        rec_a_classes = [UNSHARED_A] if selective else [UNSHARED_A, SHARED]
        rules += [
            GateRule.of("rec_a", *rec_a_classes),
            GateRule.of("cycle", *x_classes),
            GateRule.of("gan_ab_generator", *x_classes),
            GateRule.of("gan_ab_discriminator", DISCRIMINATOR),
        ]
        if two_way_cycle:
            rules.append(GateRule.of("cycle_reverse", *x_classes))
    return rules


def audit_gates(bundle: SharedDualAutoencoder, rules: Sequence[GateRule],
                loss_fns: Mapping[str, Callable[[], torch.Tensor]]) -> dict:
    """Evaluate each loss once and report max |gradient| per parameter class.

    Classes outside a rule's `updates` set must receive exactly zero
    gradient; any violation is listed with the offending parameter names.
    The report is JSON-serializable.
    """
    rule_names = {rule.loss_name for rule in rules}
    missing = set(loss_fns) - rule_names
    if missing:
        raise ValueError(f"losses without a gate rule: {sorted(missing)}")
    partition = bundle.partition()
    report: dict = {"passed": True, "losses": {}, "violations": []}
    for rule in rules:
        if rule.loss_name not in loss_fns:
            continue
        bundle.zero_grad(set_to_none=True)
        loss = loss_fns[rule.loss_name]()
        loss.backward()
        per_class = {cls: 0.0 for cls in PARTITION_CLASSES}
        offenders = []
        for name, p in bundle.named_parameters():
            grad_max = 0.0 if p.grad is None else p.grad.abs().max().item()
            cls = partition[name]
            per_class[cls] = max(per_class[cls], grad_max)
            if grad_max != 0.0 and cls not in rule.updates:
                offenders.append(name)
        report["losses"][rule.loss_name] = per_class
        if offenders:
            report["passed"] = False
            report["violations"].append({
                "loss": rule.loss_name,
                "parameters": offenders,
            })
    bundle.zero_grad(set_to_none=True)
    return report


def require_audit_pass(report: dict) -> None:
    if not report["passed"]:
        detail = "; ".join(
            f"{v['loss']}: {', '.join(v['parameters'][:5])}"
            + ("..." if len(v["parameters"]) > 5 else "")
            for v in report["violations"])
        raise AuditError(f"gradient leaked into frozen classes ({detail})")
