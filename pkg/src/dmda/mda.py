"""Micro-level distribution alignment losses and the reversal schedule.

Per-domain experts predict latent semantics from pruned features; the
feature+semantics sum is pushed through a gradient reversal gate into
the domain approximator. Minimizing the approximator's negative
log-likelihood trains it toward the optimal domain posterior while the
reversed gradient drives the extractor and experts toward alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, add, grl, scale, softmax_cross_entropy
from .nn import approximator_logits, forward_expert


@dataclass
class AlignmentBatch:
    """Pruned features, semantics, and their element-wise sum for one domain."""

    features: Tensor
    semantics: Tensor
    surrogate: Tensor
    domain_index: int


def mean_over(losses) -> Tensor:
    """Average a list of scalar loss tensors."""
    total = losses[0]
    for item in losses[1:]:
        total = add(total, item)
    return scale(total, 1.0 / len(losses))


def expert_loss(experts, phi_by_domain, labels_by_domain) -> Tensor:
    """Mean cross-entropy of each domain's expert first-layer logits.

    Domain i's batch is scored by expert i only; the result is the mean
    over domains of per-domain means.
    """
    if len(phi_by_domain) != len(labels_by_domain):
        raise ShapeError("expert_loss: feature and label batch counts differ")
    if len(phi_by_domain) > len(experts):
        raise ValueError(
            f"expert_loss: {len(phi_by_domain)} domain batches but only "
            f"{len(experts)} experts")
    losses = []
    for expert, phi, labels in zip(experts, phi_by_domain, labels_by_domain):
        logits1, _ = forward_expert(expert, phi)
        losses.append(softmax_cross_entropy(logits1, labels))
    return mean_over(losses)


def surrogate_joint(phi: Tensor, semantics: Tensor) -> Tensor:
    """Element-wise sum standing in for the feature/semantics joint."""
    return add(phi, semantics)


def mda_loss(approx, z_by_domain, domain_indices, lam: float,
             use_grl: bool = True) -> Tensor:
    """Negative log-likelihood of the true domain index under the approximator.

    Each surrogate batch passes through a gradient reversal gate with
    weight `lam` before the approximator, so one backward pass both
    sharpens the approximator and drives the upstream networks toward
    cross-domain alignment. With use_grl=False the gate is omitted and
    the gradient is the plain derivative of the returned scalar, which is
    what gradient checking and the dual-graph reversal test need.
    """
    if len(z_by_domain) != len(domain_indices):
        raise ShapeError("mda_loss: surrogate and index counts differ")
    n_domains = approx[-1].bias.shape[0]
    losses = []
    for z, idx in zip(z_by_domain, domain_indices):
        idx = int(idx)
        if not 0 <= idx < n_domains:
            raise ValueError(
                f"mda_loss: domain index {idx} out of range [0, {n_domains})")
        logits = approximator_logits(approx, grl(z, lam) if use_grl else z)
        labels = np.full(z.shape[0], idx, dtype=np.int64)
        losses.append(softmax_cross_entropy(logits, labels))
    return mean_over(losses)


def grl_lambda(p: float) -> float:
    """Reversal weight schedule: 0 at the start, saturating toward 1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"grl_lambda: progress must be in [0, 1], got {p}")
    return 2.0 / (1.0 + np.exp(-10.0 * p)) - 1.0
