"""Training losses for the knowledge-transfer and domain-adaptation stages.

The similarity kernel ``sim(u, v) = exp(cos(u, v) / tau)`` is never
exponentiated: every contrastive ratio is evaluated in log space.  With the
default ``tau = 1e-6`` the kernel itself would overflow any float format, and
the contrastive loss degenerates to a hard-max margin indicator (close to
zero when the positive wins, very large when a negative wins).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

NEGATIVE_MODES = ("others", "all", "other_kinds")


@dataclass(frozen=True)
class WeightSchedule:
    initial: float
    decay: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")

    def value(self, epoch: int) -> float:
        return schedule_value(self.initial, self.decay, epoch)


def schedule_value(initial: float, decay: float, epoch: int) -> float:
    """``initial * decay ** epoch``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return initial * decay ** epoch


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.5
    alpha2: float = 0.1
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (value >= 0.0 and value < float("inf")):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


# --------------------------------------------------------------------------
# similarity kernel and contrastive losses
# --------------------------------------------------------------------------

def _unit(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError(f"{name} contains a zero-norm vector")
    return x / norms


def log_sim(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """Log of the similarity kernel, ``cos(u, v) / tau``.

    Broadcasts over leading dimensions; the last dimension is the feature axis.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return (_unit(u, "u") * _unit(v, "v")).sum(-1) / tau


def pairwise_log_sim(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """``(n, d) x (m, d) -> (n, m)`` matrix of ``cos / tau``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return _unit(a, "anchors") @ _unit(b, "candidates").transpose(-1, -2) / tau


def _ratio_loss(log_pos: torch.Tensor, log_neg: torch.Tensor) -> torch.Tensor:
    # -log(P / (P + N)) = log(1 + N / P) = softplus(log N - log P)
    diff = log_neg - log_pos
    return torch.logaddexp(torch.zeros_like(diff), diff)


def contrastive(anchor, positive, negatives, tau: float) -> torch.Tensor:
    """Single-positive contrastive loss.

    ``anchor`` and ``positive`` are ``(d,)`` vectors, ``negatives`` is
    ``(q, d)`` with ``q >= 1``.
    """
    negatives = torch.atleast_2d(negatives)
    if negatives.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one negative")
    s_pos = log_sim(anchor, positive, tau)
    s_neg = log_sim(anchor.unsqueeze(0), negatives, tau)
    return _ratio_loss(s_pos, torch.logsumexp(s_neg, dim=0))


def extended_contrastive(anchor, positives, negatives, tau: float) -> torch.Tensor:
    """Contrastive loss with a set of weakly correlated positives ``(p, d)``."""
    positives = torch.atleast_2d(positives)
    negatives = torch.atleast_2d(negatives)
    if positives.shape[0] == 0:
        raise ValueError("extended contrastive loss needs at least one positive")
    if negatives.shape[0] == 0:
        raise ValueError("extended contrastive loss needs at least one negative")
    s_pos = log_sim(anchor.unsqueeze(0), positives, tau)
    s_neg = log_sim(anchor.unsqueeze(0), negatives, tau)
    return _ratio_loss(torch.logsumexp(s_pos, dim=0), torch.logsumexp(s_neg, dim=0))


def negative_mask(b: int, kinds=None, mode: str = "others", device=None) -> torch.Tensor:
    """Boolean ``(b, b)`` mask; entry ``[i, q]`` admits sample ``q`` as a negative of anchor ``i``.

    ``others`` drops the anchor's own sample, ``all`` keeps the literal batch,
    ``other_kinds`` keeps only samples of a different degradation kind.
    """
    if mode == "all":
        return torch.ones(b, b, dtype=torch.bool, device=device)
    if mode == "others":
        return ~torch.eye(b, dtype=torch.bool, device=device)
    if mode == "other_kinds":
        if kinds is None:
            raise ValueError("negative mode 'other_kinds' needs per-sample kinds")
        k = torch.as_tensor(kinds, device=device)
        return k.view(-1, 1) != k.view(1, -1)
    raise ValueError(f"unknown negative mode {mode!r}; choose from {NEGATIVE_MODES}")


def batch_contrastive(anchors, positives, negatives, tau: float, mask: torch.Tensor,
                      paired_positives: bool = True) -> torch.Tensor:
    """Mean contrastive loss over a batch of anchors.

    ``paired_positives=True``: anchor ``i`` uses ``positives[i]`` (single
    positive).  ``False``: every anchor uses the whole ``positives`` set.
    Negatives for anchor ``i`` are ``negatives[q]`` where ``mask[i, q]``.
    """
    if not bool(mask.any(dim=1).all()):
        raise ValueError("every anchor needs at least one negative")
    s_neg = pairwise_log_sim(anchors, negatives, tau).masked_fill(~mask, float("-inf"))
    log_neg = torch.logsumexp(s_neg, dim=1)
    if paired_positives:
        if positives.shape[0] != anchors.shape[0]:
            raise ValueError("paired positives must match the anchor count")
        log_pos = log_sim(anchors, positives, tau)
    else:
        log_pos = torch.logsumexp(pairwise_log_sim(anchors, positives, tau), dim=1)
    return _ratio_loss(log_pos, log_neg).mean()


# --------------------------------------------------------------------------
# reconstruction and adversarial terms
# --------------------------------------------------------------------------

def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference (student vs teacher restorations)."""
    _same_shape(a, b)
    return (a - b).abs().mean()


def identity_loss(restored_clear: torch.Tensor, clear: torch.Tensor) -> torch.Tensor:
    """Mean absolute change the restorer applies to already-clear images."""
    _same_shape(restored_clear, clear)
    return (restored_clear - clear).abs().mean()


def gan_losses(d_fake: torch.Tensor, d_real: torch.Tensor):
    """Least-squares adversarial terms ``(L_D, L_G)``.

    Callers detach the fake batch for ``L_D`` and re-run the discriminator on
    the live fake batch for ``L_G``; this helper simply evaluates both from
    the given score maps.
    """
    loss_d = (d_fake ** 2).mean() + ((d_real - 1.0) ** 2).mean()
    loss_g = ((d_fake - 1.0) ** 2).mean()
    return loss_d, loss_g


def discriminator_loss(d_fake, d_real) -> torch.Tensor:
    return gan_losses(d_fake, d_real)[0]


def generator_loss(d_fake) -> torch.Tensor:
    return ((d_fake - 1.0) ** 2).mean()


# --------------------------------------------------------------------------
# multi-grained contrastive losses
# --------------------------------------------------------------------------

class MGCLTerms(NamedTuple):
    feature: torch.Tensor
    image: torch.Tensor
    total: torch.Tensor


def mgcl(student_features, teacher_features, student_phi, teacher_phi, degraded_phi,
         alpha1: float, tau: float, kinds=None, teacher_kinds=None,
         negatives: str = "others") -> MGCLTerms:
    """Multi-grained contrastive loss for the knowledge-transfer stage.

    All arguments are pooled ``(b, d)`` vectors.  Feature grain: anchor =
    student feature, positive = teacher feature, negatives = student features
    of the other batch members.  Image grain: anchor = phi(student restored),
    positive = phi(teacher restored), negatives = phi(degraded input) of the
    other batch members.  Returns ``(L_fg, L_ig, L_ig + alpha1 * L_fg)``.
    """
    if teacher_kinds is not None and kinds is not None:
        if not torch.equal(torch.as_tensor(kinds), torch.as_tensor(teacher_kinds)):
            raise ValueError("teacher outputs are not routed by each sample's degradation kind")
    b = student_features.shape[0]
    mask = negative_mask(b, kinds, negatives, device=student_features.device)
    l_fg = batch_contrastive(student_features, teacher_features, student_features, tau, mask)
    l_ig = batch_contrastive(student_phi, teacher_phi, degraded_phi, tau, mask)
    return MGCLTerms(l_fg, l_ig, l_ig + alpha1 * l_fg)


def ex_mgcl(degraded_features, clear_features, restored_phi, restored_clear_phi, degraded_phi,
            lambda1: float, tau: float, kinds=None, negatives: str = "others") -> MGCLTerms:
    """Extended multi-grained contrastive loss for the domain-adaptation stage.

    Feature grain: anchor = student feature of a real degraded image,
    positives = student features of the whole clear batch, negatives =
    student features of the other degraded batch members.  Image grain:
    anchor = phi(restored degraded), positives = phi(restored clear) for the
    whole clear batch, negatives = phi(real degraded input) of the other
    batch members.
    """
    if degraded_features.shape[0] != clear_features.shape[0]:
        raise ValueError(
            f"degraded batch ({degraded_features.shape[0]}) and clear batch "
            f"({clear_features.shape[0]}) must have the same size")
    b = degraded_features.shape[0]
    mask = negative_mask(b, kinds, negatives, device=degraded_features.device)
    l_efg = batch_contrastive(degraded_features, clear_features, degraded_features, tau, mask,
                              paired_positives=False)
    l_eig = batch_contrastive(restored_phi, restored_clear_phi, degraded_phi, tau, mask,
                              paired_positives=False)
    return MGCLTerms(l_efg, l_eig, l_eig + lambda1 * l_efg)


def kt_total(l_pixel, l_m, alpha2: float):
    return l_pixel + alpha2 * l_m


def da_total(l_gan_g, l_idt, l_em, lambda2: float, lambda3: float):
    return l_gan_g + lambda2 * l_idt + lambda3 * l_em
