"""Training and adversarial objectives for the three AT frameworks, with and without HE.

Training objectives (x* is the crafted example, z / z* the matching features):

=========  ====================================================================
pgd-at     CE(f(x*), y)
alp        a CE(f(x), y) + (1 - a) CE(f(x*), y) + lam * |W^T (z - z*)|
trades     CE(f(x), y) + lam * CE(f(x*), f(x))
=========  ====================================================================

With an HE head (``he`` / ``m-he``) every CE against a label becomes the
scaled margin loss, ALP pairs the normalized logits, and the TRADES robust term
compares the unscaled ``softmax(cos theta)`` distributions.

The adversarial objective of each row is CE against the label (pgd-at, alp) or
against the frozen clean prediction (trades), always on the head's raw scores.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .spherehead import (HeadConfig, _bound, extract_features, fn_normalize, head_logits,
                         softmax, wn_normalize)

KINDS = ("ce-vs-label", "ce-vs-prediction", "margin-ce", "cw-inf", "pairing-norm",
         "composite-pgdat", "composite-alp", "composite-trades")
COMPOSITE = {"pgd-at": "composite-pgdat", "alp": "composite-alp", "trades": "composite-trades"}
_ADV_KIND = {"composite-pgdat": "ce-vs-label", "composite-alp": "ce-vs-label",
             "composite-trades": "ce-vs-prediction"}
_MASK = 1e30


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "composite-pgdat"
    head: HeadConfig = HeadConfig()
    alpha: float = 0.5
    lam: float = 0.5
    fn_in_objective: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown objective kind {self.kind!r}")
        if not 0 <= self.alpha <= 1:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ContractError(f"lambda must be non-negative, got {self.lam}")

    @property
    def adversarial_kind(self) -> str:
        return _ADV_KIND.get(self.kind, self.kind)


def for_framework(framework: str, head: HeadConfig, alpha: float = 0.5, lam: float | None = None) -> ObjectiveSpec:
    """Default ObjectiveSpec of a framework (ALP lam 0.5, TRADES lam 6)."""
    if framework in ("standard", "free-at", "fast-at"):
        framework = "pgd-at"
    if lam is None:
        lam = 6.0 if framework == "trades" else 0.5
    return ObjectiveSpec(COMPOSITE[framework], head, alpha, lam)


def _reduce(per_example: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return dc.mean(per_example)
    if reduction == "sum":
        return dc.tsum(per_example)
    if reduction == "none":
        return per_example
    raise ContractError(f"unknown reduction {reduction!r}")


def _labels(y, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,) or not np.issubdtype(y.dtype, np.integer):
        raise ContractError(f"labels must be {n_rows} integers, got shape {y.shape} dtype {y.dtype}")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ContractError(f"label out of range [0, {n_classes})")
    return y


def ce_loss(logits, y, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``softmax(logits)`` against integer labels."""
    logits = dc._lift(logits, "ce_loss")
    y = _labels(y, logits.shape[0], logits.shape[1])
    return _reduce(-dc.pick(dc.log_softmax(logits, axis=1), y), reduction)


def ce_between(adv_logits, clean_probs, reduction: str = "mean", detach_target: bool = False) -> Tensor:
    """Soft-label CE ``-sum_i p_i log q_i`` with q = softmax(adv_logits), p = clean_probs.

    ``clean_probs`` may be a tensor (gradient flows into it) or a plain array;
    ``detach_target`` freezes it either way.
    """
    adv_logits = dc._lift(adv_logits, "ce_between")
    p = clean_probs.data if isinstance(clean_probs, Tensor) else np.asarray(clean_probs, float)
    if p.shape != adv_logits.shape:
        raise ContractError(f"ce_between: shapes {adv_logits.shape} and {p.shape} differ")
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-9):
        raise ContractError("ce_between: target rows are not probability vectors")
    target = dc.constant(p) if detach_target or not isinstance(clean_probs, Tensor) else clean_probs
    per = -dc.tsum(target * dc.log_softmax(adv_logits, axis=1), axis=1)
    return _reduce(per, reduction)


def margin_logits(raw_scores, y, s: float, m: float) -> Tensor:
    raw_scores = dc._lift(raw_scores, "margin_ce_loss")
    y = _labels(y, raw_scores.shape[0], raw_scores.shape[1])
    onehot = np.eye(raw_scores.shape[1])[y]
    return s * (raw_scores - m * onehot)


def margin_ce_loss(raw_scores, y, s: float, m: float, mode: str | None = None,
                   reduction: str = "mean") -> Tensor:
    """CE of ``softmax(s * (scores - m * onehot(y)))`` against y.

    ``raw_scores`` are cosines (he head) or negative angles (m-he head).
    """
    if mode is not None and mode not in ("he", "m-he"):
        raise ContractError(f"margin loss needs an he or m-he head, got {mode!r}")
    if not s > 0 or m < 0:
        raise ContractError(f"need s > 0 and m >= 0, got s={s}, m={m}")
    return ce_loss(margin_logits(raw_scores, y, s, m), y, reduction)


def pairing_norm(W_eff, z_clean, z_adv, reduction: str = "mean") -> Tensor:
    """Batch mean of ``|W^T (z - z*)|_2``."""
    W_eff, z_clean, z_adv = (dc._lift(t, "pairing_norm") for t in (W_eff, z_clean, z_adv))
    if z_clean.shape != z_adv.shape or z_clean.shape[1] != W_eff.shape[0]:
        raise ContractError(f"pairing_norm: shapes {W_eff.shape}, {z_clean.shape}, {z_adv.shape} do not conform")
    return _reduce(dc.l2norm((z_clean - z_adv) @ W_eff, axis=1), reduction)


def cw_inf_objective(logits, y, reduction: str = "mean") -> Tensor:
    """Hinge ``max(Z_y - max_{i != y} Z_i, 0)``; zero once misclassified or tied."""
    logits = dc._lift(logits, "cw_inf_objective")
    y = _labels(y, logits.shape[0], logits.shape[1])
    onehot = np.eye(logits.shape[1])[y]
    runner_up = dc.tmax(logits - _MASK * onehot, axis=1)
    return _reduce(dc.relu(dc.pick(logits, y) - runner_up), reduction)


def logit_margin(logits, y) -> Tensor:
    """Per-example ``Z_y - max_{i != y} Z_i`` (the black-box attack score)."""
    logits = dc._lift(logits, "logit_margin")
    y = _labels(y, logits.shape[0], logits.shape[1])
    onehot = np.eye(logits.shape[1])[y]
    return dc.pick(logits, y) - dc.tmax(logits - _MASK * onehot, axis=1)


def _label_loss(head: HeadConfig, raw, y, reduction="mean") -> Tensor:
    if head.hypersphere:
        return margin_ce_loss(raw, y, head.s, head.m, head.mode, reduction)
    return ce_loss(raw, y, reduction)


def training_loss(spec: ObjectiveSpec, params, x_clean, x_adv, y) -> Tensor:
    """Scalar training objective of the selected framework row."""
    if spec.kind not in _ADV_KIND:
        raise ContractError(f"training_loss needs a composite kind, got {spec.kind!r}")
    P = _bound(params)
    head = spec.head
    z_adv = extract_features(P, x_adv)
    raw_adv = head_logits(P, head, z_adv)
    if spec.kind == "composite-pgdat":
        return _label_loss(head, raw_adv, y)

    z_clean = extract_features(P, x_clean)
    raw_clean = head_logits(P, head, z_clean)
    if spec.kind == "composite-alp":
        loss = spec.alpha * _label_loss(head, raw_clean, y) + (1 - spec.alpha) * _label_loss(head, raw_adv, y)
        if spec.lam:
            if head.hypersphere:
                pair = pairing_norm(wn_normalize(P.W), fn_normalize(z_clean), fn_normalize(z_adv))
            else:
                pair = pairing_norm(P.W, z_clean, z_adv)
            loss = loss + spec.lam * pair
        return loss

    loss = _label_loss(head, raw_clean, y)
    if spec.lam:
        clean_probs = dc.exp(dc.log_softmax(raw_clean, axis=1))
        loss = loss + spec.lam * ce_between(raw_adv, clean_probs)
    return loss


def adversarial_scores(spec: ObjectiveSpec, params, x) -> Tensor:
    """Scores the adversary sees; with ``fn_in_objective`` a standard head is read through FN."""
    P = _bound(params)
    head = spec.head
    if spec.fn_in_objective:
        if head.mode != "standard":
            raise ContractError("fn_in_objective applies to standard heads only")
        head = replace(head, mode="fn-only")
    return head_logits(P, head, extract_features(P, x))


def clean_target(spec: ObjectiveSpec, params, x_clean) -> np.ndarray:
    """Frozen clean prediction used by the TRADES adversarial objective."""
    return softmax(adversarial_scores(spec, params, x_clean).data)


def adversarial_loss(spec: ObjectiveSpec, params, x_candidate, x_clean, y,
                     reduction: str = "mean", target: np.ndarray | None = None) -> Tensor:
    """Objective the attacks maximize, differentiable in ``x_candidate``.

    ``margin-ce`` is the adaptive variant that re-inserts the head's s and m.
    ``cw-inf`` is negated so that maximizing it drives the hinge to zero.
    """
    kind = spec.adversarial_kind
    raw = adversarial_scores(spec, params, x_candidate)
    if kind == "ce-vs-label":
        return ce_loss(raw, y, reduction)
    if kind == "ce-vs-prediction":
        if target is None:
            target = clean_target(spec, params, x_clean)
        return ce_between(raw, target, reduction, detach_target=True)
    if kind == "margin-ce":
        return ce_loss(margin_logits(raw, y, spec.head.s, spec.head.m), y, reduction)
    if kind == "cw-inf":
        return -cw_inf_objective(raw, y, reduction)
    raise ContractError(f"{kind!r} is not an adversarial objective")
