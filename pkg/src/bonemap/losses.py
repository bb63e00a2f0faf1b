"""Segmentation losses with exact analytic gradients with respect to logits.

Five kinds: distance-map-penalized cross entropy, plain cross entropy, soft
Dice, focal, and confidence-penalized cross entropy.  Every function returns
both the scalar value and the full per-voxel, per-channel gradient; the
gradients are differentiated through the same epsilon clamp that guards the
logs, so finite differences of the reported value reproduce them.

Values are means over voxels, so magnitudes are independent of volume size;
batch averaging is the caller's concern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import ClassVolume, LabelVolume, one_hot
from .penalty import PenaltyMap

__all__ = [
    "LOSS_KINDS",
    "LossConfig",
    "LossInput",
    "LossOutcome",
    "softmax",
    "penalized_ce",
    "cross_entropy",
    "soft_dice",
    "focal",
    "confidence_penalty",
    "compute_loss",
]

LOSS_KINDS = ("penalized_ce", "cross_entropy", "soft_dice", "focal", "confidence_penalty")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "penalized_ce"
    gamma: float = 2.0      # focal modulation exponent
    beta: float = 0.1       # confidence-penalty weight
    epsilon: float = 1e-12  # log/denominator guard
    phi_scale: float = 1.0  # multiplies phi inside the (1 + phi) weight

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not (0 < self.epsilon < 1e-3):
            raise ValueError(f"epsilon out of range: {self.epsilon}")
        if self.phi_scale <= 0:
            raise ValueError(f"phi_scale must be > 0, got {self.phi_scale}")


@dataclass(frozen=True)
class LossInput:
    logits: ClassVolume
    target: LabelVolume
    phi: PenaltyMap | None = None

    def __post_init__(self):
        if self.logits.shape != self.target.shape:
            raise ValueError(f"shape mismatch: logits {self.logits.shape} vs target {self.target.shape}")
        if self.logits.num_classes != self.target.num_classes:
            raise ValueError(
                f"class count mismatch: logits K={self.logits.num_classes}, "
                f"target K={self.target.num_classes}"
            )
        if self.phi is not None and self.phi.phi.shape != self.target.shape:
            raise ValueError("penalty map shape does not match target")


@dataclass(frozen=True)
class LossOutcome:
    value: float
    grad: ClassVolume
    vacuous_classes: frozenset[int] = field(default_factory=frozenset)


def softmax(logits: ClassVolume) -> ClassVolume:
    """Per-voxel softmax over channels, stabilized by max subtraction."""
    return ClassVolume(logits.shape, logits.num_classes, _softmax_raw(logits.data))


def _softmax_raw(z: np.ndarray) -> np.ndarray:
    p = z - z.max(axis=0, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=0, keepdims=True)
    return p


def _target_probs(p: np.ndarray, target: LabelVolume) -> np.ndarray:
    idx = target.labels.astype(np.intp)[None]
    return np.take_along_axis(p, idx, axis=0)[0]


def _chain_softmax(p: np.ndarray, dldp: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back through the softmax."""
    dot = (dldp * p).sum(axis=0, keepdims=True)
    return p * (dldp - dot)


def _weighted_ce(inp: LossInput, weight: np.ndarray, epsilon: float) -> LossOutcome:
    """Cross entropy with a per-voxel weight; the shared core of the CE family.

    value = mean_i w_i * (-log p_target(i)),  grad = w_i * (p - y) / N,
    except on voxels where the target probability sits below the epsilon
    clamp: there the value is a constant and the gradient vanishes.
    """
    p = _softmax_raw(inp.logits.data)
    pt = _target_probs(p, inp.target)
    unclamped = pt >= epsilon
    n = inp.target.shape.numel
    value = float((weight * -np.log(np.maximum(pt, epsilon))).sum() / n)
    grad = p  # softmax buffer is ours; turn it into (p - y) * w / n in place
    idx = inp.target.labels.astype(np.intp)[None]
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=0) - 1.0, axis=0)
    grad *= ((weight * unclamped) / n)[None]
    return LossOutcome(value, ClassVolume(inp.logits.shape, inp.logits.num_classes, grad))


def cross_entropy(inp: LossInput, *, epsilon: float = 1e-12) -> LossOutcome:
    """Plain multi-class cross entropy, mean over voxels."""
    return _weighted_ce(inp, np.ones(inp.target.shape.zyx), epsilon)


def penalized_ce(inp: LossInput, *, epsilon: float = 1e-12, phi_scale: float = 1.0) -> LossOutcome:
    """Cross entropy weighted per voxel by (1 + phi).

    The weight multiplies both the per-voxel value and its gradient, so the
    gradient is elementwise (1 + phi) times the plain-CE gradient; the +1
    keeps a full CE gradient alive even where phi is zero.
    """
    if inp.phi is None:
        raise ValueError("penalized cross entropy requires a penalty map")
    weight = 1.0 + phi_scale * inp.phi.phi.data
    return _weighted_ce(inp, weight, epsilon)


def soft_dice(inp: LossInput, *, epsilon: float = 1e-12) -> LossOutcome:
    """One minus the mean soft Dice over foreground classes.

    Per class: 2*sum(p*g) / (sum(p^2) + sum(g^2) + epsilon) with p the softmax
    channel and g the one-hot target.  A class with no target voxels and no
    probability mass scores 1 (vacuous agreement) and contributes no gradient.
    """
    k = inp.logits.num_classes
    p = _softmax_raw(inp.logits.data)
    g = one_hot(inp.target).data
    m = k - 1
    dldp = np.zeros_like(p)
    dice_sum = 0.0
    vacuous = set()
    for c in range(1, k):
        pc, gc = p[c], g[c]
        sum_p2 = float((pc * pc).sum())
        sum_g2 = float((gc * gc).sum())
        if sum_p2 == 0.0 and sum_g2 == 0.0:
            vacuous.add(c)
            dice_sum += 1.0
            continue
        num = 2.0 * float((pc * gc).sum())
        den = sum_p2 + sum_g2 + epsilon
        dice = num / den
        dice_sum += dice
        dldp[c] = -(2.0 * gc - 2.0 * pc * dice) / (den * m)
    value = 1.0 - dice_sum / m
    grad = _chain_softmax(p, dldp)
    return LossOutcome(
        value, ClassVolume(inp.logits.shape, inp.logits.num_classes, grad), frozenset(vacuous)
    )


def focal(inp: LossInput, gamma: float = 2.0, *, epsilon: float = 1e-12) -> LossOutcome:
    """Cross entropy modulated per voxel by (1 - p_target)^gamma."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if gamma == 0.0:
        return cross_entropy(inp, epsilon=epsilon)
    p = _softmax_raw(inp.logits.data)
    pt = _target_probs(p, inp.target)
    n = inp.target.shape.numel
    one_minus = np.maximum(1.0 - pt, 0.0)
    logpt = np.log(np.maximum(pt, epsilon))
    value = float((-(one_minus**gamma) * logpt).sum() / n)
    # d/dp [-(1-p)^g log p~]; the modulating factor always differentiates, the
    # log only where it is not clamped.  (1-p)^(g-1) is guarded at p = 1.
    om_safe = np.where(one_minus > 0.0, one_minus, 1.0)
    mod_term = np.where(one_minus > 0.0, gamma * om_safe ** (gamma - 1.0) * logpt, 0.0)
    log_term = np.where(pt >= epsilon, one_minus**gamma / np.maximum(pt, epsilon), 0.0)
    dldpt = (mod_term - log_term) / n
    dldp = np.zeros_like(p)
    idx = inp.target.labels.astype(np.intp)[None]
    np.put_along_axis(dldp, idx, dldpt[None], axis=0)
    grad = _chain_softmax(p, dldp)
    return LossOutcome(value, ClassVolume(inp.logits.shape, inp.logits.num_classes, grad))


def confidence_penalty(inp: LossInput, beta: float = 0.1, *, epsilon: float = 1e-12) -> LossOutcome:
    """Cross entropy minus beta times the per-voxel prediction entropy."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    ce = cross_entropy(inp, epsilon=epsilon)
    if beta == 0.0:
        return ce
    p = _softmax_raw(inp.logits.data)
    n = inp.target.shape.numel
    logp = np.log(np.maximum(p, epsilon))
    entropy = -(p * logp).sum(axis=0)
    value = ce.value - beta * float(entropy.sum() / n)
    # d(-H)/dp = log p~ + [p unclamped], then back through the softmax
    dldp = beta * (logp + (p >= epsilon)) / n
    grad = ce.grad.data + _chain_softmax(p, dldp)
    return LossOutcome(value, ClassVolume(inp.logits.shape, inp.logits.num_classes, grad))


def compute_loss(inp: LossInput, cfg: LossConfig) -> LossOutcome:
    """Dispatch on the configured loss kind."""
    if cfg.kind == "penalized_ce":
        return penalized_ce(inp, epsilon=cfg.epsilon, phi_scale=cfg.phi_scale)
    if cfg.kind == "cross_entropy":
        return cross_entropy(inp, epsilon=cfg.epsilon)
    if cfg.kind == "soft_dice":
        return soft_dice(inp, epsilon=cfg.epsilon)
    if cfg.kind == "focal":
        return focal(inp, cfg.gamma, epsilon=cfg.epsilon)
    if cfg.kind == "confidence_penalty":
        return confidence_penalty(inp, cfg.beta, epsilon=cfg.epsilon)
    raise ValueError(f"unknown loss kind {cfg.kind!r}")
