"""
Signed-gradient attacks on the depth network: FGSM, I-FGSM and MI-FGSM.

All three share one routine. Each step moves the image by ``step * sign(d)``
where ``d`` is the raw loss gradient (FGSM, I-FGSM) or the momentum
accumulator of L1-normalised gradients (MI-FGSM), then clips back into the
epsilon-ball around the clean image intersected with [0, 255].

``direction="ascend"`` maximises the loss (non-targeted: push predictions
away from ground truth); ``"descend"`` minimises it (targeted: pull the
masked region toward a chosen depth while holding the rest at the clean
prediction).

Losses are per-image mean squared errors, ``sum(w * (f(x) - y)**2)`` with
``w`` the validity mask divided by its count. Images in a batch are attacked
independently; the batch only amortises the forward/backward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError
from .metrics import MetricReport, mmd, ratio_report, rmse
from .models import depth_forward

METHODS = ("fgsm", "ifgsm", "mifgsm")
MODES = ("non-targeted", "targeted")
L1_FLOOR = 1e-12


def iteration_count(epsilon: float) -> int:
    """ceil(min(eps + 4, 1.25 * eps)), at least 1."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return max(1, math.ceil(min(epsilon + 4.0, 1.25 * epsilon)))


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16.0
    alpha: float = 1.0
    iterations: int | None = None
    momentum: float = 1.0
    mode: str = "non-targeted"
    target_depth: float = 100.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.momentum < 0:
            raise ValueError("momentum must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def steps(self) -> int:
        return self.iterations if self.iterations is not None else iteration_count(self.epsilon)


@dataclass(frozen=True)
class TargetSpec:
    mask: np.ndarray
    depth: float = 100.0

    def __post_init__(self):
        m = np.asarray(self.mask)
        if not np.isin(m, (0, 1)).all():
            raise ValueError("target mask must be binary")
        if not m.any():
            raise ValueError("target mask is empty")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    losses: np.ndarray  # (T + 1) x N, loss at every iterate including x_0 and x_T
    metrics: list = field(default_factory=list)  # MetricReport per image
    eval_clean_pred: np.ndarray | None = None  # predictions of the evaluating network
    eval_adv_pred: np.ndarray | None = None


def clip_to_ball(z, x, epsilon):
    """Elementwise min(max(z, x - eps, 0), x + eps, 255)."""
    lo = np.maximum(x - epsilon, 0.0)
    hi = np.minimum(x + epsilon, 255.0)
    return np.minimum(np.maximum(z, lo), hi)


def build_target_depth(clean_pred, spec: TargetSpec):
    """C on the mask, the clean prediction elsewhere."""
    m = np.asarray(spec.mask, dtype=np.float64)
    if not m.any():
        raise ValueError("target mask is empty")
    clean_pred = np.asarray(clean_pred, dtype=np.float64)
    if clean_pred.shape[-2:] != m.shape[-2:]:
        raise ValueError(f"mask {m.shape} does not match prediction {clean_pred.shape}")
    return spec.depth * m + clean_pred * (1.0 - m)


def least_likely_label(probs) -> np.ndarray:
    """Per-pixel argmin over the class axis (axis -3); ties go to the lowest class."""
    return np.argmin(np.asarray(probs), axis=-3)


def _as_batch(a, ndim):
    a = np.asarray(a, dtype=np.float64)
    return (a[None], True) if a.ndim == ndim else (a, False)


def per_image_weights(valid, n_images=None, shape=None):
    """Validity mask normalised to sum to one within each image."""
    if valid is None:
        w = np.ones((n_images,) + tuple(shape))
    else:
        w = np.asarray(valid, dtype=np.float64)
        if w.ndim == 2:
            w = np.broadcast_to(w, (n_images,) + w.shape)
    counts = w.reshape(w.shape[0], -1).sum(axis=1)
    if (counts <= 0).any():
        raise ValueError("every image needs at least one weighted pixel")
    return w / counts[:, None, None]


def _per_image_loss(pred, target, weight):
    d = pred - target
    return (weight * d * d).reshape(pred.shape[0], -1).sum(axis=1)


def signed_attack(
    net,
    x,
    y,
    *,
    steps: int,
    step_size: float,
    epsilon: float,
    momentum: float | None = None,
    direction: str = "ascend",
    valid=None,
    callback: Callable | None = None,
) -> AttackResult:
    """Shared iterate loop; ``momentum=None`` means plain sign steps."""
    if direction not in ("ascend", "descend"):
        raise ValueError("direction must be 'ascend' or 'descend'")
    x, single = _as_batch(x, 3)
    y, _ = _as_batch(y, 2)
    n = x.shape[0]
    if y.shape != (n,) + x.shape[2:]:
        raise ValueError(f"target shape {y.shape} does not match images {x.shape}")
    weight = per_image_weights(valid, n, x.shape[2:])
    sgn = 1.0 if direction == "ascend" else -1.0

    x_adv = x.copy()
    g = np.zeros_like(x)
    losses = []
    clean_pred = None
    for t in range(steps):
        _, grad, pred = net.loss_and_grad(x_adv, y, weight)
        if clean_pred is None:
            clean_pred = pred
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient at iteration {t}")
        losses.append(_per_image_loss(pred, y, weight))
        if momentum is None:
            d = np.sign(grad)
        else:
            l1 = np.abs(grad).reshape(n, -1).sum(axis=1)
            g = momentum * g + grad / np.maximum(l1, L1_FLOOR)[:, None, None, None]
            d = np.sign(g)
        x_adv = clip_to_ball(x_adv + sgn * step_size * d, x, epsilon)
        if callback is not None:
            callback(t + 1, x_adv[0] if single else x_adv)
    adv_pred = depth_forward(net, x_adv)[:, 0]
    losses.append(_per_image_loss(adv_pred, y, weight))
    if single:
        return AttackResult(x_adv[0], clean_pred[0], adv_pred[0], np.array(losses))
    return AttackResult(x_adv, clean_pred, adv_pred, np.array(losses))


def fgsm(net, x, y, cfg: AttackConfig = AttackConfig(), direction="ascend", valid=None, callback=None):
    """One step of size epsilon along the gradient sign."""
    return signed_attack(
        net, x, y, steps=1, step_size=cfg.epsilon, epsilon=cfg.epsilon,
        direction=direction, valid=valid, callback=callback,
    )


def ifgsm(net, x, y, cfg: AttackConfig = AttackConfig(), direction="ascend", valid=None, callback=None):
    return signed_attack(
        net, x, y, steps=cfg.steps, step_size=cfg.alpha, epsilon=cfg.epsilon,
        direction=direction, valid=valid, callback=callback,
    )


def mifgsm(net, x, y, cfg: AttackConfig = AttackConfig(), direction="ascend", valid=None, callback=None):
    """I-FGSM on the sign of ``g <- mu * g + grad / ||grad||_1``, with ``g`` starting at 0."""
    return signed_attack(
        net, x, y, steps=cfg.steps, step_size=cfg.alpha, epsilon=cfg.epsilon,
        momentum=cfg.momentum, direction=direction, valid=valid, callback=callback,
    )


ATTACKS = {"fgsm": fgsm, "ifgsm": ifgsm, "mifgsm": mifgsm}


def non_targeted(method, net, x, gt, valid, cfg=AttackConfig(), eval_net=None, callback=None) -> AttackResult:
    """Maximise depth error against sparse ground truth; metrics use ``eval_net`` (default ``net``)."""
    res = ATTACKS[method](net, x, gt, cfg, "ascend", valid=valid, callback=callback)
    _fill_metrics(res, x, gt, valid, eval_net or net, masks=None)
    return res


def targeted(method, net, x, masks, target_depth, gt, valid, cfg=AttackConfig(), eval_net=None, callback=None):
    """Pull each image's masked region toward ``target_depth`` metres.

    ``masks`` holds one binary h x w mask per image. Off-mask pixels are held at
    the clean prediction of the crafting network (dense stand-in for the
    sparse ground truth there).
    """
    x_b, single = _as_batch(x, 3)
    masks = np.asarray(masks, dtype=np.float64)
    if single:
        masks = masks[None]
    clean = depth_forward(net, x_b)[:, 0]
    target = np.stack([build_target_depth(c, TargetSpec(m, target_depth)) for c, m in zip(clean, masks)])
    res = ATTACKS[method](net, x_b, target, cfg, "descend", valid=None, callback=callback)
    gt_b, _ = _as_batch(gt, 2)
    valid_b, _ = _as_batch(valid, 2)
    _fill_metrics(res, x_b, gt_b, valid_b, eval_net or net, masks=masks)
    if single:
        res.x_adv, res.clean_pred, res.adv_pred = res.x_adv[0], res.clean_pred[0], res.adv_pred[0]
    return res


def _fill_metrics(res, x, gt, valid, eval_net, masks):
    x, _ = _as_batch(x, 3)
    x_adv, _ = _as_batch(res.x_adv, 3)
    gt, _ = _as_batch(gt, 2)
    valid, _ = _as_batch(valid, 2)
    clean = depth_forward(eval_net, x)[:, 0]
    adv = depth_forward(eval_net, x_adv)[:, 0]
    res.metrics = []
    for i in range(x.shape[0]):
        kw = {"clean_rmse": rmse(clean[i], gt[i], valid[i]), "adv_rmse": rmse(adv[i], gt[i], valid[i])}
        if masks is not None:
            kw["clean_mmd"] = mmd(clean[i], masks[i])
            kw["adv_mmd"] = mmd(adv[i], masks[i])
        res.metrics.append(ratio_report(**kw))
    res.eval_clean_pred, res.eval_adv_pred = clean, adv


def summarize(metrics: list) -> MetricReport:
    """Mean of each field over images, ratios recomputed from the means."""
    def avg(attr):
        vals = [getattr(m, attr) for m in metrics if getattr(m, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return ratio_report(avg("clean_rmse"), avg("adv_rmse"), avg("clean_mmd"), avg("adv_mmd"))
