"""
Universal (image-agnostic) perturbations, single-task or depth + segmentation.

Training loop, per minibatch ``B``::

    x_0 = clip(x + delta)              for x in B   (or x itself, see below)
    g_0 = 0
    repeat T times:
        depth loss     mean over B of per-image RMSE vs sparse ground truth
        semantic loss  mean per-pixel cross-entropy toward the least likely
                       class of the clean image
        g_bar  = w_d * grad_d / |grad_d|_1  +  w_s * (-grad_s) / |grad_s|_1
        g      = mu * g + g_bar
        x_t+1  = clip_eps(x_t + alpha * sign(g))
    delta <- project_eps(delta + gamma * mean_B(x_T - x_0))

The semantic gradient is negated so one ascent direction raises depth error
and lowers cross-entropy toward the least likely labels. With
``apply_delta=False`` the minibatch starts from the clean images, so
``delta`` never enters the inner loss and each batch contributes an
independent perturbation.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .attacks import L1_FLOOR, clip_to_ball, iteration_count, least_likely_label
from .errors import DataFormatError, NumericalError
from .metrics import ratio_report, rmse
from .models import depth_forward, seg_forward
from .seeding import rng

log = logging.getLogger(__name__)

MAGIC = "DAVUAP"
INNER_METHODS = ("fgsm", "ifgsm", "mifgsm")


@dataclass(frozen=True)
class MultiTaskWeights:
    depth: float = 1.0
    semantic: float = 0.0

    def __post_init__(self):
        if self.depth < 0 or self.semantic < 0:
            raise ValueError("task weights must be non-negative")
        if self.depth + self.semantic <= 0:
            raise ValueError("at least one task weight must be positive")


SINGLE_TASK = MultiTaskWeights(1.0, 0.0)
MULTI_TASK = MultiTaskWeights(0.5, 0.5)


@dataclass(frozen=True)
class UniversalTrainConfig:
    epsilon: float = 16.0
    gamma: float = 1.0
    momentum: float = 1.0
    epochs: int = 2
    iterations: int | None = None
    batch_size: int = 10
    alpha: float = 1.0
    method: str = "mifgsm"
    init: str = "uniform"
    apply_delta: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0 or self.alpha <= 0 or self.batch_size < 1:
            raise ValueError("epsilon, alpha and batch_size must be positive")
        if self.gamma < 0 or self.momentum < 0 or self.epochs < 0:
            raise ValueError("gamma, momentum and epochs must be non-negative")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.method not in INNER_METHODS:
            raise ValueError(f"method must be one of {INNER_METHODS}")
        if self.init not in ("uniform", "zeros"):
            raise ValueError("init must be 'uniform' or 'zeros'")

    @property
    def steps(self) -> int:
        if self.method == "fgsm":
            return 1
        return self.iterations if self.iterations is not None else iteration_count(self.epsilon)


@dataclass
class UniversalPerturbation:
    delta: np.ndarray  # 3 x h x w
    epsilon: float
    provenance: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.provenance, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        checkpoint.save(path, f"{MAGIC} {self.epsilon!r} {self.digest}", {"delta": self.delta})

    @classmethod
    def load(cls, path, provenance=None):
        fields, tensors = checkpoint.load(path)
        if len(fields) != 3 or fields[0] != MAGIC:
            raise DataFormatError(f"not a {MAGIC} file: header {' '.join(fields)!r}", 0)
        if "delta" not in tensors:
            raise DataFormatError("perturbation file lacks a 'delta' tensor", 0)
        return cls(tensors["delta"], float(fields[1]), provenance or {"digest": fields[2]})


def multitask_loss(l_depth: float, l_semantic: float, w: MultiTaskWeights) -> float:
    return w.depth * abs(l_depth) + w.semantic * abs(l_semantic)


def _l1_normalise(g):
    return g / max(float(np.sum(np.abs(g))), L1_FLOOR)


def multitask_gradient(g_depth, g_semantic, w: MultiTaskWeights):
    """Weighted sum of L1-normalised task gradients (a zero-weight task is skipped)."""
    g_depth = np.asarray(g_depth, dtype=np.float64)
    out = w.depth * _l1_normalise(g_depth)
    if w.semantic:
        g_semantic = np.asarray(g_semantic, dtype=np.float64)
        if g_semantic.shape != g_depth.shape:
            raise ValueError("task gradients differ in shape")
        out = out + w.semantic * _l1_normalise(g_semantic)
    return out


def apply_universal(x, delta) -> np.ndarray:
    """clip(x + delta) into [0, 255]; broadcasts over a leading batch axis."""
    d = delta.delta if isinstance(delta, UniversalPerturbation) else np.asarray(delta)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != d.shape:
        raise ValueError(f"perturbation {d.shape} does not match image {x.shape}")
    return np.clip(x + d, 0.0, 255.0)


def _depth_rmse_and_grad(net, x, gt, valid):
    """Batch mean of per-image RMSE over valid pixels, and its input gradient."""
    n = x.shape[0]
    counts = valid.reshape(n, -1).sum(axis=1)
    weight = valid / counts[:, None, None]
    _, grad, pred = net.loss_and_grad(x, gt, weight)
    d = pred - gt
    per_mse = (weight * d * d).reshape(n, -1).sum(axis=1)
    per_rmse = np.sqrt(per_mse)
    # d sqrt(m) = dm / (2 sqrt(m)); images with zero error contribute nothing
    scale = np.where(per_rmse > 0, 1.0 / (2.0 * n * np.maximum(per_rmse, 1e-300)), 0.0)
    return float(per_rmse.mean()), grad * scale[:, None, None, None]


def train_universal(depth_net, seg_net, samples, cfg=UniversalTrainConfig(), w=SINGLE_TASK) -> UniversalPerturbation:
    """Train one perturbation over ``samples`` (list of :class:`~advdepth.data.Sample`)."""
    if not samples:
        raise ValueError("training set is empty")
    if w.semantic > 0 and seg_net is None:
        raise ValueError("a segmentation network is required when the semantic weight is positive")
    shape = samples[0].rgb.shape
    eps = cfg.epsilon
    if cfg.init == "uniform":
        delta = rng(cfg.seed, "universal", "init").uniform(-eps, eps, size=shape)
    else:
        delta = np.zeros(shape)
    shuffle = rng(cfg.seed, "universal", "shuffle")
    step = eps if cfg.method == "fgsm" else cfg.alpha
    mu = cfg.momentum if cfg.method == "mifgsm" else 0.0
    history = []

    batch_no = 0
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(samples))
        for start in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            x = np.stack([s.rgb for s in batch])
            gt = np.stack([s.depth for s in batch])
            valid = np.stack([s.valid for s in batch])
            labels = None
            if w.semantic > 0:
                labels = least_likely_label(seg_forward(seg_net, x)).astype(np.float64)

            x0 = apply_universal(x, delta) if cfg.apply_delta else x.copy()
            xt = x0
            g = np.zeros_like(x)
            for _ in range(cfg.steps):
                l_depth, g_depth = _depth_rmse_and_grad(depth_net, xt, gt, valid)
                l_sem, g_sem = 0.0, None
                if w.semantic > 0:
                    l_sem, g_sem, _ = seg_net.xent_and_grad(xt, labels)
                    g_sem = -g_sem
                loss = multitask_loss(l_depth, l_sem, w)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite loss in minibatch {batch_no}")
                g = mu * g + multitask_gradient(g_depth, g_sem, w)
                xt = clip_to_ball(xt + step * np.sign(g), x, eps)
            history.append(loss)
            delta_b = (xt - x0).mean(axis=0)
            delta = np.clip(delta + cfg.gamma * delta_b, -eps, eps)
            log.debug("epoch %d batch %d loss %.4f", epoch + 1, batch_no, loss)
            batch_no += 1

    provenance = {"config": asdict(cfg), "weights": asdict(w), "final_losses": history[-3:]}
    return UniversalPerturbation(delta, eps, provenance)


def evaluate_universal(depth_net, samples, delta, batch_size=32, eval_net=None) -> list:
    """Per-image clean/adversarial RMSE reports with the same delta on every image."""
    net = eval_net or depth_net
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = np.stack([s.rgb for s in chunk])
        clean = depth_forward(net, x)[:, 0]
        adv = depth_forward(net, apply_universal(x, delta))[:, 0]
        for s, c, a in zip(chunk, clean, adv):
            out.append(ratio_report(rmse(c, s.depth, s.valid), rmse(a, s.depth, s.valid)))
    return out
