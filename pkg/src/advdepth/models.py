"""
Toy encoder-decoder networks for depth regression and semantic segmentation.

Both share one topology::

    x / 255
    conv3x3 stride 2 -> relu -> conv3x3 stride 2 -> relu          (encoder)
    upsample2x -> conv3x3 -> relu -> upsample2x -> conv3x3 -> relu (decoder)
    conv3x3 head -> softplus (depth, metres) | logits (segmentation)

``arch-A`` and ``arch-B`` differ only in channel widths, which is enough for
the two to disagree on adversarial directions. Inputs are raw pixels in
[0, 255]; the 1/255 normalisation is the first node of the graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import Graph, softmax
from .errors import NumericalError, ShapeError
from .seeding import rng

log = logging.getLogger(__name__)

ARCHS = {
    "arch-A": (8, 16, 8, 8),
    "arch-B": (12, 24, 6, 6),
}
LAYERS = ("enc1", "enc2", "dec1", "dec2", "head")
MAGIC = "DAVNET"
# pre-activation gain on the depth head so metre-scale outputs are reachable
DEPTH_GAIN = 10.0


def _layer_shapes(arch, out_channels):
    c1, c2, c3, c4 = ARCHS[arch]
    chans = [(3, c1), (c1, c2), (c2, c3), (c3, c4), (c4, out_channels)]
    return {name: (co, ci, 3, 3) for name, (ci, co) in zip(LAYERS, chans)}


def init_params(arch: str, out_channels: int, seed: int) -> dict:
    """He-normal kernels, zero biases."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHS)}")
    g = rng(seed, "init", arch, out_channels)
    params = {}
    for name, shape in _layer_shapes(arch, out_channels).items():
        fan_in = shape[1] * shape[2] * shape[3]
        params[f"{name}.w"] = g.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{name}.b"] = np.zeros(shape[0])
    return params


@dataclass
class _Net:
    arch: str
    params: dict = field(repr=False)

    out_channels = 1

    def __post_init__(self):
        expected = _layer_shapes(self.arch, self.out_channels)
        for name, shape in expected.items():
            if self.params[f"{name}.w"].shape != shape:
                raise ShapeError(f"{name}.w has shape {self.params[f'{name}.w'].shape}, expected {shape}")

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def build(self):
        """Fresh graph; returns ``(graph, output_node)``.

        A new graph per call keeps concurrent forward passes independent.
        """
        g = Graph()
        x = g.input("x")
        ids = {name: g.input(name) for name in sorted(self.params)}
        h = g.scale(x, 1.0 / 255.0)
        h = g.relu(g.conv2d(h, ids["enc1.w"], ids["enc1.b"], stride=2))
        h = g.relu(g.conv2d(h, ids["enc2.w"], ids["enc2.b"], stride=2))
        h = g.relu(g.conv2d(g.upsample2x(h), ids["dec1.w"], ids["dec1.b"]))
        h = g.relu(g.conv2d(g.upsample2x(h), ids["dec2.w"], ids["dec2.b"]))
        out = g.conv2d(h, ids["head.w"], ids["head.b"])
        return g, self._head(g, out)

    def _head(self, g, out):
        return out

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected 3 x h x w (or N x 3 x h x w) input, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"spatial dims must be multiples of 4, got {x.shape[2:]}")
        return x, single

    def feed(self, x):
        return {"x": x, **self.params}

    def to_bytes(self) -> bytes:
        return checkpoint.encode(f"{MAGIC} {self.arch} {self.param_count}", self.params)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())


class DepthNet(_Net):
    out_channels = 1

    def _head(self, g, out):
        return g.softplus(g.scale(out, DEPTH_GAIN))

    def build_loss(self):
        """Graph with a masked squared-error loss node.

        Extra inputs: ``target`` and ``weight`` (both N x 1 x h x w).
        Returns ``(graph, pred_node, loss_node)``.
        """
        g, pred = self.build()
        loss = g.masked_sse(pred, g.input("target"), g.input("weight"))
        return g, pred, loss

    def __call__(self, x):
        return depth_forward(self, x)

    def loss_and_grad(self, x, target, weight):
        """Value and input gradient of ``sum(weight * (f(x) - target)**2)``.

        ``x`` is N x 3 x h x w; ``target`` and ``weight`` are N x h x w.
        Returns ``(loss, grad_x, pred)`` with pred N x h x w.
        """
        g, pred, loss = self.build_loss()
        feed = self.feed(x)
        feed["target"] = np.asarray(target, dtype=np.float64)[:, None]
        feed["weight"] = np.asarray(weight, dtype=np.float64)[:, None]
        value = float(g.forward(feed, loss))
        grad = g.input_gradient(loss, "x")
        return value, grad, g.value(pred)[:, 0]


class SegNet(_Net):
    num_classes = 4

    def __init__(self, arch, params, num_classes=4):
        self.num_classes = num_classes
        self.out_channels = num_classes
        super().__init__(arch, params)

    def build_loss(self):
        """Graph with mean per-pixel cross-entropy against input ``labels``."""
        g, logits = self.build()
        loss = g.mean(g.softmax_xent(logits, g.input("labels")))
        return g, logits, loss

    def __call__(self, x):
        return seg_forward(self, x)

    def logits(self, x):
        x, single = self._batch(x)
        g, out = self.build()
        z = g.forward(self.feed(x), out)
        return z[0] if single else z

    def xent_and_grad(self, x, labels):
        """Mean cross-entropy over all pixels of the batch and its input gradient."""
        g, logits, loss = self.build_loss()
        feed = self.feed(x)
        feed["labels"] = np.asarray(labels, dtype=np.float64)
        value = float(g.forward(feed, loss))
        return value, g.input_gradient(loss, "x"), softmax(g.value(logits))


def depth_forward(net: DepthNet, x) -> np.ndarray:
    """Depth in metres: 1 x h x w for one image, N x 1 x h x w for a batch."""
    x, single = net._batch(x)
    g, out = net.build()
    d = g.forward(net.feed(x), out)
    return d[0] if single else d


def seg_forward(net: SegNet, x) -> np.ndarray:
    """Per-pixel class probabilities, K x h x w (or N x K x h x w)."""
    z = net.logits(x)
    return softmax(z, axis=0 if z.ndim == 3 else 1)


def new_depth_net(arch="arch-A", seed=0) -> DepthNet:
    return DepthNet(arch, init_params(arch, 1, seed))


def new_seg_net(arch="arch-A", seed=0, num_classes=4) -> SegNet:
    return SegNet(arch, init_params(arch, num_classes, seed), num_classes)


def load_net(path):
    """Read a checkpoint; the head width decides depth vs segmentation."""
    fields, tensors = checkpoint.load(path)
    return net_from_checkpoint(fields, tensors)


def net_from_checkpoint(fields, tensors):
    from .errors import DataFormatError

    if len(fields) != 3 or fields[0] != MAGIC:
        raise DataFormatError(f"not a {MAGIC} checkpoint: header {' '.join(fields)!r}", 0)
    arch, count = fields[1], int(fields[2])
    if arch not in ARCHS:
        raise DataFormatError(f"unknown architecture {arch!r}", 0)
    if "head.w" not in tensors:
        raise DataFormatError("checkpoint lacks head.w", 0)
    k = tensors["head.w"].shape[0]
    net = DepthNet(arch, tensors) if k == 1 else SegNet(arch, tensors, k)
    if net.param_count != count:
        raise DataFormatError(f"header says {count} parameters, payload has {net.param_count}", 0)
    return net


# --------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    task: str
    arch: str
    epochs: int
    final_loss: float
    epoch_losses: list
    heldout_rmse: float | None = None
    heldout_accuracy: float | None = None

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _batch_loss_grads(net, batch):
    if isinstance(net, DepthNet):
        g, _, loss = net.build_loss()
        valid = batch["valid"][:, None]
        feed = net.feed(batch["rgb"])
        feed["target"] = batch["depth"][:, None]
        feed["weight"] = valid / max(valid.sum(), 1.0)
    else:
        g, _, loss = net.build_loss()
        feed = net.feed(batch["rgb"])
        feed["labels"] = batch["seg"]
    value = float(g.forward(feed, loss))
    return value, g.gradients(loss, sorted(net.params))


def train(net, samples, epochs=20, lr=0.01, seed=0, batch_size=16, momentum=0.9, clip=1.0, heldout=None):
    """Minibatch SGD with heavy-ball momentum and global-norm gradient clipping.

    Depth loss is the mean squared error over valid pixels (masked sum of
    squares divided by the valid count); segmentation loss is mean per-pixel
    cross-entropy. ``samples`` is a list of :class:`~advdepth.data.Sample`.
    Updates ``net.params`` in place and returns a :class:`TrainReport`.
    """
    from .data import stack

    if not samples:
        raise ValueError("training set is empty")
    task = "depth" if isinstance(net, DepthNet) else "seg"
    names = sorted(net.params)
    velocity = {k: np.zeros_like(net.params[k]) for k in names}
    order_rng = rng(seed, "train", "shuffle")
    history = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(samples))
        total, seen = 0.0, 0
        for start in range(0, len(samples), batch_size):
            idx = order[start : start + batch_size]
            batch = stack([samples[i] for i in idx])
            value, grads = _batch_loss_grads(net, batch)
            if not np.isfinite(value):
                raise NumericalError(f"training diverged in epoch {epoch + 1}")
            norm = np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
            factor = min(1.0, clip / norm) if norm > 0 else 1.0
            for k in names:
                velocity[k] = momentum * velocity[k] - lr * factor * grads[k]
                net.params[k] = net.params[k] + velocity[k]
            total += value * len(idx)
            seen += len(idx)
        history.append(total / seen)
        log.info("%s %s epoch %d loss %.4f", task, net.arch, epoch + 1, history[-1])

    report = TrainReport(task, net.arch, epochs, history[-1] if history else float("nan"), history)
    if heldout:
        if task == "depth":
            report.heldout_rmse = evaluate_depth(net, heldout)
        else:
            report.heldout_accuracy = evaluate_seg(net, heldout)
    return report


def evaluate_depth(net, samples, batch_size=32) -> float:
    """Mean per-image RMSE over valid pixels."""
    from .metrics import rmse

    errs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        pred = depth_forward(net, np.stack([s.rgb for s in chunk]))[:, 0]
        errs.extend(rmse(p, s.depth, s.valid) for p, s in zip(pred, chunk))
    return float(np.mean(errs))


def evaluate_seg(net, samples, batch_size=32) -> float:
    """Pixel accuracy pooled over all pixels."""
    hit = tot = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        probs = seg_forward(net, np.stack([s.rgb for s in chunk]))
        labels = np.stack([s.seg for s in chunk])
        hit += int((probs.argmax(axis=1) == labels).sum())
        tot += labels.size
    return hit / tot
