"""
Minimal reverse-mode automatic differentiation.

A :class:`Graph` is a static program: an ordered list of primitive
applications built once, then evaluated with :meth:`Graph.forward` on bound
inputs and differentiated with :meth:`Graph.backward`. Every value is a
float64 numpy array. Image-like tensors carry a leading batch axis
(N x C x H x W); samples in a batch never interact, so the gradient of a
sum of per-sample losses w.r.t. one sample equals that sample's own gradient.

Primitives
----------
conv2d            zero-padded, odd square kernel, stride 1 or 2, with bias
relu              subgradient 0 at exactly 0
softplus          log(1 + exp(x)), numerically stable form
upsample2x        nearest neighbour, both spatial axes
add               elementwise, identical shapes
scale             multiply by a Python float
masked_sse        sum(weight * (pred - target)**2) -> scalar
softmax_xent      per-pixel softmax cross-entropy against a label map
mean              mean over all elements -> scalar

All reductions run in a fixed order, so two forward/backward passes on the
same inputs give bitwise-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

__all__ = ["Graph", "Node", "PRIMITIVES", "finite_difference_check"]

PRIMITIVES = (
    "input",
    "conv2d",
    "relu",
    "softplus",
    "upsample2x",
    "add",
    "scale",
    "masked_sse",
    "softmax_xent",
    "mean",
)


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# primitive kernels


def _im2col(x, k, stride):
    """Columns laid out channel-major: (C*k*k) x (N*Ho*Wo)."""
    n, c, h, w = x.shape
    p = k // 2
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))
    slices = [
        xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
        for i in range(k)
        for j in range(k)
    ]
    cols = np.stack(slices, axis=1).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def _col2im(dcols, shape, k, stride, ho, wo):
    n, c, h, w = shape
    p = k // 2
    dcols = dcols.reshape(c, k * k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
    for idx in range(k * k):
        i, j = divmod(idx, k)
        dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, idx]
    return dxp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3)


def _conv_forward(x, w, b, stride):
    o = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], stride)
    out = w.reshape(o, -1) @ cols + b[:, None]
    return out.reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3), cols


def _conv_backward(g, x_shape, w, cols, stride, mask=(True, True, True)):
    o = w.shape[0]
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    dx = dw = db = None
    if mask[0]:
        dcols = w.reshape(o, -1).T @ g2
        dx = _col2im(dcols, x_shape, w.shape[2], stride, g.shape[2], g.shape[3])
    if mask[1]:
        dw = (g2 @ cols.T).reshape(w.shape)
    if mask[2]:
        db = g2.sum(axis=1)
    return dx, dw, db


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _log_softmax(z, axis=1):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(z, axis=1):
    """Softmax along ``axis`` (class axis for N x K x H x W logits)."""
    return np.exp(_log_softmax(z, axis=axis))


# --------------------------------------------------------------------------


class Graph:
    """Static computation graph over the primitive set.

    Build with the primitive methods (each returns a node id), then call
    :meth:`forward` with a mapping of input names to arrays.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_ids: dict[str, int] = {}
        self._values: list | None = None
        self._saved: dict[int, object] = {}

    # ---- construction -------------------------------------------------

    def _add(self, kind, inputs=(), **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ShapeError(f"unknown input node {i}", len(self.nodes))
        node = Node(len(self.nodes), kind, tuple(inputs), attrs)
        self.nodes.append(node)
        return node.id

    def input(self, name: str) -> int:
        if name in self.input_ids:
            raise ValueError(f"duplicate input name {name!r}")
        nid = self._add("input", name=name)
        self.input_ids[name] = nid
        return nid

    def conv2d(self, x, w, b, stride=1):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        return self._add("conv2d", (x, w, b), stride=stride)

    def relu(self, x):
        return self._add("relu", (x,))

    def softplus(self, x):
        return self._add("softplus", (x,))

    def upsample2x(self, x):
        return self._add("upsample2x", (x,))

    def add(self, a, b):
        return self._add("add", (a, b))

    def scale(self, x, c: float):
        return self._add("scale", (x,), c=float(c))

    def masked_sse(self, pred, target, weight):
        return self._add("masked_sse", (pred, target, weight))

    def softmax_xent(self, logits, labels):
        return self._add("softmax_xent", (logits, labels))

    def mean(self, x):
        return self._add("mean", (x,))

    # ---- evaluation ---------------------------------------------------

    def forward(self, inputs: Mapping[str, np.ndarray], output: int | None = None) -> np.ndarray:
        """Evaluate nodes ``0..output`` (default: the last node) and return its value.

        Only inputs that precede ``output`` need to be bound. Activations are
        kept for :meth:`backward`.
        """
        if not self.nodes:
            raise ValueError("empty graph")
        stop = len(self.nodes) - 1 if output is None else output
        values: list = [None] * len(self.nodes)
        self._saved = {}
        for node in self.nodes[: stop + 1]:
            values[node.id] = self._eval(node, values, inputs)
        self._values = values
        self._evaluated = stop
        return values[stop]

    def value(self, node_id: int) -> np.ndarray:
        if self._values is None or self._values[node_id] is None:
            raise RuntimeError(f"node {node_id} has not been evaluated")
        return self._values[node_id]

    def _eval(self, node, values, inputs):
        nid = node.id
        args = [values[i] for i in node.inputs]
        k = node.kind
        if k == "input":
            name = node.attrs["name"]
            if name not in inputs:
                raise ShapeError(f"input {name!r} not bound", nid)
            v = np.asarray(inputs[name], dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"non-finite value in input {name!r} (node {nid})")
            return v
        if k == "conv2d":
            x, w, b = args
            if x.ndim != 4 or w.ndim != 4:
                raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}", nid)
            if w.shape[1] != x.shape[1]:
                raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}", nid)
            if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
                raise ShapeError(f"conv2d kernel must be odd and square, got {w.shape[2:]}", nid)
            if b.shape != (w.shape[0],):
                raise ShapeError(f"conv2d bias shape {b.shape} != ({w.shape[0]},)", nid)
            out, cols = _conv_forward(x, w, b, node.attrs["stride"])
            self._saved[nid] = cols
            return out
        if k == "relu":
            return np.maximum(args[0], 0.0)
        if k == "softplus":
            return _softplus(args[0])
        if k == "upsample2x":
            x = args[0]
            if x.ndim < 2:
                raise ShapeError("upsample2x needs at least 2 dims", nid)
            return x.repeat(2, axis=-2).repeat(2, axis=-1)
        if k == "add":
            a, b = args
            if a.shape != b.shape:
                raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}", nid)
            return a + b
        if k == "scale":
            return args[0] * node.attrs["c"]
        if k == "masked_sse":
            p, t, m = args
            if not (p.shape == t.shape == m.shape):
                raise ShapeError(f"masked_sse shapes {p.shape}, {t.shape}, {m.shape} differ", nid)
            d = p - t
            return np.asarray(np.sum(m * d * d))
        if k == "softmax_xent":
            z, y = args
            if z.ndim != 4 or y.shape != (z.shape[0],) + z.shape[2:]:
                raise ShapeError(f"softmax_xent: logits {z.shape} vs labels {y.shape}", nid)
            labels = y.astype(np.int64)
            if labels.min() < 0 or labels.max() >= z.shape[1]:
                raise ShapeError("softmax_xent: label out of range", nid)
            logp = _log_softmax(z, axis=1)
            self._saved[nid] = (logp, labels)
            return -np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
        if k == "mean":
            return np.asarray(np.mean(args[0]))
        raise ValueError(f"unknown primitive {k!r}")

    # ---- differentiation ----------------------------------------------

    def backward(self, loss: int, wrt: Iterable[str] | None = None) -> list:
        """Return d(loss)/d(node) for nodes up to ``loss`` (None where not needed).

        With ``wrt`` given, only paths leading to those named inputs are
        differentiated.
        """
        if self._values is None or loss > self._evaluated:
            raise RuntimeError("run forward through the loss node first")
        lv = self._values[loss]
        if lv.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {lv.shape}", loss)
        nodes = self.nodes[: loss + 1]
        if wrt is None:
            needed = [True] * len(nodes)
        else:
            wanted = {self.input_ids[name] for name in wrt}
            needed = [False] * len(nodes)
            for n in nodes:
                needed[n.id] = n.id in wanted or any(needed[i] for i in n.inputs)
        grads: list = [None] * (loss + 1)
        grads[loss] = np.ones_like(lv)
        for node in reversed(nodes):
            g = grads[node.id]
            if g is None or node.kind == "input" or not needed[node.id]:
                continue
            mask = tuple(needed[i] for i in node.inputs)
            for src, gi in zip(node.inputs, self._vjp(node, g, mask)):
                if gi is None or not needed[src]:
                    continue
                grads[src] = gi if grads[src] is None else grads[src] + gi
        return grads

    def _vjp(self, node, g, mask):
        args = [self._values[i] for i in node.inputs]
        k = node.kind
        if k == "conv2d":
            x, w, _ = args
            return _conv_backward(g, x.shape, w, self._saved[node.id], node.attrs["stride"], mask)
        if k == "relu":
            return (np.where(args[0] > 0.0, g, 0.0),)
        if k == "softplus":
            return (g * _sigmoid(args[0]),)
        if k == "upsample2x":
            x = args[0]
            s = g.reshape(g.shape[:-2] + (x.shape[-2], 2, x.shape[-1], 2))
            return (s[..., 0, :, 0] + s[..., 0, :, 1] + s[..., 1, :, 0] + s[..., 1, :, 1],)
        if k == "add":
            return (g, g)
        if k == "scale":
            return (g * node.attrs["c"],)
        if k == "masked_sse":
            p, t, m = args
            d = p - t
            gp = 2.0 * g * m * d
            return (gp, -gp if mask[1] else None, g * d * d if mask[2] else None)
        if k == "softmax_xent":
            logp, labels = self._saved[node.id]
            probs = np.exp(logp)
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
            return ((probs - onehot) * g[:, None], None)
        if k == "mean":
            x = args[0]
            return (np.full(x.shape, g / x.size),)
        raise ValueError(f"unknown primitive {k!r}")

    def gradients(self, loss: int, wrt: Iterable[str]) -> dict[str, np.ndarray]:
        wrt = list(wrt)
        grads = self.backward(loss, wrt)
        out = {}
        for name in wrt:
            nid = self.input_ids[name]
            g = grads[nid] if nid < len(grads) else None
            out[name] = np.zeros_like(self._values[nid]) if g is None else g
        return out

    def input_gradient(self, loss: int, wrt: str) -> np.ndarray:
        """d(loss)/d(input ``wrt``), same shape as the bound input."""
        return self.gradients(loss, [wrt])[wrt]

    def relu_pattern(self) -> tuple:
        """Sign pattern of every relu input from the last forward pass."""
        return tuple(
            (self._values[n.inputs[0]] > 0.0).tobytes()
            for n in self.nodes[: self._evaluated + 1]
            if n.kind == "relu"
        )


def finite_difference_check(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    loss: int,
    wrt: str,
    coordinates: Sequence[tuple],
    h: float = 1e-4,
    skip_kinks: bool = True,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``coordinates`` index into the ``wrt`` input. When ``skip_kinks`` is set,
    coordinates whose +-h probe changes any relu's active set are ignored
    (the central difference straddles a kink there). Returns 0.0 if every
    coordinate was skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    graph.forward(base, loss)
    pattern = graph.relu_pattern()
    analytic = graph.input_gradient(loss, wrt).copy()

    worst = 0.0
    for c in coordinates:
        c = tuple(c)
        probes = []
        kink = False
        for sgn in (1.0, -1.0):
            x = base[wrt].copy()
            x[c] += sgn * h
            probes.append(float(graph.forward({**base, wrt: x}, loss)))
            if skip_kinks and graph.relu_pattern() != pattern:
                kink = True
        if kink:
            continue
        fd = (probes[0] - probes[1]) / (2.0 * h)
        a = float(analytic[c])
        worst = max(worst, abs(a - fd) / max(abs(a), 1e-8))
    # leave the graph holding the unperturbed pass
    graph.forward(base, loss)
    return worst
