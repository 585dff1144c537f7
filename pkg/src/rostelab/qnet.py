"""Rotated quantized feedforward networks with straight-through gradients.

Each layer computes sigma(Q_x(X R) @ Q_w(R^T W)): the input is rotated,
fake-quantized, and multiplied by the fake-quantized rotated weights.
Reverse mode treats both quantizers' Jacobians as the identity (the
straight-through estimator); quantizer scales and zero-points are
constants in backward. Quantized tensors are read back from the forward
tape, never recomputed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError, UsageError
from .hadamard import RotationChoice, apply_rotation
from .quant import QuantSpec, fake_quantize

__all__ = [
    "LayerParams",
    "QNetState",
    "LossKind",
    "Tape",
    "forward",
    "backward_ste",
    "loss_and_grad",
    "prediction_error_quantized",
]


@dataclass
class LayerParams:
    """One rotated quantized linear layer.

    weight is in_dim x out_dim; w_spec / x_spec of None disables the
    corresponding quantizer (identity map), used for degeneration tests
    and full-precision references.
    """

    weight: np.ndarray
    rotation: RotationChoice
    w_spec: Optional[QuantSpec] = None
    x_spec: Optional[QuantSpec] = None
    activation: str = "none"  # none | relu

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError("layer weight must be 2-D (in_dim x out_dim)")
        if self.rotation.kind == "hadamard" and self.rotation.dim != self.weight.shape[0]:
            raise ShapeError(
                f"rotation dim {self.rotation.dim} != in_dim {self.weight.shape[0]}"
            )
        if self.activation not in ("none", "relu"):
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class QNetState:
    """Ordered layers; consecutive dimensions must chain."""

    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: out {a.out_dim} vs in {b.in_dim}"
                )

    def copy(self) -> "QNetState":
        return QNetState(
            [
                LayerParams(l.weight.copy(), l.rotation, l.w_spec, l.x_spec, l.activation)
                for l in self.layers
            ]
        )


@dataclass(frozen=True)
class LossKind:
    tag: str  # quadratic | cross_entropy

    def __post_init__(self):
        if self.tag not in ("quadratic", "cross_entropy"):
            raise ShapeError(f"unknown loss {self.tag!r}")


QUADRATIC = LossKind("quadratic")
CROSS_ENTROPY = LossKind("cross_entropy")


@dataclass
class _LayerRecord:
    x_q: np.ndarray    # Q_x(X R), as used in the product
    w_q: np.ndarray    # Q_w(R^T W)
    pre: np.ndarray    # pre-activation X_q W_q


@dataclass
class Tape:
    records: list
    output: np.ndarray
    net_id: int
    consumed: bool = field(default=False)


def _maybe_fq(x: np.ndarray, spec: Optional[QuantSpec]) -> np.ndarray:
    return x if spec is None else fake_quantize(x, spec)


def forward(net: QNetState, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the network, caching everything backward needs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("input batch must be 2-D (samples x features)")
    if net.layers and x.shape[1] != net.layers[0].in_dim:
        raise ShapeError(
            f"input dim {x.shape[1]} != first layer in_dim {net.layers[0].in_dim}"
        )
    records = []
    h = x
    for layer in net.layers:
        xr = apply_rotation(layer.rotation, h, "XR")
        xq = _maybe_fq(xr, layer.x_spec)
        wr = apply_rotation(layer.rotation, layer.weight, "RT_W")
        wq = _maybe_fq(wr, layer.w_spec)
        pre = xq @ wq
        h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        records.append(_LayerRecord(x_q=xq, w_q=wq, pre=pre))
    return h, Tape(records=records, output=h, net_id=id(net))


def backward_ste(net: QNetState, tape: Tape, loss_grad: np.ndarray) -> list:
    """Per-layer weight gradients under the STE convention.

    loss_grad is dL/d(output). The quantizer Jacobians are identities;
    the rotation factors are applied exactly, so the weight gradient of
    layer i is R_i @ (X_q^T dPre).
    """
    if tape.net_id != id(net) or len(tape.records) != len(net.layers):
        raise UsageError("tape does not match this network")
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward pass")
    tape.consumed = True

    d_out = np.asarray(loss_grad, dtype=np.float64)
    if d_out.shape != tape.output.shape:
        raise ShapeError(f"loss_grad shape {d_out.shape} != output {tape.output.shape}")

    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        rec = tape.records[i]
        d_pre = d_out
        if layer.activation == "relu":
            d_pre = d_out * (rec.pre > 0.0)
        # pre = X_q W_q; STE passes gradients straight through both quantizers.
        d_wr = rec.x_q.T @ d_pre
        grads[i] = apply_rotation(layer.rotation, d_wr, "R_W")
        if i > 0:
            d_xr = d_pre @ rec.w_q.T
            d_out = apply_rotation(layer.rotation, d_xr, "X_RT")
    return grads


def _loss_and_output_grad(out: np.ndarray, y: np.ndarray, loss: LossKind):
    n = out.shape[0]
    if loss.tag == "quadratic":
        y = np.asarray(y, dtype=np.float64).reshape(out.shape)
        r = out - y
        return float(0.5 * np.sum(r * r) / n), r / n
    # softmax cross-entropy with integer labels
    labels = np.asarray(y).reshape(-1).astype(np.int64)
    z = out - np.max(out, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=1))
    value = float(np.mean(logsumexp - z[np.arange(n), labels]))
    p = np.exp(z) / np.sum(np.exp(z), axis=1, keepdims=True)
    p[np.arange(n), labels] -= 1.0
    return value, p / n


def loss_and_grad(net: QNetState, x: np.ndarray, y, loss: LossKind = QUADRATIC):
    """Loss on a batch plus per-layer STE weight gradients."""
    out, tape = forward(net, x)
    value, d_out = _loss_and_output_grad(out, y, loss)
    return value, backward_ste(net, tape, d_out)


def prediction_error_quantized(net: QNetState, x: np.ndarray, y) -> float:
    """Quadratic loss of the deployed quantized model on a dataset."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise UsageError("dataset must be nonempty")
    out, _ = forward(net, x)
    r = out - np.asarray(y, dtype=np.float64).reshape(out.shape)
    return float(0.5 * np.sum(r * r) / x.shape[0])
