"""Small numpy models with exact analytic gradients.

Parameters are a flat list of arrays ``[W1, b1, W2, b2, ...]``; every
entry is quantized as its own layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

KINDS = ("linear_regression", "logistic_regression", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layer_dims: tuple
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(x) for x in self.layer_dims))
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if len(self.layer_dims) < 2 or any(x < 1 for x in self.layer_dims):
            raise ConfigurationError("layer_dims needs at least input and output sizes, all >= 1")
        if self.kind != "mlp" and len(self.layer_dims) != 2:
            raise ConfigurationError(f"{self.kind} takes exactly (inputs, outputs)")
        if self.activation != "relu":
            raise ConfigurationError("only relu activation is supported")


class Model:
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.regression = spec.kind == "linear_regression"
        dims = spec.layer_dims
        self.shapes = []
        self.names = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.shapes.append((a, b))
            self.names.append(f"W{i + 1}")
            if spec.bias:
                self.shapes.append((b,))
                self.names.append(f"b{i + 1}")

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def init_params(self, rng):
        params = []
        for shape in self.shapes:
            if len(shape) == 2 and self.spec.kind == "mlp":
                params.append(rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape))
            else:
                params.append(np.zeros(shape))
        return params

    def _layers(self, params):
        step = 2 if self.spec.bias else 1
        for i in range(0, len(params), step):
            yield params[i], (params[i + 1] if self.spec.bias else None)

    def _forward(self, params, X):
        acts = [X]
        pre = []
        layers = list(self._layers(params))
        h = X
        for j, (W, b) in enumerate(layers):
            z = h @ W
            if b is not None:
                z = z + b
            pre.append(z)
            h = np.maximum(z, 0.0) if j < len(layers) - 1 else z
            acts.append(h)
        return pre, acts

    def _output_loss(self, out, y):
        n = out.shape[0]
        if self.regression:
            resid = out - y.reshape(out.shape)
            return 0.5 * float(np.sum(resid**2)) / n, resid / n
        z = out - out.max(axis=1, keepdims=True)
        logsum = np.log(np.sum(np.exp(z), axis=1))
        loss = float(np.mean(logsum - z[np.arange(n), y]))
        probs = np.exp(z - logsum[:, None])
        probs[np.arange(n), y] -= 1.0
        return loss, probs / n

    def loss(self, params, X, y) -> float:
        _, acts = self._forward(params, X)
        return self._output_loss(acts[-1], y)[0]

    def loss_and_grad(self, params, X, y):
        pre, acts = self._forward(params, X)
        loss, delta = self._output_loss(acts[-1], y)
        grads = []
        layers = list(self._layers(params))
        for j in range(len(layers) - 1, -1, -1):
            W, b = layers[j]
            gW = acts[j].T @ delta
            if b is not None:
                grads.append(delta.sum(axis=0))
            grads.append(gW)
            if j > 0:
                delta = (delta @ W.T) * (pre[j - 1] > 0)
        grads.reverse()
        return loss, grads

    def predict(self, params, X):
        out = self._forward(params, X)[1][-1]
        return out if self.regression else np.argmax(out, axis=1)

    def accuracy(self, params, X, y) -> float:
        if self.regression:
            return float("nan")
        return float(np.mean(self.predict(params, X) == y))
