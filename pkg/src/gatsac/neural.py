"""Dense-network substrate with hand-written gradients.

Everything here is plain numpy in float64. Layers are functional: ``forward``
returns ``(output, cache)`` and ``backward(cache, dout)`` returns the input
gradient together with a dict of parameter gradients, so the same network can
be evaluated on several batches before any backward pass runs.
"""

from __future__ import annotations

import logging
from collections import OrderedDict

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised on shape disagreement between operands or stored parameters."""


class CheckpointError(ValueError):
    """Raised when a checkpoint does not match the network it is loaded into."""


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope=0.2):
    return np.where(x > 0, 1.0, slope)


def elu(x, alpha=1.0):
    # exp(.) - 1 rather than expm1: much faster, error ~1e-16 absolute
    return np.maximum(x, 0.0) + alpha * (np.exp(np.minimum(x, 0.0)) - 1.0)


def elu_grad(x, alpha=1.0):
    return alpha * np.exp(np.minimum(x, 0.0)) + (x > 0) * (1.0 - alpha)


def elu_grad_from_output(y, alpha=1.0):
    """ELU derivative expressed through the output y = elu(x)."""
    return np.minimum(y, 0.0) + alpha if alpha == 1.0 else np.where(y > 0, 1.0, y + alpha)


def tanh(x):
    return np.tanh(x)


def tanh_grad(x):
    return 1.0 - np.tanh(x) ** 2


def softmax(v, axis=-1):
    """Max-shifted softmax along ``axis``."""
    v = np.asarray(v, dtype=float)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p, dp, axis=-1):
    """Gradient w.r.t. the logits given the softmax output ``p`` and ``dL/dp``."""
    return p * (dp - np.sum(p * dp, axis=axis, keepdims=True))


ACTIVATIONS = {
    "elu": (elu, elu_grad),
    "leaky_relu": (leaky_relu, leaky_relu_grad),
    "tanh": (tanh, tanh_grad),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


# ---------------------------------------------------------------------------
# parameter store and optimizer
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameters with paired gradient accumulators and Adam moments."""

    def __init__(self):
        self.values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=float)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads):
        for name, g in grads.items():
            if g.shape != self.values[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                                 f"parameter has {self.values[name].shape}")
            self.grads[name] += g

    def n_params(self):
        return int(sum(v.size for v in self.values.values()))

    def copy(self):
        out = ParamStore()
        for name, value in self.values.items():
            out.add(name, value.copy())
        return out

    def assign(self, other):
        """Copy values from ``other`` in place (shapes must agree)."""
        for name, value in self.values.items():
            src = other.values[name]
            if src.shape != value.shape:
                raise ShapeError(f"{name!r}: {src.shape} != {value.shape}")
            value[...] = src

    def checksum(self):
        h = 0.0
        for name, value in self.values.items():
            h += float(np.sum(value * np.arange(1, value.size + 1).reshape(value.shape)))
        return h


def clip_by_global_norm(grads, max_norm):
    """Scale a gradient dict so its global L2 norm is at most ``max_norm``.

    Returns the scaled dict and the pre-clipping norm.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_update(store, lr, beta1=0.9, beta2=0.999, eps=1e-8, grad_clip=None):
    """One Adam step on ``store`` from its accumulated gradients.

    Gradients are clipped by global norm first. A non-finite gradient skips
    the update entirely (the incident is logged) and returns ``False``.
    Gradients are cleared either way.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    grads = store.grads
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        logger.warning("non-finite gradient; Adam update skipped")
        store.zero_grad()
        return False
    clipped, _ = clip_by_global_norm(grads, grad_clip)
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, value in store.values.items():
        g = clipped[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.zero_grad()
    return True


def soft_update(online, target, tau):
    """target <- tau * online + (1 - tau) * target, elementwise and in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for name, tv in target.values.items():
        if name not in online.values:
            raise ShapeError(f"online store lacks {name!r}")
        ov = online.values[name]
        if ov.shape != tv.shape:
            raise ShapeError(f"{name!r}: {ov.shape} != {tv.shape}")
        tv *= 1.0 - tau
        tv += tau * ov
    return target


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def dense_forward(x, weights, bias):
    """y = x W^T + b for a batch of row vectors (or a single vector)."""
    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    bias = np.asarray(bias, dtype=float)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense shapes disagree: x {x.shape}, W {weights.shape}, b {bias.shape}")
    return x @ weights.T + bias


def glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class MLP:
    """Fully connected network; the last layer is linear."""

    def __init__(self, sizes, activation="elu", rng=None, prefix="mlp", store=None,
                 out_scale=1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.activation = activation
        self.prefix = prefix
        self._act, self._act_grad = ACTIVATIONS[activation]
        rng = np.random.default_rng() if rng is None else rng
        self.params = ParamStore() if store is None else store
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            w = glorot(rng, sizes[i + 1], sizes[i])
            if i == n_layers - 1:
                w = w * out_scale
            self.params.add(f"{prefix}.W{i}", w)
            self.params.add(f"{prefix}.b{i}", np.zeros(sizes[i + 1]))

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x, params=None):
        p = self.params.values if params is None else params
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"{self.prefix}: expected input dim {self.sizes[0]}, got {x.shape[-1]}")
        inputs, pre = [], []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            a = h @ p[f"{self.prefix}.W{i}"].T + p[f"{self.prefix}.b{i}"]
            pre.append(a)
            h = a if i == self.n_layers - 1 else self._act(a)
        return h, (inputs, pre)

    def backward(self, cache, dout, params=None, need_param_grads=True):
        p = self.params.values if params is None else params
        inputs, pre = cache
        grads = {}
        d = np.asarray(dout, dtype=float)
        for i in reversed(range(self.n_layers)):
            if i != self.n_layers - 1:
                d = d * self._act_grad(pre[i])
            x = inputs[i]
            if need_param_grads:
                x2 = x.reshape(-1, x.shape[-1])
                d2 = d.reshape(-1, d.shape[-1])
                grads[f"{self.prefix}.W{i}"] = d2.T @ x2
                grads[f"{self.prefix}.b{i}"] = d2.sum(axis=0)
            d = d @ p[f"{self.prefix}.W{i}"]
        return d, grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, stores, meta=None):
    """Write named ParamStores (values + Adam state) to an ``.npz`` file."""
    arrays = {"__version__": np.array(CHECKPOINT_VERSION)}
    for store_name, store in stores.items():
        arrays[f"{store_name}/__step__"] = np.array(store.step_count)
        for name, value in store.values.items():
            arrays[f"{store_name}/value/{name}"] = value
            arrays[f"{store_name}/m/{name}"] = store.m[name]
            arrays[f"{store_name}/v/{name}"] = store.v[name]
    if meta:
        for k, v in meta.items():
            arrays[f"__meta__/{k}"] = np.array(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, stores):
    """Load values and optimizer state into ``stores``; returns the metadata dict."""
    with np.load(path, allow_pickle=False) as data:
        if "__version__" not in data or int(data["__version__"]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version")
        for store_name, store in stores.items():
            step_key = f"{store_name}/__step__"
            if step_key not in data:
                raise CheckpointError(f"{path}: missing store {store_name!r}")
            for name, value in store.values.items():
                key = f"{store_name}/value/{name}"
                if key not in data:
                    raise CheckpointError(f"{path}: missing parameter {store_name}/{name}")
                if data[key].shape != value.shape:
                    raise CheckpointError(
                        f"{path}: {store_name}/{name} has shape {data[key].shape}, "
                        f"network expects {value.shape}")
            for name, value in store.values.items():
                value[...] = data[f"{store_name}/value/{name}"]
                store.m[name][...] = data[f"{store_name}/m/{name}"]
                store.v[name][...] = data[f"{store_name}/v/{name}"]
            store.step_count = int(data[step_key])
        meta = {k.split("/", 1)[1]: data[k][()] for k in data.files if k.startswith("__meta__/")}
    return {k: (v.item() if hasattr(v, "item") else v) for k, v in meta.items()}
