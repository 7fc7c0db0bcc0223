"""Two-layer multi-head graph attention encoder with hand-written backward pass.

Layer 1 runs ``K1`` heads and concatenates them, layer 2 runs ``K2`` heads.
Each head computes

    e_ij = LeakyReLU(a^T [W x_i || W x_j])        for j in N(i)
    b_ij = softmax_j(e_ij)
    h_i  = ELU(sum_j b_ij W x_j)

Attention is evaluated densely over the (12 x 12) neighbourhood mask, batched
over graphs.
"""

from __future__ import annotations

import csv

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph import EDGES, N_FEATURES, TrafficGraph, adjacency_mask
from .neural import ParamStore, elu, elu_grad_from_output, glorot, leaky_relu, leaky_relu_grad, softmax_backward
from .sim.geometry import APPROACHES, LANE_TYPES, MIXED, N_LANES
from .validation import check_features

LANE_TYPE_GAIN = 2.0


# ---------------------------------------------------------------------------
# single-layer operations (one graph, all heads)
# ---------------------------------------------------------------------------


def _project(X, W):
    """(B, N, F) x (K, D, F) -> (B, K, N, D)."""
    B, N, F = X.shape
    K, D, _ = W.shape
    H = X.reshape(B * N, F) @ W.reshape(K * D, F).T
    return np.ascontiguousarray(H.reshape(B, N, K, D).transpose(0, 2, 1, 3))


def attention_scores(X, edges, W, a, slope=0.2):
    """Unnormalised scores e_ij for every edge, per head.

    Returns a (K, N, N) array holding e_ij on edges and ``-inf`` elsewhere.
    """
    X = np.asarray(X, dtype=float)[None]
    D = W.shape[1]
    H = _project(X, W)[0]                         # (K, N, D)
    src = np.einsum("knd,kd->kn", H, a[:, :D])
    dst = np.einsum("knd,kd->kn", H, a[:, D:])
    e = leaky_relu(src[:, :, None] + dst[:, None, :], slope)
    mask = adjacency_mask(edges, X.shape[1])
    return np.where(mask[None], e, -np.inf)


def normalize_attention(E, mask=None):
    """Row-wise softmax of scores over each neighbourhood (non-edges are -inf)."""
    E = np.asarray(E, dtype=float)
    if mask is not None:
        E = np.where(mask, E, -np.inf)
    if np.any(np.all(np.isneginf(E), axis=-1)):
        raise ValueError("every node needs a non-empty neighbourhood")
    shifted = E - np.max(E, axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / np.sum(w, axis=-1, keepdims=True)


def aggregate(Bm, X, W):
    """h_i = ELU(sum_j b_ij W x_j) per head, heads concatenated -> (N, K*D)."""
    H = _project(np.asarray(X, dtype=float)[None], W)[0]      # (K, N, D)
    out = elu(Bm @ H)                                          # (K, N, D)
    K, N, D = out.shape
    return out.transpose(1, 0, 2).reshape(N, K * D)


# ---------------------------------------------------------------------------
# batched layer with cache
# ---------------------------------------------------------------------------


def gat_layer_forward(X, W, a, mask, slope=0.2, dropout=0.0, rng=None):
    B, N, _ = X.shape
    K, D, _ = W.shape
    H = _project(X, W)
    # einsum output strides would otherwise propagate and slow the batched matmuls below
    src = np.ascontiguousarray(np.einsum("bknd,kd->bkn", H, a[:, :D]))
    dst = np.ascontiguousarray(np.einsum("bknd,kd->bkn", H, a[:, D:]))
    pre = src[..., :, None] + dst[..., None, :]
    e = np.where(mask, leaky_relu(pre, slope), -np.inf)
    e = e - np.max(e, axis=-1, keepdims=True)
    w = np.exp(e)
    att = w / np.sum(w, axis=-1, keepdims=True)
    if dropout > 0.0 and rng is not None:
        keep = 1.0 - dropout
        drop = (rng.random(att.shape) < keep) / keep
        used = att * drop
    else:
        drop = None
        used = att
    act = elu(used @ H)
    out = act.transpose(0, 2, 1, 3).reshape(B, N, K * D)
    cache = (X, W, a, mask, slope, H, pre, att, drop, used, act)
    return out, cache


def gat_layer_backward(cache, dout, need_dx=True):
    X, W, a, mask, slope, H, pre, att, drop, used, act = cache
    B, N, F = X.shape
    K, D, _ = W.shape
    dk = dout.reshape(B, N, K, D).transpose(0, 2, 1, 3)
    dagg = dk * elu_grad_from_output(act)
    dused = dagg @ H.transpose(0, 1, 3, 2)
    dH = used.transpose(0, 1, 3, 2) @ dagg
    datt = dused if drop is None else dused * drop
    de = softmax_backward(att, datt)
    dpre = np.where(mask, de * leaky_relu_grad(pre, slope), 0.0)
    dsrc = dpre.sum(axis=-1)
    ddst = dpre.sum(axis=-2)
    # dH += dsrc a_src + ddst a_dst, as one small matmul (much faster than broadcasting)
    dH = dH + np.stack([dsrc, ddst], axis=-1) @ a.reshape(K, 2, D)[None]
    da = np.concatenate([np.einsum("bkn,bknd->kd", dsrc, H), np.einsum("bkn,bknd->kd", ddst, H)], axis=1)
    dH2 = dH.transpose(0, 2, 1, 3).reshape(B * N, K * D)
    dW = (dH2.T @ X.reshape(B * N, F)).reshape(K, D, F)
    dX = (dH2 @ W.reshape(K * D, F)).reshape(B, N, F) if need_dx else None
    return dX, dW, da


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class GATNetwork:
    """Parameters and forward/backward for the two-layer encoder plus lane-type head."""

    def __init__(self, in_dim=N_FEATURES, hidden_dim=128, heads=(4, 1), slope=0.2, dropout=0.3,
                 rng=None, prefix="gat"):
        rng = np.random.default_rng() if rng is None else rng
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.heads = tuple(heads)
        self.slope = slope
        self.dropout = dropout
        self.prefix = prefix
        self.params = ParamStore()
        dims = [in_dim] + [h * hidden_dim for h in self.heads]
        for layer, k in enumerate(self.heads):
            f = dims[layer]
            W = np.stack([glorot(rng, hidden_dim, f) for _ in range(k)])
            a = np.stack([glorot(rng, 1, 2 * hidden_dim)[0] for _ in range(k)])
            self.params.add(f"{prefix}.W{layer}", W)
            self.params.add(f"{prefix}.a{layer}", a)
        self.out_dim = self.heads[-1] * hidden_dim
        # lane-type head: small weights, bias towards "mixed"
        self.params.add(f"{prefix}.lane_W", 0.01 * glorot(rng, len(LANE_TYPES), self.out_dim))
        self.params.add(f"{prefix}.lane_b", np.array([0.0, 0.0, 1.0]))

    def forward(self, X, mask=None, train=False, rng=None, params=None):
        """X: (B, N, F) -> node embeddings (B, N, out_dim) and a cache."""
        p = self.params.values if params is None else params
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        mask = adjacency_mask() if mask is None else mask
        caches = []
        h = X
        for layer in range(len(self.heads)):
            h, c = gat_layer_forward(h, p[f"{self.prefix}.W{layer}"], p[f"{self.prefix}.a{layer}"], mask,
                                     self.slope, self.dropout if train else 0.0, rng)
            caches.append(c)
        return h, caches

    def backward(self, caches, dZ):
        grads = {}
        d = dZ
        for layer in reversed(range(len(self.heads))):
            d, dW, da = gat_layer_backward(caches[layer], d, need_dx=layer > 0)
            grads[f"{self.prefix}.W{layer}"] = dW
            grads[f"{self.prefix}.a{layer}"] = da
        return grads

    def lane_type_logits(self, Z, lane_pref=None):
        """Per-lane logits over (CAV_only, HDV_only, mixed) from node embeddings.

        ``lane_pref`` (the actor's lane component, one value per lane) shifts
        the CAV_only / HDV_only logits in opposite directions.
        """
        p = self.params.values
        logits = Z @ p[f"{self.prefix}.lane_W"].T + p[f"{self.prefix}.lane_b"]
        if lane_pref is not None:
            pref = np.asarray(lane_pref, dtype=float)
            logits = logits + LANE_TYPE_GAIN * pref[..., None] * np.array([1.0, -1.0, 0.0])
        return logits


def encode(network, graph: TrafficGraph):
    """Node embeddings Z (N, D) and their mean z (evaluation mode)."""
    Z, _ = network.forward(graph.features[None], mask=graph.mask())
    Z = Z[0]
    return Z, Z.mean(axis=0)


def assign_lane_types(logits, approaches=None):
    """Arg-max lane type per lane with a per-approach admission constraint.

    Ties (several maximal logits) resolve to ``mixed``. If an approach would
    be left without a lane admitting CAVs or without one admitting HDVs, all
    of its lanes revert to ``mixed``.
    """
    logits = np.asarray(logits, dtype=float)
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    types = []
    for row in probs:
        top = np.flatnonzero(np.isclose(row, row.max(), rtol=0.0, atol=1e-12))
        types.append(LANE_TYPES[MIXED] if top.size > 1 else LANE_TYPES[int(top[0])])
    if approaches is None:
        approaches = [APPROACHES[i // 3] for i in range(len(types))]
    for appr in set(approaches):
        members = [i for i, a in enumerate(approaches) if a == appr]
        cav_ok = any(types[i] in ("CAV_only", "mixed") for i in members)
        hdv_ok = any(types[i] in ("HDV_only", "mixed") for i in members)
        if not (cav_ok and hdv_ok):
            for i in members:
                types[i] = "mixed"
    return types


class GATEncoder(TransformerMixin, BaseEstimator):
    """Graph-attention encoder as a transformer: graphs -> pooled embeddings.

    Parameters
    ----------
    hidden_dim : int
        Per-head output width.
    heads : tuple of int
        Attention heads per layer; layer 1 concatenates its heads.
    dropout : float
        Attention dropout applied only in training passes.
    leaky_slope : float
        Negative slope of the score LeakyReLU.
    random_state : int or None
        Seed for parameter initialisation.
    """

    def __init__(self, hidden_dim=128, heads=(4, 1), dropout=0.3, leaky_slope=0.2, random_state=0):
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.dropout = dropout
        self.leaky_slope = leaky_slope
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.network_ = GATNetwork(N_FEATURES, self.hidden_dim, self.heads, self.leaky_slope,
                                   self.dropout, rng=np.random.default_rng(self.random_state))
        self.n_features_in_ = N_FEATURES
        return self

    def _stack(self, X):
        if isinstance(X, TrafficGraph):
            X = [X]
        if isinstance(X, (list, tuple)) and X and isinstance(X[0], TrafficGraph):
            return np.stack([check_features(g.features) for g in X]), X[0].mask()
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        for x in X:
            check_features(x)
        return X, adjacency_mask(EDGES)

    def node_embeddings(self, X):
        check_is_fitted(self, "network_")
        feats, mask = self._stack(X)
        Z, _ = self.network_.forward(feats, mask=mask)
        return Z

    def transform(self, X):
        """Mean-pooled embedding per graph, shape (n_graphs, out_dim)."""
        return self.node_embeddings(X).mean(axis=1)


ATTENTION_CSV_HEADER = ("layer", "head", "node_i", "node_j", "weight")


def attention_weights(network, X, mask=None):
    """Evaluation-mode attention per layer: list of (K, N, N) arrays for one graph."""
    _, caches = network.forward(np.asarray(X, dtype=float)[None], mask=mask)
    return [c[7][0] for c in caches]


def write_attention_csv(path, network, graph: TrafficGraph):
    """Dump b_ij for every edge, layer and head."""
    mask = graph.mask()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ATTENTION_CSV_HEADER)
        for layer, att in enumerate(attention_weights(network, graph.features, mask)):
            for k in range(att.shape[0]):
                for i, j in zip(*np.nonzero(mask)):
                    w.writerow([layer, k, int(i), int(j), f"{att[k, i, j]:.8g}"])
