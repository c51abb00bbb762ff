"""Histogram gradient-boosted trees with leaf-wise growth and logistic loss.

Container payload (little-endian), after the shared header::

    float64                init score (log-odds)
    float64 * sum(n_cuts)  bin cut points, feature by feature
    per tree, preorder     int32 feature (-1 for a leaf), int32 threshold bin,
                           float64 cut value (internal) or leaf increment (leaf)

``n_cuts`` and the node count of every tree are listed in the JSON metadata.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import container
from .errors import BadSpec, FormatError, SingleClass

N_FEATURES = 12
_NODE = struct.Struct("<iid")


@dataclass(frozen=True)
class GbdtParams:
    num_leaves: int = 31
    max_bin: int = 255
    learning_rate: float = 0.1
    n_trees: int = 100
    min_samples_leaf: int = 1

    def __post_init__(self):
        if self.num_leaves < 2 or self.max_bin < 2:
            raise BadSpec("num_leaves and max_bin must be >= 2")
        if not 0.0 <= self.learning_rate <= 1.0:
            raise BadSpec("learning_rate must lie in [0, 1]")
        if self.n_trees < 0 or self.min_samples_leaf < 1:
            raise BadSpec("n_trees must be >= 0 and min_samples_leaf >= 1")


@dataclass
class Tree:
    feature: list = field(default_factory=list)
    threshold_bin: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add_leaf(self, value=0.0):
        self.feature.append(-1)
        self.threshold_bin.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    @property
    def n_leaves(self):
        return sum(1 for f in self.feature if f < 0)

    def apply(self, X):
        """Leaf index reached by each row of ``X``."""
        if len(X) <= 4:
            # plain traversal beats array bookkeeping for one-window calls
            out = np.empty(len(X), dtype=np.int64)
            feature, threshold, left, right = self.feature, self.threshold, self.left, self.right
            for i, row in enumerate(np.asarray(X, dtype=np.float64).tolist()):
                n = 0
                while feature[n] >= 0:
                    n = left[n] if row[feature[n]] <= threshold[n] else right[n]
                out[i] = n
            return out
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = feature[node] >= 0
        while active.any():
            r, n = rows[active], node[active]
            go_left = X[r, feature[n]] <= threshold[n]
            node[r] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return node

    def predict_raw(self, X):
        return np.asarray(self.value, dtype=np.float64)[self.apply(X)]


@dataclass
class GbdtModel:
    params: GbdtParams
    init_score: float
    cuts: list
    trees: list = field(default_factory=list)
    horizon_hours: int = 1
    train_log: list = field(default_factory=list)

    family = "gbdt"


# ---------------------------------------------------------------------------
# binning


def _feature_cuts(v, max_bin):
    u = np.unique(v)
    if len(u) <= max_bin:
        return (u[:-1] + u[1:]) / 2.0
    s = np.sort(v)
    n = len(s)
    cuts = []
    for k in range(1, max_bin):
        val = s[math.ceil(k * n / max_bin) - 1]
        j = np.searchsorted(u, val, side="right")
        if j < len(u):
            cuts.append((val + u[j]) / 2.0)
    return np.unique(np.asarray(cuts, dtype=np.float64))


def build_bins(X, max_bin) -> list:
    """Per-feature ascending cut points, at most ``max_bin - 1`` of them.

    When a feature has more distinct values than bins, cuts sit at the
    quantile positions ``ceil(k*n/max_bin)`` of the sorted column, halfway to
    the next distinct value.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) < 1:
        raise BadSpec("build_bins needs at least one row")
    return [_feature_cuts(X[:, j], max_bin) for j in range(X.shape[1])]


def apply_bins(X, cuts):
    # bin b holds cuts[b-1] < x <= cuts[b]
    return np.stack([np.searchsorted(c, X[:, j], side="left") for j, c in enumerate(cuts)], axis=1)


# ---------------------------------------------------------------------------
# training


def _logloss(y, raw):
    # log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0
    z = np.where(y == 1, raw, -raw)
    return float(np.mean(np.logaddexp(0.0, -z)))


class _Splitter:
    """Histogram split finder over a padded ``(feature, bin)`` grid."""

    def __init__(self, bins, n_bins, min_samples_leaf):
        self.bins = bins
        self.n_features = bins.shape[1]
        self.width = int(max(n_bins))
        self.flat = bins + np.arange(self.n_features) * self.width
        # threshold t on feature j is usable when bin t+1 exists
        self.usable = np.arange(self.width)[None, :] < (np.asarray(n_bins)[:, None] - 1)
        self.msl = min_samples_leaf

    def histogram(self, idx, g, h):
        size = self.n_features * self.width
        flat = self.flat[idx].ravel()
        shape = (self.n_features, self.width)
        G = np.bincount(flat, weights=np.repeat(g[idx], self.n_features), minlength=size).reshape(shape)
        H = np.bincount(flat, weights=np.repeat(h[idx], self.n_features), minlength=size).reshape(shape)
        N = np.bincount(flat, minlength=size).reshape(shape)
        return G, H, N

    def best_split(self, hist):
        """Return ``(gain, feature, threshold_bin)`` or None."""
        G_hist, H_hist, N_hist = hist
        N = int(N_hist[0].sum())
        if N < 2 * self.msl:
            return None
        G, H = G_hist[0].sum(), H_hist[0].sum()
        if H <= 0:
            return None
        GL = np.cumsum(G_hist, axis=1)
        HL = np.cumsum(H_hist, axis=1)
        NL = np.cumsum(N_hist, axis=1)
        GR, HR, NR = G - GL, H - HL, N - NL
        ok = self.usable & (NL >= self.msl) & (NR >= self.msl) & (HL > 0) & (HR > 0)
        if not ok.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(ok, GL * GL / HL + GR * GR / HR - G * G / H, -np.inf)
        k = int(np.argmax(gain))  # first maximum in (feature, bin) order
        j, t = divmod(k, self.width)
        if not gain[j, t] > 0:
            return None
        return float(gain[j, t]), j, t


def _grow_tree(splitter, cuts, g, h, params):
    tree = Tree()
    root = tree.add_leaf()
    members = {root: np.arange(len(g))}
    hists = {root: splitter.histogram(members[root], g, h)}
    heap = []

    def consider(node):
        found = splitter.best_split(hists[node])
        if found is not None:
            gain, j, t = found
            heapq.heappush(heap, (-gain, node, j, t))

    consider(root)
    n_leaves = 1
    while heap and n_leaves < params.num_leaves:
        _, node, j, t = heapq.heappop(heap)
        idx = members.pop(node)
        parent_hist = hists.pop(node)
        go_left = splitter.bins[idx, j] <= t
        lo, hi = tree.add_leaf(), tree.add_leaf()
        tree.feature[node] = j
        tree.threshold_bin[node] = t
        tree.threshold[node] = float(cuts[j][t])
        tree.left[node], tree.right[node] = lo, hi
        members[lo], members[hi] = idx[go_left], idx[~go_left]
        # build the smaller child's histogram, derive the other by subtraction
        small, large = (lo, hi) if len(members[lo]) <= len(members[hi]) else (hi, lo)
        hists[small] = splitter.histogram(members[small], g, h)
        hists[large] = tuple(p - c for p, c in zip(parent_hist, hists[small]))
        n_leaves += 1
        consider(lo)
        consider(hi)
    for node, idx in members.items():
        H = h[idx].sum()
        tree.value[node] = float(-g[idx].sum() / H * params.learning_rate) if H > 0 else 0.0
    return tree


def fit_arrays(X, y, params: GbdtParams, horizon_hours=1) -> GbdtModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.min() == y.max():
        raise SingleClass("boosting needs both classes in the training set")
    # canonical row order makes histogram sums independent of input order
    order = np.lexsort((y,) + tuple(X[:, j] for j in reversed(range(X.shape[1]))))
    X, y = X[order], y[order]
    base = y.mean()
    init = float(math.log(base / (1 - base)))
    cuts = build_bins(X, params.max_bin)
    bins = apply_bins(X, cuts)
    splitter = _Splitter(bins, [len(c) + 1 for c in cuts], params.min_samples_leaf)
    model = GbdtModel(params, init, cuts, [], horizon_hours)
    raw = np.full(len(y), init)
    model.train_log.append(_logloss(y, raw))
    for _ in range(params.n_trees):
        p = expit(raw)
        g = p - y
        h = p * (1 - p)
        tree = _grow_tree(splitter, cuts, g, h, params)
        model.trees.append(tree)
        raw = raw + tree.predict_raw(X)
        model.train_log.append(_logloss(y, raw))
    return model


def fit(train, params: GbdtParams) -> GbdtModel:
    return fit_arrays(train.X, train.y, params, train.horizon_hours)


def predict_raw(model: GbdtModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    raw = np.full(len(X), model.init_score)
    if len(X) == 1:
        row = X[0].tolist()
        acc = model.init_score
        for t in model.trees:
            n = 0
            while t.feature[n] >= 0:
                n = t.left[n] if row[t.feature[n]] <= t.threshold[n] else t.right[n]
            acc = acc + t.value[n]
        raw[0] = acc
        return raw
    for tree in model.trees:
        raw = raw + tree.predict_raw(X)
    return raw


def predict_proba(model: GbdtModel, X) -> np.ndarray:
    return expit(predict_raw(model, X))


def predict_gbdt(model: GbdtModel, window) -> float:
    values = window.values if hasattr(window, "values") and not isinstance(window, np.ndarray) else window
    return float(predict_proba(model, np.asarray(values, dtype=np.float64))[0])


# ---------------------------------------------------------------------------
# serialization


def _preorder(tree, node, out):
    if tree.feature[node] < 0:
        out.append(_NODE.pack(-1, -1, tree.value[node]))
        return
    out.append(_NODE.pack(tree.feature[node], tree.threshold_bin[node], tree.threshold[node]))
    _preorder(tree, tree.left[node], out)
    _preorder(tree, tree.right[node], out)


def serialize_gbdt(model: GbdtModel) -> bytes:
    chunks = [struct.pack("<d", model.init_score)]
    for c in model.cuts:
        chunks.append(np.ascontiguousarray(c, dtype="<f8").tobytes())
    node_counts = []
    for tree in model.trees:
        nodes = []
        _preorder(tree, 0, nodes)
        node_counts.append(len(nodes))
        chunks.extend(nodes)
    meta = {
        "spec": {"family": "gbdt", "layer_widths": [], "hyper": asdict(model.params)},
        "n_cuts": [len(c) for c in model.cuts],
        "n_nodes": node_counts,
    }
    return container.pack("gbdt", model.horizon_hours, meta, b"".join(chunks))


def deserialize_gbdt(data: bytes) -> GbdtModel:
    family, horizon, meta, payload = container.unpack(data)
    if family != "gbdt":
        raise FormatError(f"container holds a {family} model, not gbdt")
    params = GbdtParams(**meta["spec"]["hyper"])
    expected = 8 * (1 + sum(meta["n_cuts"])) + _NODE.size * sum(meta["n_nodes"])
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    (init,) = struct.unpack_from("<d", payload, 0)
    offset = 8
    cuts = []
    for n in meta["n_cuts"]:
        cuts.append(np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(np.float64))
        offset += 8 * n
    trees = []
    for count in meta["n_nodes"]:
        records = [_NODE.unpack_from(payload, offset + i * _NODE.size) for i in range(count)]
        offset += count * _NODE.size
        tree = Tree()
        pos = 0

        def build():
            nonlocal pos
            feat, tbin, val = records[pos]
            pos += 1
            node = tree.add_leaf(val if feat < 0 else 0.0)
            if feat >= 0:
                tree.feature[node] = feat
                tree.threshold_bin[node] = tbin
                tree.threshold[node] = val
                tree.left[node] = build()
                tree.right[node] = build()
            return node

        build()
        trees.append(tree)
    return GbdtModel(params, init, cuts, trees, horizon)
