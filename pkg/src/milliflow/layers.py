"""Network building blocks on top of the autodiff Tensor.

Shared MLPs, PointNet++-style set abstraction over ball neighborhoods,
attention/max/avg global pooling, a patch-to-patch cost volume, GRU and LSTM
cells, Kaiming-uniform initialization, Adam, and a byte-stable checkpoint
format.  Point geometry (indices, neighborhoods) is plain numpy; gradients
flow only through features and parameters.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import autodiff as ad
from ._kernels import ball_query_indices, farthest_point_sample as _fps, knn_indices
from .autodiff import Tensor
from .errors import BadK, ConfigError, ShapeMismatch

CHECKPOINT_MAGIC = b"MFLW"
CHECKPOINT_VERSION = 1


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, dtype=np.float64):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class MLP:
    """Affine chain with ReLU on hidden layers and a linear final layer."""

    def __init__(self, rng, in_dim: int, dims: list[int], dtype=np.float64):
        if not dims:
            raise ConfigError("MLP needs at least one layer")
        self.in_dim = in_dim
        self.dims = list(dims)
        self.weights = []
        self.biases = []
        prev = in_dim
        for d in dims:
            self.weights.append(Tensor(kaiming_uniform(rng, prev, (prev, d), dtype),
                                       requires_grad=True))
            self.biases.append(Tensor(np.zeros(d, dtype=dtype), requires_grad=True))
            prev = d

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(
                f"MLP expects last axis {self.in_dim}, got {x.shape[-1]}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b)
            if i != last:
                h = ad.relu(h)
        return h

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def mlp_forward(params: MLP, x: Tensor, dims: list[int] | None = None) -> Tensor:
    if dims is not None and list(dims) != params.dims:
        raise ShapeMismatch(f"MLP dims {params.dims} != requested {list(dims)}")
    return params(x)


def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise BadK(f"k must be in [1, {n}], got {k}")
    if not 0 <= start < n:
        raise BadK(f"start must index a point, got {start}")
    return _fps(points, k, start)


def ball_query(
    centroids: np.ndarray, points: np.ndarray, radius: float, max_samples: int
) -> np.ndarray:
    if radius <= 0:
        raise ConfigError(f"radius must be positive, got {radius}")
    if max_samples < 1:
        raise BadK(f"max_samples must be >= 1, got {max_samples}")
    return ball_query_indices(centroids, points, radius, max_samples)


def set_abstraction(
    params: MLP,
    points: np.ndarray,
    feats: Tensor,
    radius: float,
    n_samples: int,
    centroids: np.ndarray | None = None,
    centroid_idx: np.ndarray | None = None,
) -> Tensor:
    """Ball-query neighborhoods -> shared MLP on [rel-xyz || feats] -> max-pool.

    Centroids default to all input points.  `centroid_idx` selects a subset of
    the input points as centroids (used with farthest point sampling).
    """
    points = np.asarray(points, dtype=feats.dtype)
    if len(points) != feats.shape[0]:
        raise ShapeMismatch(
            f"points ({len(points)}) and features ({feats.shape[0]}) disagree"
        )
    if centroid_idx is not None:
        centroids = points[centroid_idx]
    elif centroids is None:
        centroids = points
    idx = ball_query(centroids, points, radius, n_samples)  # (N', k)
    rel = points[idx] - centroids[:, None, :]  # (N', k, 3)
    gathered = ad.take(feats, idx)  # (N', k, C)
    local = ad.concat([Tensor(rel), gathered], axis=2)
    return ad.tmax(params(local), axis=1)  # (N', C')


def global_pool(params: MLP | None, feats: Tensor, weights_mode: str = "attention"):
    """Aggregate per-point features into one vector.

    attention: two-layer MLP scores each point, softmax over points, weighted
    sum; returns (vector, weights).  max/avg need no params and return
    (vector, None).
    """
    if feats.shape[0] < 1:
        raise ShapeMismatch("global_pool needs at least one point")
    if weights_mode == "attention":
        logits = params(feats)  # (N, 1)
        w = ad.softmax(logits, axis=0)
        g = ad.tsum(ad.mul(w, feats), axis=0)
        return g, ad.reshape(w, (-1,))
    if weights_mode == "max":
        return ad.tmax(feats, axis=0), None
    if weights_mode == "avg":
        return ad.tmean(feats, axis=0), None
    raise ConfigError(f"unknown pooling mode: {weights_mode!r}")


class CostVolume:
    """Patch-to-patch cost volume between two point clouds.

    Stage 1 scores each source point against its k nearest target points with
    a shared MLP on [feat_p || feat_q || (q - p)] and aggregates them with a
    displacement-conditioned softmax.  Stage 2 re-aggregates those costs over
    each source point's k nearest source neighbors, again softmax-weighted by
    displacement.
    """

    def __init__(self, rng, feat_dim: int, k_neighbors: int = 8, d_cost: int = 64,
                 dtype=np.float64):
        self.k = k_neighbors
        self.cost_mlp = MLP(rng, 2 * feat_dim + 3, [d_cost, d_cost], dtype=dtype)
        self.weight_mlp1 = MLP(rng, 3, [8, 8, 1], dtype=dtype)
        self.weight_mlp2 = MLP(rng, 3, [8, 8, 1], dtype=dtype)

    def __call__(self, pts_p, feats_p: Tensor, pts_q, feats_q: Tensor) -> Tensor:
        if feats_p.shape[-1] != feats_q.shape[-1]:
            raise ShapeMismatch("source/target feature dims differ")
        pts_p = np.asarray(pts_p, dtype=feats_p.dtype)
        pts_q = np.asarray(pts_q, dtype=feats_p.dtype)
        n, m = len(pts_p), len(pts_q)
        k1 = min(self.k, m)
        idx_q = knn_indices(pts_p, pts_q, k1)  # (N, k1)
        disp = pts_q[idx_q] - pts_p[:, None, :]  # (N, k1, 3)
        fq = ad.take(feats_q, idx_q)  # (N, k1, C)
        fp = ad.reshape(feats_p, (n, 1, -1))
        fp = ad.concat([fp] * k1, axis=1)  # (N, k1, C)
        pair = ad.concat([fp, fq, Tensor(disp)], axis=2)
        cost = self.cost_mlp(pair)  # (N, k1, D)
        w1 = ad.softmax(self.weight_mlp1(Tensor(disp)), axis=1)  # (N, k1, 1)
        patch_cost = ad.tsum(ad.mul(w1, cost), axis=1)  # (N, D)

        k2 = min(self.k, n)
        idx_p = knn_indices(pts_p, pts_p, k2)  # (N, k2)
        disp2 = pts_p[idx_p] - pts_p[:, None, :]
        costs2 = ad.take(patch_cost, idx_p)  # (N, k2, D)
        w2 = ad.softmax(self.weight_mlp2(Tensor(disp2)), axis=1)
        return ad.tsum(ad.mul(w2, costs2), axis=1)  # (N, D)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.cost_mlp.named_params(f"{prefix}.cost"))
        out.update(self.weight_mlp1.named_params(f"{prefix}.weight1"))
        out.update(self.weight_mlp2.named_params(f"{prefix}.weight2"))
        return out


def cost_volume(params: CostVolume, pts_p, feats_p, pts_q, feats_q,
                k_neighbors: int | None = None) -> Tensor:
    if k_neighbors is not None and k_neighbors != params.k:
        raise ShapeMismatch(f"cost volume built with k={params.k}, asked {k_neighbors}")
    return params(pts_p, feats_p, pts_q, feats_q)


class GRUCell:
    """Standard GRU over concatenated [h || x]."""

    def __init__(self, rng, hidden: int, input_dim: int | None = None,
                 dtype=np.float64):
        input_dim = hidden if input_dim is None else input_dim
        self.hidden = hidden
        self.input_dim = input_dim
        cat = hidden + input_dim
        mk = lambda: Tensor(kaiming_uniform(rng, cat, (cat, hidden), dtype),
                            requires_grad=True)
        zb = lambda: Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w_z, self.b_z = mk(), zb()
        self.w_r, self.b_r = mk(), zb()
        self.w_h, self.b_h = mk(), zb()

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        if h.shape[-1] != self.hidden or x.shape[-1] != self.input_dim:
            raise ShapeMismatch(
                f"GRU dims: h{h.shape} x{x.shape} vs hidden={self.hidden}, "
                f"input={self.input_dim}"
            )
        hx = ad.concat([h, x], axis=-1)
        z = ad.sigmoid(ad.linear(hx, self.w_z, self.b_z))
        r = ad.sigmoid(ad.linear(hx, self.w_r, self.b_r))
        rhx = ad.concat([ad.mul(r, h), x], axis=-1)
        h_tilde = ad.tanh(ad.linear(rhx, self.w_h, self.b_h))
        one_minus_z = ad.add(ad.mul(z, -1.0), 1.0)
        return ad.add(ad.mul(one_minus_z, h), ad.mul(z, h_tilde))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_z": self.w_z, f"{prefix}.b_z": self.b_z,
            f"{prefix}.w_r": self.w_r, f"{prefix}.b_r": self.b_r,
            f"{prefix}.w_h": self.w_h, f"{prefix}.b_h": self.b_h,
        }


def gru_cell(params: GRUCell, h: Tensor, x: Tensor) -> Tensor:
    return params(h, x)


class LSTMCell:
    """Standard LSTM over concatenated [h || x]."""

    def __init__(self, rng, hidden: int, input_dim: int | None = None,
                 dtype=np.float64):
        input_dim = hidden if input_dim is None else input_dim
        self.hidden = hidden
        self.input_dim = input_dim
        cat = hidden + input_dim
        mk = lambda: Tensor(kaiming_uniform(rng, cat, (cat, hidden), dtype),
                            requires_grad=True)
        zb = lambda: Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w_i, self.b_i = mk(), zb()
        self.w_f, self.b_f = mk(), zb()
        self.w_o, self.b_o = mk(), zb()
        self.w_g, self.b_g = mk(), zb()

    def __call__(self, h: Tensor, c: Tensor, x: Tensor):
        if h.shape[-1] != self.hidden or x.shape[-1] != self.input_dim:
            raise ShapeMismatch(
                f"LSTM dims: h{h.shape} x{x.shape} vs hidden={self.hidden}, "
                f"input={self.input_dim}"
            )
        hx = ad.concat([h, x], axis=-1)
        i = ad.sigmoid(ad.linear(hx, self.w_i, self.b_i))
        f = ad.sigmoid(ad.linear(hx, self.w_f, self.b_f))
        o = ad.sigmoid(ad.linear(hx, self.w_o, self.b_o))
        g = ad.tanh(ad.linear(hx, self.w_g, self.b_g))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_i": self.w_i, f"{prefix}.b_i": self.b_i,
            f"{prefix}.w_f": self.w_f, f"{prefix}.b_f": self.b_f,
            f"{prefix}.w_o": self.w_o, f"{prefix}.b_o": self.b_o,
            f"{prefix}.w_g": self.w_g, f"{prefix}.b_g": self.b_g,
        }


def lstm_cell(params: LSTMCell, h: Tensor, c: Tensor, x: Tensor):
    return params(h, c, x)


class Adam:
    """Adam over a named-parameter dict; lr is mutable for schedules."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / b1t
            v_hat = self.v[k] / b2t
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, named_params: dict[str, Tensor | np.ndarray],
                    config: dict | None = None):
    """Versioned binary checkpoint: JSON header + little-endian float64 blob."""
    entries = []
    blobs = []
    for name in sorted(named_params):
        arr = named_params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        arr64 = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr64.tobytes())
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "config": config or {},
         "params": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (named float64 arrays, config dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint version {header['format_version']}"
            )
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return params, header["config"]


def assign_params(named: dict[str, Tensor], values: dict[str, np.ndarray]):
    """Load checkpoint arrays into live parameter tensors, casting dtype."""
    missing = set(named) - set(values)
    extra = set(values) - set(named)
    if missing or extra:
        raise ConfigError(f"parameter name mismatch: missing={sorted(missing)}, "
                          f"extra={sorted(extra)}")
    for k, t in named.items():
        v = values[k]
        if tuple(v.shape) != tuple(t.shape):
            raise ShapeMismatch(f"{k}: checkpoint shape {v.shape} != model {t.shape}")
        t.data = v.astype(t.dtype)
