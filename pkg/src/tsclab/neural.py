"""Dense feed-forward Q-network in numpy, with hand-written backprop and Adam.

Weights are stored ``(out, in)``; every weight matrix carries a binary prune
mask of the same shape. Masked weights are held at exactly zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

CHECKPOINT_MAGIC = b"TSCNET\x00\x01"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "linear")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    mask: np.ndarray
    activation: str = "relu"


class Gradients(list):
    """``[(dW, db), ...]`` whose arrays are views into one flat vector ``.flat``."""

    def __init__(self, pairs, flat: np.ndarray):
        super().__init__(pairs)
        self.flat = flat


class DenseNet:
    """Parameters live in one flat vector ``theta`` laid out as W0, b0, W1, b1, ...

    ``layers[i].W`` / ``.b`` / ``.mask`` are views, so in-place edits are seen
    everywhere; always mutate them in place.
    """

    def __init__(self, dims: list[int], activations: list[str]):
        if len(dims) < 2 or any(int(d) <= 0 for d in dims):
            raise ValueError(f"dims must list >= 2 positive sizes, got {dims}")
        if len(activations) != len(dims) - 1 or any(a not in ACTIVATIONS for a in activations):
            raise ValueError(f"need {len(dims) - 1} activation tags from {ACTIVATIONS}")
        self._dims = [int(d) for d in dims]
        self._acts = list(activations)
        total = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
        self.theta = np.zeros(total)
        self.mask_full = np.ones(total)  # bias entries stay 1
        self.layers = self._views(self.theta, self.mask_full)

    def _views(self, theta: np.ndarray, mask: np.ndarray | None):
        out = []
        off = 0
        for (fan_in, fan_out), act in zip(zip(self._dims[:-1], self._dims[1:]), self._acts):
            n = fan_in * fan_out
            W = theta[off:off + n].reshape(fan_out, fan_in)
            M = mask[off:off + n].reshape(fan_out, fan_in) if mask is not None else None
            b = theta[off + n:off + n + fan_out]
            out.append(Layer(W, b, M, act))
            off += n + fan_out
        return out

    @property
    def dims(self) -> list[int]:
        return list(self._dims)

    @property
    def activations(self) -> list[str]:
        return list(self._acts)

    @property
    def input_dim(self) -> int:
        return self._dims[0]

    @property
    def output_dim(self) -> int:
        return self._dims[-1]

    @property
    def num_weights(self) -> int:
        return sum(ly.W.size for ly in self.layers)

    def copy(self) -> DenseNet:
        out = DenseNet(self._dims, self._acts)
        out.theta[:] = self.theta
        out.mask_full[:] = self.mask_full
        return out

    def apply_masks(self) -> None:
        self.theta *= self.mask_full

    def forward(self, x: np.ndarray, keep: bool = False):
        """Q-values for one state (1-D) or a batch (2-D, rows are states).

        With ``keep=True`` also returns the per-layer (input, pre-activation) cache.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input has {x.shape[-1]} features, net expects {self.input_dim}")
        cache = []
        h = x
        for ly in self.layers:
            z = h @ (ly.W * ly.mask).T + ly.b
            if keep:
                cache.append((h, z))
            h = np.maximum(z, 0.0) if ly.activation == "relu" else z
        return (h, cache) if keep else h

    def backward(self, x: np.ndarray, grad_out: np.ndarray, cache=None) -> Gradients:
        """Gradients ``[(dW, db), ...]`` of ``sum(grad_out * forward(x))``."""
        if cache is None:
            _, cache = self.forward(x, keep=True)
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape[-1] != self.output_dim:
            raise ValueError(f"grad_out has {g.shape[-1]} entries, net outputs {self.output_dim}")
        flat = np.zeros_like(self.theta)
        views = self._views(flat, None)
        for i in range(len(self.layers) - 1, -1, -1):
            ly = self.layers[i]
            h, z = cache[i]
            if ly.activation == "relu":
                g = g * (z > 0)
            dW, db = views[i].W, views[i].b
            if g.ndim == 1:
                np.outer(g, h, out=dW)
                db[:] = g
            else:
                np.matmul(g.T, h, out=dW)
                g.sum(axis=0, out=db)
            if i:
                g = g @ (ly.W * ly.mask)
        flat *= self.mask_full
        return Gradients([(v.W, v.b) for v in views], flat)

    def params(self) -> list[np.ndarray]:
        out = []
        for ly in self.layers:
            out += [ly.W, ly.b]
        return out


def init(dims: list[int], seed: int, activation: str = "relu") -> DenseNet:
    if len(dims) < 2 or any(int(d) <= 0 for d in dims):
        raise ValueError(f"dims must list >= 2 positive sizes, got {dims}")
    rng = np.random.default_rng(seed)
    acts = [activation] * (len(dims) - 2) + ["linear"]
    net = DenseNet(dims, acts)
    for ly, fan_in, fan_out in zip(net.layers, dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        ly.W[:] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return net


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def for_net(cls, net: DenseNet, lr: float = 1e-3, **kw) -> OptState:
        return cls(lr=lr, m=np.zeros_like(net.theta), v=np.zeros_like(net.theta), **kw)


def opt_step(net: DenseNet, state: OptState, grads) -> None:
    """Adam update of every parameter, then re-zero the masked weights."""
    flat = getattr(grads, "flat", None)
    if flat is None:
        pairs = list(grads)
        params = net.params()
        arrs = [g for pair in pairs for g in pair]
        if len(arrs) != len(params) or any(g.shape != p.shape for g, p in zip(arrs, params)):
            raise ValueError("gradient shapes do not match the network parameters")
        flat = np.concatenate([np.ravel(g) for g in arrs])
    if flat.shape != net.theta.shape:
        raise ValueError("gradient shapes do not match the network parameters")
    if state.m is None:
        state.m = np.zeros_like(net.theta)
        state.v = np.zeros_like(net.theta)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 / (1.0 - b1**state.t), 1.0 / (1.0 - b2**state.t)
    _adam_kernel(net.theta, net.mask_full, flat, state.m, state.v, b1, b2, c1, c2, state.lr,
                 state.eps)


@njit(cache=True, fastmath=True)
def _adam_kernel(theta, mask, g, m, v, b1, b2, c1, c2, lr, eps):
    # bias-corrected moments: m_hat = m * c1, v_hat = v * c2
    for i in range(theta.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        # flush denormals: dead units feed exact zeros and m decays geometrically
        mi = mi if abs(mi) > 1e-150 else 0.0
        vi = vi if vi > 1e-300 else 0.0
        m[i] = mi
        v[i] = vi
        theta[i] = (theta[i] - lr * (mi * c1) / (np.sqrt(vi * c2) + eps)) * mask[i]


def is_standard(net: DenseNet) -> bool:
    """ReLU hidden layers and a linear head: the layout the fused update supports."""
    acts = net.activations
    return acts[-1] == "linear" and all(a == "relu" for a in acts[:-1])


def fused_q_update(net: DenseNet, target: DenseNet, state: OptState, states: np.ndarray,
                   actions: np.ndarray, rewards: np.ndarray, next_states: np.ndarray,
                   gamma: float) -> float:
    """One TD minibatch step in a single compiled call; returns the MSE before the step.

    Same maths as target forward, ``forward``/``backward`` on the taken-action
    squared error and ``opt_step``, without per-op interpreter overhead.
    """
    if state.m is None:
        state.m = np.zeros_like(net.theta)
        state.v = np.zeros_like(net.theta)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 / (1.0 - b1**state.t), 1.0 / (1.0 - b2**state.t)
    dims = np.asarray(net.dims, dtype=np.int64)
    return _q_update_kernel(net.theta, target.theta, net.mask_full, state.m, state.v, dims,
                            np.ascontiguousarray(states, dtype=np.float64),
                            np.ascontiguousarray(actions, dtype=np.int64),
                            np.ascontiguousarray(rewards, dtype=np.float64),
                            np.ascontiguousarray(next_states, dtype=np.float64),
                            gamma, b1, b2, c1, c2, state.lr, state.eps)


@njit(cache=True)
def _q_update_kernel(theta, tgt, mask, m, v, dims, S, A, R, S2, gamma, b1, b2, c1, c2, lr, eps):
    nl = dims.size - 1
    offs = np.zeros(nl + 1, np.int64)
    for k in range(nl):
        offs[k + 1] = offs[k] + dims[k] * dims[k + 1] + dims[k + 1]
    n = S.shape[0]

    h = S2
    for k in range(nl):
        fi, fo = dims[k], dims[k + 1]
        W = tgt[offs[k]:offs[k] + fi * fo].reshape((fo, fi))
        z = np.dot(h, W.T) + tgt[offs[k] + fi * fo:offs[k + 1]]
        h = np.maximum(z, 0.0) if k < nl - 1 else z
    y = np.empty(n)
    for i in range(n):
        y[i] = R[i] + gamma * h[i].max()

    hs = [S]
    zs = []
    h = S
    for k in range(nl):
        fi, fo = dims[k], dims[k + 1]
        W = theta[offs[k]:offs[k] + fi * fo].reshape((fo, fi))
        z = np.dot(h, W.T) + theta[offs[k] + fi * fo:offs[k + 1]]
        zs.append(z)
        h = np.maximum(z, 0.0) if k < nl - 1 else z
        hs.append(h)

    g = np.zeros_like(h)
    loss = 0.0
    for i in range(n):
        d = h[i, A[i]] - y[i]
        g[i, A[i]] = 2.0 * d / n
        loss += d * d

    grad = np.zeros_like(theta)
    for k in range(nl - 1, -1, -1):
        fi, fo = dims[k], dims[k + 1]
        if k < nl - 1:
            g = g * (zs[k] > 0)
        o = offs[k]
        grad[o:o + fi * fo] = np.dot(g.T, hs[k]).ravel()
        grad[o + fi * fo:offs[k + 1]] = g.sum(axis=0)
        if k:
            g = np.dot(g, theta[o:o + fi * fo].reshape((fo, fi)))

    grad *= mask
    _adam_kernel(theta, mask, grad, m, v, b1, b2, c1, c2, lr, eps)
    return loss / n


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(net: DenseNet, path: str | Path, extra: dict | None = None) -> Path:
    """Header line (JSON) after a magic tag, then per layer W, b, mask as little-endian f8."""
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "dims": net.dims,
        "activations": [ly.activation for ly in net.layers],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for ly in net.layers:
            for arr in (ly.W, ly.b, ly.mask):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[DenseNet, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a network checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + n])
    off += n
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('schema_version')}")
    net = DenseNet(header["dims"], header["activations"])
    for ly in net.layers:
        for arr in (ly.W, ly.b, ly.mask):
            arr[...] = np.frombuffer(raw, dtype="<f8", count=arr.size, offset=off).reshape(arr.shape)
            off += 8 * arr.size
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return net, header.get("extra", {})
