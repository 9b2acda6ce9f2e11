"""Gradient surrogate network and Taylor-residual losses.

:class:`GradNet` is a small tanh MLP ``g: R^n -> R^n`` trained so that
``g(x)`` matches the gradient of the objective. Training pairs
``(x_i, x_j)`` with ``tau = x_j - x_i`` enter through the residual::

    r = y_i - y_j + g(x_i)^T tau                       (first order)
    r = y_i - y_j + g(x_i)^T tau + 0.5 tau^T J(x_i) tau  (second order)

where ``J`` is the Jacobian of ``g``. ``tau^T J tau`` is a directional
derivative, so it is computed with one forward-mode (tangent) pass and no
explicit Jacobian. The loss is ``sum_k w_k r_k**2``.

Parameter gradients are written out by hand. With the Jacobian *detached*
the second-order term is a constant during backpropagation; *attached*
backpropagates through the tangent stream as well.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Variant = Literal["EGL", "EvoGrad", "HGrad", "EvoGrad2"]
VARIANTS = ("EGL", "EvoGrad", "HGrad", "EvoGrad2")
SECOND_ORDER = frozenset({"HGrad", "EvoGrad2"})
DEFAULT_HIDDEN = (10, 15, 10)


class GradNet:
    """Feed-forward ``n -> hidden... -> n`` network with tanh hidden units and a linear output.

    Weights use the uniform fan-in scheme ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """

    def __init__(self, dim: int, hidden: Sequence[int] = DEFAULT_HIDDEN,
                 rng: np.random.Generator | None = None):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.layer_sizes = [int(dim), *(int(h) for h in hidden), int(dim)]
        rng = np.random.default_rng(0) if rng is None else rng
        self.flat = np.empty(self.num_params(self.layer_sizes))
        self._bind()
        for fan_in, W, b in zip(self.layer_sizes[:-1], self.weights, self.biases):
            bound = 1.0 / np.sqrt(fan_in)
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)

    @staticmethod
    def num_params(layer_sizes: Sequence[int]) -> int:
        return sum(o * i + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))

    def _bind(self) -> None:
        # weights and biases are views into self.flat
        self.weights, self.biases = split_params(self.flat, self.layer_sizes)

    @property
    def dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter views in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def get_flat(self) -> np.ndarray:
        return self.flat.copy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.flat.shape:
            raise ValueError(f"expected {self.flat.size} parameters, got {flat.size}")
        self.flat[...] = flat

    def copy(self) -> "GradNet":
        other = GradNet.__new__(GradNet)
        other.layer_sizes = list(self.layer_sizes)
        other.flat = self.flat.copy()
        other._bind()
        return other

    def _check(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected input of dimension {self.dim}, got shape {x.shape}")
        return X, single

    def forward(self, x) -> np.ndarray:
        X, single = self._check(x)
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < last:
                h = np.tanh(h)
        return h[0] if single else h

    __call__ = forward

    def jvp(self, x, tangent) -> tuple[np.ndarray, np.ndarray]:
        """``(g(x), J(x) @ tangent)`` by forward-mode accumulation, row-wise for batches."""
        X, single = self._check(x)
        T = np.asarray(tangent, dtype=float).reshape(X.shape)
        out, dout, _ = _forward_tangent(self, X, T)
        return (out[0], dout[0]) if single else (out, dout)

    def jacobian(self, x) -> np.ndarray:
        """``J[k, l] = d g_k / d x_l`` (shape ``(n, n)``, or ``(B, n, n)`` for a batch)."""
        X, single = self._check(x)
        n = self.dim
        # tangent e_l through layer-wise chain rule, all l at once
        T = np.broadcast_to(np.eye(n), (X.shape[0], n, n))  # (B, l, features)
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            T = T @ W.T
            if i < last:
                h = np.tanh(z)
                T = T * (1.0 - h * h)[:, None, :]
            else:
                h = z
        J = np.swapaxes(T, 1, 2)
        return J[0] if single else J

    def save(self, path) -> None:
        """Flat parameter vector plus a layer-size header."""
        np.savez(Path(path), layer_sizes=np.asarray(self.layer_sizes), params=self.get_flat())

    @classmethod
    def load(cls, path) -> "GradNet":
        data = np.load(Path(path))
        sizes = [int(s) for s in data["layer_sizes"]]
        net = cls(sizes[0], sizes[1:-1])
        net.set_flat(data["params"])
        return net


def split_params(flat: np.ndarray, layer_sizes: Sequence[int]):
    """Views ``(weights, biases)`` into a flat parameter vector."""
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        k = fan_in * fan_out
        weights.append(flat[offset:offset + k].reshape(fan_out, fan_in))
        offset += k
        biases.append(flat[offset:offset + fan_out])
        offset += fan_out
    return weights, biases


def _forward_tangent(net: GradNet, X: np.ndarray, T: np.ndarray | None):
    """Primal and (optional) tangent pass; returns (out, dout, cache) with cache for backprop.

    Primal and tangent rows are stacked so each layer costs one matmul.
    """
    cache = []
    B = X.shape[0]
    last = len(net.weights) - 1
    if T is None:
        h = X
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            z = h @ W.T
            z += b
            if i < last:
                a = np.tanh(z)
                cache.append((h, None, a, 1.0 - a * a, None))
                h = a
            else:
                cache.append((h, None, None, None, None))
                h = z
        return h, None, cache
    ht = np.concatenate([X, T])
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        zz = ht @ W.T
        z, dz = zz[:B], zz[B:]
        z += b
        if i < last:
            a = np.tanh(z)
            s = 1.0 - a * a
            cache.append((ht[:B], ht[B:], a, s, dz))
            ht = np.concatenate([a, s * dz])
        else:
            cache.append((ht[:B], ht[B:], None, None, None))
            ht = zz
    return ht[:B], ht[B:], cache


# ---------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class TaylorPair:
    anchor: np.ndarray
    probe: np.ndarray
    y_anchor: float
    y_probe: float
    weight: float = 1.0


@dataclass
class PairBatch:
    """Struct-of-arrays form of many :class:`TaylorPair` objects."""

    anchors: np.ndarray  # (k, n)
    probes: np.ndarray  # (k, n)
    y_anchor: np.ndarray  # (k,)
    y_probe: np.ndarray  # (k,)
    weights: np.ndarray  # (k,)

    def __len__(self) -> int:
        return len(self.y_anchor)

    def __iter__(self) -> Iterator[TaylorPair]:
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k):
        if isinstance(k, (int, np.integer)):
            return TaylorPair(self.anchors[k], self.probes[k], float(self.y_anchor[k]),
                              float(self.y_probe[k]), float(self.weights[k]))
        return PairBatch(self.anchors[k], self.probes[k], self.y_anchor[k],
                         self.y_probe[k], self.weights[k])

    @property
    def taus(self) -> np.ndarray:
        return self.probes - self.anchors

    @classmethod
    def from_pairs(cls, pairs: Sequence[TaylorPair]) -> "PairBatch":
        return cls(
            anchors=np.array([p.anchor for p in pairs], dtype=float),
            probes=np.array([p.probe for p in pairs], dtype=float),
            y_anchor=np.array([p.y_anchor for p in pairs], dtype=float),
            y_probe=np.array([p.y_probe for p in pairs], dtype=float),
            weights=np.array([p.weight for p in pairs], dtype=float),
        )

    @classmethod
    def empty(cls, dim: int) -> "PairBatch":
        z = np.empty(0)
        return cls(np.empty((0, dim)), np.empty((0, dim)), z, z.copy(), z.copy())

    def with_weights(self, weights) -> "PairBatch":
        return PairBatch(self.anchors, self.probes, self.y_anchor, self.y_probe,
                         np.asarray(weights, dtype=float))


def as_batch(pairs) -> PairBatch:
    if isinstance(pairs, PairBatch):
        return pairs
    if isinstance(pairs, TaylorPair):
        return PairBatch.from_pairs([pairs])
    return PairBatch.from_pairs(list(pairs))


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossConfig:
    variant: Variant = "EvoGrad2"
    jacobian_attached: bool = False
    batch_size: int = 64
    learn_rate: float = 1e-3
    optimizer: Literal["adam", "sgd"] = "adam"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.batch_size < 1 or not self.learn_rate > 0:
            raise ValueError("batch_size and learn_rate must be positive")

    @property
    def second_order(self) -> bool:
        return self.variant in SECOND_ORDER


def batch_residuals(cfg: LossConfig, net: GradNet, batch: PairBatch,
                    hessian_term: bool | None = None) -> np.ndarray:
    """Residuals for every pair of ``batch``."""
    use_h = cfg.second_order if hessian_term is None else hessian_term
    tau = batch.taus
    if use_h:
        out, dout, _ = _forward_tangent(net, batch.anchors, tau)
        quad = (dout * tau).sum(1)
    else:
        out = net.forward(batch.anchors)
        quad = 0.0
    return batch.y_anchor - batch.y_probe + (out * tau).sum(1) + 0.5 * quad


def residual(cfg: LossConfig, net: GradNet, pair: TaylorPair) -> float:
    return float(batch_residuals(cfg, net, as_batch(pair))[0])


def weighted_loss(cfg: LossConfig, net: GradNet, pairs, hessian_term: bool | None = None) -> float:
    """``sum_k w_k r_k**2`` over ``pairs``."""
    batch = as_batch(pairs)
    r = batch_residuals(cfg, net, batch, hessian_term)
    return float(np.sum(batch.weights * r * r))


def loss_and_grad(cfg: LossConfig, net: GradNet, batch: PairBatch, scale: float = 1.0,
                  out: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """``scale * sum_k w_k r_k**2`` and its gradient as a flat vector aligned with ``net.flat``.

    ``out`` may supply the gradient buffer to avoid an allocation per step.
    """
    tau = batch.probes - batch.anchors
    second = cfg.second_order
    g, dg, cache = _forward_tangent(net, batch.anchors, tau if second else None)
    r = batch.y_anchor - batch.y_probe + (g * tau).sum(1)
    if second:
        r += 0.5 * (dg * tau).sum(1)
    wr = scale * batch.weights * r
    loss = float(wr @ r)

    grad = np.empty_like(net.flat) if out is None else out
    g_weights, g_biases = split_params(grad, net.layer_sizes)
    bar_h = (2.0 * wr)[:, None] * tau
    bar_t = (wr[:, None] * tau) if (second and cfg.jacobian_attached) else None
    for i in range(len(net.weights) - 1, -1, -1):
        h_in, t_in, a, s, dz = cache[i]
        if a is None:  # linear output layer
            bar_z, bar_dz = bar_h, bar_t
        elif bar_t is not None:
            # d/dz of the tangent s(z) * dz, with s' = -2 a s
            bar_dz = bar_t * s
            bar_z = bar_h * s
            bar_z -= 2.0 * bar_dz * dz * a
        else:
            bar_z, bar_dz = bar_h * s, None
        np.matmul(bar_z.T, h_in, out=g_weights[i])
        if bar_dz is not None:
            g_weights[i] += bar_dz.T @ t_in
        bar_z.sum(0, out=g_biases[i])
        if i > 0:
            W = net.weights[i]
            bar_h = bar_z @ W
            bar_t = bar_dz @ W if bar_dz is not None else None
    return loss, grad


class Adam:
    """Per-parameter moment-based steps on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * grad * grad
        params -= step * self.m / (np.sqrt(self.v) + self.eps)

    def state(self):
        return self.m.copy(), self.v.copy(), self.t

    def restore(self, state) -> None:
        m, v, self.t = state
        self.m, self.v = m.copy(), v.copy()


class SGD:
    def __init__(self, size: int, lr: float = 1e-3):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad

    def state(self):
        return None

    def restore(self, state) -> None:
        pass


class Trainer:
    """Owns a net, its loss configuration and optimizer state across epochs."""

    def __init__(self, net: GradNet, cfg: LossConfig):
        self.net = net
        self.cfg = cfg
        opt_cls = Adam if cfg.optimizer == "adam" else SGD
        self.opt = opt_cls(net.flat.size, lr=cfg.learn_rate)
        self.nan_events = 0

    @property
    def learn_rate(self) -> float:
        return self.opt.lr

    def train_epoch(self, pairs, rng: np.random.Generator) -> float:
        """One shuffled pass of mini-batch steps.

        Returns the running estimate of the weighted loss over the epoch (each
        mini-batch loss taken before its step), which costs no extra pass.

        A non-finite loss aborts the epoch, restores the pre-epoch parameters,
        halves the learn rate and returns ``nan``.
        """
        batch = as_batch(pairs)
        k = len(batch)
        if k == 0:
            raise ValueError("cannot train on an empty pair set")
        snapshot = self.net.get_flat()
        opt_state = self.opt.state()
        order = rng.permutation(k)
        bs = self.cfg.batch_size
        flat = self.net.flat
        shuffled = batch[order]
        grad = np.empty_like(flat)
        running = 0.0
        # non-finite values are handled explicitly below
        with np.errstate(all="ignore"):
            for start in range(0, k, bs):
                mini = shuffled[start:start + bs]
                # rescale so every mini-batch estimates the full weighted sum
                loss, _ = loss_and_grad(self.cfg, self.net, mini, scale=k / len(mini), out=grad)
                # a non-finite gradient with a finite loss still poisons flat, caught below
                if not math.isfinite(loss):
                    return self._recover(snapshot, opt_state)
                running += loss * len(mini) / k
                self.opt.step(flat, grad)
        if not np.all(np.isfinite(flat)):
            return self._recover(snapshot, opt_state)
        return running

    def _recover(self, snapshot, opt_state) -> float:
        self.net.set_flat(snapshot)
        self.opt.restore(opt_state)
        self.opt.lr *= 0.5
        self.nan_events += 1
        logger.warning("non-finite loss; parameters restored, learn rate halved to %g", self.opt.lr)
        return float("nan")


def train_epoch(trainer: Trainer, pairs, rng: np.random.Generator) -> float:
    return trainer.train_epoch(pairs, rng)
