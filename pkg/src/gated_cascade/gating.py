"""Gates that weight the regressor ensemble.

Two gates are provided:

* ``SoftmaxGate``: an affine projection of the feature vector onto L
  logits followed by a softmax.
* ``NeuralTreeGate``: a full binary tree of depth D whose inner nodes are
  single sigmoid neurons on the feature vector. Node ``n`` sends an input
  to its left child ``2n + 1`` with probability ``sigmoid(w_n . x + b_n)``
  and to its right child ``2n + 2`` otherwise. The gate output is the
  vector of the 2**D leaf-reaching probabilities, leaves ordered left to
  right.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    affine,
    glorot_uniform,
    grad,
    sigmoid,
    softmax,
    stable_sigmoid,
)


def left_child(n: int) -> int:
    return 2 * n + 1


def right_child(n: int) -> int:
    return 2 * n + 2


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


class SoftmaxGate:
    """softmax(x @ weight + bias) over L experts."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ShapeError(f"softmax gate: weight {weight.shape} and bias {bias.shape} disagree")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, feature_dim: int, n_experts: int, rng: np.random.Generator, dtype=np.float32):
        w = glorot_uniform(rng, (feature_dim, n_experts), feature_dim, n_experts, dtype)
        return cls(w, np.zeros(n_experts, dtype=dtype))

    @classmethod
    def zeros(cls, feature_dim: int, n_experts: int, dtype=np.float32):
        return cls(np.zeros((feature_dim, n_experts), dtype), np.zeros(n_experts, dtype))

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.feature_dim:
            raise ShapeError(f"softmax gate expects {self.feature_dim} features, got input shape {x.shape}")
        return softmax(affine(x, self.weight, self.bias))


class NeuralTreeGate:
    """Soft binary routing tree whose leaf probabilities gate the ensemble.

    Node parameters are stored column-wise: ``weight[:, n]`` and ``bias[n]``
    belong to node ``n`` in breadth-first order.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        n_nodes = weight.shape[1] if weight.ndim == 2 else -1
        depth = int(np.log2(n_nodes + 1)) if n_nodes > 0 else 0
        if depth < 1 or 2**depth - 1 != n_nodes or bias.shape != (n_nodes,):
            raise ShapeError(
                f"tree gate: weight {weight.shape} / bias {bias.shape} do not describe a full binary tree"
            )
        self.depth = depth
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, feature_dim: int, depth: int, rng: np.random.Generator, dtype=np.float32):
        n = 2**depth - 1
        return cls(glorot_uniform(rng, (feature_dim, n), feature_dim, n, dtype), np.zeros(n, dtype=dtype))

    @classmethod
    def zeros(cls, feature_dim: int, depth: int, dtype=np.float32):
        n = 2**depth - 1
        return cls(np.zeros((feature_dim, n), dtype), np.zeros(n, dtype))

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def n_nodes(self) -> int:
        return 2**self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2**self.depth

    def node(self, n: int) -> tuple[np.ndarray, float]:
        return self.weight.data[:, n], float(self.bias.data[n])

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def routing(self, x: Tensor) -> Tensor:
        """Left-routing probability of every node, shape (batch, 2**D - 1)."""
        if x.shape[-1] != self.feature_dim:
            raise ShapeError(f"tree gate expects {self.feature_dim} features, got input shape {x.shape}")
        return sigmoid(affine(x, self.weight, self.bias))

    def __call__(self, x: Tensor) -> Tensor:
        return tree_leaf_probs(self.routing(x))


def tree_leaf_probs(d: Tensor) -> Tensor:
    """Leaf probabilities from breadth-first node routing probabilities.

    The tree is expanded level by level: each leaf-so-far probability is
    split into ``mu * d_n`` (left) and ``mu * (1 - d_n)`` (right). The
    adjoint walks the levels back up, so it only ever multiplies by path
    prefixes and never divides by a (possibly saturated) routing value.
    """
    dd = d.data
    n_nodes = dd.shape[-1]
    depth = int(np.log2(n_nodes + 1))
    if 2**depth - 1 != n_nodes:
        raise ShapeError(f"routing vector of length {n_nodes} is not a full binary tree")
    batch = dd.shape[0]
    levels = [np.ones((batch, 1), dtype=dd.dtype)]
    for k in range(depth):
        mu = levels[-1]
        dk = dd[:, 2**k - 1 : 2 ** (k + 1) - 1]
        nxt = np.empty((batch, 2 ** (k + 1)), dtype=dd.dtype)
        nxt[:, 0::2] = mu * dk
        nxt[:, 1::2] = mu * (1 - dk)
        levels.append(nxt)

    def backward(g):
        gd = np.empty_like(dd)
        for k in range(depth - 1, -1, -1):
            mu = levels[k]
            dk = dd[:, 2**k - 1 : 2 ** (k + 1) - 1]
            gl, gr = g[:, 0::2], g[:, 1::2]
            gd[:, 2**k - 1 : 2 ** (k + 1) - 1] = (gl - gr) * mu
            g = gl * dk + gr * (1 - dk)
        return (gd,)

    return Tensor._from_op(levels[-1], (d,), backward, "tree_leaf_probs")


# functional forms -----------------------------------------------------------------


def routing_prob(w_n, b_n: float, x) -> float:
    """Probability that ``x`` is routed to the left child of a node."""
    w_n, x = np.asarray(w_n), np.asarray(x)
    if w_n.shape != x.shape:
        raise ShapeError(f"node weight shape {w_n.shape} does not match feature shape {x.shape}")
    return float(stable_sigmoid(np.asarray(np.dot(w_n, x) + b_n)))


def leaf_probabilities(tree: NeuralTreeGate, x) -> np.ndarray:
    """Gate vector of length 2**D (or (batch, 2**D) for a batch of inputs)."""
    xb, single = _as_batch(x)
    mu = tree(Tensor(xb.astype(tree.weight.dtype, copy=False))).data
    return mu[0] if single else mu


def softmax_gate(gate: SoftmaxGate, x) -> np.ndarray:
    xb, single = _as_batch(x)
    p = gate(Tensor(xb.astype(gate.weight.dtype, copy=False))).data
    return p[0] if single else p


def gate_backward(gate, x, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * gate(x))`` w.r.t. gate parameters and ``x``.

    Returns ``({"weight": ..., "bias": ...}, grad_x)`` with ``grad_x`` shaped
    like ``x``.
    """
    xb, single = _as_batch(x)
    xt = Tensor(xb.astype(gate.weight.dtype, copy=False), requires_grad=True)
    up = np.asarray(upstream, dtype=gate.weight.dtype).reshape(xb.shape[0], -1)
    out = (gate(xt) * up).sum()
    gw, gb, gx = grad(out, [gate.weight, gate.bias, xt])
    return {"weight": gw, "bias": gb}, gx[0] if single else gx
