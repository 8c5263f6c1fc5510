"""Regression layers: single regressor, plain ensemble and gated ensembles.

Every variant is stored as a stack of ``L`` one-hidden-layer perceptrons
(``L = 1`` for the single regressor). Their parameters live in stacked
arrays so the whole ensemble runs as two batched contractions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .gating import NeuralTreeGate, SoftmaxGate
from .tensor import ShapeError, Tensor, add, einsum, glorot_uniform, relu


class Variant(str, enum.Enum):
    SR = "sr"
    RE = "re"
    SOFT_GRE = "soft-gre"
    TREE_GRE = "tree-gre"

    @property
    def gated(self) -> bool:
        return self in (Variant.SOFT_GRE, Variant.TREE_GRE)


@dataclass
class WeakRegressor:
    w0: np.ndarray  # (feature_dim, hidden)
    b0: np.ndarray  # (hidden,)
    w1: np.ndarray  # (hidden, out_dim)
    b1: np.ndarray  # (out_dim,)


def weak_forward(r: WeakRegressor, x) -> np.ndarray:
    """w1 . relu(w0 . x + b0) + b1 for a single feature vector or a batch."""
    x = np.asarray(x)
    if x.shape[-1] != r.w0.shape[0]:
        raise ShapeError(f"regressor expects {r.w0.shape[0]} features, got input shape {x.shape}")
    return np.maximum(x @ r.w0 + r.b0, 0) @ r.w1 + r.b1


class RegressionLayer:
    """A stack of weak regressors combined by mean, softmax gate or tree gate."""

    def __init__(self, variant, w0, b0, w1, b1, gate=None):
        self.variant = Variant(variant)
        n = w0.shape[0]
        if not (w0.ndim == 3 and b0.shape == (n, w0.shape[2]) and w1.shape[:2] == (n, w0.shape[2])
                and b1.shape == (n, w1.shape[2])):
            raise ShapeError(
                f"inconsistent regressor stack: w0 {w0.shape}, b0 {b0.shape}, w1 {w1.shape}, b1 {b1.shape}"
            )
        if self.variant is Variant.SR and n != 1:
            raise ValueError(f"single regressor layer must hold exactly one regressor, got {n}")
        if self.variant in (Variant.SR, Variant.RE) and gate is not None:
            raise ValueError(f"variant {self.variant.value} takes no gate")
        if self.variant is Variant.SOFT_GRE and not (isinstance(gate, SoftmaxGate) and gate.n_experts == n):
            raise ValueError(f"soft-gre needs a softmax gate with {n} outputs")
        if self.variant is Variant.TREE_GRE and not (isinstance(gate, NeuralTreeGate) and gate.n_leaves == n):
            raise ValueError(f"tree-gre needs a neural tree with {n} leaves")
        self.w0 = Tensor(w0, requires_grad=True)
        self.b0 = Tensor(b0, requires_grad=True)
        self.w1 = Tensor(w1, requires_grad=True)
        self.b1 = Tensor(b1, requires_grad=True)
        self.gate = gate
        # number of weak-regressor evaluations (per sample) since the last reset
        self.regressor_evaluations = 0

    @classmethod
    def init(cls, variant, feature_dim: int, out_dim: int, n_regressors: int, hidden: int,
             rng: np.random.Generator, depth: int | None = None, dtype=np.float32) -> "RegressionLayer":
        variant = Variant(variant)
        n = 1 if variant is Variant.SR else n_regressors
        w0 = glorot_uniform(rng, (n, feature_dim, hidden), feature_dim, hidden, dtype)
        w1 = glorot_uniform(rng, (n, hidden, out_dim), hidden, out_dim, dtype)
        gate = None
        if variant is Variant.SOFT_GRE:
            gate = SoftmaxGate.init(feature_dim, n, rng, dtype)
        elif variant is Variant.TREE_GRE:
            depth = depth if depth is not None else int(np.log2(n))
            if 2**depth != n:
                raise ValueError(f"tree-gre needs 2**depth == n_regressors, got depth {depth} and {n}")
            gate = NeuralTreeGate.init(feature_dim, depth, rng, dtype)
        return cls(variant, w0, np.zeros((n, hidden), dtype), w1, np.zeros((n, out_dim), dtype), gate)

    @property
    def n_regressors(self) -> int:
        return self.w0.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w0.shape[1]

    @property
    def hidden(self) -> int:
        return self.w0.shape[2]

    @property
    def out_dim(self) -> int:
        return self.w1.shape[2]

    def parameters(self) -> list[Tensor]:
        params = [self.w0, self.b0, self.w1, self.b1]
        if self.gate is not None:
            params += self.gate.parameters()
        return params

    def regressor(self, l: int) -> WeakRegressor:
        return WeakRegressor(self.w0.data[l], self.b0.data[l], self.w1.data[l], self.b1.data[l])

    def regressor_outputs(self, x: Tensor) -> Tensor:
        """Every regressor's displacement, shape (batch, L, out_dim)."""
        if x.shape[-1] != self.feature_dim:
            raise ShapeError(f"layer expects {self.feature_dim} features, got input shape {x.shape}")
        h = relu(add(einsum("bf,lfh->blh", x, self.w0), self.b0))
        self.regressor_evaluations += self.n_regressors * x.shape[0]
        return add(einsum("blh,lho->blo", h, self.w1), self.b1)

    def gate_probs(self, x: Tensor) -> Tensor | None:
        return None if self.gate is None else self.gate(x)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        outs = self.regressor_outputs(x)
        g = self.gate_probs(x)
        if g is None:
            weights = Tensor(np.full((x.shape[0], self.n_regressors), 1.0 / self.n_regressors, x.dtype))
        else:
            weights = g
        return einsum("bl,blo->bo", weights, outs), g

    __call__ = forward

    def top1(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Greedy inference: only the highest-probability regressor runs.

        Returns the raw (unweighted) output of that regressor and the gate
        vectors. Ties go to the lowest index.
        """
        if self.gate is None:
            raise ValueError(f"top-1 inference needs a gated layer, got variant {self.variant.value}")
        xd = np.asarray(x.data if isinstance(x, Tensor) else x)
        g = self.gate(Tensor(xd)).data
        winners = np.argmax(g, axis=1)
        out = np.empty((xd.shape[0], self.out_dim), dtype=np.result_type(xd.dtype, self.w1.dtype))
        for l in np.unique(winners):
            rows = winners == l
            out[rows] = weak_forward(self.regressor(int(l)), xd[rows])
        self.regressor_evaluations += xd.shape[0]
        return out, g


def layer_forward(layer: RegressionLayer, x) -> tuple[np.ndarray, np.ndarray | None]:
    """Displacement and gate vector (None for ungated variants) as arrays."""
    xd = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = xd.ndim == 1
    out, g = layer(Tensor(xd[None] if single else xd))
    out = out.data[0] if single else out.data
    if g is not None:
        g = g.data[0] if single else g.data
    return out, g


def top1_forward(layer: RegressionLayer, x) -> np.ndarray:
    xd = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = xd.ndim == 1
    out, _ = layer.top1(xd[None] if single else xd)
    return out[0] if single else out


def regression_layer_size(variant, feature_dim: int, out_dim: int, n_regressors: int, hidden: int,
                          depth: int | None = None) -> int:
    """Learnable scalar count of a regression layer, from its dimensions alone."""
    variant = Variant(variant)
    n = 1 if variant is Variant.SR else n_regressors
    count = n * (feature_dim * hidden + hidden + hidden * out_dim + out_dim)
    if variant is Variant.SOFT_GRE:
        count += feature_dim * n + n
    elif variant is Variant.TREE_GRE:
        nodes = 2 ** (depth if depth is not None else int(np.log2(n))) - 1
        count += nodes * (feature_dim + 1)
    return count


def count_parameters(layer: RegressionLayer) -> int:
    return sum(p.size for p in layer.parameters())


def matched_single_hidden(feature_dim: int, out_dim: int, n_regressors: int, hidden: int) -> int:
    """Hidden width giving a single regressor the weight count of an ensemble."""
    ensemble = n_regressors * (feature_dim * hidden + hidden + hidden * out_dim + out_dim)
    return max(1, round((ensemble - out_dim) / (feature_dim + 1 + out_dim)))
