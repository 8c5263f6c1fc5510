"""Alignment error metrics and gate-behaviour analyses."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cascade import CascadeModel, cascade_predict

# 68-point markup: 36-41 left-eye contour, 42-47 right-eye contour (0-based)
LEFT_EYE_68 = slice(36, 42)
RIGHT_EYE_68 = slice(42, 48)
CED_THRESHOLDS = np.linspace(0.0, 10.0, 100)


def interpupil_distance_68(shape) -> float:
    """Distance between the two eye-contour centroids of a 68-point shape."""
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != (68, 2):
        raise ValueError(f"the 68-point pupil surrogate needs a (68, 2) shape, got {shape.shape}")
    return float(np.linalg.norm(shape[LEFT_EYE_68].mean(axis=0) - shape[RIGHT_EYE_68].mean(axis=0)))


def landmark_pair_distance(i: int, j: int) -> Callable[[np.ndarray], float]:
    def distance(shape) -> float:
        shape = np.asarray(shape, dtype=np.float64)
        return float(np.linalg.norm(shape[i] - shape[j]))

    return distance


def make_normalizer(name: str, landmarks: int) -> Callable[[np.ndarray], float]:
    """``pupils68``, ``pair:i,j`` or ``auto`` (pupils68 for 68 points, else landmarks 0 and 1)."""
    if name == "auto":
        name = "pupils68" if landmarks == 68 else "pair:0,1"
    if name == "pupils68":
        return interpupil_distance_68
    if name.startswith("pair:"):
        i, j = (int(v) for v in name[5:].split(","))
        return landmark_pair_distance(i, j)
    raise ValueError(f"unknown normalizer {name!r}")


def nme(pred, truth, normalizer: Callable[[np.ndarray], float] | float = interpupil_distance_68) -> float:
    """Mean point-to-point error over the normalising distance, times 100."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {truth.shape}")
    d = float(normalizer) if not callable(normalizer) else normalizer(truth)
    if not d > 0:
        raise ValueError(f"normalising distance must be positive, got {d}")
    return 100.0 * float(np.linalg.norm(pred - truth, axis=-1).mean()) / d


@dataclass
class NmeResult:
    errors: np.ndarray  # per sample
    ids: list[str]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    def ced(self, thresholds=CED_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
        """Fraction of samples whose error is at most each threshold."""
        thresholds = np.asarray(thresholds, dtype=np.float64)
        return thresholds, (self.errors[None, :] <= thresholds[:, None]).mean(axis=1)


def evaluate(preds, truths, normalizer, ids: Sequence[str] | None = None) -> NmeResult:
    errors = np.array([nme(p, t, normalizer) for p, t in zip(preds, truths)])
    ids = list(ids) if ids is not None else [str(i) for i in range(len(errors))]
    return NmeResult(errors, ids)


# gate analysis --------------------------------------------------------------------


def cumulative_gate_curve(gates) -> np.ndarray:
    """Average over samples of the descending-sorted cumulative gate mass."""
    gates = np.atleast_2d(np.asarray(gates, dtype=np.float64))
    return np.cumsum(-np.sort(-gates, axis=1), axis=1).mean(axis=0)


@dataclass
class GateStats:
    curves: np.ndarray  # (K, L)

    def rows(self):
        for k, curve in enumerate(self.curves):
            for r, v in enumerate(curve):
                yield k + 1, r + 1, float(v)


def gate_cumulative(model: CascadeModel, images) -> GateStats:
    if not model.config.variant_enum.gated:
        raise ValueError(f"gate statistics need a gated model, this one is variant {model.config.variant!r}")
    pred = cascade_predict(model, np.asarray(images))
    return GateStats(np.stack([cumulative_gate_curve(g) for g in pred.gates]))


# landmark mapping ---------------------------------------------------------------------


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class LandmarkMap:
    """dst = A @ src + c on flattened shapes."""

    A: np.ndarray  # (2 * P_dst, 2 * P_src)
    c: np.ndarray  # (2 * P_dst,)

    @property
    def src_points(self) -> int:
        return self.A.shape[1] // 2

    @property
    def dst_points(self) -> int:
        return self.A.shape[0] // 2

    def __call__(self, shapes) -> np.ndarray:
        shapes = np.asarray(shapes, dtype=np.float64)
        single = shapes.ndim == 2
        flat = shapes.reshape(1 if single else len(shapes), -1)
        if flat.shape[1] != self.A.shape[1]:
            raise ValueError(f"map expects {self.src_points} source points, got shape {shapes.shape}")
        out = (flat @ self.A.T + self.c).reshape(-1, self.dst_points, 2)
        return out[0] if single else out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, A=self.A, c=self.c)

    @classmethod
    def load(cls, path) -> "LandmarkMap":
        with np.load(path) as z:
            return cls(z["A"], z["c"])


def fit_landmark_map(src, dst, ridge: float = 0.0) -> LandmarkMap:
    """Least-squares affine map between two markups.

    ``src`` is (N, P_src, 2), ``dst`` (N, P_dst, 2). Without a ridge term the
    design matrix must have full column rank.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if len(dst) != n or n == 0:
        raise ValueError("need the same positive number of source and target shapes")
    X = np.hstack([src.reshape(n, -1), np.ones((n, 1))])
    Y = dst.reshape(n, -1)
    if ridge > 0:
        reg = ridge * np.eye(X.shape[1])
        reg[-1, -1] = 0.0  # offset is not penalised
        W = np.linalg.solve(X.T @ X + reg, X.T @ Y)
    else:
        W, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
        if rank < X.shape[1]:
            raise RankDeficientError(
                f"design matrix has rank {rank} < {X.shape[1]}; add shape pairs or pass a ridge term"
            )
    return LandmarkMap(W[:-1].T.copy(), W[-1].copy())


# trajectories ----------------------------------------------------------------------


@dataclass
class TrajectoryReport:
    shapes: list[np.ndarray]  # K + 1 shapes, initial first
    winners: list[int | None]  # argmax regressor per stage (None if ungated)
    gates: list[np.ndarray | None]


def trajectory_report(model: CascadeModel, image, mode: str = "full") -> TrajectoryReport:
    pred = cascade_predict(model, np.asarray(image), mode=mode)
    winners = [None if g is None else int(np.argmax(g)) for g in pred.gates]
    return TrajectoryReport(pred.shapes, winners, pred.gates)


# CSV ------------------------------------------------------------------------------------


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def errors_csv(result: NmeResult) -> str:
    return csv_text(["id", "error"], ((i, repr(float(e))) for i, e in zip(result.ids, result.errors)))


def ced_csv(result: NmeResult) -> str:
    t, f = result.ced()
    return csv_text(["threshold", "fraction"], ((repr(float(a)), repr(float(b))) for a, b in zip(t, f)))


def gate_stats_csv(stats: GateStats) -> str:
    return csv_text(["stage", "rank", "cumprob"], ((k, r, repr(v)) for k, r, v in stats.rows()))


def mean_shape_baseline(train_shapes, test_shapes, normalizer) -> float:
    """Mean NME of predicting the training mean shape for every test sample."""
    mean = np.asarray(train_shapes, dtype=np.float64).mean(axis=0)
    return evaluate(np.broadcast_to(mean, np.shape(test_shapes)), test_shapes, normalizer).mean
