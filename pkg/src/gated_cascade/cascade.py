"""Cascaded shape regression.

A shape is a ``(P, 2)`` array of ``(x, y)`` landmark positions in pixels
(x is the column, y the row). Displacements are flattened row-major, so
the regression target of a stage is ``(truth - current).reshape(-1)``,
i.e. ``x0, y0, x1, y1, ...``.

Each stage extracts a patch around every current landmark, runs the same
small convolution stack over all of them, concatenates the flattened maps
in landmark order and applies a fully connected layer. The resulting
feature vector feeds the stage's regression layer, whose output is added
to the current shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .ensemble import RegressionLayer, Variant
from .tensor import (
    AdamState,
    ShapeError,
    Tensor,
    adam_step,
    affine,
    conv2d,
    glorot_uniform,
    grad,
    mse,
    relu,
    reshape,
)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for a named sub-stream of a run seed."""
    return np.random.Generator(np.random.PCG64([seed, *stream]))


# shapes -----------------------------------------------------------------------


def compute_mean_shape(shapes) -> np.ndarray:
    shapes = np.asarray(shapes, dtype=np.float64)
    if shapes.ndim != 3 or shapes.shape[0] == 0:
        raise ValueError("mean shape needs at least one (P, 2) training shape")
    return shapes.mean(axis=0)


@dataclass(frozen=True)
class AugmentConfig:
    translation_sigma: float = 10.0
    scale_mean: float = 1.0
    scale_sigma: float = 0.1

    def __post_init__(self):
        if self.translation_sigma < 0 or self.scale_sigma < 0:
            raise ValueError("augmentation sigmas must be non-negative")


def augment_initial_shape(mean_shape, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Scale the shape about its centroid by s ~ N(mean, sigma) and shift it by t ~ N(0, sigma_t)."""
    mean_shape = np.asarray(mean_shape, dtype=np.float64)
    s = rng.normal(cfg.scale_mean, cfg.scale_sigma)
    t = rng.normal(0.0, cfg.translation_sigma, size=2)
    c = mean_shape.mean(axis=0)
    return c + s * (mean_shape - c) + t


def extract_patches(image, shape, patch: int) -> np.ndarray:
    """(P, 1, patch, patch) windows centred on the rounded landmarks; zero outside the image."""
    return extract_patch_batch(np.asarray(image)[None], np.asarray(shape)[None], patch)[0]


def extract_patch_batch(images, shapes, patch: int) -> np.ndarray:
    """Batched ``extract_patches``: images (B, h, w), shapes (B, P, 2) -> (B, P, 1, p, p)."""
    images = np.asarray(images)
    shapes = np.asarray(shapes, dtype=np.float64)
    n, h, w = images.shape
    if shapes.shape[0] != n or shapes.shape[2] != 2:
        raise ShapeError(f"patch extraction: images {images.shape} vs shapes {shapes.shape}")
    padded = np.zeros((n, h + 2 * patch, w + 2 * patch), dtype=images.dtype)
    padded[:, patch : patch + h, patch : patch + w] = images
    centre = np.floor(shapes + 0.5).astype(np.int64)
    x0 = np.clip(centre[:, :, 0] - patch // 2, -patch, w) + patch
    y0 = np.clip(centre[:, :, 1] - patch // 2, -patch, h) + patch
    offs = np.arange(patch)
    rows = y0[:, :, None, None] + offs[None, None, :, None]
    cols = x0[:, :, None, None] + offs[None, None, None, :]
    out = padded[np.arange(n)[:, None, None, None], rows, cols]
    return out[:, :, None, :, :]


# model ------------------------------------------------------------------------


class FeatureExtractor:
    """Convolution stack shared by every landmark patch, then a dense layer."""

    def __init__(self, kernels, biases, strides, fc_w, fc_b, landmarks: int):
        if not (len(kernels) == len(biases) == len(strides)):
            raise ValueError("one bias and one stride per convolution kernel")
        self.kernels = [Tensor(k, requires_grad=True) for k in kernels]
        self.biases = [Tensor(b, requires_grad=True) for b in biases]
        self.strides = tuple(int(s) for s in strides)
        self.fc_w = Tensor(fc_w, requires_grad=True)
        self.fc_b = Tensor(fc_b, requires_grad=True)
        self.landmarks = landmarks

    @classmethod
    def init(cls, conv_layers, patch: int, landmarks: int, fc_dim: int, rng, dtype=np.float32):
        kernels, biases, strides = [], [], []
        cin, m = 1, patch
        for cout, k, s in conv_layers:
            kernels.append(glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype))
            biases.append(np.zeros(cout, dtype))
            strides.append(s)
            cin, m = cout, -(-m // s)
        concat = landmarks * cin * m * m
        fc_w = glorot_uniform(rng, (concat, fc_dim), concat, fc_dim, dtype)
        return cls(kernels, biases, strides, fc_w, np.zeros(fc_dim, dtype), landmarks)

    @property
    def concat_dim(self) -> int:
        return self.fc_w.shape[0]

    @property
    def output_dim(self) -> int:
        return self.fc_w.shape[1]

    def parameters(self) -> list[Tensor]:
        params = []
        for k, b in zip(self.kernels, self.biases):
            params += [k, b]
        return params + [self.fc_w, self.fc_b]

    def patch_maps(self, patches) -> Tensor:
        """Per-patch feature maps, (B * P, C, m, m); the same kernels for every patch."""
        p = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches))
        if p.data.ndim != 5 or p.shape[1] != self.landmarks:
            raise ShapeError(f"expected patches (batch, {self.landmarks}, 1, p, p), got {p.shape}")
        b, n, c, ph, pw = p.shape
        h = reshape(p, (b * n, c, ph, pw))
        for k, bias, s in zip(self.kernels, self.biases, self.strides):
            h = relu(conv2d(h, k, bias, stride=s, padding="same"))
        return h

    def concat(self, patches) -> Tensor:
        maps = self.patch_maps(patches)
        b = maps.shape[0] // self.landmarks
        flat = reshape(maps, (b, -1))
        if flat.shape[1] != self.concat_dim:
            raise ShapeError(f"concatenated features have length {flat.shape[1]}, FC expects {self.concat_dim}")
        return flat

    def __call__(self, patches) -> Tensor:
        return relu(affine(self.concat(patches), self.fc_w, self.fc_b))


def features_forward(fe: FeatureExtractor, patches) -> np.ndarray:
    """Feature vector(s) for patches shaped (P, 1, p, p) or (B, P, 1, p, p)."""
    patches = np.asarray(patches)
    single = patches.ndim == 4
    out = fe(Tensor(patches[None] if single else patches)).data
    return out[0] if single else out


@dataclass
class Stage:
    extractor: FeatureExtractor
    layer: RegressionLayer

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.layer.parameters()


@dataclass
class CascadeModel:
    config: RunConfig
    mean_shape: np.ndarray
    stages: list[Stage]

    @property
    def landmarks(self) -> int:
        return self.mean_shape.shape[0]

    def parameters(self) -> list[Tensor]:
        return [p for st in self.stages for p in st.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "CascadeModel":
        """Cast every parameter in place (used for double-precision gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def build_model(config: RunConfig, mean_shape, rng: np.random.Generator, dtype=np.float32) -> CascadeModel:
    mean_shape = np.asarray(mean_shape, dtype=np.float64)
    if mean_shape.shape != (config.landmarks, 2):
        raise ShapeError(f"mean shape {mean_shape.shape} does not match {config.landmarks} landmarks")
    stages = []
    for _ in range(config.stages):
        fe = FeatureExtractor.init(config.conv_layers, config.patch_size, config.landmarks, config.fc_dim, rng, dtype)
        layer = RegressionLayer.init(
            config.variant, config.fc_dim, config.out_dim, config.ensemble_size, config.layer_hidden,
            rng, depth=config.depth, dtype=dtype,
        )
        # an untrained stage leaves the shape where it is
        layer.w1.data[:] = 0
        stages.append(Stage(fe, layer))
    return CascadeModel(config, mean_shape, stages)


def stage_parameter_count(config: RunConfig) -> dict[str, int]:
    """Per-stage parameter counts derived from the configuration alone."""
    from .ensemble import regression_layer_size

    conv, cin = 0, 1
    for cout, k, _ in config.conv_layers:
        conv += cout * cin * k * k + cout
        cin = cout
    fc = config.concat_dim * config.fc_dim + config.fc_dim
    regression = regression_layer_size(
        config.variant, config.fc_dim, config.out_dim, config.ensemble_size, config.layer_hidden, config.depth
    )
    return {"conv": conv, "fc": fc, "regression": regression, "stage": conv + fc + regression}


def model_parameter_count(config: RunConfig) -> int:
    return config.stages * stage_parameter_count(config)["stage"]


# prediction ---------------------------------------------------------------------


@dataclass
class Prediction:
    final: np.ndarray  # (B, P, 2)
    shapes: list[np.ndarray]  # K + 1 entries, shapes[0] is the initial shape
    gates: list[np.ndarray | None]  # K entries, (B, L) or None
    deltas: list[np.ndarray] = field(default_factory=list)  # K entries, (B, 2P)


def stage_delta(stage: Stage, images, shapes, patch: int, mode: str = "full"):
    """Displacement (B, 2P) and gate vectors of one stage at the given shapes."""
    feats = stage.extractor(Tensor(extract_patch_batch(images, shapes, patch))).data
    if mode == "top1":
        return stage.layer.top1(feats)
    if mode != "full":
        raise ValueError(f"unknown inference mode {mode!r}")
    out, g = stage.layer(Tensor(feats))
    return out.data, (None if g is None else g.data)


def run_stages(model: CascadeModel, images, initial, stages: Sequence[Stage], mode="full",
               chunk: int = 256) -> Prediction:
    images = np.asarray(images)
    current = np.array(initial, dtype=np.float64)
    shapes, gates, deltas = [current.copy()], [], []
    for st in stages:
        ds, gs = [], []
        for i in range(0, len(images), chunk):
            d, g = stage_delta(st, images[i : i + chunk], current[i : i + chunk], model.config.patch_size, mode)
            ds.append(d)
            gs.append(g)
        delta = np.concatenate(ds).astype(np.float64)
        current = current + delta.reshape(current.shape)
        shapes.append(current.copy())
        deltas.append(delta)
        gates.append(None if gs[0] is None else np.concatenate(gs))
    return Prediction(current, shapes, gates, deltas)


def cascade_predict(model: CascadeModel, images, mode: str = "full", initial=None) -> Prediction:
    """Run every stage from the mean shape (or ``initial``) on (h, w) or (B, h, w) images."""
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    if initial is None:
        initial = np.broadcast_to(model.mean_shape, (len(images), *model.mean_shape.shape))
    pred = run_stages(model, images, initial, model.stages, mode)
    if single:
        pred = Prediction(
            pred.final[0], [s[0] for s in pred.shapes],
            [None if g is None else g[0] for g in pred.gates], [d[0] for d in pred.deltas],
        )
    return pred


# training -------------------------------------------------------------------------


@dataclass
class StageResult:
    initial_loss: float
    losses: list[float]


def stage_loss(stage: Stage, patches, targets) -> Tensor:
    delta, _ = stage.layer(stage.extractor(patches))
    return mse(delta, targets)


def prepare_stage_data(model: CascadeModel, k: int, images, truths, rng: np.random.Generator,
                       augment: AugmentConfig, copies: int):
    """Patches and residual targets for stage ``k`` over augmented initial shapes."""
    images = np.asarray(images)
    truths = np.asarray(truths, dtype=np.float64)
    n = len(images)
    idx = np.repeat(np.arange(n), copies)
    init = np.stack([augment_initial_shape(model.mean_shape, rng, augment) for _ in idx])
    current = run_stages(model, images[idx], init, model.stages[:k]).final
    patches = extract_patch_batch(images[idx], current, model.config.patch_size)
    limit = float(model.config.image_size)
    targets = np.clip(truths[idx] - current, -limit, limit).reshape(len(idx), -1)
    return patches.astype(np.float32), targets.astype(np.float32)


def train_stage(model: CascadeModel, k: int, images, truths, rng: np.random.Generator,
                log: Callable[[str], None] | None = None) -> StageResult:
    """Fit stage ``k`` (0-based) jointly: convolutions, FC, regressors and gate.

    Earlier stages are only read. The loss is the mean squared error between
    the stage output and the remaining displacement to the ground truth.
    """
    cfg = model.config
    if not 0 <= k < len(model.stages):
        raise IndexError(f"stage {k} out of range for a {len(model.stages)}-stage model")
    augment = AugmentConfig(cfg.translation_sigma, 1.0, cfg.scale_sigma)
    patches, targets = prepare_stage_data(model, k, images, truths, rng, augment, cfg.augment_copies)
    stage = model.stages[k]
    params = stage.parameters()
    state = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def full_loss() -> float:
        total = 0.0
        for i in range(0, len(patches), 512):
            total += float(stage_loss(stage, Tensor(patches[i : i + 512]), targets[i : i + 512]).data) * len(
                patches[i : i + 512]
            )
        return total / len(patches)

    initial = full_loss()
    losses = []
    n = len(patches)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            batch = order[i : i + cfg.batch_size]
            loss = stage_loss(stage, Tensor(patches[batch]), targets[batch])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"stage {k + 1}, epoch {epoch + 1}: loss became {value}; lower the learning rate (lr={cfg.lr})"
                )
            adam_step(params, grad(loss, params), state)
            total += value * len(batch)
        losses.append(total / n)
        if log is not None:
            log(f"stage {k + 1} epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.5f}")
    return StageResult(initial, losses)


def train_cascade(config: RunConfig, images, truths, log=None) -> tuple[CascadeModel, list[StageResult]]:
    """Build a model from ``config`` and train its stages one after another."""
    truths = np.asarray(truths, dtype=np.float64)
    model = build_model(config, compute_mean_shape(truths), make_rng(config.seed, 0))
    results = []
    for k in range(config.stages):
        results.append(train_stage(model, k, images, truths, make_rng(config.seed, 1, k), log))
    return model, results
