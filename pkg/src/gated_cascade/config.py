"""Run configuration: defaults, ``key = value`` files and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .ensemble import Variant, matched_single_hidden


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


ConvLayer = tuple[int, int, int]  # (out_channels, kernel, stride)


def parse_conv(text: str) -> tuple[ConvLayer, ...]:
    """``"8:5:2,16:3:2,8:1:1"`` -> ((8, 5, 2), (16, 3, 2), (8, 1, 1))."""
    layers = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"conv: expected channels:kernel:stride, got {item!r}")
        try:
            layers.append(tuple(int(p) for p in parts))
        except ValueError:
            raise ConfigError(f"conv: non-integer entry in {item!r}") from None
    return tuple(layers)


def format_conv(layers) -> str:
    return ",".join(f"{c}:{k}:{s}" for c, k, s in layers)


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter of a run.

    The defaults are the desk-scale setting that trains on one CPU core in
    a few minutes; ``RunConfig.full()`` gives the full-size architecture.
    """

    variant: str = "tree-gre"
    stages: int = 2
    landmarks: int = 5
    image_size: int = 64
    patch_size: int = 16
    conv: str = "8:5:2,16:3:2,8:1:1"
    fc_dim: int = 128
    ensemble_size: int = 8
    hidden: int = 16
    sr_hidden: int = 0  # 0: match the ensemble's weight count
    depth: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    augment_copies: int = 4
    translation_sigma: float = 4.0
    scale_sigma: float = 0.1
    seed: int = 0
    dataset: str = "synthetic"
    synth_train: int = 800
    synth_test: int = 200
    synth_noise: float = 0.05
    synth_occluder_prob: float = 0.0
    synth_translation: float = 6.0
    synth_rotation: float = 10.0
    synth_scale: float = 0.1
    normalizer: str = "auto"

    @classmethod
    def full(cls, **overrides) -> "RunConfig":
        base = dict(
            stages=4, landmarks=68, image_size=150, patch_size=32,
            conv="20:5:2,40:5:2,80:3:2,160:3:2,30:1:1", fc_dim=2048,
            ensemble_size=128, hidden=40, sr_hidden=5120, depth=7,
            translation_sigma=10.0, scale_sigma=0.1, dataset="",
        )
        base.update(overrides)
        return cls(**base).validated()

    @property
    def variant_enum(self) -> Variant:
        return Variant(self.variant)

    @property
    def conv_layers(self) -> tuple[ConvLayer, ...]:
        return parse_conv(self.conv)

    @property
    def out_dim(self) -> int:
        return 2 * self.landmarks

    @property
    def final_extent(self) -> int:
        m = self.patch_size
        for _, _, s in self.conv_layers:
            m = -(-m // s)
        return m

    @property
    def concat_dim(self) -> int:
        return self.landmarks * self.conv_layers[-1][0] * self.final_extent**2

    @property
    def single_hidden(self) -> int:
        if self.sr_hidden > 0:
            return self.sr_hidden
        return matched_single_hidden(self.fc_dim, self.out_dim, self.ensemble_size, self.hidden)

    @property
    def layer_hidden(self) -> int:
        return self.single_hidden if self.variant_enum is Variant.SR else self.hidden

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validated()

    def validated(self) -> "RunConfig":
        try:
            variant = Variant(self.variant)
        except ValueError:
            raise ConfigError(
                f"variant: {self.variant!r} is not one of {', '.join(v.value for v in Variant)}"
            ) from None
        positive = ("stages", "landmarks", "image_size", "patch_size", "fc_dim", "ensemble_size",
                    "hidden", "depth", "batch_size", "augment_copies")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("epochs", "sr_hidden", "synth_train", "synth_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative, got {getattr(self, name)}")
        for name in ("translation_sigma", "scale_sigma", "synth_noise", "synth_translation",
                     "synth_rotation", "synth_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.synth_occluder_prob <= 1:
            raise ConfigError(f"synth_occluder_prob: must lie in [0, 1], got {self.synth_occluder_prob}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1/beta2: must lie in [0, 1)")
        layers = self.conv_layers
        if not layers:
            raise ConfigError("conv: at least one layer is required")
        for c, k, s in layers:
            if c < 1 or s < 1 or k < 1 or k % 2 == 0:
                raise ConfigError(f"conv: layer {c}:{k}:{s} needs positive channels/stride and an odd kernel")
        if variant is Variant.TREE_GRE and self.ensemble_size != 2**self.depth:
            raise ConfigError(
                f"ensemble_size: tree-gre needs ensemble_size == 2**depth, got {self.ensemble_size} "
                f"with depth {self.depth}"
            )
        if self.normalizer != "auto" and not self.normalizer.startswith("pair:") and self.normalizer != "pupils68":
            raise ConfigError(f"normalizer: expected auto, pupils68 or pair:i,j, got {self.normalizer!r}")
        return self

    # serialisation ------------------------------------------------------------

    def to_text(self) -> str:
        """Canonical ``key=value`` lines in field order."""
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base if base is not None else cls()
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"{key}: unknown configuration key")
            kind = types[key]
            raw = str(raw).strip()
            try:
                if kind == "int":
                    changes[key] = int(raw)
                elif kind == "float":
                    changes[key] = float(raw)
                else:
                    changes[key] = raw
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
        return dataclasses.replace(base, **changes).validated()

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
        return cls.from_mapping(values, base)

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)
