"""Images, annotations, the synthetic face generator and model files.

Model file layout (all integers little-endian)::

    b"TGRE" | u32 version | u32 config length | config (UTF-8 key=value lines)
    | mean shape, float64 x 2P | every parameter, float32, declaration order
    | u64 CRC-64/XZ of all preceding bytes
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastcrc import crc64

from .cascade import CascadeModel, build_model
from .config import RunConfig

MAGIC = b"TGRE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<Q")


class FormatError(ValueError):
    """A file could not be parsed."""


class ChecksumError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# PGM --------------------------------------------------------------------------


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval <= 255 into a (h, w) float array."""
    pos = 0
    fields = []
    if buf[:2] != b"P5":
        raise FormatError(f"byte 0: bad magic {buf[:2]!r}, expected b'P5'")
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"byte {start}: expected an integer header field")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"byte {pos}: expected a single whitespace byte before the pixel data")
    pos += 1
    width, height, maxval = fields
    if maxval < 1 or maxval > 255:
        raise FormatError(f"byte {pos - 1}: maxval {maxval} not supported (must be 1..255)")
    need = width * height
    if len(buf) - pos < need:
        raise FormatError(f"byte {len(buf)}: truncated payload, {need} pixel bytes expected from byte {pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width).astype(np.float64)


def load_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.min() < 0 or img.max() > 255:
        raise ValueError("PGM pixel values must lie in [0, 255]")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.rint(img).astype(np.uint8).tobytes()


def save_pgm(path, image) -> None:
    atomic_write(path, encode_pgm(image))


def normalize_image(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 127.5 - 1.0


def denormalize_image(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) * 127.5


# PTS --------------------------------------------------------------------------


def parse_pts(text: str) -> np.ndarray:
    """Parse the ``version`` / ``n_points`` / ``{ x y ... }`` landmark format."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    n_points = None
    body_start = None
    for i, ln in enumerate(lines):
        if ln.startswith("n_points"):
            try:
                n_points = int(ln.split(":", 1)[1])
            except (IndexError, ValueError):
                raise FormatError(f"line {i + 1}: malformed n_points header {ln!r}") from None
        elif ln == "{":
            body_start = i + 1
            break
    if n_points is None or body_start is None:
        raise FormatError("missing n_points header or opening brace")
    try:
        end = lines.index("}", body_start)
    except ValueError:
        raise FormatError("missing closing brace") from None
    body = lines[body_start:end]
    if len(body) != n_points:
        raise FormatError(f"n_points says {n_points} but the body has {len(body)} points")
    pts = []
    for j, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 2:
            raise FormatError(f"point {j}: expected 'x y', got {ln!r}")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise FormatError(f"point {j}: non-numeric coordinate in {ln!r}") from None
    return np.array(pts, dtype=np.float64).reshape(n_points, 2)


def load_pts(path) -> np.ndarray:
    return parse_pts(Path(path).read_text(encoding="utf-8"))


def format_pts(shape) -> str:
    shape = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
    lines = ["version: 1", f"n_points: {len(shape)}", "{"]
    lines += [f"{x:.6f} {y:.6f}" for x, y in shape]
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_pts(path, shape) -> None:
    atomic_write(path, format_pts(shape).encode("utf-8"))


# datasets ---------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray  # (h, w) in [-1, 1]
    shape: np.ndarray  # (P, 2)
    id: str


@dataclass
class Dataset:
    images: np.ndarray  # (N, h, w)
    shapes: np.ndarray  # (N, P, 2)
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        return cls(
            np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.shape for s in samples]),
            [s.id for s in samples],
        )


def load_directory(path) -> Dataset:
    """Every ``<name>.pgm`` with a matching ``<name>.pts`` in ``path``, sorted by name."""
    path = Path(path)
    samples = []
    for img_path in sorted(path.glob("*.pgm")):
        pts_path = img_path.with_suffix(".pts")
        if not pts_path.exists():
            continue
        samples.append(Sample(normalize_image(load_pgm(img_path)), load_pts(pts_path), img_path.stem))
    if not samples:
        raise FileNotFoundError(f"no .pgm/.pts pairs found in {path}")
    sizes = {s.image.shape for s in samples}
    if len(sizes) != 1:
        raise FormatError(f"images in {path} have differing sizes {sorted(sizes)}; crop them to one size first")
    return Dataset.from_samples(samples)


def save_directory(path, dataset: Dataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for img, shape, sid in zip(dataset.images, dataset.shapes, dataset.ids):
        save_pgm(path / f"{sid}.pgm", np.clip(denormalize_image(img), 0, 255))
        save_pts(path / f"{sid}.pts", shape)


# synthetic faces --------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-blob "faces" under random similarity jitter.

    Landmark ``normalizer_pair`` plays the role of the two pupils when
    errors are normalised.
    """

    seed: int = 0
    image_size: int = 64
    landmarks: int = 5
    blob_amplitude: float = 1.4
    blob_sigma: float = 2.0
    translation: float = 6.0  # uniform in [-t, t] pixels per axis
    rotation: float = 10.0  # uniform in [-r, r] degrees
    scale: float = 0.1  # uniform in [1 - s, 1 + s]
    noise_sigma: float = 0.05
    occluder_prob: float = 0.0
    occluder_size: tuple[float, float] = (0.2, 0.4)  # fraction of the image side
    normalizer_pair: tuple[int, int] = (0, 1)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SyntheticSpec":
        return cls(
            seed=cfg.seed, image_size=cfg.image_size, landmarks=cfg.landmarks,
            translation=cfg.synth_translation, rotation=cfg.synth_rotation, scale=cfg.synth_scale,
            noise_sigma=cfg.synth_noise, occluder_prob=cfg.synth_occluder_prob,
        )

    def template(self) -> np.ndarray:
        s = self.image_size
        if self.landmarks == 5:
            # eyes, nose tip, mouth corners
            rel = np.array([[0.34, 0.38], [0.66, 0.38], [0.5, 0.56], [0.37, 0.72], [0.63, 0.72]])
            return rel * s
        angles = 2 * np.pi * np.arange(self.landmarks) / self.landmarks
        return np.stack([0.5 * s + 0.3 * s * np.cos(angles), 0.5 * s + 0.25 * s * np.sin(angles)], axis=1)


def generate_synthetic(spec: SyntheticSpec, index: int) -> Sample:
    """Deterministic sample number ``index`` of the synthetic dataset ``spec``."""
    rng = np.random.Generator(np.random.PCG64([spec.seed, 7919, index]))
    s = spec.image_size
    theta = np.deg2rad(rng.uniform(-spec.rotation, spec.rotation))
    scale = rng.uniform(1 - spec.scale, 1 + spec.scale)
    shift = rng.uniform(-spec.translation, spec.translation, size=2)
    rot = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centre = np.array([s / 2, s / 2])
    shape = (spec.template() - centre) @ rot.T + centre + shift

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.full((s, s), -0.6)
    for x, y in shape:
        img += spec.blob_amplitude * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * spec.blob_sigma**2))
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    if spec.occluder_prob > 0 and rng.uniform() < spec.occluder_prob:
        lo, hi = spec.occluder_size
        oh, ow = (int(round(rng.uniform(lo, hi) * s)) for _ in range(2))
        oy, ox = int(rng.integers(0, s - oh + 1)), int(rng.integers(0, s - ow + 1))
        img[oy : oy + oh, ox : ox + ow] = rng.uniform(-1, 1)
    return Sample(np.clip(img, -1.0, 1.0), shape, f"synth{index:06d}")


def synthetic_dataset(spec: SyntheticSpec, start: int, count: int) -> Dataset:
    return Dataset.from_samples(generate_synthetic(spec, i) for i in range(start, start + count))


def synthetic_split(cfg: RunConfig, split: str) -> Dataset:
    """``train`` is indices [0, synth_train), ``test`` the next synth_test indices."""
    spec = SyntheticSpec.from_config(cfg)
    if split == "train":
        return synthetic_dataset(spec, 0, cfg.synth_train)
    if split == "test":
        return synthetic_dataset(spec, cfg.synth_train, cfg.synth_test)
    raise ValueError(f"unknown split {split!r}")


# model files ----------------------------------------------------------------------


def encode_model(model: CascadeModel) -> bytes:
    config = model.config.to_text().encode("utf-8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(config)), config,
             np.asarray(model.mean_shape, dtype="<f8").tobytes()]
    parts += [np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.parameters()]
    body = b"".join(parts)
    return body + _CRC.pack(crc64.xz(body))


def save_model(model: CascadeModel, path) -> None:
    atomic_write(path, encode_model(model))


def decode_model(buf: bytes) -> CascadeModel:
    if len(buf) < _HEADER.size + _CRC.size:
        raise FormatError(f"byte {len(buf)}: file too short for a model header")
    magic, version, clen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"byte 0: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"byte 4: model format version {version} is not supported")
    body, (stored,) = buf[: -_CRC.size], _CRC.unpack_from(buf, len(buf) - _CRC.size)
    if crc64.xz(body) != stored:
        raise ChecksumError("checksum mismatch: the model file is corrupt")
    pos = _HEADER.size
    cfg = RunConfig.from_text(buf[pos : pos + clen].decode("utf-8"))
    pos += clen
    model = build_model(cfg, np.zeros((cfg.landmarks, 2)), np.random.Generator(np.random.PCG64(0)))
    n = 2 * cfg.landmarks
    expected = pos + 8 * n + 4 * model.num_parameters()
    if len(body) != expected:
        raise FormatError(f"byte {len(body)}: payload size mismatch, expected {expected} bytes before the checksum")
    model.mean_shape = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(-1, 2).astype(np.float64)
    pos += 8 * n
    for p in model.parameters():
        p.data = np.frombuffer(body, dtype="<f4", count=p.size, offset=pos).reshape(p.shape).astype(np.float32)
        pos += 4 * p.size
    return model


def load_model(path) -> CascadeModel:
    return decode_model(Path(path).read_bytes())


def model_file_size(cfg: RunConfig, n_parameters: int) -> int:
    return _HEADER.size + len(cfg.to_text().encode("utf-8")) + 16 * cfg.landmarks + 4 * n_parameters + _CRC.size
