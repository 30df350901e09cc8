"""Synthetic moving-blob video benchmark with a controllable domain shift.

Each class is a motion family: a soft blob crossing the frame in a
class-specific direction, passing near the centre at mid-clip. The target
domain applies a label-preserving transform to the rendering (intensity
change, noise, a constant translation, a shifted time grid, a different
background texture) while the motion family stays untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .rng import Rng

CACHE_MAGIC = b"UDAVTSYN"
CACHE_VERSION = 1
DOMAINS = ("source", "target")
SPLITS = ("train", "test")


@dataclass
class ShiftSpec:
    intensity_scale: float = 1.0
    intensity_offset: float = 0.0
    noise_std: float = 0.0
    translation_x: float = 0.0
    translation_y: float = 0.0
    temporal_jitter: int = 0
    texture_swap: bool = False

    def validate(self) -> None:
        if not 0.0 < self.intensity_scale <= 2.0:
            raise ConfigError(f"intensity_scale {self.intensity_scale} outside (0, 2]")
        if not -0.5 <= self.intensity_offset <= 0.5:
            raise ConfigError(f"intensity_offset {self.intensity_offset} outside [-0.5, 0.5]")
        if not 0.0 <= self.noise_std <= 0.5:
            raise ConfigError(f"noise_std {self.noise_std} outside [0, 0.5]")
        if abs(self.translation_x) > 8 or abs(self.translation_y) > 8:
            raise ConfigError("translation beyond 8 px")
        if not 0 <= self.temporal_jitter <= 3:
            raise ConfigError(f"temporal_jitter {self.temporal_jitter} outside [0, 3]")

    def is_identity(self) -> bool:
        return self == ShiftSpec()


SHIFT_PRESETS = {
    "identity": ShiftSpec(),
    "mild": ShiftSpec(intensity_scale=0.9, noise_std=0.02),
    "severe": ShiftSpec(intensity_scale=0.6, intensity_offset=0.1, noise_std=0.08,
                        translation_x=1.5, translation_y=0.0, temporal_jitter=1,
                        texture_swap=True),
}


@dataclass
class SynthConfig:
    num_classes: int = 6
    train_per_class: int = 120
    test_per_class: int = 60
    frame_size: int = 16
    channels: int = 3
    frames: int = 8
    speed: float = 1.2
    blob_sigma: float = 1.5
    start_jitter: float = 1.0
    background_amplitude: float = 0.12
    shift_level: str = "severe"
    shift: ShiftSpec = field(default_factory=lambda: replace(SHIFT_PRESETS["severe"]))
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("samples per class must be positive")
        if self.frames < 2 or self.frame_size < 4 or self.channels < 1:
            raise ConfigError("frames >= 2, frame_size >= 4 and channels >= 1 required")
        if self.speed <= 0 or self.blob_sigma <= 0:
            raise ConfigError("speed and blob_sigma must be positive")
        self.shift.validate()

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def class_velocity(self, label: int) -> np.ndarray:
        """Per-frame displacement (dx, dy) of class ``label``.

        Directions are spaced 2*pi/K apart, so two classes always differ by at
        least 2*speed*sin(pi/K) px per frame.
        """
        theta = 2.0 * math.pi * label / self.num_classes
        return self.speed * np.array([math.cos(theta), math.sin(theta)])


def synth_config_for(preset: str, **overrides) -> SynthConfig:
    if preset not in SHIFT_PRESETS:
        raise ConfigError(f"unknown shift preset {preset!r}")
    return SynthConfig(shift_level=preset, shift=replace(SHIFT_PRESETS[preset]), **overrides)


@dataclass
class VideoSample:
    frames: np.ndarray
    label: int
    domain: str
    id: int


@dataclass
class VideoDataset:
    frames: np.ndarray    # (N, T, S, S, C) float32 in [0, 1]
    labels: np.ndarray    # (N,) int64
    ids: np.ndarray       # (N,) int64
    domain: str
    split: str

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> VideoSample:
        return VideoSample(self.frames[i], int(self.labels[i]), self.domain, int(self.ids[i]))

    def subset(self, idx) -> "VideoDataset":
        idx = np.asarray(idx)
        return VideoDataset(self.frames[idx], self.labels[idx], self.ids[idx], self.domain, self.split)


@dataclass
class Latents:
    """Everything needed to render one clip apart from the domain transform."""

    label: int
    start: np.ndarray         # (2,) offset of the mid-clip position from the centre
    texture_phase: float
    texture_freq: tuple[int, int]
    time_shift: int = 0


def sample_latents(cfg: SynthConfig, label: int, rng: Rng) -> Latents:
    start = rng.uniform(-cfg.start_jitter, cfg.start_jitter, size=2)
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    freq = (int(rng.integers(1, 3)), int(rng.integers(0, 3)))
    return Latents(int(label), start, phase, freq)


def _background(cfg: SynthConfig, lat: Latents, swap: bool) -> np.ndarray:
    s = cfg.frame_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    fx, fy = lat.texture_freq
    a = cfg.background_amplitude
    if not swap:
        # smooth diagonal waves
        tex = 0.25 + a * np.sin(2 * math.pi * (fx * xx + fy * yy) / s + lat.texture_phase)
        tint = np.array([1.0, 0.9, 1.1])
    else:
        # blocky checker pattern at a different scale and tint
        cell = 2 + fx
        checker = ((xx // cell + yy // cell + int(lat.texture_phase * 2)) % 2) * 2 - 1
        tex = 0.25 + a * checker
        tint = np.array([0.8, 1.15, 0.9])
    tint = np.resize(tint, cfg.channels)
    return tex[:, :, None] * tint[None, None, :]


def render(cfg: SynthConfig, lat: Latents, shift: ShiftSpec, rng: Rng | None = None) -> np.ndarray:
    """Render a (T, S, S, C) clip; ``rng`` supplies pixel noise when the shift asks for it."""
    s, t_len = cfg.frame_size, cfg.frames
    centre = (s - 1) / 2.0
    vel = cfg.class_velocity(lat.label)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    bg = _background(cfg, lat, shift.texture_swap)
    colour = np.resize(np.array([1.0, 0.85, 0.7]), cfg.channels)
    frames = np.empty((t_len, s, s, cfg.channels))
    for t in range(t_len):
        tau = t - (t_len - 1) / 2.0 + lat.time_shift
        px = centre + lat.start[0] + vel[0] * tau + shift.translation_x
        py = centre + lat.start[1] + vel[1] * tau + shift.translation_y
        blob = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * cfg.blob_sigma ** 2))
        frames[t] = bg + blob[:, :, None] * colour[None, None, :]
    frames = shift.intensity_scale * frames + shift.intensity_offset
    if shift.noise_std > 0:
        if rng is None:
            raise ValueError("noise requested without an rng")
        frames = frames + rng.normal(frames.shape, shift.noise_std)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_split(cfg: SynthConfig, domain: str, split: str) -> VideoDataset:
    """Deterministic dataset for (cfg.seed, domain, split)."""
    cfg.validate()
    if domain not in DOMAINS or split not in SPLITS:
        raise ConfigError(f"unknown domain/split {domain}/{split}")
    per_class = cfg.train_per_class if split == "train" else cfg.test_per_class
    rng = Rng(cfg.seed).split(f"data/{domain}/{split}")
    shift = cfg.shift if domain == "target" else ShiftSpec()
    labels = np.repeat(np.arange(cfg.num_classes), per_class)
    labels = labels[rng.split("order").permutation(len(labels))]
    lat_rng, noise_rng = rng.split("latents"), rng.split("noise")
    frames = np.empty((len(labels), cfg.frames, cfg.frame_size, cfg.frame_size, cfg.channels),
                      dtype=np.float32)
    for i, lab in enumerate(labels):
        lat = sample_latents(cfg, int(lab), lat_rng)
        if shift.temporal_jitter:
            lat.time_shift = int(lat_rng.integers(-shift.temporal_jitter, shift.temporal_jitter + 1))
        frames[i] = render(cfg, lat, shift, noise_rng)
    return VideoDataset(frames, labels.astype(np.int64), np.arange(len(labels), dtype=np.int64),
                        domain, split)


def batch_iterator(n: int, batch_size: int, rng: Rng) -> Iterator[np.ndarray]:
    """Yield shuffled index batches covering ``range(n)`` once; the last batch may be short."""
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


# ---------------------------------------------------------------------------
# on-disk cache


def cache_path(cache_dir: str | Path, domain: str, split: str) -> Path:
    return Path(cache_dir) / f"{domain}_{split}.bin"


def _read_header(path: Path) -> dict | None:
    try:
        with open(path, "rb") as fh:
            if fh.read(8) != CACHE_MAGIC:
                return None
            (hlen,) = struct.unpack("<Q", fh.read(8))
            return json.loads(fh.read(hlen).decode("utf-8"))
    except (OSError, ValueError, struct.error):
        return None


def write_cache(path: str | Path, ds: VideoDataset, cfg: SynthConfig) -> None:
    header = {
        "format_version": CACHE_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "domain": ds.domain,
        "split": ds.split,
        "count": len(ds),
        "frame_shape": list(ds.frames.shape[1:]),
        "class_counts": np.bincount(ds.labels, minlength=cfg.num_classes).tolist(),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(ds.labels.astype("<i8").tobytes())
        fh.write(ds.ids.astype("<i8").tobytes())
        fh.write(ds.frames.astype("<f4").tobytes())


def read_cache(path: str | Path) -> VideoDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise ConfigError(f"{path}: not a dataset cache")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    h = json.loads(raw[16:16 + hlen].decode("utf-8"))
    n = h["count"]
    off = 16 + hlen
    labels = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
    off += 8 * n
    ids = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
    off += 8 * n
    shape = (n,) + tuple(h["frame_shape"])
    frames = np.frombuffer(raw, "<f4", int(np.prod(shape)), off).reshape(shape).astype(np.float32)
    return VideoDataset(frames, labels, ids, h["domain"], h["split"])


def load_or_generate(cfg: SynthConfig, domain: str, split: str,
                     cache_dir: str | Path | None = None) -> tuple[VideoDataset, bool]:
    """Return ``(dataset, from_cache)``; a stale or damaged cache is rewritten."""
    if cache_dir is None:
        return generate_split(cfg, domain, split), False
    path = cache_path(cache_dir, domain, split)
    h = _read_header(path)
    if h is not None and h.get("config_hash") == cfg.config_hash() and h.get("seed") == cfg.seed \
            and h.get("format_version") == CACHE_VERSION:
        try:
            return read_cache(path), True
        except (ValueError, ConfigError):
            pass
    ds = generate_split(cfg, domain, split)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    write_cache(path, ds, cfg)
    return ds, False
