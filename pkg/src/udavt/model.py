"""Spatio-temporal video transformer: per-frame spatial encoder, temporal
aggregator, linear classifier and a fixed random projection head."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor

CHECKPOINT_MAGIC = b"UDAVTCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    frame_size: int = 16
    patch_size: int = 4
    channels: int = 3
    frames_per_video: int = 8
    embed_dim: int = 64
    heads: int = 4
    spatial_layers: int = 2
    temporal_layers: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 6
    projection_dim: int = 32
    input_mean: float = 0.4
    input_std: float = 0.25

    def validate(self) -> None:
        if self.frame_size % self.patch_size:
            raise ConfigError(f"frame_size {self.frame_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for name in ("frame_size", "patch_size", "channels", "frames_per_video", "embed_dim",
                     "heads", "num_classes", "projection_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.spatial_layers < 0 or self.temporal_layers < 1:
            raise ConfigError("need spatial_layers >= 0 and temporal_layers >= 1")
        if self.input_std <= 0:
            raise ConfigError("input_std must be positive")

    @property
    def num_patches(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))


class ParamStore:
    """Named parameters plus a per-parameter freeze flag."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.frozen: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True)
        self.tensors[name] = t
        self.frozen[name] = False
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def apply_freeze_mask(self, mask: dict[str, bool]) -> None:
        if set(mask) != set(self.tensors):
            missing = set(self.tensors) ^ set(mask)
            raise KeyError(f"freeze mask does not cover parameters: {sorted(missing)[:5]}")
        for name, frozen in mask.items():
            self.frozen[name] = bool(frozen)
            t = self.tensors[name]
            t.requires_grad = not frozen
            t.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if not self.frozen[n]}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def hashes(self) -> dict[str, str]:
        return {n: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()
                for n, t in self.tensors.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            if self.tensors[n].shape != v.shape:
                raise ShapeError(f"{n}: stored shape {v.shape} vs model {self.tensors[n].shape}")
            self.tensors[n].data = np.array(v, dtype=self.tensors[n].dtype)


def build_freeze_mask(params: ParamStore | list[str], phase: int) -> dict[str, bool]:
    """Map every parameter name to ``True`` when it is frozen in ``phase``.

    Phase 1 trains only positional encodings, patch embedding, the two
    classification tokens, layer-norm affines and the classifier. Phase 2
    freezes the whole spatial encoder and trains the temporal encoder and the
    classifier. The projection head is frozen in both.
    """
    names = params.names() if isinstance(params, ParamStore) else list(params)
    mask = {}
    for n in names:
        if n.startswith("projector."):
            mask[n] = True
        elif phase == 1:
            trainable = (
                n.endswith("pos_embed")
                or n.endswith("cls_token")
                or n.startswith("spatial.patch_proj.")
                or ".norm" in n
                or n.startswith("classifier.")
            )
            mask[n] = not trainable
        elif phase == 2:
            mask[n] = n.startswith("spatial.")
        else:
            raise ConfigError(f"unknown phase {phase}")
    return mask


@dataclass
class VideoFeatures:
    frame_features: Tensor   # (B, T, d)
    video_feature: Tensor    # (B, d)
    logits: Tensor           # (B, K)
    attention: np.ndarray    # (B, T)


class VideoTransformer:
    def __init__(self, config: ModelConfig, rng: Rng, dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self._init_params(rng)

    # -- construction ------------------------------------------------------

    def _init_params(self, rng: Rng) -> None:
        c = self.config
        d, dt = c.embed_dim, self.dtype
        p = self.params

        def tn_(name, shape):
            # tokens and positional encodings: sigma 0.02; matrices: fan-in scaled
            std = 0.02 if len(shape) == 1 or name.endswith("pos_embed") else 1.0 / math.sqrt(shape[0])
            p.add(name, rng.split(name).trunc_normal(shape, std, dtype=dt))

        def zeros(name, shape):
            p.add(name, np.zeros(shape, dtype=dt))

        def ones(name, shape):
            p.add(name, np.ones(shape, dtype=dt))

        tn_("spatial.patch_proj.weight", (c.patch_dim, d))
        zeros("spatial.patch_proj.bias", (d,))
        tn_("spatial.cls_token", (d,))
        tn_("spatial.pos_embed", (c.num_patches + 1, d))
        for i in range(c.spatial_layers):
            self._init_block(f"spatial.blocks.{i}", tn_, zeros, ones)
        ones("spatial.norm.weight", (d,))
        zeros("spatial.norm.bias", (d,))

        tn_("temporal.cls_token", (d,))
        tn_("temporal.pos_embed", (c.frames_per_video + 1, d))
        for i in range(c.temporal_layers):
            self._init_block(f"temporal.blocks.{i}", tn_, zeros, ones)
        ones("temporal.norm.weight", (d,))
        zeros("temporal.norm.bias", (d,))

        tn_("classifier.weight", (d, c.num_classes))
        zeros("classifier.bias", (c.num_classes,))

        zeros("projector.fc1.weight", (d, c.projection_dim))
        zeros("projector.fc1.bias", (c.projection_dim,))
        zeros("projector.fc2.weight", (c.projection_dim, c.projection_dim))
        zeros("projector.fc2.bias", (c.projection_dim,))
        self.reset_projection(rng.split("projector"))

    def _init_block(self, prefix, tn_, zeros, ones) -> None:
        c = self.config
        d, h = c.embed_dim, c.mlp_dim
        ones(f"{prefix}.norm1.weight", (d,))
        zeros(f"{prefix}.norm1.bias", (d,))
        tn_(f"{prefix}.attn.qkv.weight", (d, 3 * d))
        zeros(f"{prefix}.attn.qkv.bias", (3 * d,))
        tn_(f"{prefix}.attn.proj.weight", (d, d))
        zeros(f"{prefix}.attn.proj.bias", (d,))
        ones(f"{prefix}.norm2.weight", (d,))
        zeros(f"{prefix}.norm2.bias", (d,))
        tn_(f"{prefix}.mlp.fc1.weight", (d, h))
        zeros(f"{prefix}.mlp.fc1.bias", (h,))
        tn_(f"{prefix}.mlp.fc2.weight", (h, d))
        zeros(f"{prefix}.mlp.fc2.bias", (d,))

    def reset_projection(self, rng: Rng) -> None:
        """Redraw the fixed projection head (fan-in scaled normal, zero bias)."""
        c = self.config
        d, dp = c.embed_dim, c.projection_dim
        p = self.params
        p["projector.fc1.weight"].data = rng.split("fc1").normal((d, dp), 1.0 / math.sqrt(d), self.dtype)
        p["projector.fc1.bias"].data = np.zeros(dp, dtype=self.dtype)
        p["projector.fc2.weight"].data = rng.split("fc2").normal((dp, dp), 1.0 / math.sqrt(dp), self.dtype)
        p["projector.fc2.bias"].data = np.zeros(dp, dtype=self.dtype)

    def astype(self, dtype) -> "VideoTransformer":
        self.dtype = np.dtype(dtype)
        for t in self.params.tensors.values():
            t.data = t.data.astype(self.dtype)
        return self

    # -- building blocks ---------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return tn.layer_norm(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return tn.linear(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def attention(self, x: Tensor, prefix: str) -> tuple[Tensor, np.ndarray]:
        """Multi-head self-attention over axis 1 of ``x`` (B, L, d).

        Returns the mixed output and the attention probabilities (B, h, L, L).
        """
        b, n, d = x.shape
        h = self.config.heads
        dh = d // h
        qkv = self._linear(x, f"{prefix}.qkv")
        qkv = tn.transpose(tn.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = tn.scale(tn.matmul(q, tn.transpose(k)), 1.0 / math.sqrt(dh))
        attn = tn.softmax(scores)
        mixed = tn.matmul(attn, v)
        mixed = tn.reshape(tn.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        return self._linear(mixed, f"{prefix}.proj"), attn.data

    def block(self, x: Tensor, prefix: str) -> tuple[Tensor, np.ndarray]:
        """Pre-norm transformer block."""
        a, probs = self.attention(self._ln(x, f"{prefix}.norm1"), f"{prefix}.attn")
        x = tn.add(x, a)
        hmid = tn.gelu(self._linear(self._ln(x, f"{prefix}.norm2"), f"{prefix}.mlp.fc1"))
        x = tn.add(x, self._linear(hmid, f"{prefix}.mlp.fc2"))
        return x, probs

    def _prepend_cls(self, x: Tensor, name: str) -> Tensor:
        b, _, d = x.shape
        cls = tn.broadcast_to(tn.reshape(self.params[name], (1, 1, d)), (b, 1, d))
        return tn.concatenate([cls, x], axis=1)

    # -- public forward pieces ---------------------------------------------

    def patch_vectors(self, frames: np.ndarray) -> np.ndarray:
        """Standardise (..., H, W, C) frames and flatten them into (..., N, p*p*C)
        patch rows, patches in row-major order, pixels (row, col, channel) inside."""
        c = self.config
        frames = np.asarray(frames)
        if frames.shape[-3:] != (c.frame_size, c.frame_size, c.channels):
            raise ConfigError(
                f"frame shape {frames.shape[-3:]} does not match "
                f"{(c.frame_size, c.frame_size, c.channels)}")
        lead = frames.shape[:-3]
        g, ps = c.frame_size // c.patch_size, c.patch_size
        x = frames.reshape(lead + (g, ps, g, ps, c.channels))
        nl = len(lead)
        x = np.transpose(x, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
        x = x.reshape(lead + (g * g, c.patch_dim)).astype(self.dtype)
        return (x - c.input_mean) / c.input_std

    def patchify(self, frames: np.ndarray) -> Tensor:
        """Embed frames (B, H, W, C) into (B, N, d) patch tokens with positional encodings."""
        pv = Tensor(self.patch_vectors(frames))
        tok = self._linear(pv, "spatial.patch_proj")
        pos = self.params["spatial.pos_embed"][1:]
        return tn.add(tok, tn.broadcast_to(tn.reshape(pos, (1,) + pos.shape), tok.shape))

    def spatial_forward(self, videos: np.ndarray) -> Tensor:
        """Per-frame [CLS] features: (B, T, H, W, C) -> (B, T, d)."""
        c = self.config
        videos = np.asarray(videos)
        if videos.ndim == 4:
            videos = videos[None]
        if videos.ndim != 5 or videos.shape[1] != c.frames_per_video:
            raise ShapeError(f"expected (B, {c.frames_per_video}, H, W, C) videos, got {videos.shape}")
        b, t = videos.shape[:2]
        tok = self.patchify(videos.reshape((b * t,) + videos.shape[2:]))
        cls = tn.reshape(tn.add(self.params["spatial.cls_token"], self.params["spatial.pos_embed"][0]),
                         (1, 1, c.embed_dim))
        x = tn.concatenate([tn.broadcast_to(cls, (b * t, 1, c.embed_dim)), tok], axis=1)
        for i in range(c.spatial_layers):
            x, _ = self.block(x, f"spatial.blocks.{i}")
        x = self._ln(x, "spatial.norm")
        return tn.reshape(x[:, 0, :], (b, t, c.embed_dim))

    def temporal_forward(self, frame_features: Tensor) -> tuple[Tensor, np.ndarray]:
        """Aggregate (B, T, d) frame features into (B, d) video features.

        The second return value is the last layer's head-averaged attention from
        the temporal [CLS] token to the T frames, renormalised to sum to one.
        """
        c = self.config
        frame_features = tn.as_tensor(frame_features)
        b, t, d = frame_features.shape
        if t != c.frames_per_video or d != c.embed_dim:
            raise ShapeError(f"expected (B, {c.frames_per_video}, {c.embed_dim}) frame features, "
                             f"got {frame_features.shape}")
        x = self._prepend_cls(frame_features, "temporal.cls_token")
        pos = self.params["temporal.pos_embed"]
        x = tn.add(x, tn.broadcast_to(tn.reshape(pos, (1, t + 1, d)), x.shape))
        probs = None
        for i in range(c.temporal_layers):
            x, probs = self.block(x, f"temporal.blocks.{i}")
        x = self._ln(x, "temporal.norm")
        rollout = probs[:, :, 0, 1:].mean(axis=1)
        rollout = rollout / rollout.sum(axis=1, keepdims=True)
        return x[:, 0, :], rollout

    def classify(self, video_feature: Tensor) -> Tensor:
        return self._linear(video_feature, "classifier")

    def project(self, video_feature: Tensor) -> Tensor:
        hmid = tn.gelu(self._linear(video_feature, "projector.fc1"))
        return self._linear(hmid, "projector.fc2")

    def forward(self, videos: np.ndarray) -> VideoFeatures:
        ff = self.spatial_forward(videos)
        f, att = self.temporal_forward(ff)
        return VideoFeatures(ff, f, self.classify(f), att)

    def spatial_features(self, videos: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Gradient-free spatial features for a whole array of videos."""
        out = []
        with tn.no_grad():
            for s in range(0, len(videos), batch_size):
                out.append(self.spatial_forward(videos[s:s + batch_size]).data)
        return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: VideoTransformer, seed: int, meta: dict | None = None) -> None:
    """Write magic, header length, JSON header, then raw little-endian parameters."""
    dtype = "<f8" if model.dtype == np.float64 else "<f4"
    entries, blobs = [], []
    for name, t in model.params.items():
        entries.append({"name": name, "shape": list(t.shape), "frozen": model.params.frozen[name]})
        blobs.append(np.ascontiguousarray(t.data, dtype=dtype).tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "dtype": dtype,
        "model_config": asdict(model.config),
        "meta": meta or {},
        "params": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path, dtype=None) -> tuple[VideoTransformer, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    file_dtype = np.dtype(header["dtype"])
    model = VideoTransformer(ModelConfig(**header["model_config"]), Rng(header["seed"]),
                             dtype=dtype or file_dtype.newbyteorder("="))
    offset = 16 + hlen
    values, mask = {}, {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=file_dtype, count=n, offset=offset).reshape(e["shape"])
        offset += n * file_dtype.itemsize
        values[e["name"]] = arr
        mask[e["name"]] = e["frozen"]
    model.params.load(values)
    model.params.apply_freeze_mask(mask)
    return model, header
