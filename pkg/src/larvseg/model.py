"""Per-pixel segmenter: neighbourhood-mixing MLP backbone + cosine classifier."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .errors import DimensionError, FormatError
from .numcore import Tensor


@dataclass
class Backbone:
    w1: Tensor  # [F, Dh]
    b1: Tensor  # [Dh]
    w2: Tensor  # [Dh, D]
    b2: Tensor  # [D]
    radius: int = 1

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


@dataclass
class CosineClassifier:
    weights: Tensor  # [C, D]
    logit_scale: float = 20.0

    def __post_init__(self):
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class Segmenter:
    backbone: Backbone
    classifier: CosineClassifier

    def parameters(self) -> dict[str, Tensor]:
        bb = self.backbone
        return {"w1": bb.w1, "b1": bb.b1, "w2": bb.w2, "b2": bb.b2, "clf": self.classifier.weights}

    def forward(self, images) -> tuple[Tensor, Tensor]:
        fm = embed(images, self.backbone)
        return fm, score(fm, self.classifier)


def init_segmenter(cfg: RunConfig, seed: int | None = None) -> Segmenter:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 7])
    a = cfg.init_scale

    def param(*shape, name):
        return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True, name=name)

    bb = Backbone(
        w1=param(cfg.F, cfg.hidden_dim, name="w1"),
        b1=param(cfg.hidden_dim, name="b1"),
        w2=param(cfg.hidden_dim, cfg.embed_dim, name="w2"),
        b2=param(cfg.embed_dim, name="b2"),
        radius=cfg.radius,
    )
    clf = CosineClassifier(param(cfg.C, cfg.embed_dim, name="clf"), cfg.logit_scale)
    return Segmenter(bb, clf)


def embed(image, backbone: Backbone) -> Tensor:
    """Feature map [..., H, W, D] from an image [..., H, W, F]."""
    x = nc.as_tensor(image)
    if x.ndim < 3 or x.shape[-1] != backbone.in_dim:
        raise DimensionError(f"image {x.shape} does not match backbone input dim {backbone.in_dim}")
    lead = x.shape[:-1]
    x = nc.neighborhood_mean(x, backbone.radius)
    flat = x.reshape(-1, backbone.in_dim)
    hid = nc.relu(flat @ backbone.w1 + backbone.b1)
    out = hid @ backbone.w2 + backbone.b2
    return out.reshape(*lead, backbone.out_dim)


def score(fm, clf: CosineClassifier) -> Tensor:
    """Cosine score map [..., H, W, C] with entries in [-1, 1]."""
    fm = nc.as_tensor(fm)
    if fm.shape[-1] != clf.weights.shape[1]:
        raise DimensionError(f"feature dim {fm.shape[-1]} != classifier dim {clf.weights.shape[1]}")
    f = nc.l2_normalize(fm, -1)
    w = nc.l2_normalize(clf.weights, -1)
    return nc.matmul(f, nc.transpose(w))


def predict_mask(sm) -> np.ndarray:
    """Per-pixel argmax over categories; ties go to the smallest id."""
    s = sm.data if isinstance(sm, Tensor) else np.asarray(sm)
    return np.argmax(s, axis=-1)


# -- checkpoint file -------------------------------------------------------------

LCKP_MAGIC = b"LCKP"


def dumps_checkpoint(tensors: dict[str, np.ndarray], config_text: str) -> bytes:
    """LCKP blob: magic, u32 config length, config utf-8, u32 count, then
    (u32 name length, name, LTNS record) per tensor in sorted name order."""
    buf = io.BytesIO()
    buf.write(LCKP_MAGIC)
    cfg = config_text.encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(nc.ltns_dumps(tensors[name]))
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    stream = io.BytesIO(blob)
    if stream.read(4) != LCKP_MAGIC:
        raise FormatError("not an LCKP checkpoint")

    def u32():
        raw = stream.read(4)
        if len(raw) != 4:
            raise FormatError("truncated checkpoint")
        return struct.unpack("<I", raw)[0]

    n = u32()
    cfg = stream.read(n)
    if len(cfg) != n:
        raise FormatError("truncated checkpoint config")
    tensors = {}
    for _ in range(u32()):
        k = u32()
        name = stream.read(k)
        if len(name) != k:
            raise FormatError("truncated checkpoint tensor name")
        tensors[name.decode()] = nc.ltns_read_from(stream).data
    if stream.read(1):
        raise FormatError("trailing bytes in checkpoint")
    return tensors, cfg.decode()


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str) -> None:
    Path(path).write_bytes(dumps_checkpoint(tensors, config_text))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    return loads_checkpoint(Path(path).read_bytes())
