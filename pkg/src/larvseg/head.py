"""Losses for mixed pixel-level / image-level supervision and the
category-wise attentive classifier.

Batched helpers (``*_batch``) take ``[B, H, W, ...]`` tensors and are what
the trainer calls; the unbatched functions are thin single-image wrappers
with the same semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ColdStartError, ContractError, DimensionError
from .model import CosineClassifier
from .numcore import Tensor

ZSCORE_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_cls: float = 0.1
    lambda_aux: float = 0.1
    tau: float = 1.0
    K: int = 20
    M: int = 20

    def __post_init__(self):
        if min(self.tau, self.K, self.M) <= 0 or min(self.lambda_cls, self.lambda_aux) < 0:
            raise ContractError("loss weights must be non-negative and tau, K, M positive")


class MemoryBank:
    """Per-novel-category FIFO of detached unit-norm features (oldest first)."""

    def __init__(self, novel_ids, capacity: int, dim: int):
        if capacity < 1:
            raise ContractError("memory capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.slots: dict[int, np.ndarray] = {int(c): np.zeros((0, dim)) for c in novel_ids}

    def __contains__(self, c) -> bool:
        return int(c) in self.slots

    def __getitem__(self, c) -> np.ndarray:
        return self.slots[int(c)]

    def fill(self, c) -> int:
        return len(self.slots[int(c)])

    def ready(self, c) -> bool:
        """Enough entries to trust (at least half of capacity)."""
        return 2 * self.fill(c) >= self.capacity

    def push(self, c, vectors: np.ndarray) -> None:
        c = int(c)
        if c not in self.slots:
            raise ContractError(f"category {c} has no memory slot (novel categories only)")
        v = np.asarray(vectors, dtype=np.float64).reshape(-1, self.dim)
        norms = np.linalg.norm(v, axis=1)
        v = v[norms > nc.COSINE_EPS] / norms[norms > nc.COSINE_EPS, None]
        self.slots[c] = np.concatenate([self.slots[c], v])[-self.capacity:]

    def mean_vector(self, c) -> np.ndarray:
        slot = self.slots[int(c)]
        if len(slot) == 0:
            raise ColdStartError(f"memory slot for category {c} is empty")
        return slot.mean(axis=0)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"bank/{c}": v for c, v in self.slots.items()}
        out["bank/_meta"] = np.array([self.capacity, self.dim], dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "MemoryBank":
        cap, dim = (int(x) for x in arrays["bank/_meta"])
        ids = sorted(int(k[5:]) for k in arrays if k.startswith("bank/") and k != "bank/_meta")
        bank = cls(ids, cap, dim)
        for c in ids:
            bank.slots[c] = np.array(arrays[f"bank/{c}"]).reshape(-1, dim)
        return bank

    def check(self) -> None:
        for c, v in self.slots.items():
            assert len(v) <= self.capacity, c
            if len(v):
                assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9), c


# -- helpers -------------------------------------------------------------------

def _flat_spatial(x: Tensor, lead: int) -> Tensor:
    """[B, H, W, K] -> [B, H*W, K] (``lead`` = number of batch axes, 0 or 1)."""
    s = x.shape
    if lead == 0:
        return x.reshape(1, s[0] * s[1], s[2])
    return x.reshape(s[0], s[1] * s[2], s[3])


def _labels_matrix(labels, B: int, C: int) -> np.ndarray:
    if isinstance(labels, np.ndarray) and labels.dtype == bool:
        if labels.shape != (B, C):
            raise DimensionError(f"label matrix {labels.shape} != {(B, C)}")
        return labels
    out = np.zeros((B, C), dtype=bool)
    seq = [labels] if B == 1 and not _is_nested(labels) else list(labels)
    for b, labs in enumerate(seq):
        for c in labs:
            if not 0 <= int(c) < C:
                raise ContractError(f"label {c} outside 0..{C - 1}")
            out[b, int(c)] = True
    return out


def _is_nested(labels) -> bool:
    items = list(labels)
    return bool(items) and not np.isscalar(items[0])


def target_ce(logits: Tensor, targets: np.ndarray, present: np.ndarray | None) -> Tensor:
    """Per-row cross-entropy ``logsumexp(allowed) - logit[target]``.

    ``present`` [R, C] marks co-present categories that are dropped from the
    denominator; the row's own target always stays in.
    """
    R = logits.shape[0]
    rows = np.arange(R)
    if present is None:
        allowed = None
    else:
        allowed = ~present
        allowed[rows, targets] = True
    lse = nc.logsumexp(logits, -1, mask=allowed)
    return lse - logits[rows, targets]


def topk_indices(channel: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of a flat score channel.

    Ties resolve toward the smaller index.
    """
    flat = np.asarray(channel).reshape(-1)
    if k > flat.size:
        raise ContractError(f"K={k} exceeds the {flat.size} available pixels")
    return np.argsort(-flat, kind="stable")[:k]


def _zero_like_graph(x: Tensor) -> Tensor:
    return nc.tsum(x * 0.0)


# -- pixel-level ---------------------------------------------------------------

def seg_loss(sm, mask, ignore_id: int = 255, logit_scale: float = 20.0) -> Tensor:
    """Mean per-pixel softmax cross-entropy on ``logit_scale * sm``; ignored pixels skipped."""
    sm = nc.as_tensor(sm)
    C = sm.shape[-1]
    m = np.asarray(mask).reshape(-1).astype(np.int64)
    if m.size * C != sm.size:
        raise DimensionError(f"mask with {m.size} pixels does not match score map {sm.shape}")
    valid = m != ignore_id
    if np.any((m[valid] < 0) | (m[valid] >= C)):
        raise ContractError("mask ids must be < C or equal to ignore_id")
    z = sm.reshape(-1, C) * logit_scale
    if not valid.any():
        return _zero_like_graph(z)
    onehot = np.zeros((m.size, C))
    onehot[np.flatnonzero(valid), m[valid]] = 1.0
    lse = nc.logsumexp(z, -1)
    picked = nc.tsum(z * onehot, -1)
    w = valid / valid.sum()
    return nc.tsum((lse - picked) * w)


# -- image-level ---------------------------------------------------------------

def pooled_logits_batch(fm: Tensor, clf: CosineClassifier) -> Tensor:
    """GAP over space, then scaled cosine logits [B, C]."""
    p = nc.mean(fm, axis=(1, 2))
    s = nc.matmul(nc.l2_normalize(p, -1), nc.transpose(nc.l2_normalize(clf.weights, -1)))
    return s * clf.logit_scale


def _rows_for(labels: np.ndarray, only=None):
    b_idx, c_idx = np.nonzero(labels if only is None else labels & only)
    counts = np.bincount(b_idx, minlength=labels.shape[0])
    return b_idx, c_idx, counts


def _per_image_mean_weights(b_idx: np.ndarray, counts: np.ndarray) -> np.ndarray:
    n_img = int((counts > 0).sum())
    return 1.0 / (counts[b_idx] * n_img)


def image_cls_loss_batch(fm, clf: CosineClassifier, labels, mask_present: bool = True) -> Tensor:
    """Image-level CE of GAP features; per image the mean over its labels, then over images."""
    fm = nc.as_tensor(fm)
    B, C = fm.shape[0], clf.num_classes
    lab = _labels_matrix(labels, B, C)
    if not lab.any(axis=1).all():
        raise ContractError("every image needs at least one label")
    z = pooled_logits_batch(fm, clf)
    b_idx, c_idx, counts = _rows_for(lab)
    ce = target_ce(z[b_idx], c_idx, lab[b_idx].copy() if mask_present else None)
    return nc.tsum(ce * _per_image_mean_weights(b_idx, counts))


def image_cls_loss(fm, clf: CosineClassifier, labels, mask_present: bool = True) -> Tensor:
    fm = nc.as_tensor(fm)
    if fm.ndim != 3:
        raise DimensionError("image_cls_loss expects a single [H, W, D] feature map")
    labels = list(labels)
    if not labels:
        raise ContractError("labels must be non-empty")
    return image_cls_loss_batch(fm.reshape(1, *fm.shape), clf, [labels], mask_present)


def baseline_total_loss(seg, cls, lambda_cls: float = 0.1):
    return seg + cls * lambda_cls


def larvseg_total_loss(seg, cls, aux, lambda_cls: float = 0.1, lambda_aux: float = 0.1):
    return seg + cls * lambda_cls + aux * lambda_aux


# -- memory bank and attention -----------------------------------------------------

def update_memory(bank: MemoryBank, fm, sm, labels, K: int) -> MemoryBank:
    """Push the K top-scoring pixel features of every labelled novel category.

    Works on one image ([H, W, *]) or a batch ([B, H, W, *]); no graph is kept.
    """
    f = np.asarray(fm.data if isinstance(fm, Tensor) else fm)
    s = np.asarray(sm.data if isinstance(sm, Tensor) else sm)
    if f.ndim == 3:
        f, s, labels = f[None], s[None], [labels]
    B = f.shape[0]
    f = f.reshape(B, -1, f.shape[-1])
    s = s.reshape(B, -1, s.shape[-1])
    if K > f.shape[1]:
        raise ContractError(f"K={K} exceeds the {f.shape[1]} pixels of an image")
    lab = _labels_matrix(labels, B, s.shape[-1])
    for b in range(B):
        for c in np.flatnonzero(lab[b]):
            if c in bank:
                bank.push(c, f[b, topk_indices(s[b, :, c], K)])
    return bank


def memory_confidence(fm, bank: MemoryBank, c: int) -> Tensor:
    """Mean cosine similarity of every pixel feature to the stored vectors of ``c``.

    Stored vectors are unit norm, so this is ``normalize(f) . mean(bank[c])``.
    """
    fm = nc.as_tensor(fm)
    center = bank.mean_vector(c)
    return nc.matmul(nc.l2_normalize(fm, -1), center.reshape(-1, 1)).reshape(fm.shape[:-1])


def zscore(d: Tensor, axis) -> Tensor:
    mu = nc.mean(d, axis, keepdims=True)
    cen = d - mu
    std = nc.sqrt(nc.mean(nc.square(cen), axis, keepdims=True))
    return cen / (std + ZSCORE_EPS)


def attention_map(s_fg, s_bg) -> Tensor:
    """sigmoid of the spatial z-score of ``s_fg - s_bg`` (population std)."""
    s_fg, s_bg = nc.as_tensor(s_fg), nc.as_tensor(s_bg)
    if s_fg.shape != s_bg.shape:
        raise DimensionError(f"fg {s_fg.shape} vs bg {s_bg.shape}")
    return nc.sigmoid(zscore(s_fg - s_bg, tuple(range(s_fg.ndim))))


def attentive_pool(sm: Tensor, A: Tensor, logit_scale: float) -> Tensor:
    """Pooled logits [B, T, C] from scores [B, N, C] and attention [B, N, T]."""
    At = A / nc.tsum(A, 1, keepdims=True)
    return nc.matmul(nc.transpose(At, (0, 2, 1)), sm * logit_scale)


def attentive_cls_loss(sm, A, c: int, tau: float = 1.0, labels=None,
                       logit_scale: float = 20.0) -> Tensor:
    """CE of softmax(attention-pooled logits / tau) against ``c``.

    ``labels`` are the image's present categories; all but ``c`` are dropped
    from the denominator.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    sm, A = nc.as_tensor(sm), nc.as_tensor(A)
    H, W, C = sm.shape
    if A.shape != (H, W):
        raise DimensionError(f"attention {A.shape} does not match score map {sm.shape}")
    pooled = attentive_pool(sm.reshape(1, H * W, C), A.reshape(1, H * W, 1), logit_scale)
    z = pooled.reshape(1, C) / tau
    present = None
    if labels is not None:
        present = np.zeros((1, C), dtype=bool)
        present[0, [int(x) for x in labels]] = True
    return nc.tsum(target_ce(z, np.array([int(c)]), present))


def background_confidence(s_mem: Tensor, s_base: Tensor | None) -> Tensor:
    """Strongest competitor per pixel for each foreground column of ``s_mem``.

    ``s_mem`` [B, N, T] holds memory confidences of the T ready novel
    categories; ``s_base`` [B, N, Cb] the classifier scores of base categories.
    For column t the competitors are the other T-1 memory columns and all base
    columns; with no competitor the background is zero.
    """
    B, N, T = s_mem.shape
    comp = s_mem if s_base is None else nc.concat([s_mem, s_base], axis=-1)
    n_comp = comp.shape[-1]
    if n_comp == 1:
        return s_mem * 0.0
    eligible = np.ones((T, n_comp), dtype=bool)
    eligible[np.arange(T), np.arange(T)] = False
    wide = comp.reshape(B, N, 1, n_comp) + np.zeros((1, 1, T, 1))
    return nc.tmax(wide, -1, mask=eligible)


def aux_loss_batch(fm, sm, bank: MemoryBank, labels, base_ids, tau: float,
                   logit_scale: float, detach_attention: bool = False) -> Tensor | None:
    """Attentive auxiliary loss over every (image, ready novel label) pair.

    Returns None when no pair qualifies (cold start).
    """
    fm, sm = nc.as_tensor(fm), nc.as_tensor(sm)
    B, H, W, C = sm.shape
    N = H * W
    lab = _labels_matrix(labels, B, C)
    ready = [c for c in sorted(bank.slots) if bank.ready(c)]
    if not ready:
        return None
    ready_mask = np.zeros(C, dtype=bool)
    ready_mask[ready] = True
    b_idx, c_idx, counts = _rows_for(lab, ready_mask[None, :])
    if b_idx.size == 0:
        return None
    f = fm.reshape(B, N, fm.shape[-1])
    s = sm.reshape(B, N, C)
    centers = np.stack([bank.mean_vector(c) for c in ready], axis=1)  # [D, T]
    src = f.detach() if detach_attention else f
    s_mem = nc.matmul(nc.l2_normalize(src, -1), centers)  # [B, N, T]
    s_base = (s.detach() if detach_attention else s)[:, :, list(base_ids)] if len(base_ids) else None
    s_bg = background_confidence(s_mem, s_base)
    A = nc.sigmoid(zscore(s_mem - s_bg, 1))
    pooled = attentive_pool(s, A, logit_scale) / tau  # [B, T, C]
    col = {c: t for t, c in enumerate(ready)}
    t_idx = np.array([col[c] for c in c_idx])
    rows = pooled[b_idx, t_idx]  # [R, C]
    ce = target_ce(rows, c_idx, lab[b_idx].copy())
    return nc.tsum(ce * _per_image_mean_weights(b_idx, counts))


# -- single-image ablation arm -------------------------------------------------------

def single_image_ca_loss_batch(sm, labels, K: int, only=None, logit_scale: float = 20.0,
                               mask_present: bool = True) -> Tensor | None:
    """Per-pixel CE over each label's top-K pixels of its own score channel."""
    sm = nc.as_tensor(sm)
    B, H, W, C = sm.shape
    N = H * W
    if K > N:
        raise ContractError(f"K={K} exceeds the {N} pixels of an image")
    lab = _labels_matrix(labels, B, C)
    b_idx, c_idx, counts = _rows_for(lab, None if only is None else only[None, :])
    if b_idx.size == 0:
        return None
    flat = sm.reshape(B * N, C)
    data = sm.data.reshape(B, N, C)
    pix = np.concatenate([b * N + topk_indices(data[b, :, c], K) for b, c in zip(b_idx, c_idx)])
    tgt = np.repeat(c_idx, K)
    present = np.repeat(lab[b_idx], K, axis=0) if mask_present else None
    ce = target_ce(flat[pix] * logit_scale, tgt, present)
    w = np.repeat(_per_image_mean_weights(b_idx, counts), K) / K
    return nc.tsum(ce * w)


def single_image_ca_loss(sm, labels, K: int, logit_scale: float = 20.0) -> Tensor:
    sm = nc.as_tensor(sm)
    labels = list(labels)
    if not labels:
        raise ContractError("labels must be non-empty")
    return single_image_ca_loss_batch(sm.reshape(1, *sm.shape), [labels], K, logit_scale=logit_scale)


def cold_start_threshold(M: int) -> int:
    return math.ceil(M / 2)
