"""Joint training over round-robin seg / multilabel / singlelabel batches."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numcore as nc
from .config import RunConfig, loads_config
from .errors import ConfigError, ContractError, DomainError, NaNAbort
from .head import (
    MemoryBank,
    aux_loss_batch,
    image_cls_loss_batch,
    seg_loss,
    single_image_ca_loss_batch,
    update_memory,
)
from .model import Segmenter, init_segmenter, load_checkpoint, save_checkpoint
from .synthdata import Dataset

log = logging.getLogger(__name__)

BATCH_KINDS = ("seg", "multilabel", "singlelabel")
METRIC_COLUMNS = ("step", "lr", "L_seg", "L_cls", "L_aux", "total")

# exposes the knob without a config key; attention follows the features
DETACH_ATTENTION = False


def lr_at(it: int, cfg: RunConfig) -> float:
    """Polynomial decay from base_lr to min_lr over total_iters."""
    if not 0 <= it <= cfg.total_iters:
        raise ContractError(f"iteration {it} outside 0..{cfg.total_iters}")
    if it == cfg.total_iters:
        return cfg.min_lr
    frac = 1.0 - it / cfg.total_iters
    return (cfg.base_lr - cfg.min_lr) * frac ** cfg.power + cfg.min_lr


@dataclass
class OptimizerState:
    momentum_buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float, momentum: float) -> None:
    """v <- momentum * v + g;  p <- p - lr * v  (in place, no weight decay)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        if not np.isfinite(g).all():
            raise NaNAbort(f"non-finite gradient for parameter {name}")
        v = state.momentum_buffers.get(name)
        v = g.copy() if v is None else momentum * v + g
        state.momentum_buffers[name] = v
        p.data -= lr * v


def effective_ratios(cfg: RunConfig) -> tuple[int, int, int]:
    return (1, 0, 0) if cfg.mode == "supervised" else cfg.ratios()


def kind_sequence(ratios: tuple[int, int, int]) -> list[str]:
    """One scheduling cycle: interleave kinds, each appearing ``ratio`` times."""
    seq = []
    for r in range(max(ratios)):
        seq.extend(k for k, n in zip(BATCH_KINDS, ratios) if r < n)
    return seq


def batch_kind(step: int, ratios) -> str:
    seq = kind_sequence(ratios)
    return seq[step % len(seq)]


def batch_scheduler(cfg: RunConfig, ds: Dataset, start: int = 0) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (kind, sample indices) per step; a pure function of (seed, step).

    Each kind walks its own per-epoch permutation, so resuming at any step
    reproduces the uninterrupted stream.
    """
    ratios = effective_ratios(cfg)
    for kind, n in zip(BATCH_KINDS, ratios):
        if n > 0 and ds.count(kind) == 0:
            raise ConfigError(f"ratio asks for {kind} batches but the dataset has none")
    seq = kind_sequence(ratios)
    per_cycle = {k: seq.count(k) for k in BATCH_KINDS}
    step = start
    while True:
        kind = seq[step % len(seq)]
        pos = seq[: step % len(seq)].count(kind)
        j = (step // len(seq)) * per_cycle[kind] + pos  # j-th batch of this kind
        yield kind, _batch_indices(cfg, ds.count(kind), kind, j)
        step += 1


def _batch_indices(cfg: RunConfig, n: int, kind: str, j: int) -> np.ndarray:
    B = cfg.batch_size
    start = j * B
    out = []
    while len(out) < B:
        epoch, off = divmod(start + len(out), n)
        perm = np.random.default_rng([cfg.seed, 31, BATCH_KINDS.index(kind), epoch]).permutation(n)
        take = min(B - len(out), n - off)
        out.extend(perm[off:off + take].tolist())
    return np.array(out)


@dataclass
class StepLosses:
    seg: float = 0.0
    cls: float = 0.0
    aux: float = 0.0
    total: float = 0.0


class Trainer:
    def __init__(self, cfg: RunConfig, ds: Dataset, model: Segmenter | None = None):
        self.cfg = cfg
        self.ds = ds
        self.model = model or init_segmenter(cfg)
        self.state = OptimizerState()
        self.bank = MemoryBank(ds.novel_ids, cfg.memory_size, cfg.embed_dim)
        self.step = 0
        self.history: list[tuple] = []
        self._novel_mask = np.zeros(cfg.C, dtype=bool)
        self._novel_mask[ds.novel_ids] = True
        if ds.manifest.C != cfg.C or ds.manifest.F != cfg.F:
            raise ConfigError("dataset C/F disagree with the run config")

    # -- one step -----------------------------------------------------------
    def losses(self, kind: str, idx: np.ndarray, update_bank: bool = True):
        cfg, model = self.cfg, self.model
        images = nc.Tensor._wrap(self.ds.images[kind][idx])
        fm, sm = model.forward(images)
        out = StepLosses()
        if kind == "seg":
            loss = seg_loss(sm, self.ds.masks["seg"][idx], cfg.ignore_id, cfg.logit_scale)
            out.seg = loss.item()
            out.total = out.seg
            return loss, out
        labels = self.ds.labels[kind][idx]
        cls = image_cls_loss_batch(fm, model.classifier, labels)
        out.cls = cls.item()
        loss = cls * cfg.lambda_cls
        aux = None
        if cfg.mode == "larvseg":
            aux = aux_loss_batch(fm, sm, self.bank, labels, self.ds.base_ids, cfg.tau,
                                 cfg.logit_scale, detach_attention=DETACH_ATTENTION)
        elif cfg.mode == "single-image-ca":
            aux = single_image_ca_loss_batch(sm, labels, cfg.top_k, only=self._novel_mask,
                                             logit_scale=cfg.logit_scale, mask_present=False)
        if aux is not None:
            out.aux = aux.item()
            loss = loss + aux * cfg.lambda_aux
        out.total = loss.item()
        if update_bank and cfg.mode == "larvseg":
            update_memory(self.bank, fm, sm, labels & self._novel_mask[None, :], cfg.top_k)
        return loss, out

    def train_step(self) -> StepLosses:
        cfg = self.cfg
        kind, idx = next(batch_scheduler(cfg, self.ds, start=self.step))
        params = self.model.parameters()
        for p in params.values():
            p.grad = None
        try:
            loss, parts = self.losses(kind, idx)
        except DomainError as exc:  # overflow inside the graph: the run has diverged
            raise NaNAbort(f"numeric failure at step {self.step} ({kind} batch): {exc}") from exc
        if not np.isfinite(parts.total):
            raise NaNAbort(f"non-finite loss at step {self.step} ({kind} batch)")
        loss.backward()
        lr = lr_at(self.step, cfg)
        sgd_step(params, {k: p.grad for k, p in params.items()}, self.state, lr, cfg.momentum)
        self.history.append((self.step, lr, parts.seg, parts.cls, parts.aux, parts.total))
        self.step += 1
        return parts

    # -- checkpoints ---------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{k}": p.data for k, p in self.model.parameters().items()}
        arrays.update({f"opt/{k}": v for k, v in self.state.momentum_buffers.items()})
        arrays.update(self.bank.to_arrays())
        arrays["step"] = np.array([self.step], dtype=np.float64)
        return arrays

    def save(self, path) -> None:
        try:
            save_checkpoint(path, self.state_arrays(), self.cfg.dumps())
        except OSError as exc:
            raise OSError(f"checkpoint write failed: {exc}") from exc

    @classmethod
    def resume(cls, path, ds: Dataset) -> "Trainer":
        arrays, cfg_text = load_checkpoint(path)
        cfg = loads_config(cfg_text)
        tr = cls(cfg, ds)
        load_params(tr.model, arrays)
        tr.state.momentum_buffers = {k[4:]: np.array(v) for k, v in arrays.items() if k.startswith("opt/")}
        if "bank/_meta" in arrays:
            tr.bank = MemoryBank.from_arrays(arrays)
        tr.step = int(arrays["step"][0])
        return tr


def load_params(model: Segmenter, arrays: dict) -> Segmenter:
    for k, p in model.parameters().items():
        src = arrays[f"param/{k}"]
        if src.shape != p.data.shape:
            raise ContractError(f"checkpoint parameter {k} has shape {src.shape}, model wants {p.data.shape}")
        p.data[...] = src
    return model


def model_from_checkpoint(path) -> tuple[Segmenter, RunConfig, dict]:
    arrays, cfg_text = load_checkpoint(path)
    cfg = loads_config(cfg_text)
    model = load_params(init_segmenter(cfg), arrays)
    return model, cfg, arrays


def write_metrics(path, rows, append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with path.open("a" if not fresh else "w", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(METRIC_COLUMNS)
        for step, lr, ls, lc, la, tot in rows:
            w.writerow([step, repr(lr), repr(ls), repr(lc), repr(la), repr(tot)])


def train(cfg: RunConfig, ds: Dataset, out_dir=None, resume_from=None,
          stop_at: int | None = None) -> Trainer:
    """Run to ``total_iters`` (or ``stop_at``), checkpointing into ``out_dir``."""
    if resume_from is not None:
        tr = Trainer.resume(resume_from, ds)
    else:
        tr = Trainer(cfg, ds)
    cfg = tr.cfg
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps())
    flushed = len(tr.history)
    while tr.step < end:
        tr.train_step()
        if out is not None and cfg.checkpoint_every and tr.step % cfg.checkpoint_every == 0:
            write_metrics(out / "metrics.csv", tr.history[flushed:], append=resume_from is not None or flushed > 0)
            flushed = len(tr.history)
            tr.save(out / f"ckpt_{tr.step:06d}.lckp")
        if tr.step % 500 == 0:
            log.info("step %d  loss %.4f", tr.step, tr.history[-1][-1])
    if out is not None:
        write_metrics(out / "metrics.csv", tr.history[flushed:], append=resume_from is not None or flushed > 0)
        tr.save(out / "final.lckp")
    return tr
