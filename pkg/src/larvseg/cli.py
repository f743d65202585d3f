"""``larvseg`` command-line entry point.

Subcommands: gen, train, eval, group, respmap, render, ablate. Every command
accepts ``--config`` plus ``--set key=value`` overrides; dedicated flags such
as ``--seed`` and ``--mode`` win over both.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import MODES, RunConfig, load_config, parse_pairs
from .errors import ConfigError, FormatError, LarvSegError, NaNAbort
from .evaluation import evaluate, pixel_grouping_eval, render_mask, response_map, write_report
from .model import predict_mask
from .synthdata import DatasetManifest, generate, read_dataset, write_dataset
from .trainer import model_from_checkpoint, train

log = logging.getLogger("larvseg")

EXIT_OK = 0
EXIT_ERROR = 1  # any other library error (contract, dimension, generation, ...)
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_NAN = 5

ABLATE_COLUMNS = ("cell", "mode", "seed", "memory_size", "top_k", "all", "base", "novel")


# -- config plumbing ----------------------------------------------------------------------

def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        out.update(parse_pairs(item))
    for key in ("seed", "mode"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _config(args) -> RunConfig:
    path = getattr(args, "config", None)
    if path is not None and not Path(path).exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return load_config(path, **_overrides(args))


def _align_with_data(cfg: RunConfig, ds) -> RunConfig:
    """Dataset geometry comes from its manifest; the run config only has to agree."""
    m = ds.manifest
    return cfg.replace(C=m.C, F=m.F, H=m.H, W=m.W)


def _eval_split(data_dir):
    ds = read_dataset(data_dir, unseal=True)
    if "eval" not in ds.masks:
        raise FormatError(f"{data_dir}: no evaluation masks")
    return ds


# -- commands -----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    ds = generate(DatasetManifest.from_config(cfg))
    out = write_dataset(ds, args.out)
    (out / "config.txt").write_text(cfg.dumps())
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    cfg = _align_with_data(_config(args), ds)
    tr = train(cfg, ds, args.out, resume_from=args.resume)
    last = tr.history[-1] if tr.history else None
    print(f"trained {cfg.mode} for {tr.step} steps"
          + (f", final loss {last[-1]:.6f}" if last else "") + f"; checkpoint {Path(args.out) / 'final.lckp'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, _ = model_from_checkpoint(args.checkpoint)
    ds = _eval_split(args.data)
    rep = evaluate(model, ds.images["eval"], ds.masks["eval"], ds.base_ids, ds.novel_ids, cfg.ignore_id)
    meta = {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    meta.update({f"config.{k}": v for k, v in parse_pairs(cfg.dumps()).items()})
    write_report(args.report, rep, meta)
    print(f"mIoU all {rep.all:.4f}  base {rep.base:.4f}  novel {rep.novel:.4f}")
    return EXIT_OK


def cmd_group(args) -> int:
    model, cfg, _ = model_from_checkpoint(args.checkpoint)
    ds = _eval_split(args.data)
    seed = cfg.seed if args.seed is None else args.seed
    res = pixel_grouping_eval(model, ds.images["eval"], ds.masks["eval"], ds.base_ids, ds.novel_ids, seed)
    rows = [("seed", seed), ("base_acc", f"{res.base_acc:.10f}"), ("novel_acc", f"{res.novel_acc:.10f}"),
            ("base_miou", f"{res.base_miou:.10f}"), ("novel_miou", f"{res.novel_miou:.10f}")]
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            w.writerows(rows)
    print(f"grouping accuracy base {res.base_acc:.4f}  novel {res.novel_acc:.4f}")
    return EXIT_OK


def _pick_sample(ds, split: str, i: int) -> np.ndarray:
    n = ds.count(split)
    if not 0 <= i < n:
        raise ConfigError(f"--sample {i} outside 0..{n - 1} of split {split}")
    return ds.images[split][i]


def cmd_respmap(args) -> int:
    model, _, _ = model_from_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    img = _pick_sample(ds, args.split, args.sample)
    with nc.no_grad():
        fm = model.forward(img)[0].data
    H, W = fm.shape[:2]
    h, w = (H // 2, W // 2) if args.anchor is None else args.anchor
    render_mask(response_map(fm, h, w), args.out, kind="map")
    print(f"response map for anchor ({h}, {w}) -> {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    if args.checkpoint:
        model, _, _ = model_from_checkpoint(args.checkpoint)
        ds = read_dataset(args.data)
        with nc.no_grad():
            mask = predict_mask(model.forward(_pick_sample(ds, args.split, args.sample))[1])
    else:
        ds = read_dataset(args.data, unseal=True)
        _pick_sample(ds, args.split, args.sample)
        if args.split not in ds.masks:
            raise FormatError(f"split {args.split} has no masks")
        mask = ds.masks[args.split][args.sample]
    render_mask(mask, args.out, kind="mask")
    print(f"mask -> {args.out}")
    return EXIT_OK


# -- ablation sweeps ------------------------------------------------------------------------

def ablation_cells(sweep: str, cfg: RunConfig, modes=None) -> list[dict]:
    if sweep == "memory-topk":
        cells = [dict(memory_size=m, top_k=20) for m in (10, 20, 40)]
        cells += [dict(memory_size=20, top_k=k) for k in (10, 20, 40)]
        return [dict(mode="larvseg", **c) for c in cells]
    if sweep == "modes":
        chosen = modes or ["larvseg", "single-image-ca"]
        for m in chosen:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r} in sweep")
        return [dict(mode=m, memory_size=cfg.memory_size, top_k=cfg.top_k) for m in chosen]
    raise ConfigError(f"unknown sweep {sweep!r}")


def run_cell(cfg: RunConfig, data_dir: str) -> tuple[float, float, float]:
    ds = _eval_split(data_dir)
    cfg = _align_with_data(cfg, ds)
    tr = train(cfg, ds.sealed())
    rep = evaluate(tr.model, ds.images["eval"], ds.masks["eval"], ds.base_ids, ds.novel_ids, cfg.ignore_id)
    return rep.all, rep.base, rep.novel


def _workers(requested: int) -> int:
    cap = os.environ.get("LARVSEG_THREADS")
    n = max(1, requested)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"LARVSEG_THREADS must be an integer, got {cap!r}") from None
    return n


def cmd_ablate(args) -> int:
    base = _config(args)
    cells = ablation_cells(args.sweep, base, args.modes.split(",") if args.modes else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(base.dumps())
    configs = [base.replace(**c) for c in cells]
    csv_path = out / "ablation.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATE_COLUMNS)
        fh.flush()

        def emit(i, cfg, res):
            w.writerow([i, cfg.mode, cfg.seed, cfg.memory_size, cfg.top_k] + [f"{v:.10f}" for v in res])
            fh.flush()
            print(f"cell {i}: {cfg.mode} M={cfg.memory_size} K={cfg.top_k} -> novel {res[2]:.4f}")

        workers = _workers(args.parallel)
        if workers == 1:
            for i, cfg in enumerate(configs):
                emit(i, cfg, run_cell(cfg, args.data))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_cell, cfg, args.data) for cfg in configs]
                # rows land in cell order; a failure stops the sweep after the rows before it
                for i, (cfg, fut) in enumerate(zip(configs, futures)):
                    try:
                        emit(i, cfg, fut.result())
                    except BaseException:
                        for f in futures:
                            f.cancel()
                        raise
    print(f"wrote {len(configs)} rows to {csv_path}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def _anchor(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("anchor must look like H,W") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="larvseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen)

    sp = common(sub.add_parser("train", help="train one mode"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="mIoU report for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("group", help="anchor-pixel grouping probe")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_group)

    for name, func, helptext in (("respmap", cmd_respmap, "render an anchor response map"),
                                 ("render", cmd_render, "render a gt or predicted mask")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=name == "respmap")
        sp.add_argument("--data", required=True)
        sp.add_argument("--sample", type=int, default=0)
        sp.add_argument("--split", default="eval", choices=("seg", "multilabel", "singlelabel", "eval"))
        sp.add_argument("--out", required=True)
        if name == "respmap":
            sp.add_argument("--anchor", type=_anchor, help="H,W (default: image centre)")
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("ablate", help="train+eval a sweep of cells"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sweep", default="memory-topk", choices=("memory-topk", "modes"))
    sp.add_argument("--modes", help="comma-separated modes for --sweep modes")
    sp.add_argument("--parallel", type=int, default=1, help="worker processes (capped by LARVSEG_THREADS)")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, f"missing file: {exc.filename or exc}"
    except FormatError as exc:
        code, msg = EXIT_FORMAT, f"format error: {exc}"
    except NaNAbort as exc:
        code, msg = EXIT_NAN, f"training aborted: {exc}"
    except LarvSegError as exc:
        code, msg = EXIT_ERROR, f"error: {exc}"
    print(f"larvseg: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
