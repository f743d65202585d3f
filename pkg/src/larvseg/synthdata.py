"""Deterministic synthetic segmentation / classification datasets.

Three training regimes plus a held-out evaluation split:

* ``seg``          pixel masks over base categories only
* ``multilabel``   scenes over base and novel categories, image-level label sets
* ``singlelabel``  one centred novel object on a fixed base "stuff" background
* ``eval``         multilabel-style scenes whose masks are kept for scoring

Masks of the label-only kinds are written to a ``sealed/`` sidecar that
training never opens.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ContractError, FormatError, GenerationError
from .numcore import load_ltns, save_ltns

KINDS = ("seg", "multilabel", "singlelabel", "eval")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class CategorySpec:
    id: int
    mu: np.ndarray
    sigma: float
    role: str  # "base" | "novel"


@dataclass
class SynthSample:
    image: np.ndarray  # [H, W, F]
    kind: str
    mask: np.ndarray | None = None  # [H, W] int, seg kind only
    labels: frozenset | None = None
    hidden_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "seg":
            if self.mask is None or self.labels is not None:
                raise ContractError("seg samples carry a mask and no labels")
        else:
            if self.labels is None or self.mask is not None:
                raise ContractError(f"{self.kind} samples carry labels and no mask")
            if self.kind == "singlelabel" and len(self.labels) != 1:
                raise ContractError("singlelabel samples carry exactly one label")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def make_categories(C: int, F: int, novel_fraction: float, seed: int,
                    sigma: float = 0.15, scale: float = 1.0) -> list[CategorySpec]:
    """Category means on the signed-axis grid {+-scale*e_i}, randomly rotated.

    Grid points are pairwise at least ``scale*sqrt(2)`` apart, so the
    separability bound ``2*sigma`` holds by construction whenever
    ``sigma <= scale/sqrt(2)``.
    """
    if C < 4:
        raise ContractError("need at least 4 categories")
    if not 0.0 < novel_fraction < 1.0:
        raise ContractError("novel_fraction must lie in (0, 1)")
    n_novel = int(round(novel_fraction * C))
    if not 0 < n_novel < C:
        raise ContractError(f"novel_fraction {novel_fraction} leaves an empty base or novel set")
    if C > 2 * F:
        raise GenerationError(f"cannot place {C} separable means on the {2 * F}-point grid in {F} dims")
    if scale * np.sqrt(2.0) < 2.0 * sigma:
        raise GenerationError(f"sigma={sigma} too large for mean spacing {scale * np.sqrt(2.0):.3f}")
    rng = _rng(seed, 1000)
    grid = np.concatenate([np.eye(F), -np.eye(F)]) * scale
    pick = rng.choice(2 * F, size=C, replace=False)
    q, r = np.linalg.qr(rng.standard_normal((F, F)))
    q = q * np.sign(np.diag(r))
    mus = grid[pick] @ q.T
    novel = set(rng.choice(C, size=n_novel, replace=False).tolist())
    return [
        CategorySpec(id=c, mu=mus[c].copy(), sigma=float(sigma), role="novel" if c in novel else "base")
        for c in range(C)
    ]


def base_ids(specs) -> list[int]:
    return [s.id for s in specs if s.role == "base"]


def novel_ids(specs) -> list[int]:
    return [s.id for s in specs if s.role == "novel"]


def stuff_id(specs) -> int:
    """The base category used as background for object-centric samples."""
    return base_ids(specs)[0]


def partner_id(specs, c: int) -> int:
    """Base category that habitually co-occurs with novel category ``c``."""
    base, novel = base_ids(specs), novel_ids(specs)
    return base[(novel.index(c) + 1) % len(base)]


def _partition(H: int, W: int, n: int, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Guillotine-split the H x W frame into ``n`` rectangles (top, left, h, w)."""
    rects = [(0, 0, H, W)]
    while len(rects) < n:
        splittable = [i for i, (_, _, h, w) in enumerate(rects) if max(h, w) >= 4]
        if not splittable:
            break
        areas = np.array([rects[i][2] * rects[i][3] for i in splittable], dtype=float)
        i = splittable[int(rng.choice(len(splittable), p=areas / areas.sum()))]
        t, l, h, w = rects.pop(i)
        if h > w or (h == w and rng.random() < 0.5):
            cut = int(rng.integers(2, h - 1))
            rects[i:i] = [(t, l, cut, w), (t + cut, l, h - cut, w)]
        else:
            cut = int(rng.integers(2, w - 1))
            rects[i:i] = [(t, l, h, cut), (t, l + cut, h, w - cut)]
    return rects


def _render(specs, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mus = np.stack([s.mu for s in specs])
    sig = np.array([s.sigma for s in specs])
    H, W = mask.shape
    noise = rng.standard_normal((H, W, mus.shape[1]))
    return mus[mask] + sig[mask][..., None] * noise


def _region_mask(H, W, ids, rects) -> np.ndarray:
    mask = np.empty((H, W), dtype=np.int64)
    for c, (t, l, h, w) in zip(ids, rects):
        mask[t:t + h, l:l + w] = c
    return mask


def _draw_ids(pool: list[int], n: int, rng, forced: list[int] | None = None,
              partner=None, cooccur: float = 0.0) -> list[int]:
    first = [] if not forced else [int(rng.choice(forced))]
    if first and partner is not None and n > 1 and rng.random() < cooccur:
        first.append(partner(first[0]))
    rest = [c for c in pool if c not in first]
    k = n - len(first)
    if k <= len(rest):
        picked = first + [int(c) for c in rng.choice(rest, size=k, replace=False)]
    else:
        picked = first + [int(c) for c in rng.choice(rest, size=k, replace=True)]
    rng.shuffle(picked)
    return picked


def gen_seg_sample(specs, H: int, W: int, regions: tuple[int, int], seed) -> SynthSample:
    rng = _rng(*np.atleast_1d(seed))
    n = int(rng.integers(regions[0], regions[1] + 1))
    rects = _partition(H, W, n, rng)
    ids = _draw_ids(base_ids(specs), len(rects), rng)
    mask = _region_mask(H, W, ids, rects)
    return SynthSample(image=_render(specs, mask, rng), kind="seg", mask=mask)


def gen_multilabel_sample(specs, H: int, W: int, regions: tuple[int, int], seed,
                          cooccur: float = 0.0, kind: str = "multilabel") -> SynthSample:
    """Scene over base and novel categories with at least one novel region.

    With probability ``cooccur`` the forced novel category brings its base
    partner along (see :func:`partner_id`).
    """
    novel = novel_ids(specs)
    if not novel:
        raise ContractError("multilabel generation needs at least one novel category")
    rng = _rng(*np.atleast_1d(seed))
    n = int(rng.integers(regions[0], regions[1] + 1))
    rects = _partition(H, W, n, rng)
    ids = _draw_ids([s.id for s in specs], len(rects), rng, forced=novel,
                    partner=lambda c: partner_id(specs, c), cooccur=cooccur)
    mask = _region_mask(H, W, ids, rects)
    labels = frozenset(np.unique(mask).tolist())
    return SynthSample(image=_render(specs, mask, rng), kind=kind, labels=labels, hidden_mask=mask)


def _object_boxes(H: int, W: int) -> list[tuple[int, int]]:
    boxes = []
    for h in range(1, H + 1):
        for w in range(1, W + 1):
            frac = h * w / (H * W)
            if 0.40 <= frac <= 0.70 and 0.5 <= h / w <= 2.0:
                boxes.append((h, w))
    return boxes


def gen_singlelabel_sample(specs, H: int, W: int, seed, fg: int | None = None) -> SynthSample:
    """Centred novel object on the stuff background; ``fg`` defaults to a uniform draw."""
    novel = novel_ids(specs)
    if not novel:
        raise ContractError("singlelabel generation needs at least one novel category")
    rng = _rng(*np.atleast_1d(seed))
    if fg is None:
        fg = int(rng.choice(novel))
    elif fg not in novel:
        raise ContractError(f"foreground {fg} is not a novel category")
    boxes = _object_boxes(H, W)
    if not boxes:
        raise GenerationError(f"no centred box covers 40-70% of a {H}x{W} frame")
    h, w = boxes[int(rng.integers(len(boxes)))]
    mask = np.full((H, W), stuff_id(specs), dtype=np.int64)
    t, l = (H - h) // 2, (W - w) // 2
    mask[t:t + h, l:l + w] = fg
    return SynthSample(image=_render(specs, mask, rng), kind="singlelabel",
                       labels=frozenset([fg]), hidden_mask=mask)


# -- datasets --------------------------------------------------------------------

@dataclass
class DatasetManifest:
    seed: int
    C: int
    F: int
    H: int
    W: int
    novel_fraction: float
    sigma: float
    mu_scale: float
    cooccur: float
    counts: dict
    regions: tuple[int, int]
    base: list = field(default_factory=list)
    novel: list = field(default_factory=list)
    files: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "DatasetManifest":
        return cls(seed=cfg.seed, C=cfg.C, F=cfg.F, H=cfg.H, W=cfg.W,
                   novel_fraction=cfg.novel_fraction, sigma=cfg.sigma, mu_scale=cfg.mu_scale,
                   cooccur=cfg.cooccur, counts={"seg": cfg.n_seg, "multilabel": cfg.n_multilabel,
                           "singlelabel": cfg.n_singlelabel, "eval": cfg.n_eval},
                   regions=(cfg.regions_min, cfg.regions_max))

    def dumps(self) -> str:
        lines = [
            f"seed={self.seed}", f"C={self.C}", f"F={self.F}", f"H={self.H}", f"W={self.W}",
            f"novel_fraction={self.novel_fraction!r}", f"sigma={self.sigma!r}",
            f"mu_scale={self.mu_scale!r}", f"cooccur={self.cooccur!r}",
            f"regions={self.regions[0]},{self.regions[1]}",
        ]
        lines += [f"count.{k}={v}" for k, v in self.counts.items()]
        lines.append("base=" + ",".join(map(str, self.base)))
        lines.append("novel=" + ",".join(map(str, self.novel)))
        lines += [f"file.{name}={digest}" for name, digest in sorted(self.files.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"manifest line without '=': {line!r}")
            k, v = line.split("=", 1)
            kv[k] = v
        try:
            ids = lambda s: [int(x) for x in s.split(",") if x]  # noqa: E731
            r0, r1 = (int(x) for x in kv["regions"].split(","))
            return cls(
                seed=int(kv["seed"]), C=int(kv["C"]), F=int(kv["F"]), H=int(kv["H"]), W=int(kv["W"]),
                novel_fraction=float(kv["novel_fraction"]), sigma=float(kv["sigma"]),
                mu_scale=float(kv["mu_scale"]), cooccur=float(kv["cooccur"]),
                counts={k[6:]: int(v) for k, v in kv.items() if k.startswith("count.")},
                regions=(r0, r1), base=ids(kv["base"]), novel=ids(kv["novel"]),
                files={k[5:]: v for k, v in kv.items() if k.startswith("file.")},
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None


@dataclass
class Dataset:
    """Stacked arrays for every kind. ``masks`` only holds what the reader may see."""

    manifest: DatasetManifest
    specs: list
    images: dict  # kind -> [N, H, W, F]
    labels: dict  # kind -> [N, C] bool multi-hot
    masks: dict  # kind -> [N, H, W] int

    @property
    def base_ids(self) -> list[int]:
        return base_ids(self.specs)

    @property
    def novel_ids(self) -> list[int]:
        return novel_ids(self.specs)

    def __len__(self):
        return sum(len(v) for v in self.images.values())

    def count(self, kind: str) -> int:
        return len(self.images[kind])

    def sample(self, kind: str, i: int) -> SynthSample:
        image = self.images[kind][i]
        if kind == "seg":
            return SynthSample(image=image, kind="seg", mask=self.masks["seg"][i])
        labels = frozenset(np.flatnonzero(self.labels[kind][i]).tolist())
        return SynthSample(image=image, kind="singlelabel" if kind == "singlelabel" else "multilabel",
                           labels=labels, hidden_mask=self.masks.get(kind, [None] * (i + 1))[i])

    def sealed(self) -> "Dataset":
        """Copy without hidden masks of label-only kinds."""
        return Dataset(self.manifest, self.specs, self.images, self.labels, {"seg": self.masks["seg"]})


def generate(manifest: DatasetManifest) -> Dataset:
    """Pure function of the manifest: same manifest, bit-identical arrays."""
    m = manifest
    specs = make_categories(m.C, m.F, m.novel_fraction, m.seed, m.sigma, m.mu_scale)
    m.base, m.novel = base_ids(specs), novel_ids(specs)
    images, labels, masks = {}, {}, {}
    for kind in KINDS:
        n = m.counts.get(kind, 0)
        code = _KIND_CODE[kind]
        samples = []
        if kind == "singlelabel":
            order = _balanced_foregrounds(m.novel, n, _rng(m.seed, 2000))
        for i in range(n):
            seed = (m.seed, code, i)
            if kind == "seg":
                s = gen_seg_sample(specs, m.H, m.W, m.regions, seed)
            elif kind == "singlelabel":
                s = gen_singlelabel_sample(specs, m.H, m.W, seed, fg=order[i])
            else:
                s = gen_multilabel_sample(specs, m.H, m.W, m.regions, seed, cooccur=m.cooccur)
            samples.append(s)
        images[kind] = np.stack([s.image for s in samples]) if n else np.zeros((0, m.H, m.W, m.F))
        masks[kind] = (np.stack([s.mask if s.mask is not None else s.hidden_mask for s in samples])
                       if n else np.zeros((0, m.H, m.W), dtype=np.int64))
        lab = np.zeros((n, m.C), dtype=bool)
        for i, s in enumerate(samples):
            if s.labels is not None:
                lab[i, sorted(s.labels)] = True
        labels[kind] = lab
    return Dataset(m, specs, images, labels, masks)


def _balanced_foregrounds(novel: list[int], n: int, rng) -> list[int]:
    out: list[int] = []
    while len(out) < n:
        block = list(novel)
        rng.shuffle(block)
        out.extend(int(c) for c in block)
    return out[:n]


# -- files -----------------------------------------------------------------------

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _files_for(kind: str) -> dict:
    out = {f"{kind}_images": f"{kind}_images.ltns"}
    if kind == "seg":
        out["seg_masks"] = "seg_masks.ltns"
    else:
        out[f"{kind}_labels"] = f"{kind}_labels.ltns"
        out[f"{kind}_masks"] = f"sealed/{kind}_masks.ltns"
    return out


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "sealed").mkdir(parents=True, exist_ok=True)
    digests = {}
    for kind in KINDS:
        for name, rel in _files_for(kind).items():
            if name.endswith("_images"):
                arr = ds.images[kind]
            elif name.endswith("_labels"):
                arr = ds.labels[kind].astype(np.float64)
            else:
                arr = ds.masks[kind].astype(np.float64)
            save_ltns(out / rel, arr)
            digests[name] = _sha(out / rel)
    ds.manifest.files = digests
    (out / "manifest.txt").write_text(ds.manifest.dumps())
    return out


def read_dataset(data_dir, unseal: bool = False, verify: bool = True) -> Dataset:
    """Load a dataset directory; sealed masks are only read when ``unseal``."""
    root = Path(data_dir)
    mpath = root / "manifest.txt"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    m = DatasetManifest.loads(mpath.read_text())
    specs = make_categories(m.C, m.F, m.novel_fraction, m.seed, m.sigma, m.mu_scale)
    if base_ids(specs) != m.base or novel_ids(specs) != m.novel:
        raise FormatError("manifest base/novel partition disagrees with its seed")
    images, labels, masks = {}, {}, {}
    for kind in KINDS:
        for name, rel in _files_for(kind).items():
            sealed = rel.startswith("sealed/")
            if sealed and not unseal:
                continue
            path = root / rel
            if verify and name in m.files and _sha(path) != m.files[name]:
                raise FormatError(f"{rel}: checksum mismatch")
            arr = load_ltns(path).data
            if name.endswith("_images"):
                if arr.ndim != 4 or arr.shape[1:] != (m.H, m.W, m.F):
                    raise FormatError(f"{rel}: unexpected extents {arr.shape}")
                images[kind] = arr
            elif name.endswith("_labels"):
                labels[kind] = arr.astype(bool)
            else:
                masks[kind] = arr.astype(np.int64)
    labels["seg"] = np.zeros((len(images["seg"]), m.C), dtype=bool)
    return Dataset(m, specs, images, labels, masks)


def payload_checksum(data_dir) -> str:
    """Single digest over every tensor file listed in the manifest."""
    m = DatasetManifest.loads((Path(data_dir) / "manifest.txt").read_text())
    h = hashlib.sha256()
    for name in sorted(m.files):
        h.update(m.files[name].encode())
    return h.hexdigest()
