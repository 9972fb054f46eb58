"""Synthetic slides with planted instance-level ground truth.

Each slide is a pool of instances drawn from a Gaussian mixture:

* background: N(0, sigma^2 I)
* signal for class c: N(mu_c, sigma^2 I) with mu_c = separation * e_c
* mimic of class c: N(mu_c + mimic_offset * u_c, sigma^2 I), placed only in
  slides whose label is not c

Bags are sampled from a slide without replacement and are re-drawn until
they contain at least one signal instance of the slide label.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

BACKGROUND, SIGNAL, MIMIC = 0, 1, 2
_KIND_NAMES = {BACKGROUND: "background", SIGNAL: "signal", MIMIC: "mimic"}

FORMAT_TAG = "#milab-dataset"
FORMAT_VERSION = 1
CSV_NAME = "dataset.csv"
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class GenConfig:
    num_slides: int = 600
    instances_per_slide: int = 64
    bag_size: int = 32
    bags_per_slide: int = 4
    input_dim: int = 16
    num_classes: int = 3
    signal_fraction: float = 0.1
    mimic_fraction: float = 0.0
    mixed_fraction: float = 0.0
    class_separation: float = 4.0
    mimic_offset: float = 3.0
    noise_sigma: float = 1.0
    split: tuple[float, float, float] = (0.6, 0.15, 0.25)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        for name in ("signal_fraction", "mimic_fraction", "mixed_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.signal_fraction <= 0:
            raise ConfigError("signal_fraction must be > 0")
        if self.signal_fraction * self.instances_per_slide < 1:
            raise ConfigError(
                f"signal_fraction * instances_per_slide = "
                f"{self.signal_fraction * self.instances_per_slide:g} < 1: no room for a signal instance")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < self.num_classes:
            raise ConfigError(f"input_dim ({self.input_dim}) must be >= num_classes ({self.num_classes})")
        if not 1 <= self.bag_size <= self.instances_per_slide:
            raise ConfigError(f"bag_size must lie in [1, instances_per_slide], got {self.bag_size}")
        if self.num_slides < 1 or self.bags_per_slide < 0:
            raise ConfigError("num_slides must be >= 1 and bags_per_slide >= 0")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


@dataclass
class Bag:
    instances: np.ndarray  # N x D
    bag_label: int
    instance_kind: np.ndarray  # BACKGROUND / SIGNAL / MIMIC
    instance_class: np.ndarray  # class signalled or mimicked, -1 for background
    slide_id: int = -1
    grid_coords: np.ndarray | None = None  # N x 2 (row, col)
    instance_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return self.instances.shape[0]

    def signal_mask(self, cls: int | None = None) -> np.ndarray:
        cls = self.bag_label if cls is None else cls
        return (self.instance_kind == SIGNAL) & (self.instance_class == cls)

    def mimic_mask(self, cls: int | None = None) -> np.ndarray:
        m = self.instance_kind == MIMIC
        return m if cls is None else m & (self.instance_class == cls)


@dataclass
class Slide:
    slide_id: int
    label: int
    instances: np.ndarray
    instance_kind: np.ndarray
    instance_class: np.ndarray
    grid_coords: np.ndarray
    bags: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return self.instances.shape[0]

    def bag(self, indices=None) -> Bag:
        idx = np.arange(len(self)) if indices is None else np.asarray(indices, dtype=np.int64)
        return Bag(
            instances=self.instances[idx],
            bag_label=self.label,
            instance_kind=self.instance_kind[idx],
            instance_class=self.instance_class[idx],
            slide_id=self.slide_id,
            grid_coords=self.grid_coords[idx],
            instance_ids=idx.copy(),
        )

    def stored_bags(self) -> list[Bag]:
        return [self.bag(ix) for ix in self.bags]


@dataclass
class SlideDataset:
    config: GenConfig
    slides: list[Slide]
    splits: dict[str, list[int]]

    def slide(self, slide_id: int) -> Slide:
        s = self.slides[slide_id]
        if s.slide_id != slide_id:
            s = next(x for x in self.slides if x.slide_id == slide_id)
        return s

    def split_slides(self, name: str) -> list[Slide]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return [self.slide(i) for i in self.splits[name]]

    @property
    def num_instances(self) -> int:
        return sum(len(s) for s in self.slides)

    @property
    def num_bags(self) -> int:
        return sum(len(s.bags) for s in self.slides)


# ---------------------------------------------------------------------------
# generation


def class_means(config: GenConfig) -> np.ndarray:
    mu = np.zeros((config.num_classes, config.input_dim))
    for c in range(config.num_classes):
        mu[c, c] = config.class_separation
    return mu


def mimic_directions(config: GenConfig) -> np.ndarray:
    """Unit offsets u_c orthogonal to each class axis."""
    C, D = config.num_classes, config.input_dim
    u = np.zeros((C, D))
    if D >= 2 * C:
        for c in range(C):
            u[c, C + c] = 1.0
        return u
    rng = np.random.default_rng([config.seed, 0x6D696D])
    for c in range(C):
        v = rng.standard_normal(D)
        v[c] = 0.0
        u[c] = v / np.linalg.norm(v)
    return u


def _grid(n: int, rng: np.random.Generator) -> np.ndarray:
    side = math.ceil(math.sqrt(n))
    cells = rng.permutation(side * side)[:n]
    return np.stack([cells // side, cells % side], axis=1).astype(np.int64)


def _make_slide(config: GenConfig, slide_id: int, label: int, mu: np.ndarray, u: np.ndarray) -> Slide:
    rng = np.random.default_rng([config.seed, slide_id])
    n, C, D = config.instances_per_slide, config.num_classes, config.input_dim
    kind = np.full(n, BACKGROUND, dtype=np.int64)
    cls = np.full(n, -1, dtype=np.int64)

    n_sig = max(1, int(round(config.signal_fraction * n)))
    plan = [(SIGNAL, label, n_sig)]
    others = [c for c in range(C) if c != label]
    if config.mixed_fraction > 0 and rng.random() < config.mixed_fraction and n_sig >= 2:
        second = int(rng.choice(others))
        plan.append((SIGNAL, second, n_sig // 2))
        others = [c for c in others if c != second]
    n_mimic = int(round(config.mimic_fraction * n))
    if n_mimic and others:
        plan.append((MIMIC, int(rng.choice(others)), n_mimic))
    if sum(k for _, _, k in plan) > n:
        raise GenerationError(f"slide {slide_id}: planted instances exceed instances_per_slide={n}")

    pos = 0
    for k, c, count in plan:
        kind[pos:pos + count] = k
        cls[pos:pos + count] = c
        pos += count
    order = rng.permutation(n)
    kind, cls = kind[order], cls[order]

    x = config.noise_sigma * rng.standard_normal((n, D))
    sig = kind == SIGNAL
    x[sig] += mu[cls[sig]]
    mim = kind == MIMIC
    x[mim] += mu[cls[mim]] + config.mimic_offset * u[cls[mim]]

    slide = Slide(slide_id, label, x, kind, cls, _grid(n, rng))
    bag_seed = int(rng.integers(2**63))
    slide.bags = [b.instance_ids for b in sample_bags(slide, config.bag_size, config.bags_per_slide, bag_seed)]
    return slide


def _stratified_split(labels: np.ndarray, fractions, rng: np.random.Generator) -> dict[str, list[int]]:
    splits = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        ids = rng.permutation(np.flatnonzero(labels == c))
        n = len(ids)
        n_tr = int(round(fractions[0] * n))
        n_va = int(round(fractions[1] * n))
        n_va = min(n_va, n - n_tr)
        splits["train"] += ids[:n_tr].tolist()
        splits["val"] += ids[n_tr:n_tr + n_va].tolist()
        splits["test"] += ids[n_tr + n_va:].tolist()
    return {k: sorted(v) for k, v in splits.items()}


def generate(config: GenConfig) -> SlideDataset:
    rng = np.random.default_rng([config.seed, 0x6C6162])
    labels = rng.permutation(np.arange(config.num_slides) % config.num_classes)
    mu, u = class_means(config), mimic_directions(config)
    slides = [_make_slide(config, i, int(labels[i]), mu, u) for i in range(config.num_slides)]
    return SlideDataset(config, slides, _stratified_split(labels, config.split, rng))


def sample_bags(slide: Slide, bag_size: int, num_bags: int, seed, require_signal: bool = True,
                max_tries: int = 1000) -> list[Bag]:
    """Draw ``num_bags`` bags of ``bag_size`` distinct instances from a slide.

    With ``require_signal`` every bag is redrawn until it holds at least one
    signal instance of the slide label.
    """
    n = len(slide)
    if bag_size > n:
        raise GenerationError(f"bag_size {bag_size} exceeds slide {slide.slide_id} size {n}")
    positive = (slide.instance_kind == SIGNAL) & (slide.instance_class == slide.label)
    if require_signal and not positive.any():
        raise GenerationError(f"slide {slide.slide_id} has no signal instance for class {slide.label}")
    rng = np.random.default_rng(seed)
    bags = []
    for _ in range(num_bags):
        for _ in range(max_tries):
            idx = np.sort(rng.choice(n, size=bag_size, replace=False))
            if not require_signal or positive[idx].any():
                break
        else:
            raise GenerationError(
                f"slide {slide.slide_id}: no label-preserving bag of size {bag_size} in {max_tries} draws")
        bags.append(slide.bag(idx))
    return bags


def mil_assumption_holds(bag: Bag) -> bool:
    """The bag holds a signal instance of its label (exclusivity is checked per slide)."""
    return bool(bag.signal_mask().any())


# ---------------------------------------------------------------------------
# serialization
#
# dataset.csv: one header line
#   #milab-dataset,<version>,<num_slides>,<num_instances>,<D>,<C>,<seed>
# followed by one row per instance, slides in id order:
#   slide_id,bag_hint,instance_id,row,col,instance_label,f_0,...,f_{D-1}
# instance_label is background | signal_<c> | mimic_<c>; bag_hint is the index
# of the first stored bag containing the instance, -1 if none.
# manifest.json holds the generator config, slide labels, splits and the
# stored bags as instance-id lists.


def _label_str(kind: int, cls: int) -> str:
    return "background" if kind == BACKGROUND else f"{_KIND_NAMES[kind]}_{cls}"


def _parse_label(s: str, line: int) -> tuple[int, int]:
    if s == "background":
        return BACKGROUND, -1
    name, _, c = s.partition("_")
    kinds = {"signal": SIGNAL, "mimic": MIMIC}
    if name not in kinds or not c.isdigit():
        raise DatasetParseError(f"bad instance_label {s!r}", line)
    return kinds[name], int(c)


def dataset_csv(ds: SlideDataset) -> str:
    cfg = ds.config
    lines = [f"{FORMAT_TAG},{FORMAT_VERSION},{len(ds.slides)},{ds.num_instances},"
             f"{cfg.input_dim},{cfg.num_classes},{cfg.seed}"]
    for s in ds.slides:
        hint = np.full(len(s), -1, dtype=np.int64)
        for b, ix in reversed(list(enumerate(s.bags))):
            hint[ix] = b
        for i in range(len(s)):
            r, c = s.grid_coords[i]
            feats = ",".join(repr(float(v)) for v in s.instances[i])
            lines.append(f"{s.slide_id},{hint[i]},{i},{r},{c},"
                         f"{_label_str(s.instance_kind[i], s.instance_class[i])},{feats}")
    return "\n".join(lines) + "\n"


def manifest_dict(ds: SlideDataset) -> dict:
    return {
        "format": "milab-dataset-manifest",
        "version": FORMAT_VERSION,
        "config": ds.config.to_dict(),
        "labels": [s.label for s in ds.slides],
        "splits": ds.splits,
        "bags": [[ix.tolist() for ix in s.bags] for s in ds.slides],
    }


def save(ds: SlideDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / CSV_NAME).write_text(dataset_csv(ds))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest_dict(ds), indent=1, sort_keys=True) + "\n")


def parse(csv_text: str, manifest: dict) -> SlideDataset:
    lines = csv_text.split("\n")
    if not csv_text.endswith("\n"):
        raise DatasetParseError("file does not end with a newline (truncated?)", len(lines))
    lines = lines[:-1]
    if not lines:
        raise DatasetParseError("empty dataset file", 1)
    head = lines[0].split(",")
    if len(head) != 7 or head[0] != FORMAT_TAG:
        raise DatasetParseError("missing or malformed header", 1)
    try:
        version, n_slides, n_inst, D, C, seed = (int(v) for v in head[1:])
    except ValueError:
        raise DatasetParseError("non-integer header field", 1) from None
    if version != FORMAT_VERSION:
        raise DatasetParseError(f"unsupported dataset version {version}", 1)
    if len(lines) - 1 != n_inst:
        raise DatasetParseError(f"header declares {n_inst} instances but file has {len(lines) - 1} rows",
                                len(lines))
    config = GenConfig.from_dict({**manifest["config"], "split": tuple(manifest["config"]["split"])})
    if (config.input_dim, config.num_classes, config.seed, config.num_slides) != (D, C, seed, n_slides):
        raise DatasetParseError("header does not match manifest config", 1)

    rows: dict[int, list] = {}
    ncol = 6 + D
    for ln, text in enumerate(lines[1:], start=2):
        parts = text.split(",")
        if len(parts) != ncol:
            raise DatasetParseError(f"expected {ncol} fields, got {len(parts)}", ln)
        try:
            sid, _hint, iid, r, c = (int(v) for v in parts[:5])
            feats = [float(v) for v in parts[6:]]
        except ValueError as e:
            raise DatasetParseError(str(e), ln) from None
        kind, cls = _parse_label(parts[5], ln)
        rows.setdefault(sid, []).append((iid, r, c, kind, cls, feats, ln))

    if sorted(rows) != list(range(n_slides)):
        raise DatasetParseError(f"expected slide ids 0..{n_slides - 1}, found {len(rows)} slides")
    slides = []
    for sid in range(n_slides):
        rs = rows[sid]
        for expect, row in enumerate(rs):
            if row[0] != expect:
                raise DatasetParseError(f"slide {sid}: instance ids out of order", row[6])
        s = Slide(
            slide_id=sid,
            label=int(manifest["labels"][sid]),
            instances=np.array([r[5] for r in rs], dtype=np.float64).reshape(len(rs), D),
            instance_kind=np.array([r[3] for r in rs], dtype=np.int64),
            instance_class=np.array([r[4] for r in rs], dtype=np.int64),
            grid_coords=np.array([(r[1], r[2]) for r in rs], dtype=np.int64).reshape(len(rs), 2),
            bags=[np.array(b, dtype=np.int64) for b in manifest["bags"][sid]],
        )
        slides.append(s)
    splits = {k: [int(i) for i in v] for k, v in manifest["splits"].items()}
    return SlideDataset(config, slides, splits)


def load(path) -> SlideDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except json.JSONDecodeError as e:
        raise DatasetParseError(f"manifest: {e.msg} at offset {e.pos}") from None
    return parse((path / CSV_NAME).read_text(), manifest)
