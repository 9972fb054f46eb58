"""``milab`` command line: gen | train | eval | explain | verify-shapley.

Each command reads a JSON config (unknown keys are rejected), writes its
outputs into a temporary directory and moves them into place only once
everything succeeded.

Exit codes: 0 success, 1 internal error (including a failed Shapley
verification), 2 config or I/O error, 3 unsupported model composition.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import synthdata as sd
from .credit import (MAX_ENUMERATION_INSTANCES, UnsupportedCompositionError, attention_baseline, bound_scores,
                     extract_contributions, shapley_enumerate)
from .evaluation import evaluate
from .heatmap import render_grid, write_pgm
from .model import CheckpointError, MilConfig, MilModel, UnsupportedVariantError, checkpoint_bytes, load_model
from .training import DivergenceError, TrainConfig, train

log = logging.getLogger("milab")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_COMPOSITION = 0, 1, 2, 3
SHAPLEY_TOLERANCE = 1e-8


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def dataset_digest(path: Path) -> str:
    return file_digest(path / sd.CSV_NAME, path / sd.MANIFEST_NAME)


def _check_keys(cfg: dict, allowed: set[str], required: set[str] = frozenset(), where: str = "config") -> None:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")
    missing = sorted(required - set(cfg))
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r} in {where}")


def load_config(path: str) -> tuple[dict, Path]:
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e.msg} (line {e.lineno})") from None
    return cfg, p.resolve().parent


def _path(cfg: dict, key: str, base: Path) -> Path:
    v = cfg[key]
    if not isinstance(v, str):
        raise ConfigError(f"{key!r} must be a path string")
    p = Path(v)
    return p if p.is_absolute() else base / p


def _existing_dataset(path: Path) -> Path:
    if not (path / sd.CSV_NAME).is_file() or not (path / sd.MANIFEST_NAME).is_file():
        raise ConfigError(f"dataset directory {path} lacks {sd.CSV_NAME} or {sd.MANIFEST_NAME}")
    return path


def _existing_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} {path} does not exist")
    return path


@contextlib.contextmanager
def staged_output(out: Path):
    """Yield a scratch directory; on success move its files into ``out``."""
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
        tmp = Path(tempfile.mkdtemp(prefix=".milab-", dir=out))
    except OSError as e:
        raise ConfigError(f"cannot write to output directory {out}: {e}") from None
    try:
        yield tmp
        for f in sorted(tmp.iterdir()):
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _sub_config(cfg: dict, key: str, cls, seed: int | None):
    d = dict(cfg.get(key, {}))
    if seed is not None:
        d["seed"] = seed
    try:
        return cls.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        msg = e.args[0] if e.args else str(e)
        raise ConfigError(f"invalid {key} config: {msg}") from None


def _load_checkpoint(path: Path) -> tuple[MilModel, dict]:
    try:
        return load_model(path)
    except (CheckpointError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"incompatible checkpoint {path}: {e}") from None


def _load_dataset(path: Path) -> sd.SlideDataset:
    try:
        return sd.load(path)
    except (sd.DatasetParseError, sd.ConfigError, KeyError) as e:
        raise ConfigError(f"cannot load dataset {path}: {e}") from None


def _check_compatible(model: MilModel, ds: sd.SlideDataset) -> None:
    if model.config.input_dim != ds.config.input_dim:
        raise ConfigError(f"model input_dim={model.config.input_dim} but dataset has "
                          f"input_dim={ds.config.input_dim}")
    if model.config.num_classes != ds.config.num_classes:
        raise ConfigError(f"model num_classes={model.config.num_classes} but dataset has "
                          f"num_classes={ds.config.num_classes}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, base: Path, out: Path, seed: int | None) -> int:
    _check_keys(cfg, {"generator", "out"})
    gen = _sub_config(cfg, "generator", sd.GenConfig, seed)
    ds = sd.generate(gen)
    h = canonical_hash({"command": "gen", "generator": gen.to_dict()})
    with staged_output(out) as tmp:
        sd.save(ds, tmp)
        manifest = json.loads((tmp / sd.MANIFEST_NAME).read_text())
        manifest["config_hash"] = h
        _write_json(tmp / sd.MANIFEST_NAME, manifest)
    print(f"slides={len(ds.slides)} bags={ds.num_bags} instances={ds.num_instances} "
          f"train={len(ds.splits['train'])} val={len(ds.splits['val'])} test={len(ds.splits['test'])} "
          f"config_hash={h[:12]}")
    return EXIT_OK


def cmd_train(cfg: dict, base: Path, out: Path, seed: int | None) -> int:
    _check_keys(cfg, {"dataset", "model", "train", "out"}, {"dataset"})
    data_path = _existing_dataset(_path(cfg, "dataset", base))
    mcfg = _sub_config(cfg, "model", MilConfig, None)
    tcfg = _sub_config(cfg, "train", TrainConfig, seed)
    ds = _load_dataset(data_path)
    model = MilModel(mcfg)
    _check_compatible(model, ds)
    h = canonical_hash({"command": "train", "model": mcfg.to_dict(), "train": tcfg.to_dict(),
                        "dataset": dataset_digest(data_path)})
    try:
        trained, history = train(model, ds, tcfg)
    except DivergenceError as e:
        raise RuntimeError(f"training diverged: {e}") from e
    history = {**history, "config_hash": h, "model": mcfg.to_dict(), "train": tcfg.to_dict()}
    with staged_output(out) as tmp:
        (tmp / "checkpoint.milab").write_bytes(checkpoint_bytes(trained, {"config_hash": h}))
        _write_json(tmp / "history.json", history)
    last = history["epochs"][-1] if history["epochs"] else None
    print(f"epochs={len(history['epochs'])} best_epoch={history['best_epoch']} "
          f"val_accuracy={last['val_accuracy'] if last else 'n/a'} config_hash={h[:12]}")
    return EXIT_OK


def cmd_eval(cfg: dict, base: Path, out: Path, seed: int | None) -> int:
    _check_keys(cfg, {"dataset", "checkpoint", "split", "bag_size", "num_bags", "seed", "out"},
                {"dataset", "checkpoint"})
    data_path = _existing_dataset(_path(cfg, "dataset", base))
    ck_path = _existing_file(_path(cfg, "checkpoint", base), "checkpoint")
    split = cfg.get("split", "test")
    num_bags = int(cfg.get("num_bags", 5))
    bag_size = cfg.get("bag_size")
    eval_seed = seed if seed is not None else int(cfg.get("seed", 0))
    if split not in ("train", "val", "test"):
        raise ConfigError(f"split must be train, val or test, got {split!r}")
    if num_bags < 1:
        raise ConfigError("num_bags must be >= 1")
    model, _ = _load_checkpoint(ck_path)
    ds = _load_dataset(data_path)
    _check_compatible(model, ds)
    h = canonical_hash({"command": "eval", "split": split, "num_bags": num_bags, "bag_size": bag_size,
                        "seed": eval_seed, "dataset": dataset_digest(data_path), "checkpoint": file_digest(ck_path)})
    report = evaluate(model, ds, split, bag_size=bag_size, num_bags=num_bags, seed=eval_seed)
    report.meta = {"config_hash": h, "composition": model.config.composition, "pooling": model.config.pooling}
    with staged_output(out) as tmp:
        (tmp / "report.json").write_text(report.to_json())
        (tmp / "pr_curves.csv").write_text(report.pr_csv())
        if report.linearity.get("additive"):
            (tmp / "linearity_additive.csv").write_text(report.linearity_csv("additive"))
        if report.linearity.get("attention"):
            (tmp / "linearity_attention.csv").write_text(report.linearity_csv("attention"))
    auprc = " ".join(f"auprc[{k}]={v:.4f}" for k, v in sorted(report.auprc.items()))
    print(f"accuracy={report.accuracy:.4f} auroc={report.auroc} {auprc} config_hash={h[:12]}")
    return EXIT_OK


def cmd_explain(cfg: dict, base: Path, out: Path, seed: int | None) -> int:
    _check_keys(cfg, {"dataset", "checkpoint", "slide_id", "out"}, {"dataset", "checkpoint", "slide_id"})
    data_path = _existing_dataset(_path(cfg, "dataset", base))
    ck_path = _existing_file(_path(cfg, "checkpoint", base), "checkpoint")
    model, _ = _load_checkpoint(ck_path)
    ds = _load_dataset(data_path)
    _check_compatible(model, ds)
    sid = cfg["slide_id"]
    if not isinstance(sid, int) or not 0 <= sid < len(ds.slides):
        raise ConfigError(f"unknown slide_id {sid!r}: dataset has slides 0..{len(ds.slides) - 1}")
    h = canonical_hash({"command": "explain", "slide_id": sid, "dataset": dataset_digest(data_path),
                        "checkpoint": file_digest(ck_path)})
    slide = ds.slide(sid)
    bag = slide.bag()
    cm = extract_contributions(model, bag)
    scores = bound_scores(cm)
    coords = slide.grid_coords
    shape = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1)
    predicted = int(np.argmax(cm.logits))
    with staged_output(out) as tmp:
        for c in range(model.config.num_classes):
            img = render_grid(scores.values[c], coords, shape)
            write_pgm(tmp / f"slide{sid}_class{c}.pgm", img, f"milab slide {sid} class {c} config {h[:16]}")
        if model.config.pooling != "mean":
            a = attention_baseline(model, bag)
            span = a.max() - a.min()
            norm = np.zeros_like(a) if span == 0 else (a - a.min()) / span
            write_pgm(tmp / f"slide{sid}_attention.pgm", render_grid(norm, coords, shape, fill=0),
                      f"milab slide {sid} attention config {h[:16]}")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        C = model.config.num_classes
        w.writerow(["instance_id", "row", "col", "instance_label"] + [f"raw_class_{c}" for c in range(C)])
        for i in range(len(bag)):
            label = sd._label_str(bag.instance_kind[i], bag.instance_class[i])
            w.writerow([i, coords[i, 0], coords[i, 1], label] + [repr(float(v)) for v in cm.values[:, i]])
        (tmp / f"slide{sid}_contributions.csv").write_text(buf.getvalue())
        _write_json(tmp / f"slide{sid}_explain.json", {
            "slide_id": sid, "label": slide.label, "predicted": predicted, "logits": cm.logits.tolist(),
            "grid_shape": list(shape), "config_hash": h})
    print(f"slide={sid} label={slide.label} predicted={predicted} maps={model.config.num_classes} "
          f"config_hash={h[:12]}")
    return EXIT_OK


def cmd_verify_shapley(cfg: dict, base: Path, out: Path, seed: int | None) -> int:
    _check_keys(cfg, {"dataset", "checkpoint", "n_max", "background_size", "seed", "out"},
                {"dataset", "checkpoint"})
    n_max = cfg.get("n_max", 8)
    if not isinstance(n_max, int) or not 1 <= n_max <= MAX_ENUMERATION_INSTANCES:
        raise ConfigError(f"n_max must be an integer in 1..{MAX_ENUMERATION_INSTANCES} "
                          f"(exact enumeration over 2^n coalitions), got {n_max!r}")
    data_path = _existing_dataset(_path(cfg, "dataset", base))
    ck_path = _existing_file(_path(cfg, "checkpoint", base), "checkpoint")
    bg_size = int(cfg.get("background_size", 256))
    vseed = seed if seed is not None else int(cfg.get("seed", 0))
    model, _ = _load_checkpoint(ck_path)
    if model.config.composition != "additive":
        raise UnsupportedCompositionError("verify-shapley needs an additive checkpoint")
    ds = _load_dataset(data_path)
    _check_compatible(model, ds)
    h = canonical_hash({"command": "verify-shapley", "n_max": n_max, "background_size": bg_size, "seed": vseed,
                        "dataset": dataset_digest(data_path), "checkpoint": file_digest(ck_path)})
    rng = np.random.default_rng(vseed)
    pool_ids = ds.splits.get("test") or [s.slide_id for s in ds.slides]
    bg_ids = ds.splits.get("train") or [s.slide_id for s in ds.slides]
    background, count = [], 0
    for i in bg_ids:
        if count >= bg_size:
            break
        background.append(ds.slide(i).bag())
        count += len(ds.slide(i))
    cases = []
    for n in range(1, n_max + 1):
        slide = ds.slide(int(rng.choice(pool_ids)))
        idx = np.sort(rng.choice(len(slide), size=min(n, len(slide)), replace=False))
        rep = shapley_enumerate(model, slide.bag(idx), background, "fixed-context", background_size=bg_size)
        cases.append({"n": int(len(idx)), "slide_id": slide.slide_id, "instance_ids": idx.tolist(),
                      "max_discrepancy": rep.max_discrepancy, "efficiency_gap": rep.efficiency_gap})
    worst = max(c["max_discrepancy"] for c in cases)
    passed = worst <= SHAPLEY_TOLERANCE
    result = {"mode": "fixed-context", "n_max": n_max, "background_size": bg_size, "tolerance": SHAPLEY_TOLERANCE,
              "max_discrepancy": worst, "passed": passed, "cases": cases, "config_hash": h}
    with staged_output(out) as tmp:
        _write_json(tmp / "shapley_verification.json", result)
    print(f"n_max={n_max} max_discrepancy={worst:.3e} passed={passed} config_hash={h[:12]}")
    return EXIT_OK if passed else EXIT_INTERNAL


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "verify-shapley": cmd_verify_shapley,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="milab", description="Attention and additive MIL laboratory.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON config file")
    ap.add_argument("--out", help="output directory (overrides the config's 'out')")
    ap.add_argument("--seed", type=int, help="seed override")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, base = load_config(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.out:
            out = Path(args.out)
        elif "out" in cfg:
            out = _path(cfg, "out", base)
        else:
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
        return COMMANDS[args.command](cfg, base, out, args.seed)
    except ConfigError as e:
        print(f"milab {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UnsupportedVariantError as e:
        print(f"milab {args.command}: unsupported model: {e}", file=sys.stderr)
        return EXIT_COMPOSITION
    except CheckpointError as e:
        print(f"milab {args.command}: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"milab {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"milab {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
