import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from milab.model import MilConfig, MilModel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_model(rng, pooling=None, composition=None, max_dim=16, num_classes=None, seed=None) -> MilModel:
    cfg = MilConfig(
        input_dim=int(rng.integers(1, max_dim + 1)),
        feature_dim=int(rng.integers(1, max_dim + 1)),
        featurizer_hidden=int(rng.integers(1, max_dim + 1)),
        attention_hidden=int(rng.integers(1, max_dim + 1)),
        predictor_hidden=int(rng.integers(1, max_dim + 1)),
        num_classes=num_classes or int(rng.integers(2, 5)),
        pooling=pooling or str(rng.choice(["mean", "attention", "self-attention"])),
        composition=composition or str(rng.choice(["joint", "additive"])),
        self_attention_heads=int(rng.integers(1, 3)),
        seed=int(rng.integers(2**31)) if seed is None else seed,
    )
    return MilModel(cfg)


def random_bag(rng, model: MilModel, n: int) -> np.ndarray:
    return rng.normal(0.0, 1.5, size=(n, model.config.input_dim))


def run_cli(*args, cwd=None) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "milab", *args], cwd=cwd, capture_output=True, text=True)


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# trained artifacts shared by the slow tests


@pytest.fixture(scope="session")
def default_dataset():
    from milab.synthdata import GenConfig, generate
    return generate(GenConfig())


@pytest.fixture(scope="session")
def trained_default(default_dataset):
    """Joint and additive attention-MIL models trained for 20 epochs on the default dataset."""
    from milab.training import TrainConfig, train
    out = {}
    for comp in ("joint", "additive"):
        model, history = train(MilModel(MilConfig(composition=comp)), default_dataset, TrainConfig(epochs=20))
        out[comp] = (model, history)
    return out


@pytest.fixture(scope="session")
def mimic_dataset():
    from milab.synthdata import GenConfig, generate
    return generate(GenConfig(mimic_fraction=0.1))


@pytest.fixture(scope="session")
def trained_mimic(mimic_dataset):
    from milab.training import TrainConfig, train
    model, history = train(MilModel(MilConfig(composition="additive")), mimic_dataset,
                           TrainConfig(epochs=80, patience=10))
    return model, history


def run_pipeline(root: Path, seed: int = 7, epochs: int = 20) -> dict[str, Path]:
    """gen -> train -> eval -> explain through the CLI; returns the output dirs."""
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "gen.json", {"generator": {}})
    write_json(root / "train.json", {"dataset": "data", "model": {"composition": "additive"},
                                     "train": {"epochs": epochs}})
    write_json(root / "eval.json", {"dataset": "data", "checkpoint": "run/checkpoint.milab"})
    write_json(root / "explain.json", {"dataset": "data", "checkpoint": "run/checkpoint.milab", "slide_id": 0})
    steps = [("gen", "gen.json", "data"), ("train", "train.json", "run"), ("eval", "eval.json", "eval"),
             ("explain", "explain.json", "explain")]
    for cmd, cfg, out in steps:
        r = run_cli(cmd, "--config", str(root / cfg), "--out", str(root / out), "--seed", str(seed))
        assert r.returncode == 0, (cmd, r.stderr)
    return {out: root / out for _, _, out in steps}


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    return run_pipeline(base / "a"), run_pipeline(base / "b")
