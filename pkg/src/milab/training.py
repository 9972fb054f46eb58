"""Adam training loop over sampled bags."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .evaluation import infer_slide
from .model import MilModel, forward
from .synthdata import SlideDataset, sample_bags

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch, self.step, self.loss = epoch, step, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    bag_size: int = 32
    batch_size: int = 16
    epochs: int = 20
    bags_per_slide: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 5
    val_num_bags: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bag_size < 1 or self.epochs < 0 or self.bags_per_slide < 1:
            raise ValueError("bag_size and bags_per_slide must be >= 1, epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(t, m_new, v_new)


def batch_loss_and_grads(model: MilModel, bags) -> float:
    """Accumulate gradients of the mean cross-entropy over ``bags``; returns the loss."""
    total = 0.0
    scale = 1.0 / len(bags)
    for bag in bags:
        loss = ad.cross_entropy(forward(model, bag).logits, bag.bag_label)
        ad.scale(loss, scale).backward()
        total += loss.item() * scale
    return total


def epoch_bags(dataset: SlideDataset, config: TrainConfig, epoch: int) -> list:
    rng = np.random.default_rng([config.seed, epoch])
    bags = []
    for slide in dataset.split_slides("train"):
        size = min(config.bag_size, len(slide))
        bags += sample_bags(slide, size, config.bags_per_slide, int(rng.integers(2**63)))
    order = rng.permutation(len(bags))
    return [bags[i] for i in order]


def validate(model: MilModel, dataset: SlideDataset, config: TrainConfig) -> tuple[float, float]:
    """Slide-level majority-vote accuracy and mean bag cross-entropy on the val split."""
    slides = dataset.split_slides("val")
    if not slides:
        return float("nan"), float("nan")
    hits, losses = 0, []
    with ad.no_grad():
        for s in slides:
            seed = [config.seed, 0x76616C, s.slide_id]
            bags = sample_bags(s, min(config.bag_size, len(s)), config.val_num_bags, seed, require_signal=False)
            label, _ = infer_slide(model, s, min(config.bag_size, len(s)), config.val_num_bags, seed=seed)
            hits += int(label == s.label)
            losses += [ad.cross_entropy(forward(model, b).logits, s.label).item() for b in bags]
    return hits / len(slides), float(np.mean(losses))


def train(model: MilModel, dataset: SlideDataset, config: TrainConfig) -> tuple[MilModel, dict]:
    """Train a copy of ``model``; returns the best-validation model and history."""
    if model.config.input_dim != dataset.config.input_dim:
        raise ValueError(f"model input_dim {model.config.input_dim} != dataset dim {dataset.config.input_dim}")
    if model.config.num_classes != dataset.config.num_classes:
        raise ValueError(f"model num_classes {model.config.num_classes} != dataset classes "
                         f"{dataset.config.num_classes}")
    if not dataset.splits.get("train"):
        raise ValueError("dataset has no training slides")
    model = model.copy()
    state = AdamState()
    history = {"epochs": [], "best_epoch": None, "stopped_early": False}
    # ranked by val accuracy, ties broken by lower val loss
    best_key, best_params, stale = None, model.state_dict(), 0
    for epoch in range(config.epochs):
        bags = epoch_bags(dataset, config, epoch)
        losses = []
        for step, start in enumerate(range(0, len(bags), config.batch_size)):
            batch = bags[start:start + config.batch_size]
            model.zero_grad()
            try:
                loss = batch_loss_and_grads(model, batch)
            except ad.NumericError:
                loss = float("nan")
            if not math.isfinite(loss):
                raise DivergenceError(epoch, step, loss)
            params = {k: p.data for k, p in model.params.items()}
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
            new, state = adam_step(params, grads, state, config)
            for k, p in model.params.items():
                p.data = new[k]
            losses.append(loss)
        model.zero_grad()
        acc, val_loss = validate(model, dataset, config)
        history["epochs"].append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": acc,
                                  "val_loss": val_loss})
        log.info("epoch %d loss %.4f val_acc %.4f val_loss %.4f", epoch, np.mean(losses), acc, val_loss)
        key = (acc, -val_loss)
        if best_key is None or key > best_key:
            best_key, best_params, stale = key, model.state_dict(), 0
            history["best_epoch"] = epoch
        else:
            stale += 1
            if stale >= config.patience:
                history["stopped_early"] = True
                break
    return MilModel(model.config, best_params), history
