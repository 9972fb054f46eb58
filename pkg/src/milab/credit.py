"""Per-instance credit assignment and the exact Shapley oracle.

For an additive model the value of a coalition S of instances is

    V_S = sum_{j in S} s_j + sum_{j not in S} E[s]

where s_j is the per-instance contribution (attention frozen from the full
bag) and E[s] the mean per-instance contribution over a background set.
Every marginal V_{S+i} - V_S then equals s_i - E[s], so the Shapley value
is the contribution shifted by a per-class constant. ``shapley_enumerate``
checks that by brute force over all 2^N coalitions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import MilModel, UnsupportedVariantError, forward

MAX_ENUMERATION_INSTANCES = 12
DEFAULT_BACKGROUND_SIZE = 256


class UnsupportedCompositionError(UnsupportedVariantError):
    pass


class InstanceCountError(ValueError):
    pass


@dataclass
class ContributionMap:
    values: np.ndarray  # C x N raw logit contributions
    logits: np.ndarray  # forward-pass logits, length C
    class_names: list[str]
    instance_ids: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class HeatmapScores:
    values: np.ndarray  # C x N in [0, 1]; > 0.5 excitatory, < 0.5 inhibitory
    class_names: list[str]
    instance_ids: np.ndarray


def _require_additive(model: MilModel) -> None:
    if model.config.composition != "additive":
        raise UnsupportedCompositionError(
            "per-instance contributions need an additive model; "
            "rebuild with composition='additive' to get a contribution map")


def extract_contributions(model: MilModel, bag, alpha=None) -> ContributionMap:
    """The C x N pre-sum terms psi_p(alpha_i f(x_i)) of an additive model."""
    _require_additive(model)
    with ad.no_grad():
        out = forward(model, bag, alpha)
    values = out.contributions.data.copy()
    n = values.shape[1]
    ids = getattr(bag, "instance_ids", None)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    names = [f"class_{c}" for c in range(model.config.num_classes)]
    return ContributionMap(values, out.logits.data.copy(), names, ids)


def bound_scores(raw: ContributionMap) -> HeatmapScores:
    """Elementwise sigmoid of the raw contributions."""
    return HeatmapScores(ad._sigmoid(raw.values), list(raw.class_names), raw.instance_ids)


def attention_baseline(model: MilModel, bag) -> np.ndarray:
    """Attention weights alpha_i, one per instance and without a class axis."""
    if model.config.pooling == "mean":
        raise UnsupportedVariantError("mean pooling has no attention module to read scores from")
    with ad.no_grad():
        return forward(model, bag).attention.data.copy()


# ---------------------------------------------------------------------------
# Shapley


@dataclass
class ShapleyReport:
    phi: np.ndarray  # C x N
    mode: str
    background_mean: np.ndarray | None  # length C
    background_size: int
    max_discrepancy: float | None
    value_full: np.ndarray  # V_F
    value_empty: np.ndarray  # V_empty
    closed_form: np.ndarray | None = None

    @property
    def efficiency_gap(self) -> float:
        return float(np.max(np.abs(self.phi.sum(axis=1) - (self.value_full - self.value_empty))))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "phi": {f"class_{c}": self.phi[c].tolist() for c in range(self.phi.shape[0])},
            "background_size": self.background_size,
            "background_mean": None if self.background_mean is None else self.background_mean.tolist(),
            "max_discrepancy": self.max_discrepancy,
            "efficiency_gap": self.efficiency_gap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def shapley_weights(n: int) -> np.ndarray:
    """w[k] = k! (n - k - 1)! / n! for coalitions of size k not containing i."""
    return np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n) for k in range(n)])


def enumerate_shapley(values: np.ndarray, n: int) -> np.ndarray:
    """Exact Shapley values from a table of coalition values.

    ``values[mask]`` is V_S (a length-C vector) for the coalition whose
    members are the set bits of ``mask``. Returns C x n.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != 1 << n:
        raise ValueError(f"need {1 << n} coalition values for n={n}, got {values.shape[0]}")
    masks = np.arange(1 << n)
    sizes = np.array([bin(m).count("1") for m in masks])
    w = shapley_weights(n)
    phi = np.zeros((values.shape[1], n))
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        marg = values[without | bit] - values[without]
        phi[:, i] = (w[sizes[without]][:, None] * marg).sum(axis=0)
    return phi


def _as_bags(background) -> list:
    # a Bag, a single N x D array, or an iterable of either
    if hasattr(background, "instances") or (isinstance(background, np.ndarray) and background.ndim == 2):
        return [background]
    return list(background)


def background_scores(model: MilModel, background, size: int | None = DEFAULT_BACKGROUND_SIZE) -> np.ndarray:
    """Per-instance contributions (M x C) of background bags, each scored in its own context."""
    rows = [extract_contributions(model, b).values.T for b in _as_bags(background)]
    scores = np.concatenate(rows, axis=0)
    return scores if size is None else scores[:size]


def shapley_fixed_context(contribs: ContributionMap, background) -> ShapleyReport:
    """Closed form phi_i = s_i - mean(background scores), per class."""
    bg = np.asarray(background, dtype=np.float64)
    if bg.size == 0:
        raise ValueError("background must contain at least one per-instance score")
    if bg.ndim == 1:
        bg = bg[:, None]
    s = contribs.values
    if bg.shape[1] != s.shape[0]:
        raise ValueError(f"background has {bg.shape[1]} classes, contributions have {s.shape[0]}")
    mean = bg.mean(axis=0)
    n = s.shape[1]
    phi = s - mean[:, None]
    return ShapleyReport(phi=phi, mode="fixed-context", background_mean=mean, background_size=bg.shape[0],
                         max_discrepancy=0.0, value_full=s.sum(axis=1), value_empty=n * mean,
                         closed_form=phi.copy())


def coalition_masks(n: int) -> np.ndarray:
    """2^n x n boolean membership matrix; row ``mask`` has the set bits of ``mask``."""
    masks = np.arange(1 << n)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def fixed_context_values(scores: np.ndarray, background_mean: np.ndarray) -> np.ndarray:
    """Coalition value table V[mask] = sum_{j in S} s_j + |S-bar| * E[s]; scores is C x N."""
    n = scores.shape[1]
    member = coalition_masks(n).astype(np.float64)
    return member @ scores.T + (n - member.sum(axis=1))[:, None] * background_mean[None, :]


def _background_instances(background) -> np.ndarray:
    return np.concatenate([np.asarray(getattr(b, "instances", b), dtype=np.float64)
                           for b in _as_bags(background)], axis=0)


def recomputed_values(model: MilModel, instances: np.ndarray, pool: np.ndarray, num_draws: int,
                      seed) -> np.ndarray:
    """V[mask]: mean logits over draws of the model run on S plus |S-bar| background instances.

    A coalition missing k instances is completed with the first k instances
    of each draw, so V depends only on the multiset of present instances and
    identical instances are exchangeable. V[0] is the model on background only.
    """
    n = instances.shape[0]
    rng = np.random.default_rng(seed)
    draws = [pool[rng.choice(pool.shape[0], size=n, replace=pool.shape[0] < n)] for _ in range(num_draws)]
    V = np.zeros((1 << n, model.config.num_classes))
    member = coalition_masks(n)
    with ad.no_grad():
        for mask in range(1 << n):
            keep = member[mask]
            k = n - int(keep.sum())
            acc = np.zeros(model.config.num_classes)
            for d in draws:
                acc += forward(model, np.concatenate([instances[keep], d[:k]], axis=0)).logits.data
            V[mask] = acc / num_draws
    return V


def shapley_enumerate(model: MilModel, bag, background, mode: str = "fixed-context",
                      background_size: int = DEFAULT_BACKGROUND_SIZE, num_draws: int = 8,
                      seed=0) -> ShapleyReport:
    """Exact Shapley values over all 2^N coalitions of the bag's instances."""
    if mode not in ("fixed-context", "recomputed"):
        raise ValueError(f"mode must be 'fixed-context' or 'recomputed', got {mode!r}")
    x = np.asarray(getattr(bag, "instances", bag), dtype=np.float64)
    n = x.shape[0]
    if n > MAX_ENUMERATION_INSTANCES:
        raise InstanceCountError(
            f"exact enumeration is capped at {MAX_ENUMERATION_INSTANCES} instances, bag has {n}; "
            "use a smaller sub-bag")
    if n < 1:
        raise InstanceCountError("bag is empty")
    additive = model.config.composition == "additive"
    if mode == "fixed-context":
        _require_additive(model)

    closed, mean, bg_size = None, None, 0
    if additive:
        bg = background_scores(model, background, background_size)
        if bg.shape[0] == 0:
            raise ValueError("background must contain at least one instance")
        mean, bg_size = bg.mean(axis=0), bg.shape[0]
        s = extract_contributions(model, x).values
        closed = s - mean[:, None]

    if mode == "fixed-context":
        V = fixed_context_values(s, mean)
    else:
        pool = _background_instances(background)
        if background_size:
            pool = pool[:background_size]
        bg_size = pool.shape[0]
        V = recomputed_values(model, x, pool, num_draws, seed)

    phi = enumerate_shapley(V, n)
    disc = None if closed is None else float(np.max(np.abs(phi - closed)))
    return ShapleyReport(phi=phi, mode=mode, background_mean=mean, background_size=bg_size,
                         max_discrepancy=disc, value_full=V[-1], value_empty=V[0], closed_form=closed)
