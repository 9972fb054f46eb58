"""Slide inference, classification metrics and heatmap-quality evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .credit import attention_baseline, bound_scores, extract_contributions
from .model import MilModel, forward
from .synthdata import MIMIC, Bag, Slide, SlideDataset, sample_bags

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# slide inference


def majority_vote(votes, winning_logits=None) -> tuple[int, float]:
    """Mode of per-bag predictions and its vote share.

    Ties go to the class with the largest mean winning-class logit among
    the bags that voted for it, then to the lowest class index.
    """
    votes = [int(v) for v in votes]
    if not votes:
        raise ValueError("no votes")
    counts = Counter(votes)
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) > 1 and winning_logits is not None:
        wl = np.asarray(winning_logits, dtype=np.float64)
        means = {c: float(np.mean([wl[i] for i, v in enumerate(votes) if v == c])) for c in tied}
        best = max(means.values())
        tied = [c for c in tied if means[c] == best]
    return tied[0], top / len(votes)


def infer_slide(model: MilModel, slide: Slide, bag_size: int, num_bags: int, seed,
                return_votes: bool = False):
    """Predict a slide label by majority vote over ``num_bags`` random bags."""
    if num_bags < 1:
        raise ValueError("num_bags must be >= 1")
    bags = sample_bags(slide, min(bag_size, len(slide)), num_bags, seed, require_signal=False)
    votes, win = [], []
    with ad.no_grad():
        for b in bags:
            logits = forward(model, b).logits.data
            k = int(np.argmax(logits))
            votes.append(k)
            win.append(float(logits[k]))
    label, prob = majority_vote(votes, win)
    if return_votes:
        return label, prob, votes
    return label, prob


def vote_shares(votes, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(votes, dtype=np.int64), minlength=num_classes)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# metrics


def binary_auroc(scores, labels) -> float:
    """Rank-based AUROC; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auroc_macro(scores, labels) -> float:
    """Macro average of one-vs-rest AUROC over classes.

    ``scores`` is slides x classes; classes without both positives and
    negatives are skipped with a warning.
    """
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if S.ndim != 2 or S.shape[0] != y.shape[0]:
        raise ValueError(f"scores must be slides x classes matching labels, got {S.shape} vs {y.shape}")
    vals = []
    for c in range(S.shape[1]):
        pos = y == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} excluded from macro AUROC: needs positives and negatives", stacklevel=2)
            continue
        vals.append(binary_auroc(S[:, c], pos))
    if not vals:
        raise UndefinedMetricError("macro AUROC undefined: every class lacks positives or negatives")
    return float(np.mean(vals))


@dataclass
class PRCurve:
    thresholds: np.ndarray  # descending
    precision: np.ndarray
    recall: np.ndarray
    auprc: float
    best_f1: float
    best_threshold: float

    def rows(self):
        return zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist())


def patch_pr_curve(scores, truth) -> PRCurve:
    """Precision/recall at every distinct score threshold (predict positive when score >= t).

    AUPRC is the right-continuous step integral sum_k (R_k - R_{k-1}) P_k.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR curve undefined without positive instances")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of each distinct threshold
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    tp, fp, thr = tp[last].astype(np.float64), fp[last].astype(np.float64), s_sorted[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    k = int(np.argmax(f1))
    return PRCurve(thr, precision, recall, auprc, float(f1[k]), float(thr[k]))


# ---------------------------------------------------------------------------
# heatmap extraction


def additive_patch_scores(model: MilModel, bag: Bag, cls: int | None = None) -> np.ndarray:
    """Bounded contribution scores for ``cls`` (default: predicted class)."""
    cm = extract_contributions(model, bag)
    c = int(np.argmax(cm.logits)) if cls is None else cls
    return bound_scores(cm).values[c]


def attention_patch_scores(model: MilModel, bag: Bag) -> np.ndarray:
    """Attention weights min-max normalised to [0, 1] within the bag."""
    a = attention_baseline(model, bag)
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)


def top_fraction_median(values, fraction: float = 0.1) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    k = max(1, math.ceil(fraction * len(v)))
    return float(np.median(v[:k]))


def linearity_report(model: MilModel, bags) -> dict:
    """Per bag and class: (sum of contributions, logit) and (median top-10% alpha, logit)."""
    bags = list(bags)
    if len(bags) < 2:
        raise ValueError("linearity_report needs at least 2 bags")
    cfg = model.config
    additive, attention = [], []
    with ad.no_grad():
        for b in bags:
            out = forward(model, b)
            logits = out.logits.data
            top = top_fraction_median(out.attention.data) if cfg.pooling != "mean" else None
            cm = out.contribution_values
            for c in range(cfg.num_classes):
                if cm is not None:
                    additive.append({"slide_id": int(b.slide_id), "bag_label": int(b.bag_label), "class": c,
                                     "contribution_sum": float(np.sum(cm[c])), "logit": float(logits[c])})
                if top is not None:
                    attention.append({"slide_id": int(b.slide_id), "bag_label": int(b.bag_label), "class": c,
                                      "top10_median_attention": top, "logit": float(logits[c])})
    dev = max((abs(r["contribution_sum"] - r["logit"]) for r in additive), default=None)
    return {"additive": additive, "attention": attention, "additive_max_deviation": dev}


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    split: str
    num_slides: int
    accuracy: float
    auroc: float | None
    pr: dict = field(default_factory=dict)  # method -> PRCurve
    linearity: dict = field(default_factory=dict)
    mimic: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def auprc(self) -> dict[str, float]:
        return {k: v.auprc for k, v in self.pr.items()}

    @property
    def best_f1(self) -> dict[str, float]:
        return {k: v.best_f1 for k, v in self.pr.items()}

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "num_slides": self.num_slides,
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "best_f1": self.best_f1,
            "linearity": {"additive_max_deviation": self.linearity.get("additive_max_deviation"),
                          "num_additive_pairs": len(self.linearity.get("additive", [])),
                          "num_attention_pairs": len(self.linearity.get("attention", []))},
            "mimic": self.mimic,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def pr_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "threshold", "precision", "recall"])
        for method, curve in sorted(self.pr.items()):
            for t, p, r in curve.rows():
                w.writerow([method, repr(t), repr(p), repr(r)])
        return buf.getvalue()

    def linearity_csv(self, kind: str) -> str:
        rows = self.linearity.get(kind, [])
        buf = io.StringIO()
        cols = (["slide_id", "bag_label", "class", "contribution_sum", "logit"] if kind == "additive"
                else ["slide_id", "bag_label", "class", "top10_median_attention", "logit"])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return buf.getvalue()


REPORT_SCHEMA = {
    "type": "object",
    "required": ["split", "num_slides", "accuracy", "auroc", "auprc", "best_f1", "linearity", "mimic", "meta"],
    "properties": {
        "split": {"type": "string"},
        "num_slides": {"type": "integer", "minimum": 0},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "auroc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "auprc": {"type": "object", "additionalProperties": {"type": "number"}},
        "best_f1": {"type": "object", "additionalProperties": {"type": "number"}},
        "linearity": {
            "type": "object",
            "required": ["additive_max_deviation", "num_additive_pairs", "num_attention_pairs"],
        },
        "mimic": {"type": ["object", "null"]},
        "meta": {"type": "object"},
    },
}


def mimic_analysis(model: MilModel, slides) -> dict | None:
    """Per mimic-bearing slide, the mean raw contribution of its mimics toward the mimicked class."""
    if model.config.composition != "additive":
        return None
    per_slide = []
    with ad.no_grad():
        for s in slides:
            mask = s.instance_kind == MIMIC
            if not mask.any():
                continue
            cls = int(s.instance_class[mask][0])
            cm = extract_contributions(model, s.bag())
            per_slide.append({"slide_id": s.slide_id, "mimicked_class": cls,
                              "mean_contribution": float(cm.values[cls, mask].mean())})
    if not per_slide:
        return None
    neg = sum(r["mean_contribution"] < 0 for r in per_slide)
    return {"slides": per_slide, "num_slides": len(per_slide), "fraction_negative": neg / len(per_slide)}


def evaluate(model: MilModel, dataset: SlideDataset, split: str = "test", bag_size: int | None = None,
             num_bags: int = 5, seed: int = 0) -> EvalReport:
    """Slide accuracy, macro AUROC, patch-level PR for each available heatmap, linearity tables."""
    slides = dataset.split_slides(split)
    if not slides:
        raise ValueError(f"split {split!r} is empty")
    cfg = model.config
    bag_size = bag_size or dataset.config.bag_size
    preds, shares = [], []
    for s in slides:
        label, _, votes = infer_slide(model, s, bag_size, num_bags, seed=[seed, s.slide_id], return_votes=True)
        preds.append(label)
        shares.append(vote_shares(votes, cfg.num_classes))
    labels = np.array([s.label for s in slides])
    acc = float(np.mean(np.array(preds) == labels))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            auroc = auroc_macro(np.array(shares), labels)
    except UndefinedMetricError:
        auroc = None

    # heatmaps use the whole slide as one bag; truth = signal of the slide label
    whole = [s.bag() for s in slides]
    truth = np.concatenate([b.signal_mask() for b in whole])
    pr = {}
    with ad.no_grad():
        if cfg.composition == "additive":
            pr["additive"] = patch_pr_curve(np.concatenate([additive_patch_scores(model, b) for b in whole]), truth)
        if cfg.pooling != "mean":
            pr["attention"] = patch_pr_curve(np.concatenate([attention_patch_scores(model, b) for b in whole]),
                                             truth)
    lin = linearity_report(model, whole) if len(whole) >= 2 else {}
    return EvalReport(split=split, num_slides=len(slides), accuracy=acc, auroc=auroc, pr=pr, linearity=lin,
                      mimic=mimic_analysis(model, slides))
