"""Evaluation metrics and feature probes.

This is the only module that reads latent instance labels
(``BagSample.instance_labels``): top-K recall, feature v-scores and the
fully supervised upper-bound encoder all live here.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .synthgen import Dataset

log = logging.getLogger(__name__)

# ----------------------------------------------------------------------------
# classification metrics


def auc_by_class(scores, labels, n_classes: int | None = None) -> tuple[dict[int, float], list[int]]:
    """One-vs-rest ROC-AUC per class by pair counting, ties worth 0.5.

    ``scores`` is ``n x C`` (or a length-n vector of positive-class scores for
    the binary case).  Returns ``(auc per evaluated class, excluded classes)``;
    a class is excluded when it has no positives or no negatives.  With two
    classes only class 1 is evaluated.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.ndim == 1:
        s = np.stack([-s, s], axis=1)
    if s.shape[0] != y.shape[0]:
        raise ValueError("scores and labels differ in length")
    c = n_classes or s.shape[1]
    classes = [1] if c == 2 else list(range(c))
    out, excluded = {}, []
    for k in classes:
        pos = np.sort(s[y == k, k])
        neg = np.sort(s[y != k, k])
        if pos.size == 0 or neg.size == 0:
            excluded.append(k)
            continue
        below = np.searchsorted(neg, pos, side="left")
        ties = np.searchsorted(neg, pos, side="right") - below
        wins = float(below.sum()) + 0.5 * float(ties.sum())
        out[k] = wins / (pos.size * neg.size)
    return out, excluded


def macro_auc(scores, labels, n_classes: int | None = None) -> float:
    per, excluded = auc_by_class(scores, labels, n_classes)
    if excluded:
        log.warning("macro_auc: classes %s have no positives or no negatives and were excluded", excluded)
    if not per:
        return float("nan")
    return float(np.mean([per[k] for k in sorted(per)]))


def per_class_prf(predictions, labels, n_classes: int | None = None):
    """Per-class (precision, recall, f1) lists and the classes with no predictions and no support."""
    p = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    c = n_classes or int(max(p.max(initial=0), y.max(initial=0)) + 1)
    prec, rec, f1, empty = [], [], [], []
    for k in range(c):
        tp = int(np.sum((p == k) & (y == k)))
        fp = int(np.sum((p == k) & (y != k)))
        fn = int(np.sum((p != k) & (y == k)))
        prec.append(tp / (tp + fp) if tp + fp else 0.0)
        rec.append(tp / (tp + fn) if tp + fn else 0.0)
        f1.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
        if tp + fp + fn == 0:
            empty.append(k)
    return prec, rec, f1, empty


def macro_f1(predictions, labels, n_classes: int | None = None) -> float:
    _, _, f1, empty = per_class_prf(predictions, labels, n_classes)
    if empty:
        log.warning("macro_f1: classes %s never predicted and absent; counted as F1 = 0", empty)
    return float(np.mean(f1))


# ----------------------------------------------------------------------------
# clustering


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def homogeneity_completeness_v(clusters, labels) -> tuple[float, float, float]:
    k = np.asarray(clusters)
    y = np.asarray(labels)
    if k.size == 0 or k.shape != y.shape:
        raise ValueError("need two equal-length, non-empty assignments")
    _, ki = np.unique(k, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    table = np.zeros((yi.max() + 1, ki.max() + 1))
    np.add.at(table, (yi, ki), 1)
    n = table.sum()
    h_y = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    nz = table > 0
    joint = table[nz] / n
    # H(Y|K) = -sum p(y,k) log p(y,k)/p(k)
    col = np.broadcast_to(table.sum(axis=0, keepdims=True), table.shape)[nz] / n
    row = np.broadcast_to(table.sum(axis=1, keepdims=True), table.shape)[nz] / n
    h_y_given_k = float(-(joint * np.log(joint / col)).sum())
    h_k_given_y = float(-(joint * np.log(joint / row)).sum())
    hom = 1.0 if h_y == 0 else 1.0 - h_y_given_k / h_y
    com = 1.0 if h_k == 0 else 1.0 - h_k_given_y / h_k
    v = 0.0 if hom + com == 0 else 2 * hom * com / (hom + com)
    return hom, com, v


def v_score(clusters, labels) -> float:
    return homogeneity_completeness_v(clusters, labels)[2]


def kmeans(x: np.ndarray, k: int, seed: int, iters: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns cluster assignments."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    centres = [x[rng.integers(n)]]
    d2 = ((x - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break  # all remaining points coincide with a centre
        centres.append(x[rng.choice(n, p=d2 / total)])
        d2 = np.minimum(d2, ((x - centres[-1]) ** 2).sum(axis=1))
    c = np.array(centres)
    assign = np.zeros(n, dtype=int)
    for _ in range(iters):
        dist = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        for j in range(c.shape[0]):
            members = x[assign == j]
            if members.size:
                c[j] = members.mean(axis=0)
    return assign


def feature_v_score(features, instance_labels, n_clusters: int | None = None, seed: int = 0) -> float:
    """v-score of a seeded k-means clustering of ``features`` against latent labels."""
    y = np.asarray(instance_labels)
    k = n_clusters or int(np.unique(y).size)
    if k < np.unique(y).size:
        raise ValueError("n_clusters must be at least the number of label classes")
    return v_score(kmeans(features, k, seed), y)


# ----------------------------------------------------------------------------
# top-K recall


def balanced_instance_sample(dataset, max_instances: int = 4000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Indices into the concatenated instances with up to ``max_instances / C`` per latent class.

    Returns ``(indices, labels)``.  Rare positive instances would otherwise be
    swamped by negatives and k-means would ignore them.
    """
    y = np.concatenate([b.instance_labels for b in dataset]).astype(int)
    classes = np.unique(y)
    per = max(1, max_instances // len(classes))
    rng = np.random.default_rng([seed, 0xB5])
    idx = np.concatenate([rng.choice(np.flatnonzero(y == c), size=min(per, int(np.sum(y == c))), replace=False)
                          for c in classes])
    idx.sort()
    return idx, y[idx]


def dataset_v_score(dataset, features: Sequence[np.ndarray], n_clusters: int | None = None,
                    max_instances: int = 4000, seed: int = 0) -> float:
    """``feature_v_score`` on a class-balanced instance sample of per-bag ``features``."""
    idx, y = balanced_instance_sample(dataset, max_instances, seed)
    return feature_v_score(np.concatenate(features)[idx], y, n_clusters, seed)


def topk_recall_from_probs(probs: Sequence[np.ndarray], instance_labels: Sequence[np.ndarray],
                           bag_labels: Sequence[int], k: int) -> float | None:
    hits, n_pos = 0, 0
    for p, lab, y in zip(probs, instance_labels, bag_labels):
        if y <= 0:
            continue
        n_pos += 1
        if np.any(np.asarray(lab)[nn.top_k_select(p, k)] > 0):
            hits += 1
    return hits / n_pos if n_pos else None


def gate_probabilities(dataset: Dataset, encoder: nn.EncoderModel, gate: nn.IBGate) -> list[np.ndarray]:
    out = []
    with ad.no_grad():
        for bag in dataset:
            out.append(nn.gate_probs(gate, nn.encode(encoder, bag.instances)).data)
    return out


def topk_recall(dataset: Dataset, encoder: nn.EncoderModel, gate: nn.IBGate, k: int,
                probs: Sequence[np.ndarray] | None = None) -> float | None:
    """Fraction of positive bags whose top-``k`` gate selection holds a positive instance."""
    if probs is None:
        probs = gate_probabilities(dataset, encoder, gate)
    return topk_recall_from_probs(probs, [b.instance_labels for b in dataset],
                                  [b.bag_label for b in dataset], k)


def distilled_recall(distilled, source: Dataset) -> float | None:
    """Top-K recall audited through the source indices a distilled dataset records."""
    by_id = {b.bag_id: b for b in source}
    hits, n_pos = 0, 0
    for d in distilled:
        if d.bag_label <= 0:
            continue
        n_pos += 1
        hits += bool(np.any(by_id[d.bag_id].instance_labels[d.source_indices] > 0))
    return hits / n_pos if n_pos else None


# ----------------------------------------------------------------------------
# reports


CSV_COLUMNS = (
    "run_id", "stage", "split", "head", "sweep", "sweep_value", "seed", "dataset_id", "corruption",
    "status", "n_samples", "macro_auc", "macro_f1", "v_score", "topk_recall", "topk_k",
    "excluded_classes", "per_class_precision", "per_class_recall", "per_class_f1",
)


@dataclass
class EvalReport:
    macro_f1: float
    macro_auc: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    n_samples: int
    v_score: float | None = None
    topk_recall: float | None = None
    topk_k: int | None = None
    excluded_classes: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self) -> dict[str, str]:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, float):
                return "nan" if np.isnan(x) else repr(x)
            return str(x)

        md = self.metadata
        values = {
            "run_id": md.get("run_id", ""), "stage": md.get("stage", ""), "split": md.get("split", ""),
            "head": md.get("head", ""), "sweep": md.get("sweep", ""),
            "sweep_value": md.get("sweep_value", ""), "seed": md.get("seed", ""),
            "dataset_id": md.get("dataset_id", ""), "corruption": md.get("corruption", ""),
            "status": md.get("status", "completed"), "n_samples": self.n_samples,
            "macro_auc": self.macro_auc, "macro_f1": self.macro_f1, "v_score": self.v_score,
            "topk_recall": self.topk_recall, "topk_k": self.topk_k,
            "excluded_classes": ";".join(str(c) for c in self.excluded_classes),
            "per_class_precision": ";".join(repr(float(v)) for v in self.precision),
            "per_class_recall": ";".join(repr(float(v)) for v in self.recall),
            "per_class_f1": ";".join(repr(float(v)) for v in self.f1),
        }
        return {k: fmt(values[k]) for k in CSV_COLUMNS}

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.row().items()) + "\n"


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def failed_report(metadata: dict, status: str = "diverged") -> EvalReport:
    md = dict(metadata, status=status)
    return EvalReport(float("nan"), float("nan"), [], [], [], 0, metadata=md)


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, n_classes: int, metadata: dict | None = None,
                    predictions: np.ndarray | None = None, **extra) -> EvalReport:
    """Build an EvalReport from per-bag class scores (``n x C``); predictions default to the argmax."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    preds = scores.argmax(axis=1) if predictions is None else np.asarray(predictions).astype(int)
    per, excluded = auc_by_class(scores, labels, n_classes)
    prec, rec, f1, _ = per_class_prf(preds, labels, n_classes)
    auc = float(np.mean([per[k] for k in sorted(per)])) if per else float("nan")
    return EvalReport(float(np.mean(f1)), auc, prec, rec, f1, int(labels.size),
                      excluded_classes=excluded, metadata=dict(metadata or {}), **extra)


# ----------------------------------------------------------------------------
# KNN bag probe


def bag_embedding(features: np.ndarray, aggregation: str) -> np.ndarray:
    if aggregation == "mean":
        return features.mean(axis=0)
    if aggregation == "max":
        return features.max(axis=0)
    raise ValueError(f"unknown aggregation {aggregation!r}")


def knn_eval(train_features: Sequence[np.ndarray], train_labels, test_features: Sequence[np.ndarray],
             test_labels, k: int, aggregation: str = "mean", n_classes: int | None = None,
             metadata: dict | None = None) -> EvalReport:
    """Bag-level k-nearest-neighbour classification on aggregated instance features.

    Vote shares serve as class scores for AUC.  A tied vote goes to the class
    whose tied neighbours have the smaller mean distance.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(train_features) < k:
        raise ValueError(f"need at least k={k} training bags, got {len(train_features)}")
    ytr = np.asarray(train_labels).astype(int)
    yte = np.asarray(test_labels).astype(int)
    c = n_classes or int(max(ytr.max(), yte.max()) + 1)
    etr = np.stack([bag_embedding(f, aggregation) for f in train_features])
    ete = np.stack([bag_embedding(f, aggregation) for f in test_features])
    scores = np.zeros((len(ete), c))
    preds = np.zeros(len(ete), dtype=int)
    for i, e in enumerate(ete):
        d = np.sqrt(((etr - e) ** 2).sum(axis=1))
        nbrs = np.argsort(d, kind="stable")[:k]
        votes = np.bincount(ytr[nbrs], minlength=c).astype(float)
        top = np.flatnonzero(votes == votes.max())
        if top.size > 1:
            mean_d = [d[nbrs][ytr[nbrs] == t].mean() for t in top]
            preds[i] = top[int(np.argmin(mean_d))]
        else:
            preds[i] = top[0]
        scores[i] = votes / k
    return evaluate_scores(scores, yte, c, metadata, predictions=preds)


# ----------------------------------------------------------------------------
# fully supervised upper bound


def train_fullsup_encoder(dataset: Dataset, encoder: nn.EncoderModel, *, epochs: int = 5, lr: float = 1e-3,
                          batch_size: int = 256, max_instances: int = 20000, seed: int = 0,
                          balance: bool = True) -> nn.EncoderModel:
    """Train a copy of ``encoder`` with instance-level cross-entropy on latent labels.

    This is the annotation-rich upper bound, deliberately kept out of the
    weakly supervised training code.  Positives are oversampled to match
    negatives when ``balance`` is set.
    """
    from .optim import AdamW

    rng = np.random.default_rng([seed, 0xF5])
    x = np.concatenate([b.instances for b in dataset])
    y = np.concatenate([b.instance_labels for b in dataset]).astype(int)
    c = int(max(y.max(), max(b.bag_label for b in dataset))) + 1
    if balance and np.any(y > 0):
        pos = np.flatnonzero(y > 0)
        neg = np.flatnonzero(y == 0)
        half = max_instances // 2
        idx = np.concatenate([rng.choice(pos, size=half, replace=pos.size < half),
                              rng.choice(neg, size=half, replace=neg.size < half)])
    else:
        idx = rng.choice(y.size, size=min(max_instances, y.size), replace=False)
    x, y = x[idx], y[idx]
    enc = encoder.copy()
    enc.freeze(0)
    enc.freeze_stats(True)
    probe = nn.MILHead.build("max", enc.out_dim, c, seed=seed)
    opt = AdamW(enc.parameters(True) + probe.parameters(), lr=lr)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(y.size)
        for start in range(0, y.size, batch_size):
            b = order[start:start + batch_size]
            z = nn.encode(enc, x[b])
            logits = z @ probe.classifier_w + ad.tile_rows(probe.classifier_b, len(b))
            lse = ad.log(ad.sum(ad.exp(logits), axis=1))
            onehot = np.zeros((len(b), c))
            onehot[np.arange(len(b)), y[b]] = 1.0
            picked = ad.sum(logits * ad.Tensor(onehot), axis=1)
            loss = ad.mean(lse - picked)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    enc.instances_forwarded = 0
    return enc
