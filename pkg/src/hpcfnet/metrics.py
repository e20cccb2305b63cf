"""Pixel-wise confusion counts and the precision / recall / F-score family."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import stack_batch
from .model import predict_from_logits
from .tensor import ShapeError, Tensor


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred, gt) -> ConfusionCounts:
    """Count TP/FP/FN/TN between two binary maps (1 = changed)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f_score: float
    beta: float
    counts: ConfusionCounts
    per_image: list = field(default_factory=list)

    def to_records(self) -> list[dict]:
        """One record per image followed by the aggregate."""
        rows = [dict(r) for r in self.per_image]
        rows.append({"id": "__aggregate__", "precision": self.precision, "recall": self.recall,
                     "f_score": self.f_score, "beta": self.beta, **asdict(self.counts)})
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())

    def table(self) -> str:
        lines = [f"{'id':<24s} {'P':>7s} {'R':>7s} {'F':>7s}"]
        for r in self.per_image:
            lines.append(f"{r['id']:<24s} {r['precision']:7.4f} {r['recall']:7.4f} {r['f_score']:7.4f}")
        lines.append(f"{'aggregate':<24s} {self.precision:7.4f} {self.recall:7.4f} {self.f_score:7.4f}")
        return "\n".join(lines)


def f_score(counts: ConfusionCounts, beta: float = 1.0) -> MetricsReport:
    """Weighted harmonic mean of precision and recall; any 0/0 is taken as 0."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    p = _ratio(counts.tp, counts.tp + counts.fp)
    r = _ratio(counts.tp, counts.tp + counts.fn)
    b2 = beta * beta
    f = _ratio((b2 + 1) * p * r, b2 * p + r)
    return MetricsReport(p, r, f, beta, counts)


def aggregate(preds, gts, ids=None, beta: float = 1.0) -> MetricsReport:
    """Micro-averaged report over several images, with per-image scores."""
    total = ConfusionCounts()
    per_image = []
    for k, (p, g) in enumerate(zip(preds, gts)):
        c = confusion(p, g)
        total = total + c
        rep = f_score(c, beta)
        per_image.append({"id": ids[k] if ids is not None else str(k), "precision": rep.precision,
                          "recall": rep.recall, "f_score": rep.f_score, **asdict(c)})
    report = f_score(total, beta)
    report.per_image = per_image
    return report


def parse_report(text: str) -> dict:
    """Read back the aggregate record written by :meth:`MetricsReport.to_jsonl`."""
    for line in text.splitlines():
        rec = json.loads(line)
        if rec.get("id") == "__aggregate__":
            return rec
    raise ValueError("no aggregate record in report")


def evaluate(model, pairs: list, batch_size: int = 8, beta: float = 1.0) -> MetricsReport:
    """Micro-averaged metrics of eval-mode predictions over ``pairs``."""
    if not pairs:
        raise ValueError("evaluate needs at least one image pair")
    preds, gts = [], []
    dt = model.config.np_dtype
    for i in range(0, len(pairs), batch_size):
        t0, t1, labels = stack_batch(pairs[i:i + batch_size], dt)
        if labels is None:
            raise ValueError("evaluate needs ground-truth masks")
        preds.extend(predict_from_logits(model(Tensor(t0), Tensor(t1), "eval").data))
        gts.extend(labels)
    return aggregate(preds, gts, ids=[p.id for p in pairs], beta=beta)
