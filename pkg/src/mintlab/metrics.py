"""Scoring and report serialisation.

Reports are canonical JSON (sorted keys, fixed indentation, ``repr`` floats)
so that re-emitting the same report gives identical bytes.  Human-facing
tables round to four decimals; Python's formatting rounds the exact binary
value, i.e. ties go to even.
"""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, ParameterError

TPR_TARGETS = (0.8, 0.9, 0.95)


class InputError(DataError, ValueError):
    pass


@dataclass
class ScoreSet:
    ids: np.ndarray
    scores: np.ndarray
    membership: np.ndarray  # 1 = D (member), 0 = E

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.membership = np.asarray(self.membership, dtype=np.int64)
        if not np.all(np.isfinite(self.scores)):
            raise InputError("scores must be finite")

    @classmethod
    def from_arrays(cls, scores, membership):
        return cls(np.arange(len(scores)), scores, membership)

    @property
    def positives(self):
        return self.scores[self.membership == 1]

    @property
    def negatives(self):
        return self.scores[self.membership == 0]


def _as_scoreset(scores, membership=None):
    if isinstance(scores, ScoreSet):
        return scores
    return ScoreSet.from_arrays(scores, membership)


def _need_both(s):
    if not len(s.positives) or not len(s.negatives):
        raise InputError("both member and non-member scores are required")


def confusion(scores, membership=None, threshold=0.5):
    s = _as_scoreset(scores, membership)
    pred = s.scores >= threshold
    truth = s.membership == 1
    return {"tp": int((pred & truth).sum()), "fp": int((pred & ~truth).sum()),
            "tn": int((~pred & ~truth).sum()), "fn": int((~pred & truth).sum())}


def accuracy_at_threshold(scores, membership=None, threshold=0.5):
    """Fraction correct when score >= threshold means "member"."""
    s = _as_scoreset(scores, membership)
    if len(s.scores) == 0:
        raise InputError("empty score set")
    c = confusion(s, threshold=threshold)
    return (c["tp"] + c["tn"]) / len(s.scores)


def roc_points(scores, membership=None):
    """(FPR, TPR) for thresholds at +inf, every distinct score (descending), -inf."""
    s = _as_scoreset(scores, membership)
    _need_both(s)
    pos, neg = np.sort(s.positives), np.sort(s.negatives)
    thresholds = np.concatenate([[np.inf], np.unique(s.scores)[::-1], [-np.inf]])
    # count of scores >= t, via right-side search on the ascending arrays
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg, thresholds, side="left")
    pts = np.stack([fp / len(neg), tp / len(pos)], axis=1)
    keep = np.ones(len(pts), bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    return [tuple(map(float, p)) for p in pts[keep]]


def auc(scores, membership=None):
    """P(member score > non-member score), ties counting one half (rank form)."""
    s = _as_scoreset(scores, membership)
    _need_both(s)
    ranks = rankdata(s.scores, method="average")
    n_pos, n_neg = len(s.positives), len(s.negatives)
    u = ranks[s.membership == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def trapezoid_auc(points):
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2))


def fpr_at_tpr(scores, target, membership=None):
    """Smallest FPR among thresholds reaching TPR >= target."""
    if not 0 < target <= 1:
        raise ParameterError(f"TPR target must be in (0, 1], got {target}")
    pts = roc_points(scores, membership)
    return min(fpr for fpr, tpr in pts if tpr >= target)


@dataclass
class EvalReport:
    plan_hash: str
    seed: int
    detector: str
    accuracy: float
    auc: float
    roc: list
    confusion: dict
    fpr_at_tpr: dict
    counts: dict
    detector_param_count: int
    audited_train_accuracy: float
    resolution: int
    threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["roc"] = [list(p) for p in self.roc]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["roc"] = [tuple(p) for p in d["roc"]]
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


def evaluate(scoreset, *, plan_hash, seed, detector, param_count, audited_train_accuracy,
             resolution, threshold=0.5, extra=None):
    """Build an :class:`EvalReport`; the eval side must be balanced."""
    s = scoreset
    n_d, n_e = int((s.membership == 1).sum()), int((s.membership == 0).sum())
    if n_d != n_e:
        raise InputError(f"unbalanced evaluation set: {n_d} members vs {n_e} non-members")
    return EvalReport(
        plan_hash=plan_hash, seed=int(seed), detector=detector,
        accuracy=accuracy_at_threshold(s, threshold=threshold),
        auc=auc(s), roc=roc_points(s), confusion=confusion(s, threshold=threshold),
        fpr_at_tpr={f"{t:g}": fpr_at_tpr(s, t) for t in TPR_TARGETS},
        counts={"D": n_d, "E": n_e}, detector_param_count=int(param_count),
        audited_train_accuracy=_finite_or_none(audited_train_accuracy), resolution=int(resolution),
        threshold=threshold, extra=dict(extra or {}))


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_report(report, path, roc_csv=None):
    """Write ``report`` as canonical JSON; optionally its ROC points as CSV."""
    payload = canonical_json(report.to_dict() if isinstance(report, EvalReport) else report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)
    if roc_csv is not None:
        with open(roc_csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(roc_to_csv(report.roc))


def roc_to_csv(points):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr"])
    for fpr, tpr in points:
        w.writerow([repr(float(fpr)), repr(float(tpr))])
    return buf.getvalue()


def parse_report(path):
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))


def aggregate(reports, plan_hash):
    """Mean and sample std across seeds of the headline metrics."""
    def stats(values):
        values = [float(v) for v in values]
        mean = math.fsum(values) / len(values)
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)) \
            if len(values) > 1 else 0.0
        return {"mean": mean, "std": std, "values": values}

    if not reports:
        raise InputError("no reports to aggregate")
    out = {"plan_hash": plan_hash, "seeds": [r.seed for r in reports],
           "detector": reports[0].detector,
           "accuracy": stats(r.accuracy for r in reports),
           "auc": stats(r.auc for r in reports),
           "detector_param_count": reports[0].detector_param_count,
           "resolution": reports[0].resolution}
    for key in reports[0].fpr_at_tpr:
        out[f"fpr_at_tpr_{key}"] = stats(r.fpr_at_tpr[key] for r in reports)
    return out


def fmt4(x):
    return f"{x:.4f}"
