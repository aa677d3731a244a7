"""nuScenes-style detection scoring.

Detections are matched to ground truth by BEV center distance, greedily in
descending score order. AP is the area under the 101-point interpolated
precision/recall curve restricted to recall > 0.1 and precision > 0.1,
normalized to [0, 1]. mAP averages AP over classes and the distance
thresholds {0.5, 1, 2, 4} m; TP errors are measured at 2 m; NDS combines both.

Velocity predictions from the reference detector are always zero, so AVE is
the mean ground-truth speed of matched objects. The attribute error (AAE) is a
placeholder that is 0 for every matched pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detect import Detection
from .scene import CLASSES, ObjectBox

MIN_RECALL = 0.1
MIN_PRECISION = 0.1
N_RECALL_POINTS = 101
TP_ERROR_NAMES = ("ATE", "ASE", "AOE", "AVE", "AAE")


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_dets: tuple[int, ...]
    unmatched_gts: tuple[int, ...]
    threshold: float


@dataclass(frozen=True)
class TPErrors:
    ate: float = 1.0
    ase: float = 1.0
    aoe: float = 1.0
    ave: float = 1.0
    aae: float = 1.0

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.ate, self.ase, self.aoe, self.ave, self.aae)

    def to_dict(self) -> dict:
        return dict(zip(TP_ERROR_NAMES, self.as_tuple()))


@dataclass(frozen=True)
class EvalConfig:
    classes: tuple[str, ...] = CLASSES
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    symmetric_classes: frozenset = frozenset({"barrier"})
    dump_pr: bool = False


@dataclass
class EvalResult:
    per_class_ap: dict
    mAP: float
    tp_errors: TPErrors
    per_class_tp_errors: dict
    nds: float
    counts: dict
    no_gt: bool = False
    pr_curves: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "mAP": self.mAP,
            "NDS": self.nds,
            "no_gt": self.no_gt,
            "per_class_ap": {c: {str(t): ap for t, ap in v.items()} for c, v in self.per_class_ap.items()},
            "tp_errors": self.tp_errors.to_dict(),
            "per_class_tp_errors": {c: e.to_dict() for c, e in self.per_class_tp_errors.items()},
            "counts": self.counts,
        }
        if self.pr_curves is not None:
            d["pr_curves"] = self.pr_curves
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _score_order(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _samples(n: int, samples) -> np.ndarray:
    if samples is None:
        return np.zeros(n, dtype=np.int64)
    return np.asarray(samples)


def match_by_center_distance(dets: Sequence[Detection], gts: Sequence[ObjectBox], threshold: float,
                             det_samples=None, gt_samples=None) -> MatchSet:
    """Greedy one-to-one matching.

    ``det_samples`` / ``gt_samples`` optionally tag each item with the sample it
    belongs to; matches never cross samples.
    """
    ds = _samples(len(dets), det_samples)
    gs = _samples(len(gts), gt_samples)
    gxy = np.array([g.center[:2] for g in gts], dtype=np.float64).reshape(-1, 2)
    taken = np.zeros(len(gts), dtype=bool)
    pairs, fps = [], []
    for i in _score_order([d.score for d in dets]):
        cand = (~taken) & (gs == ds[i])
        if cand.any():
            dist = np.hypot(gxy[:, 0] - dets[i].center[0], gxy[:, 1] - dets[i].center[1])
            dist = np.where(cand, dist, np.inf)
            j = int(np.argmin(dist))
            if dist[j] <= threshold:
                taken[j] = True
                pairs.append((int(i), j, float(dist[j])))
                continue
        fps.append(int(i))
    return MatchSet(tuple(pairs), tuple(fps), tuple(int(j) for j in np.flatnonzero(~taken)), threshold)


def precision_recall(dets: Sequence[Detection], gts: Sequence[ObjectBox], threshold: float,
                     det_samples=None, gt_samples=None) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (precision, recall) after each detection in score order."""
    ms = match_by_center_distance(dets, gts, threshold, det_samples, gt_samples)
    order = _score_order([d.score for d in dets])
    is_tp = np.zeros(len(dets), dtype=bool)
    is_tp[[p[0] for p in ms.pairs]] = True
    tp = np.cumsum(is_tp[order]).astype(np.float64)
    fp = np.cumsum(~is_tp[order]).astype(np.float64)
    prec = tp / (tp + fp)
    rec = tp / len(gts) if len(gts) else np.zeros_like(tp)
    return prec, rec


def interpolated_precision(prec: np.ndarray, rec: np.ndarray) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, N_RECALL_POINTS)
    if len(prec) == 0:
        return np.zeros_like(grid)
    return np.interp(grid, rec, prec, right=0.0)


def ap_from_curve(prec_interp: np.ndarray) -> float:
    p = prec_interp[round(100 * MIN_RECALL) + 1:] - MIN_PRECISION
    p[p < 0] = 0.0
    # the mean of repeated 0.9s can round just above 0.9
    return min(1.0, float(np.mean(p)) / (1.0 - MIN_PRECISION))


def average_precision(dets: Sequence[Detection], gts: Sequence[ObjectBox], threshold: float,
                      det_samples=None, gt_samples=None) -> float:
    if len(gts) == 0 or len(dets) == 0:
        return 0.0
    prec, rec = precision_recall(dets, gts, threshold, det_samples, gt_samples)
    return ap_from_curve(interpolated_precision(prec, rec))


def yaw_difference(a: float, b: float, period: float = 2.0 * math.pi) -> float:
    """|a - b| wrapped into [0, period / 2]."""
    d = (a - b + period / 2.0) % period - period / 2.0
    return abs(d)


def aligned_iou(size_a, size_b) -> float:
    """IoU of two boxes sharing center and yaw."""
    a, b = np.asarray(size_a, dtype=np.float64), np.asarray(size_b, dtype=np.float64)
    inter = float(np.prod(np.minimum(a, b)))
    return inter / (float(np.prod(a)) + float(np.prod(b)) - inter)


def tp_errors(matches: MatchSet, dets: Sequence[Detection], gts: Sequence[ObjectBox],
              symmetric: bool = False) -> TPErrors:
    """Mean translation/scale/orientation/velocity/attribute error over matched pairs.

    ``symmetric`` folds orientation error into [0, pi/2] (classes such as
    barriers whose heading is ambiguous). No matches gives the maximum
    penalty of 1 for every error.
    """
    if not matches.pairs:
        return TPErrors()
    period = math.pi if symmetric else 2.0 * math.pi
    ate, ase, aoe, ave = [], [], [], []
    for di, gi, dist in matches.pairs:
        d, g = dets[di], gts[gi]
        ate.append(dist)
        ase.append(1.0 - aligned_iou(d.size, g.size))
        aoe.append(yaw_difference(d.yaw, g.yaw, period))
        ave.append(math.hypot(d.velocity[0] - g.velocity[0], d.velocity[1] - g.velocity[1]))
    return TPErrors(float(np.mean(ate)), float(np.mean(ase)), float(np.mean(aoe)),
                    float(np.mean(ave)), 0.0)


def nds(mAP: float, errors) -> float:
    errs = errors.as_tuple() if isinstance(errors, TPErrors) else tuple(errors)
    return (5.0 * mAP + sum(1.0 - min(1.0, e) for e in errs)) / 10.0


def _flatten(items) -> tuple[list, list]:
    """Accept a flat sequence (one sample) or a mapping sample -> sequence."""
    if isinstance(items, Mapping):
        flat, tags = [], []
        for key in sorted(items):
            for x in items[key]:
                flat.append(x)
                tags.append(key)
        return flat, tags
    return list(items), [""] * len(items)


def evaluate(dets, gts, config: EvalConfig = EvalConfig()) -> EvalResult:
    """Dataset-level evaluation with detections pooled across samples."""
    all_dets, det_tags = _flatten(dets)
    all_gts, gt_tags = _flatten(gts)
    per_class_ap: dict = {}
    per_class_err: dict = {}
    pr_curves: dict = {} if config.dump_pr else None
    counts = {"detections": len(all_dets), "gts": len(all_gts), "per_threshold": {}}
    aps = []
    for t in config.thresholds:
        counts["per_threshold"][str(t)] = {"TP": 0, "FP": 0, "FN": 0}
    for cls in config.classes:
        di = [i for i, d in enumerate(all_dets) if d.class_label == cls]
        gi = [i for i, g in enumerate(all_gts) if g.class_label == cls]
        cd = [all_dets[i] for i in di]
        cg = [all_gts[i] for i in gi]
        dtag = [det_tags[i] for i in di]
        gtag = [gt_tags[i] for i in gi]
        per_class_ap[cls] = {}
        for t in config.thresholds:
            ms = match_by_center_distance(cd, cg, t, dtag, gtag)
            c = counts["per_threshold"][str(t)]
            c["TP"] += len(ms.pairs)
            c["FP"] += len(ms.unmatched_dets)
            c["FN"] += len(ms.unmatched_gts)
            ap = average_precision(cd, cg, t, dtag, gtag)
            per_class_ap[cls][t] = ap
            if cg or cd:
                aps.append(ap)
            if pr_curves is not None and cg and cd:
                prec, rec = precision_recall(cd, cg, t, dtag, gtag)
                pr_curves.setdefault(cls, {})[str(t)] = {
                    "precision": interpolated_precision(prec, rec).tolist(),
                    "recall": np.linspace(0.0, 1.0, N_RECALL_POINTS).tolist()}
        if cg:
            ms = match_by_center_distance(cd, cg, config.tp_threshold, dtag, gtag)
            per_class_err[cls] = tp_errors(ms, cd, cg, cls in config.symmetric_classes)
    no_gt = not all_gts
    mAP = float(np.mean(aps)) if aps else 0.0
    if per_class_err:
        errs = np.array([e.as_tuple() for e in per_class_err.values()])
        mean_err = TPErrors(*(float(v) for v in errs.mean(axis=0)))
    else:
        mean_err = TPErrors()
    return EvalResult(per_class_ap, mAP, mean_err, per_class_err, nds(mAP, mean_err), counts, no_gt,
                      pr_curves)
