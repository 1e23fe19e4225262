"""Average precision with greedy IoU matching, all-point or 11-point."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detector import iou_matrix


@dataclass
class GroundTruth:
    image_id: str
    width: int
    height: int
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    difficult: list[bool] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.labels:
            self.labels = ["object"] * len(self.boxes)
        if not self.difficult:
            self.difficult = [False] * len(self.boxes)
        for l, t, r, b in self.boxes:
            if not (0 <= l < r <= self.width and 0 <= t < b <= self.height):
                raise ValueError(f"{self.image_id}: box {(l, t, r, b)} outside the image")

    def to_json(self) -> dict:
        return {
            "id": self.image_id,
            "width": self.width,
            "height": self.height,
            "boxes": [
                {"l": l, "t": t, "r": r, "b": b, "label": lab, "difficult": bool(d)}
                for (l, t, r, b), lab, d in zip(self.boxes, self.labels, self.difficult)
            ],
        }

    @classmethod
    def from_json(cls, rec: Mapping) -> "GroundTruth":
        boxes = rec.get("boxes", [])
        return cls(
            str(rec["id"]),
            int(rec["width"]),
            int(rec["height"]),
            [(b["l"], b["t"], b["r"], b["b"]) for b in boxes],
            [b.get("label", "object") for b in boxes],
            [bool(b.get("difficult", False)) for b in boxes],
        )


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    box: tuple[float, float, float, float]
    score: float
    label: str = "object"


def match_detections(
    dets: Sequence[ScoredBox],
    gts: Mapping[str, GroundTruth],
    iou_threshold: float = 0.5,
    label: str | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching in descending score order.

    Each detection is compared with the ground-truth box it overlaps most in
    its image. It is a true positive if that overlap reaches the threshold
    and the box is still unclaimed, ignored if the box is marked difficult,
    and a false positive otherwise. Returns ``(tp, fp, n_positives)`` with
    one entry per detection in ranked order.
    """
    keep = [d for d in dets if label is None or d.label == label]
    order = sorted(range(len(keep)), key=lambda i: -keep[i].score)
    boxes, flags, claimed = {}, {}, {}
    npos = 0
    for image_id, gt in gts.items():
        sel = [i for i, lab in enumerate(gt.labels) if label is None or lab == label]
        boxes[image_id] = np.asarray([gt.boxes[i] for i in sel], dtype=np.float64).reshape(-1, 4)
        flags[image_id] = np.asarray([gt.difficult[i] for i in sel], dtype=bool)
        claimed[image_id] = np.zeros(len(sel), dtype=bool)
        npos += int((~flags[image_id]).sum())
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = keep[i]
        g = boxes.get(d.image_id)
        if g is None or not len(g):
            fp[rank] = 1
            continue
        ov = iou_matrix(np.asarray([d.box]), g)[0]
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold:
            if flags[d.image_id][j]:
                continue
            if not claimed[d.image_id][j]:
                claimed[d.image_id][j] = True
                tp[rank] = 1
            else:
                fp[rank] = 1
        else:
            fp[rank] = 1
    return tp, fp, npos


def average_precision(
    dets: Sequence[ScoredBox],
    gts: Mapping[str, GroundTruth] | Iterable[GroundTruth],
    iou_threshold: float = 0.5,
    mode: str = "all",
    label: str | None = None,
) -> float:
    """Area under the interpolated precision/recall curve.

    ``mode="all"`` integrates the monotone precision envelope at every
    recall step; ``mode="11pt"`` averages it at recall 0, 0.1, ..., 1.
    """
    if not isinstance(gts, Mapping):
        gts = {g.image_id: g for g in gts}
    tp, fp, npos = match_detections(dets, gts, iou_threshold, label)
    if npos == 0 or not len(tp):
        return 0.0
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    rec = ctp / npos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    if mode == "11pt":
        return float(
            np.mean([prec[rec >= t].max() if np.any(rec >= t) else 0.0 for t in np.linspace(0, 1, 11)])
        )
    if mode != "all":
        raise ValueError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(
    dets: Sequence[ScoredBox],
    gts: Iterable[GroundTruth],
    iou_threshold: float = 0.5,
    mode: str = "all",
) -> dict[str, float]:
    gts = {g.image_id: g for g in gts}
    labels = sorted({lab for g in gts.values() for lab in g.labels})
    per_class = {lab: average_precision(dets, gts, iou_threshold, mode, lab) for lab in labels}
    per_class["mAP"] = float(np.mean(list(per_class.values()))) if labels else 0.0
    return per_class
