#!/usr/bin/env python3
"""Reference metrics for the golden fixture.

Reads annotations.json and expected.json and writes expected_metrics.json:
greedy class-aware matching by descending score, P/R/F1 at the report
thresholds and their mean over the 0.50..0.95 sweep, and the F1@0.5 every
swap set must reproduce.
"""

import json
import os
import sys
from fractions import Fraction


def iou(a, b):
    # Exact rational arithmetic on integer-cornered boxes.
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return Fraction(inter, area(a) + area(b) - inter)


def match(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i]["score"], dets[i]["image_id"],
                                                     dets[i]["bbox"]))
    used = [False] * len(gts)
    tp = 0
    for i in order:
        d = dets[i]
        if d["category"] == "unknown":
            continue
        best, best_iou = None, Fraction(-1)
        for g, gt in enumerate(gts):
            if used[g] or gt["image_id"] != d["image_id"] or gt["category"] != d["category"]:
                continue
            o = iou(d["bbox"], gt["bbox"])
            if o >= thr and o > best_iou:
                best, best_iou = g, o
        if best is not None:
            used[best] = True
            tp += 1
    return tp, len(dets) - tp, len(gts) - tp


def prf(tp, fp, fn):
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f


def main():
    here = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))
    ann = json.load(open(os.path.join(here, "annotations.json")))
    names = {c["id"]: c["name"] for c in ann["categories"]}
    gts = []
    for a in ann["annotations"]:
        x, y, w, h = a["bbox"]
        gts.append({"image_id": str(a["image_id"]), "bbox": [x, y, x + w, y + h],
                    "category": names[a["category_id"]]})
    dets = json.load(open(os.path.join(here, "expected.json")))["detections"]

    per_threshold = []
    for pct in (50, 95):
        tp, fp, fn = match(dets, gts, Fraction(pct, 100))
        p, r, f = prf(tp, fp, fn)
        per_threshold.append({"iou_threshold": pct / 100, "tp": tp, "fp": fp, "fn": fn,
                              "precision": float(p), "recall": float(r), "f1": float(f)})
    sweep = [prf(*match(dets, gts, Fraction(pct, 100))) for pct in range(50, 100, 5)]
    mean = [float(sum(s[k] for s in sweep) / len(sweep)) for k in range(3)]

    doc = {"detections": len(dets), "ground_truths": len(gts), "per_threshold": per_threshold,
           "miou": {"precision": mean[0], "recall": mean[1], "f1": mean[2]},
           "swap_f1": per_threshold[0]["f1"]}
    with open(os.path.join(here, "expected_metrics.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    main()
