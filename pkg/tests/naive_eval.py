"""Slow, loop-only reimplementation of the COCO box-matching protocol.

Written from the protocol description rather than from the library code:
precision at recall r is the best precision reached at any rank whose
recall is at least r.
"""

AREAS = {"all": (0.0, float("inf")), "small": (0.0, 256.0), "medium": (256.0, 1024.0), "large": (1024.0, float("inf"))}
THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(10)]
RECALLS = [i / 100 for i in range(101)]


def box_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def match_one_image(dets, gts, thr, lo, hi):
    """dets: [(score, box)], gts: [box]. Returns [(score, status)] with status tp / fp / skip."""
    dets = sorted(dets, key=lambda d: -d[0])
    ignore = [not (lo <= area(g) < hi) for g in gts]
    taken = [False] * len(gts)
    out = []
    for score, box in dets:
        best, best_iou, best_ign = None, None, None
        for g, gbox in enumerate(gts):
            if taken[g]:
                continue
            v = box_iou(box, gbox)
            if v < thr:
                continue
            # regular ground truth outranks ignored; among equals, higher IoU, then later index
            key = (not ignore[g], v)
            if best is None or key >= (not best_ign, best_iou):
                best, best_iou, best_ign = g, v, ignore[g]
        if best is not None:
            taken[best] = True
            out.append((score, "skip" if best_ign else "tp"))
        elif not (lo <= area(box) < hi):
            out.append((score, "skip"))
        else:
            out.append((score, "fp"))
    return out


def class_precision_recall(images, cls, thr, area_name, max_det):
    """101 interpolated precisions and the final recall, or (None, None) without positives."""
    lo, hi = AREAS[area_name]
    n_pos = 0
    ranked = []
    for dets, gts in images:
        g = [b for c, b in gts if c == cls]
        n_pos += sum(1 for b in g if lo <= area(b) < hi)
        d = sorted([(s, b) for c, s, b in dets if c == cls], key=lambda x: -x[0])[:max_det]
        ranked += match_one_image(d, g, thr, lo, hi)
    if n_pos == 0:
        return None, None
    ranked.sort(key=lambda x: -x[0])
    tp = fp = 0
    points = []
    for _, status in ranked:
        if status == "tp":
            tp += 1
        elif status == "fp":
            fp += 1
        else:
            continue
        points.append((tp / n_pos, tp / (tp + fp)))
    precisions = []
    for r in RECALLS:
        reach = [p for rc, p in points if rc >= r - 1e-12]
        precisions.append(max(reach) if reach else 0.0)
    return precisions, tp / n_pos


def class_ap_ar(images, cls, thr, area_name, max_det):
    precisions, rec = class_precision_recall(images, cls, thr, area_name, max_det)
    if precisions is None:
        return None, None
    return sum(precisions) / len(precisions), rec


def naive_evaluate(images, classes):
    """images: list of (dets, gts), dets = [(cls, score, box)], gts = [(cls, box)]."""

    def mean_over(thrs, area_name="all", max_det=100, which=0):
        vals = []
        for c in classes:
            for t in thrs:
                v = class_ap_ar(images, c, t, area_name, max_det)[which]
                if v is not None:
                    vals.append(v)
        return sum(vals) / len(vals) if vals else -1.0

    return {
        "AP": mean_over(THRESHOLDS),
        "AP50": mean_over([0.5]),
        "AP75": mean_over([0.75]),
        "APS": mean_over(THRESHOLDS, "small"),
        "APM": mean_over(THRESHOLDS, "medium"),
        "APL": mean_over(THRESHOLDS, "large"),
        "AR1": mean_over(THRESHOLDS, max_det=1, which=1),
        "AR10": mean_over(THRESHOLDS, max_det=10, which=1),
        "AR100": mean_over(THRESHOLDS, max_det=100, which=1),
    }
