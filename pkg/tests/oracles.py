"""Independent reference implementations used by the tests."""

from fractions import Fraction


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    w = min(ax1, bx1) - max(ax0, bx0)
    h = min(ay1, by1) - max(ay0, by0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def brute_force_ap(dets, gts, thr=0.5):
    """``dets``: list of (score, image, box); ``gts``: list of box lists per image.

    Enumerates every score cutoff, re-runs the matching on that prefix from
    scratch, then integrates the upper envelope of precision over recall.
    """
    n_gt = sum(len(g) for g in gts)
    ranked = sorted(dets, key=lambda d: -d[0])
    points = []
    for k in range(1, len(ranked) + 1):
        used = set()
        tp = 0
        for _, img, box in ranked[:k]:
            cands = [(box_iou(box, g), gi) for gi, g in enumerate(gts[img]) if (img, gi) not in used]
            cands = [c for c in cands if c[0] >= thr]
            if cands:
                used.add((img, max(cands)[1]))
                tp += 1
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    if not points:
        return 0.0
    levels = sorted({r for r, _ in points})
    area, prev = Fraction(0), Fraction(0)
    for r in levels:
        best = max(p for rr, p in points if rr >= r)
        area += (r - prev) * best
        prev = r
    return float(area)


def random_instance(rng):
    """At most 5 detections and 3 ground-truth boxes spread over 1 or 2 images."""
    n_img = int(rng.integers(1, 3))
    gts = [[] for _ in range(n_img)]
    for _ in range(int(rng.integers(1, 4))):
        x, y = rng.uniform(0, 20, 2)
        gts[int(rng.integers(n_img))].append((x, y, x + rng.uniform(2, 8), y + rng.uniform(2, 8)))
    dets = []
    for _ in range(int(rng.integers(0, 6))):
        img = int(rng.integers(n_img))
        if gts[img] and rng.uniform() < 0.7:
            g = gts[img][int(rng.integers(len(gts[img])))]
            j = rng.uniform(-1.5, 1.5, 4)
            b = (g[0] + j[0], g[1] + j[1], max(g[2] + j[2], g[0] + j[0] + 0.5), max(g[3] + j[3], g[1] + j[1] + 0.5))
        else:
            x, y = rng.uniform(0, 20, 2)
            b = (x, y, x + rng.uniform(1, 8), y + rng.uniform(1, 8))
        dets.append((float(rng.uniform()), img, b))
    return dets, gts
