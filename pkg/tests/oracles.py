"""Independent brute-force reference implementations used by the tests.

Deliberately written as plain loops with no shared code from the package.
"""

import math


def accuracy(labels, predicted):
    hits = 0
    for y, p in zip(labels, predicted):
        if y == p:
            hits += 1
    return hits / len(labels)


def argmax_first(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def macro_f1(labels, predicted, k):
    total = 0.0
    for c in range(k):
        tp = fp = fn = 0
        for y, p in zip(labels, predicted):
            if p == c and y == c:
                tp += 1
            elif p == c:
                fp += 1
            elif y == c:
                fn += 1
        if tp + fp + fn == 0:
            f1 = 0.0
        else:
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += f1
    return total / k


def pair_auroc(scores, positive):
    """Probability that a random positive outranks a random negative (ties 1/2)."""
    wins = 0.0
    n = 0
    for i, si in enumerate(scores):
        if not positive[i]:
            continue
        for j, sj in enumerate(scores):
            if positive[j]:
                continue
            n += 1
            if si > sj:
                wins += 1.0
            elif si == sj:
                wins += 0.5
    return wins / n


def trapezoid_auroc(scores, positive):
    """Area under the ROC curve traced by descending thresholds."""
    pos = sum(1 for p in positive if p)
    neg = len(positive) - pos
    thresholds = sorted(set(scores), reverse=True)
    pts = [(0.0, 0.0)]
    for t in thresholds:
        tp = sum(1 for s, p in zip(scores, positive) if p and s >= t)
        fp = sum(1 for s, p in zip(scores, positive) if not p and s >= t)
        pts.append((fp / neg, tp / pos))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def macro_auroc(probs, labels, k):
    vals = []
    for c in range(k):
        positive = [y == c for y in labels]
        if all(positive) or not any(positive):
            continue
        vals.append(pair_auroc([row[c] for row in probs], positive))
    return sum(vals) / len(vals)


def davies_bouldin(points, labels):
    clusters = sorted(set(labels))
    cent, scat = {}, {}
    for c in clusters:
        members = [p for p, l in zip(points, labels) if l == c]
        dim = len(members[0])
        cent[c] = [sum(m[d] for m in members) / len(members) for d in range(dim)]
        scat[c] = sum(math.dist(m, cent[c]) for m in members) / len(members)
    total = 0.0
    for i in clusters:
        worst = -math.inf
        for j in clusters:
            if i != j:
                worst = max(worst, (scat[i] + scat[j]) / math.dist(cent[i], cent[j]))
        total += worst
    return total / len(clusters)
