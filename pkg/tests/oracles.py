"""Plain-Python reference computations, written with explicit loops over lists."""

import math


def centroids_labeled(features, labels, num_classes):
    out = []
    for c in range(num_classes):
        rows = [f for f, y in zip(features, labels) if y == c]
        if not rows:
            out.append(None)
            continue
        out.append([sum(r[k] for r in rows) / len(rows) for k in range(len(features[0]))])
    return out


def centroids_combined(features, labels, u_features, u_labels, u_weights, num_classes, dim):
    out = []
    for c in range(num_classes):
        num = [0.0] * dim
        count = 0
        for f, y in zip(features, labels):
            if y == c:
                count += 1
                for k in range(dim):
                    num[k] += f[k]
        for f, y, w in zip(u_features, u_labels, u_weights):
            if y == c:
                count += 1
                for k in range(dim):
                    num[k] += w * f[k]
        out.append(None if count == 0 else [v / count for v in num])
    return out


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def distance_vector(cents, c):
    """(values, valid) for partners c' != c in class order."""
    vals, valid = [], []
    for k in range(len(cents)):
        if k == c:
            continue
        if cents[k] is None:
            vals.append(0.0)
            valid.append(False)
        else:
            vals.append(dist(cents[c], cents[k]))
            valid.append(True)
    return vals, valid


def semi_supervised(a, b):
    return sum(dist(x, y) for x, y in zip(a, b) if x is not None and y is not None)


def alignment(train_sets, test_sets):
    total = 0.0
    for a in train_sets:
        for b in test_sets:
            for c in range(len(a)):
                if a[c] is None or b[c] is None:
                    continue
                sq = 0.0
                for k in range(len(a)):
                    if k == c or a[k] is None or b[k] is None:
                        continue
                    sq += (dist(a[c], a[k]) - dist(b[c], b[k])) ** 2
                total += math.sqrt(sq)
    return total


def normalized_entropy_weight(p):
    h = -sum(x * math.log(x) for x in p if x > 0)
    return 1.0 - h / math.log(len(p))
