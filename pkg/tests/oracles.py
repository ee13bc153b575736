"""Scalar-loop reference implementations used as independent test oracles.

Everything here is plain Python over nested lists/arrays indexed one element at
a time; nothing calls into the vectorized package code.
"""
import math


def in_sector(x, y, x0, y0, theta, span, radius):
    phi = math.atan2(y - y0, x - x0)
    d = math.sqrt((x - x0) ** 2 + (y - y0) ** 2)
    if d > radius:
        return False
    # the sector [theta, theta + span] may wrap past +pi; try each 2pi shift of phi
    for k in (-2, -1, 0, 1, 2):
        p = phi + 2 * math.pi * k
        if theta <= p <= theta + span:
            return True
    return False


def shadow_pixel(value, x, y, x0, y0, theta, span, alpha, radius):
    if not in_sector(x, y, x0, y0, theta, span, radius):
        return value
    d = math.sqrt((x - x0) ** 2 + (y - y0) ** 2)
    out = value * (1 - alpha * (1 - d / radius))
    return min(1.0, max(0.0, out))


def attenuation_pixel(value, y, height, gamma):
    return min(1.0, max(0.0, value * (1 - gamma * y / height)))


def grid_pool(prob, m):
    """prob: C x H x W nested indexable -> Gr x Gc x C lists."""
    c_n, h, w = len(prob), len(prob[0]), len(prob[0][0])
    out = []
    for i in range(h // m):
        row = []
        for j in range(w // m):
            vec = []
            for c in range(c_n):
                s = 0.0
                for u in range(i * m, (i + 1) * m):
                    for v in range(j * m, (j + 1) * m):
                        s += float(prob[c][u][v])
                vec.append(s / (m * m))
            row.append(vec)
        out.append(row)
    return out


def cos(a, b):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def stability(orig, views):
    """orig, views[k]: Gr x Gc x C lists -> Gr x Gc list."""
    gr, gc = len(orig), len(orig[0])
    return [[sum(cos(orig[i][j], v[i][j]) for v in views) / len(views) for j in range(gc)]
            for i in range(gr)]


def consistency(feats):
    gr, gc = len(feats[0]), len(feats[0][0])
    out = []
    for i in range(gr):
        row = []
        for j in range(gc):
            vals = []
            for p in range(len(feats)):
                for q in range(p + 1, len(feats)):
                    vals.append(cos(feats[p][i][j], feats[q][i][j]))
            row.append(sum(vals) / len(vals))
        out.append(row)
    return out


def fuse(stabs, cons, delta):
    gr, gc = len(cons), len(cons[0])
    return [[(delta + (1 - delta) * cons[i][j]) * sum(s[i][j] for s in stabs) / len(stabs)
             for j in range(gc)] for i in range(gr)]


def ce(probvec_value):
    return -math.log(min(1.0, max(1e-8, float(probvec_value))))


def supervised_loss(preds, labels):
    """preds: N x C x H x W, labels: N x H x W."""
    total = 0.0
    for n in range(len(preds)):
        h, w = len(labels[n]), len(labels[n][0])
        s = 0.0
        for y in range(h):
            for x in range(w):
                s += ce(preds[n][int(labels[n][y][x])][y][x])
        total += s / (h * w)
    return total / len(preds)


def unsupervised_loss(preds, pseudo, rel, psi):
    total = 0.0
    gated = 0
    count = 0
    for n in range(len(preds)):
        h, w = len(pseudo[n]), len(pseudo[n][0])
        s = 0.0
        for y in range(h):
            for x in range(w):
                r = float(rel[n][y][x])
                delta = 1 if r > psi else 0
                gated += delta
                count += 1
                s += ce(preds[n][int(pseudo[n][y][x])][y][x]) * r * delta
        total += s / (h * w)
    return total / len(preds), gated / count


def confusion(gt, pred, c):
    cm = [[0] * c for _ in range(c)]
    for g, p in zip(gt, pred):
        cm[int(g)][int(p)] += 1
    return cm
