"""Independent scalar-loop oracles for the loss stack.

Plain Python loops over numpy arrays, written without reference to the torch
implementations they validate.
"""

import numpy as np


def oracle_cross_entropy_sum(logits, label):
    """Sum over the cell grid of -log softmax at the label channel."""
    hc, wc, _ = logits.shape
    total = 0.0
    for m in range(hc):
        for n in range(wc):
            row = np.asarray(logits[m, n], dtype=np.float64)
            shifted = row - row.max()
            probs = np.exp(shifted) / np.exp(shifted).sum()
            total += -np.log(probs[int(label[m, n])])
    return total


def oracle_repeatability(logit_maps, label):
    return float(np.mean([oracle_cross_entropy_sum(m, label) for m in logit_maps]))


def oracle_mse(d1, d2):
    h, w, c = d1.shape
    total = 0.0
    for m in range(h):
        for n in range(w):
            acc = 0.0
            for k in range(c):
                acc += (d1[m, n, k] - d2[m, n, k]) ** 2
            total += acc / c
    return total / (h * w)


def oracle_cosine(d1, d2):
    h, w, _ = d1.shape
    total = 0.0
    for m in range(h):
        for n in range(w):
            a, b = d1[m, n], d2[m, n]
            na = np.sqrt((a * a).sum()) + 1e-12
            nb = np.sqrt((b * b).sum()) + 1e-12
            total += float(a @ b) / (na * nb)
    return total / (h * w)


def oracle_fusion(d1, d2):
    return oracle_mse(d1, d2) + 1.0 - oracle_cosine(d1, d2)


def oracle_similarity(maps):
    n = len(maps)
    values = [oracle_fusion(maps[m], maps[k])
              for m in range(n) for k in range(m + 1, n)]
    return float(np.sum(values) / len(values))


def oracle_vector_fusion(a, b):
    c = len(a)
    mse = float(((a - b) ** 2).sum()) / c
    na = np.sqrt((a * a).sum()) + 1e-12
    nb = np.sqrt((b * b).sum()) + 1e-12
    return mse + 1.0 - float(a @ b) / (na * nb)


def oracle_disparity(descriptors_per_image):
    per_image = []
    for desc in descriptors_per_image:
        k = len(desc)
        if k < 2:
            per_image.append(0.0)
            continue
        values = [oracle_vector_fusion(desc[m], desc[n])
                  for m in range(k) for n in range(m + 1, k)]
        per_image.append(float(np.sum(values) / len(values)))
    return float(np.mean(per_image)) if per_image else 0.0
