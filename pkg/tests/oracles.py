"""Brute-force scalar oracles, independent of the library implementation.

Everything here is plain Python loops over float64 numbers: explicit softmax
sums, hand cross-entropies, full sorts. Tests compute expected values with
these and compare the library against them.
"""

import math

import numpy as np


def oracle_softmax(scores):
    exps = [math.exp(s) for s in scores]
    z = sum(exps)
    return [e / z for e in exps]


def oracle_direction_loss(queries, query_cats, candidates, candidate_cats, tau,
                          exclude=None, mode="uniform"):
    """Mean cross-entropy over queries with at least one positive candidate."""
    losses = []
    for i, query in enumerate(queries):
        keep = [j for j in range(len(candidates))
                if exclude is None or not exclude[i][j]]
        scores = [float(np.dot(query, candidates[j])) / tau for j in keep]
        probs = oracle_softmax(scores)
        positives = [n for n, j in enumerate(keep)
                     if candidate_cats[j] == query_cats[i]]
        if not positives:
            continue
        if mode == "uniform":
            weight = 1.0 / len(positives)
        else:
            weight = 1.0
        losses.append(-sum(weight * math.log(probs[n]) for n in positives))
    if not losses:
        return 0.0
    return sum(losses) / len(losses)


def oracle_itc(image_batch, text_batch, cats, queue_image, queue_image_cats,
               queue_text, queue_text_cats, tau, mode="uniform"):
    text_cands = list(queue_text) + list(text_batch)
    text_cats = list(queue_text_cats) + list(cats)
    image_cands = list(queue_image) + list(image_batch)
    image_cats = list(queue_image_cats) + list(cats)
    i2t = oracle_direction_loss(image_batch, cats, text_cands, text_cats, tau, mode=mode)
    t2i = oracle_direction_loss(text_batch, cats, image_cands, image_cats, tau, mode=mode)
    return 0.5 * (i2t + t2i)


def oracle_imc(image_batch, text_batch, cats, queue_image, queue_image_cats,
               queue_text, queue_text_cats, tau, mode="uniform"):
    def side(batch, queue, queue_cats):
        cands = list(queue) + list(batch)
        cand_cats = list(queue_cats) + list(cats)
        exclude = [[False] * len(cands) for _ in range(len(batch))]
        for i in range(len(batch)):
            exclude[i][len(queue) + i] = True
        return oracle_direction_loss(batch, cats, cands, cand_cats, tau,
                                     exclude=exclude, mode=mode)

    return 0.5 * (side(image_batch, queue_image, queue_image_cats)
                  + side(text_batch, queue_text, queue_text_cats))


def oracle_infonce(queries, positive_index, candidates, tau):
    """Standard single-positive InfoNCE, mean of -log softmax(positive)."""
    losses = []
    for i, query in enumerate(queries):
        scores = [float(np.dot(query, c)) / tau for c in candidates[i]]
        probs = oracle_softmax(scores)
        losses.append(-math.log(probs[positive_index[i]]))
    return sum(losses) / len(losses)


def oracle_binary_ce(match_probs, labels):
    total = 0.0
    for p, y in zip(match_probs, labels):
        total += -math.log(p if y == 1 else 1.0 - p)
    return total / len(labels)


def oracle_two_way_ce(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        probs = oracle_softmax([float(v) for v in row])
        total += -math.log(probs[int(y)])
    return total / len(labels)


def oracle_masked_ce(logits, labels, ignore_index=-100):
    """Mean token cross-entropy at labeled positions, everything else skipped."""
    total, count = 0.0, 0
    flat_logits = np.asarray(logits, dtype=np.float64).reshape(-1, np.shape(logits)[-1])
    flat_labels = np.asarray(labels).reshape(-1)
    for row, y in zip(flat_logits, flat_labels):
        if y == ignore_index:
            continue
        probs = oracle_softmax([float(v) for v in row])
        total += -math.log(probs[int(y)])
        count += 1
    if count == 0:
        return 0.0
    return total / count


def random_unit_vectors(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def oracle_rank(query, gallery_vectors, gallery_ids):
    """Full-sort oracle: pairwise dot products, sort by (-sim, id)."""
    scored = [(-float(np.dot(query, g)), gid) for g, gid in zip(gallery_vectors, gallery_ids)]
    return [gid for _, gid in sorted(scored)]


def oracle_recall_at_k(ranked_lists, relevant_sets, k):
    hits = 0
    for ranked, relevant in zip(ranked_lists, relevant_sets):
        if any(item in relevant for item in ranked[:k]):
            hits += 1
    return 100.0 * hits / len(ranked_lists)
