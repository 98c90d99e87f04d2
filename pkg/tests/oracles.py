"""Independent reference implementations used to validate the fast paths.

Everything here is deliberately naive (explicit loops, BFS labeling, exhaustive
threshold sweeps) and shares no code with the library implementations it
checks.
"""

from __future__ import annotations

import numpy as np


def auroc_pairwise(scores, labels) -> float:
    """(concordant + 0.5 * tied) / (n_pos * n_neg) by explicit pair enumeration."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def average_precision_staircase(scores, labels) -> float:
    """Ranked-list AP: stable sort by descending score, ascending index on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    ap = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            ap += hits / rank
    return ap / labels.sum()


def _bfs_components_4(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """4-connected components of a boolean mask via breadth-first search."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j] or seen[i, j]:
                continue
            queue = [(i, j)]
            seen[i, j] = True
            pixels = []
            while queue:
                r, c = queue.pop()
                pixels.append((r, c))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            components.append(pixels)
    return components


def aupro_exhaustive(score_maps, masks, fpr_cap: float) -> float:
    """Exhaustive-threshold AUPRO over (scores, masks) pairs.

    Every distinct score value becomes a threshold (prediction = score >= t),
    components are 4-connected and pooled across images, FPR pools false
    positives globally. The curve starts at the virtual empty prediction
    (0, 0) and is integrated by trapezoid up to the cap, interpolating the
    straddling segment, then normalized by the cap.
    """
    score_maps = [np.asarray(s, dtype=np.float64) for s in score_maps]
    masks = [np.asarray(m) > 0 for m in masks]
    components = []
    for img_idx, mask in enumerate(masks):
        for pixels in _bfs_components_4(mask):
            components.append((img_idx, pixels))
    assert components, "oracle needs at least one anomalous region"
    n_neg = sum(int((~m).sum()) for m in masks)
    thresholds = sorted({float(v) for s in score_maps for v in s.ravel()}, reverse=True)
    fprs = [0.0]
    pros = [0.0]
    for t in thresholds:
        preds = [s >= t for s in score_maps]
        fp = sum(int((p & ~m).sum()) for p, m in zip(preds, masks))
        overlaps = []
        for img_idx, pixels in components:
            covered = sum(1 for (r, c) in pixels if preds[img_idx][r, c])
            overlaps.append(covered / len(pixels))
        fprs.append(fp / n_neg)
        pros.append(sum(overlaps) / len(overlaps))
    xs, ys = [], []
    for x, y in zip(fprs, pros):
        if x <= fpr_cap:
            xs.append(x)
            ys.append(y)
        else:
            x_prev, y_prev = xs[-1], ys[-1]
            if x_prev < fpr_cap:
                frac = (fpr_cap - x_prev) / (x - x_prev)
                xs.append(fpr_cap)
                ys.append(y_prev + frac * (y - y_prev))
            break
    area = 0.0
    for i in range(1, len(xs)):
        area += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1])
    return area / fpr_cap


def harmonic_aggregate(grid, window_scores) -> np.ndarray:
    """Per-patch map: harmonic mean per size over covering windows, mean across sizes."""
    rows, cols = grid.patch_grid
    scores = np.asarray(window_scores, dtype=np.float64)
    per_patch = np.zeros((rows, cols))
    records = grid.windows
    for i in range(rows):
        for j in range(cols):
            flat = i * cols + j
            size_means = []
            for size in grid.sizes:
                covering = [
                    scores[idx]
                    for idx, rec in enumerate(records)
                    if rec.size == size and flat in rec.members
                ]
                if not covering:
                    continue
                if min(covering) == 0.0:
                    size_means.append(0.0)
                else:
                    size_means.append(len(covering) / sum(1.0 / s for s in covering))
            per_patch[i, j] = sum(size_means) / len(size_means)
    return per_patch


def toy_text_zero_injection(encoder, prompt: str, k: int) -> np.ndarray:
    """Closed-form toy text encoding of ``prompt`` zero-padded with k tokens per layer."""
    words = prompt.lower()
    import re

    tokens = re.findall(r"[a-z0-9]+", words)
    base = np.stack([encoder.token_vector(w).numpy() for w in tokens])
    m, d = base.shape
    h = base
    for layer in range(encoder.config.text_layers):
        h = np.concatenate([h[:m], np.zeros((k, d))], axis=0)
        w_l = getattr(encoder, f"w_text{layer}").numpy()
        u_l = getattr(encoder, f"u_text{layer}").numpy()
        b_l = getattr(encoder, f"b_text{layer}").numpy()
        h = np.tanh(h @ w_l + h.mean(axis=0) @ u_l + b_l)
    pooled = h.mean(axis=0)
    out = (
        pooled @ encoder.w_text_proj.numpy()
        + encoder.b_text_proj.numpy()
        + encoder.kappa_text * encoder.prompt_polarity(prompt) * encoder.anomaly_axis.numpy()
    )
    return out / np.linalg.norm(out)
